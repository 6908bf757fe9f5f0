"""Command line entry point: ``select``, ``study`` and ``inspect``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .artifacts import (
    CDF_HEADER,
    RUN_HEADER,
    SUMMARY_HEADER,
    TRANSFER_HEADER,
    cdf_rows,
    read_artifact,
    run_rows,
    summary_rows,
    transfer_rows,
    write_csv,
    write_report,
)
from .config import RunConfig, apply_overrides, load_config
from .criteria import CV, CV_ALPHA, compute_criterion
from .errors import BackendError, BudgetExhausted, ConfigError, DatasetError, IncompleteTableError, RenderError
from .harness import StudyTemplate, Task, alpha_rule, prepare_split, run_study, sweep, criterion_estimates
from .reports import gain_cdf
from .scoring import HTTPBackend, RecordReplayBackend, ScoringBackend, SyntheticBackend, SyntheticTaskSpec, make_synthetic_task
from .selection import select_argmin, select_conservative
from .table import FORMAT as TABLE_FORMAT, build_score_table, save_table, subsample_table, table_from_json
from .task import load_candidates, load_dataset, load_label_space

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_BUDGET = 4


# ---------------------------------------------------------------------------
# wiring


def synthetic_spec(section: dict, candidate_ids: Sequence[str] | None = None, label_count: int | None = None) -> SyntheticTaskSpec:
    syn = dict(section["synthetic"])
    syn["qualities"] = tuple(float(q) for q in syn["qualities"])
    if candidate_ids is not None:
        if len(candidate_ids) != len(syn["qualities"]):
            raise ConfigError(f"backend {section['name']}: synthetic.qualities needs one entry per candidate ({len(candidate_ids)})")
        syn["candidate_ids"] = tuple(candidate_ids)
    if label_count is not None:
        syn["label_count"] = label_count
    try:
        return SyntheticTaskSpec(**syn)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backend {section['name']}.synthetic: {exc}") from exc


def build_task(config: RunConfig) -> Task:
    t = config.task
    if t.get("dataset"):
        space = load_label_space(t["labels"]) if t.get("labels") else None
        dataset = load_dataset(t["dataset"], space)
        candidates = load_candidates(t["candidates"], dataset)
    else:
        dataset, candidates = make_synthetic_task(synthetic_spec(config.backends[0]))
        if t.get("candidates"):
            candidates = load_candidates(t["candidates"], dataset)
    return Task(t["name"], dataset, tuple(candidates))


def build_backend(section: dict, task: Task, epsilon: float) -> ScoringBackend:
    upstream: ScoringBackend | None = None
    if section["kind"] == "synthetic":
        space = task.dataset.label_space
        count = len(space.ids) if space.kind == "closed-class" else None
        spec = synthetic_spec(section, task.candidate_ids, count)
        upstream = SyntheticBackend(spec, task.dataset, budget=section["budget"], epsilon=epsilon)
    elif section["kind"] == "http":
        upstream = HTTPBackend(
            section["endpoint"],
            section["model"],
            api_key_env=section["api_key_env"],
            concurrency=section["concurrency"],
            budget=section["budget"],
            max_retries=section["max_retries"],
            timeout=section["timeout"],
            offset_unit=section["offset_unit"],
            length_normalize=section["length_normalize"],
        )
    if section["store"] is None:
        return upstream
    mode = "replay" if section["kind"] == "replay" else section["store_mode"]
    return RecordReplayBackend(
        section["store"],
        upstream,
        mode=mode,
        backend_id=None if upstream else "replay",
        model_id=None if upstream else (section["model"] or section["name"]),
    )


def _passes(backends: dict[str, ScoringBackend]) -> dict:
    return {name: b.counter.snapshot() for name, b in sorted(backends.items())}


def _write_passes(root: Path, backends: dict[str, ScoringBackend], status: str, reason: str | None = None) -> None:
    root.mkdir(parents=True, exist_ok=True)
    body = {"status": status, "reason": reason, "passes": _passes(backends)}
    (root / "passes.json").write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _echo_config(config: RunConfig) -> None:
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "config.effective.yaml").write_text(config.dump(), encoding="utf-8")


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


# ---------------------------------------------------------------------------
# select


def cmd_select(config: RunConfig) -> int:
    task = build_task(config)
    protocol = config.protocol
    backends = {b["name"]: build_backend(b, task, protocol.epsilon) for b in config.backends}
    root = config.out / _safe(task.name)
    _echo_config(config)
    status = EXIT_OK
    try:
        for model, backend in backends.items():
            base = root if len(backends) == 1 else root / _safe(model)
            for seed in config.seeds:
                _select_one(task, backend, protocol, seed, base / f"seed-{seed}")
    except BudgetExhausted as exc:
        _write_passes(root, backends, "partial", str(exc))
        print(f"budget exhausted: {exc}; partial artifacts written under {root}", file=sys.stderr)
        status = EXIT_BUDGET
    else:
        _write_passes(root, backends, "complete")
    return status


def _select_one(task: Task, backend: ScoringBackend, protocol, seed: int, out: Path) -> None:
    train, _, folds, plan = prepare_split(task, protocol, seed)
    tables = {}
    for cand in task.candidates:
        try:
            table = build_score_table(
                cand, train, plan, backend, protocol.mode, protocol.wants_joint,
                label_space=task.dataset.label_space, folds=folds, epsilon=protocol.epsilon,
            )
        except BudgetExhausted as exc:
            if exc.partial is not None:
                save_table(exc.partial, out / "tables" / f"{_safe(cand.id)}.partial.json")
            raise
        save_table(table, out / "tables" / f"{_safe(cand.id)}.json")
        if protocol.passes is not None:
            table = subsample_table(table, protocol.passes, seed)
        tables[cand.id] = table

    meta = {"task": task.name, "seed": seed, "train_ids": list(train.ids), "orderings": plan.orderings.shape[0], "plan": plan.mode}
    for name in dict.fromkeys(CV if c == CV_ALPHA else c for c in protocol.criteria):
        if name == CV and CV not in protocol.criteria:
            continue
        report = select_argmin(criterion_estimates(tables, name, protocol))
        write_report(out / f"selection-{name}.json", "selection", {**meta, **report.to_json()})
    if CV_ALPHA in protocol.criteria:
        estimates = criterion_estimates(tables, CV, protocol)
        for alpha in protocol.alphas:
            report = select_conservative(estimates, alpha)
            write_report(out / f"selection-{_safe(alpha_rule(alpha))}.json", "selection", {**meta, **report.to_json()})


# ---------------------------------------------------------------------------
# study


def _value_dir(axis: str | None, value) -> str:
    return "base" if axis is None else _safe(f"{axis}-{value:g}" if isinstance(value, float) else f"{axis}-{value}")


def cmd_study(config: RunConfig) -> int:
    task = build_task(config)
    protocol = config.protocol
    backends = {b["name"]: build_backend(b, task, protocol.epsilon) for b in config.backends}
    root = config.out / _safe(task.name)
    _echo_config(config)
    template = StudyTemplate(task, backends, protocol, tuple(config.seeds))
    try:
        if config.sweep:
            results = sweep(config.sweep["axis"], config.sweep["values"], template)
        else:
            results = [run_study(template)]
    except BudgetExhausted as exc:
        _write_passes(root, backends, "partial", str(exc))
        print(f"budget exhausted: {exc}; partial artifacts written under {root}", file=sys.stderr)
        return EXIT_BUDGET

    all_runs, summary, cdf, transfer = [], [], [], []
    for res in results:
        vdir = root / _value_dir(res.axis, res.value)
        for model, records in sorted(res.records.items()):
            for rec in records:
                write_report(vdir / _safe(model) / f"seed-{rec.seed}" / "run.json", "run", rec.to_json())
            all_runs.extend(records)
        for model, report in sorted(res.reports.items()):
            write_report(vdir / f"report-{_safe(model)}.json", "reliability", report.to_json())
            summary.extend(summary_rows(report))
            cdf.extend(cdf_rows(report))
        if len(res.records) > 1:
            pooled = [r for recs in res.records.values() for r in recs]
            for rule in protocol.rules():
                gains = [r.gains(rule)[0] for r in sorted(pooled, key=lambda r: r.sort_key()) if r.valid(rule)]
                if gains:
                    cdf.extend([task.name, "pooled", res.axis, res.value, rule, g, p] for g, p in gain_cdf(gains))
        transfer.extend(transfer_rows(task.name, res.axis, res.value, res.transfer))
    write_csv(root / "runs.csv", RUN_HEADER, run_rows(all_runs))
    write_csv(root / "summary.csv", SUMMARY_HEADER, summary)
    write_csv(root / "cdf.csv", CDF_HEADER, cdf)
    write_csv(root / "transfer.csv", TRANSFER_HEADER, transfer)
    _write_passes(root, backends, "complete")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(path: str, out=None) -> int:
    out = out or sys.stdout
    doc = read_artifact(path)
    if doc.get("format") == TABLE_FORMAT:
        table = table_from_json(doc)
        print(f"score table: candidate {table.candidate_id}", file=out)
        print(f"  dimensions: {table.n_orderings}x{table.n} (orderings x positions)", file=out)
        print(f"  mode: {table.mode}  passes: {table.passes}  complete: {table.complete}", file=out)
        print(f"  backend: {json.dumps(table.backend, sort_keys=True)}", file=out)
        for name in ("cv", "mdl", "bayes_cv"):
            try:
                est = compute_criterion(name, table)
            except (IncompleteTableError, ValueError) as exc:
                print(f"  {name}: unavailable ({exc})", file=out)
                continue
            var = "n/a" if est.variance is None else f"{est.variance:.6g}"
            print(f"  {name}: mean {est.mean:.6g}  variance {var}  samples {est.count}", file=out)
        return EXIT_OK
    kind = doc.get("kind")
    if kind == "selection":
        print(f"selection report: rule {doc['rule']}  criterion {doc['criterion']}  chosen {doc['chosen']}", file=out)
        for cid, c in sorted(doc["candidates"].items()):
            var = "n/a" if c["variance"] is None else f"{c['variance']:.6g}"
            print(f"  {cid}: mean {c['mean']:.6g}  variance {var}  score {c['score']:.6g}", file=out)
        for cid in doc["trace"]["excluded"]:
            print(f"  {cid}: excluded (incomplete table)", file=out)
        return EXIT_OK
    if kind == "reliability":
        print(f"reliability report: task {doc['task']}  model {doc['model']}  runs {doc['runs']}", file=out)
        for rule, s in sorted(doc["rules"].items()):
            ng = s["normalized_gain"]
            rate = s["best_selection_rate"]
            ng_txt = "n/a" if ng is None else f"{ng['mean']:.2f} +/- {ng['stderr']:.2f}"
            rate_txt = "n/a" if rate is None else f"{rate['rate']:.3f}"
            print(f"  {rule}: normalized gain {ng_txt}  best-rate {rate_txt}  invalid {s['invalid_runs']}", file=out)
        return EXIT_OK
    if kind == "run":
        print(f"run: task {doc['task']}  model {doc['model']}  seed {doc['seed']}", file=out)
        for cid, acc in sorted(doc["accuracies"].items()):
            print(f"  {cid}: accuracy {acc:.4f}", file=out)
        for rule, cid in sorted(doc["chosen"].items()):
            print(f"  rule {rule}: {cid}", file=out)
        return EXIT_OK
    print(json.dumps(doc, sort_keys=True, indent=1), file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-select", description="Few-shot prompt selection and reliability studies.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in (("select", "score candidates and pick one per criterion"), ("study", "run a reliability study")):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--seed", type=int, help="run a single seed instead of study.seeds")
        p.add_argument("--budget", type=int, help="maximum upstream forward passes")
        store = p.add_mutually_exclusive_group()
        store.add_argument("--replay", metavar="PATH", help="answer every request from this replay store")
        store.add_argument("--record", metavar="PATH", help="record upstream responses into this store")
        p.add_argument("--out", help="output directory")
    p = sub.add_parser("inspect", help="summarize a table or report artifact")
    p.add_argument("artifact")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "inspect":
            return cmd_inspect(args.artifact)
        config = load_config(args.config)
        config = apply_overrides(config, seed=args.seed, budget=args.budget, replay=args.replay, record=args.record, out=args.out)
        return cmd_select(config) if args.verb == "select" else cmd_study(config)
    except (ConfigError, DatasetError, RenderError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
