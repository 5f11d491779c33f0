"""Command-line entry point.

    eapstab train      --task toy-ioi --out DIR
    eapstab discover   --task toy-ioi --out DIR [--method ...] [--all-edges]
    eapstab stability  --task toy-ioi --suite bootstrap --runs 20 --out DIR
    eapstab replay     REPORT_DIR --out DIR
    eapstab report     REPORT_DIR [REPORT_DIR ...] --out DIR

Every command takes ``--config FILE.json``; flags given on the command line
override the file.  Exit status: 0 success, 2 no faithful circuit, 1 error.
All files are written below ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .evaluation import EVAL_COLUMNS, EVAL_CSV_VERSION, evaluate_circuit
from .graph import Circuit, full_circuit, save_circuit
from .harness import (
    SUITE_KINDS,
    DiscoveryConfig,
    PerturbationSuite,
    build_report,
    directory_hash,
    load_manifest,
    load_records,
    replay_run,
    run_suite,
    write_report,
)
from .interventions import KINDS, InterventionSpec
from .model import ToyTransformer, load_model, save_model
from .scoring import AGGREGATIONS, METHODS, score_edges
from .selection import select_circuit
from .tasks import TASKS, TaskGenerator, generate_dataset
from .train import TrainSpec, task_accuracy, train_task_model

log = logging.getLogger("eapstab")

EXIT_OK, EXIT_ERROR, EXIT_NO_CIRCUIT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def shipped_checkpoint(task_id: str) -> Path:
    return Path(str(resources.files("eapstab") / "data" / f"{task_id}.ckpt"))


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _pick(args_value, cfg: dict, key: str, default):
    if args_value is not None:
        return args_value
    return cfg.get(key, default)


def _load_model(args, cfg: dict, task: str) -> tuple[ToyTransformer, str]:
    ckpt = _pick(args.checkpoint, cfg, "checkpoint", None)
    path = Path(ckpt) if ckpt else shipped_checkpoint(task)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_model(path), str(path)


def _discovery_config(args, cfg: dict, task: str) -> DiscoveryConfig:
    raw = json.loads(json.dumps(cfg.get("discovery", {})))
    raw["task_id"] = task
    sc = raw.setdefault("scoring", {})
    if getattr(args, "method", None):
        sc["method"] = args.method
    if getattr(args, "aggregation", None):
        sc["aggregation"] = args.aggregation
    if getattr(args, "intervention", None):
        sc.setdefault("intervention", {})["kind"] = args.intervention
    if "intervention" in sc:
        sc["intervention"] = {**InterventionSpec().to_dict(), **sc["intervention"]}
    if getattr(args, "seed", None) is not None:
        raw["dataset_seed"] = args.seed
    try:
        return DiscoveryConfig.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid discovery config: {exc}") from None


def _task(args, cfg: dict) -> str:
    task = _pick(args.task, cfg, "task", "toy-ioi")
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    task = _task(args, cfg)
    raw = {k: v for k, v in cfg.items() if k not in ("task",)}
    try:
        spec = TrainSpec.from_dict({**raw, "task_id": task})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.steps is not None:
        spec = replace(spec, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_task_model(spec)
    digest = save_model(result.model, out / f"{task}.ckpt")
    with open(out / "train_log.csv", "w", newline="") as fh:
        fh.write("# eapstab-train-log v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "eval_loss", "eval_metric"])
        for i, (lo, me) in enumerate(zip(result.eval_losses, result.metric_trace)):
            w.writerow([(i + 1) * result.window, repr(lo), repr(me)])
    info = {
        "spec": spec.to_dict(),
        "checkpoint_sha256": digest,
        "fingerprint": result.model.fingerprint(),
        "train_accuracy": task_accuracy(result.model, spec.training_data()),
        "fraction_nonincreasing": result.fraction_nonincreasing(),
    }
    (out / "train_info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(f"checkpoint {out / f'{task}.ckpt'} sha256={digest}")
    return EXIT_OK


def _eval_row(run_id: str, report) -> list[str]:
    return [run_id, report.dataset_id, str(report.size), repr(report.circuit_error), repr(report.kl_divergence)]


def cmd_discover(args) -> int:
    cfg = _read_config(args.config)
    task = _task(args, cfg)
    model, _ = _load_model(args, cfg, task)
    dc = _discovery_config(args, cfg, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(TaskGenerator(task, dc.template), dc.n_pairs, dc.dataset_seed)
    iv = dc.evaluation_intervention
    rows = []
    empty = Circuit(frozenset(), model.dag.config_hash)
    rows.append(_eval_row("empty", evaluate_circuit(model, empty, ds, iv, dc.restrict_to_answers)))
    (out / "discover_config.json").write_text(json.dumps(dc.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.all_edges:
        circuit = full_circuit(model.dag)
        status = EXIT_OK
    else:
        table = score_edges(model, ds, dc.scoring)
        table.to_csv(out / "scores.csv")
        found = select_circuit(table, model.dag, dc.selection)
        if not found:
            rows.append(["circuit", ds.ident(), "", "", ""])
            _write_eval(out, rows, status="no-faithful-circuit")
            print(f"no faithful circuit up to n={found.n_max}; tried {list(found.n_tried)}", file=sys.stderr)
            return EXIT_NO_CIRCUIT
        circuit = found
        status = EXIT_OK
    save_circuit(circuit, model.dag, out / "circuit.json")
    rep = evaluate_circuit(model, circuit, ds, iv, dc.restrict_to_answers)
    rows.append(_eval_row("circuit", rep))
    _write_eval(out, rows, status="ok")
    print(f"circuit size={rep.size} circuit_error={rep.circuit_error:.4f} kl={rep.kl_divergence:.6g}")
    return status


def _write_eval(out: Path, rows, status: str) -> None:
    with open(out / "eval.csv", "w", newline="") as fh:
        fh.write(f"# eapstab-eval v{EVAL_CSV_VERSION} status={status}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerows(rows)


def _suite(args, cfg: dict) -> PerturbationSuite:
    raw = dict(cfg.get("suite", {}))
    if args.suite:
        raw["kind"] = args.suite
    raw.setdefault("kind", "bootstrap")
    if args.runs is not None:
        raw["n_runs"] = args.runs
    if args.noise_amplitudes:
        raw["amplitudes"] = [float(a) for a in args.noise_amplitudes.split(",")]
    if args.suite_seed is not None:
        raw["seed"] = args.suite_seed
    try:
        return PerturbationSuite.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid suite config: {exc}") from None


def cmd_stability(args) -> int:
    cfg = _read_config(args.config)
    task = _task(args, cfg)
    model, _ = _load_model(args, cfg, task)
    dc = _discovery_config(args, cfg, task)
    suite = _suite(args, cfg)
    jobs = int(_pick(args.jobs, cfg, "jobs", 1))
    records = run_suite(model, TaskGenerator(task, dc.template), suite, dc, jobs=jobs)
    rep = build_report(records, suite, model.dag.config_hash)
    h = write_report(rep, args.out, {"discovery": dc.to_dict(), "dag_hash": model.dag.config_hash})
    print(f"{len(records)} runs, {rep.n_failed} failed; report {args.out} hash={h}")
    return EXIT_OK


def cmd_replay(args) -> int:
    src = Path(args.report)
    manifest = load_manifest(src)
    records = load_records(src)
    if not records:
        raise UsageError(f"{src} holds no run records")
    cfg = _read_config(args.config)
    task = records[0].config.task_id
    model, _ = _load_model(args, cfg, task)
    replayed = [replay_run(r, model) for r in records]
    suite = PerturbationSuite.from_dict(manifest["suite"])
    rep = build_report(replayed, suite, model.dag.config_hash)
    extra = {k: manifest[k] for k in ("discovery", "dag_hash") if k in manifest}
    h_new = write_report(rep, args.out, extra)
    h_old = directory_hash(src)
    same = h_new == h_old
    print(f"original {h_old}\nreplayed {h_new}\n{'identical' if same else 'DIFFERENT'}")
    return EXIT_OK if same else EXIT_ERROR


def _read_grid(path: Path) -> tuple[str, list[dict]]:
    lines = path.read_text().splitlines()
    header = lines[0]
    task = header.split("task=")[1].split()[0]
    return task, list(csv.DictReader(lines[1:]))


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grids, summaries = {}, []
    for d in args.reports:
        d = Path(d)
        m = load_manifest(d)
        if (d / "grid_table.csv").is_file():
            task, rows = _read_grid(d / "grid_table.csv")
            grids[task] = rows
        for row in csv.DictReader(line for line in (d / "summary.csv").read_text().splitlines() if not line.startswith("#")):
            summaries.append([m["suite"]["kind"], m.get("discovery", {}).get("task_id", ""), *row.values()])
    with open(out / "summary_all.csv", "w", newline="") as fh:
        fh.write("# eapstab-summary-all v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "task", "group", "metric", "mean", "variance", "cv", "n"])
        w.writerows(summaries)
    if grids:
        tasks = sorted(grids)
        params = [r["parameters"] for r in grids[tasks[0]]]
        cols = ["parameters"]
        for t in tasks:
            cols += [f"{t}:circuit_error", f"{t}:kl_divergence", f"{t}:size", f"{t}:jaccard_to_median"]
        with open(out / "grid_wide.csv", "w", newline="") as fh:
            fh.write("# eapstab-grid-wide v1 median=strict-majority\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, p in enumerate(params):
                row = [p]
                for t in tasks:
                    r = grids[t][i] if i < len(grids[t]) else {}
                    row += [r.get("circuit_error", ""), r.get("kl_divergence", ""), r.get("size", ""), r.get("jaccard_to_median", "")]
                w.writerow(row)
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eapstab", description="Edge-attribution circuit discovery and its stability on toy transformers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        if model:
            sp.add_argument("--task", choices=TASKS)
            sp.add_argument("--checkpoint", help="model checkpoint (default: shipped model for the task)")

    def scoring_flags(sp):
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--aggregation", choices=AGGREGATIONS)
        sp.add_argument("--intervention", choices=KINDS)
        sp.add_argument("--seed", type=int, help="dataset seed")

    sp = sub.add_parser("train", help="train a toy model for a task")
    sp.add_argument("--config", help="JSON training config; flags override it")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("discover", help="discover and evaluate one circuit")
    common(sp)
    scoring_flags(sp)
    sp.add_argument("--all-edges", action="store_true", help="skip discovery and evaluate the full graph")
    sp.set_defaults(func=cmd_discover)

    sp = sub.add_parser("stability", help="run a perturbation suite and write its report")
    common(sp)
    scoring_flags(sp)
    sp.add_argument("--suite", choices=SUITE_KINDS)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--suite-seed", type=int, help="first run seed")
    sp.add_argument("--noise-amplitudes", help="comma-separated amplitudes for a noise sweep")
    sp.add_argument("--jobs", type=int, help="worker processes")
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("replay", help="re-execute a report's runs and compare hashes")
    sp.add_argument("report")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("report", help="merge report directories into cross-task tables")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"eapstab {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"eapstab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
