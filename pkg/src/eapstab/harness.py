"""Repeated circuit discovery along one perturbation axis, plus the report it folds into.

A suite expands into a list of run plans.  Each plan fixes a seed and the
value of the varied axis; combined with the base discovery config it
resolves to a concrete config and a dataset recipe.  Everything a run needs
is stored in its ``RunRecord``, so any record can be replayed alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .evaluation import EvalReport, evaluate_circuit
from .graph import Circuit
from .interventions import InterventionSpec
from .model import NonFiniteError, ToyTransformer
from .scoring import METHODS, ScoringConfig, score_edges
from .selection import SelectionConfig, select_circuit
from .stats import (
    classical_mds,
    jaccard,
    jaccard_matrix,
    mean_pairwise_jaccard,
    median_circuit,
    summarize,
    union_circuit,
)
from .tasks import (
    TaskDataset,
    TaskGenerator,
    UnsupportedTaskError,
    bootstrap_resample,
    generate_dataset,
    paraphrase_dataset,
)

log = logging.getLogger(__name__)

SUITE_KINDS = ("bootstrap", "meta-dataset", "paraphrase", "hyper-grid", "noise-sweep", "base-method-comparison")
NOISE_AMPLITUDES = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
HYPER_GRID = (
    ("eap", "sum", "patching"),
    ("eap-ig-activations", "sum", "patching"),
    ("eap-ig-inputs", "median", "patching"),
    ("eap-ig-inputs", "sum", "mean"),
    ("eap-ig-inputs", "sum", "mean-positional"),
    ("eap-ig-inputs", "sum", "patching"),
    ("clean-corrupted", "sum", "patching"),
)
REPORT_VERSION = 1
RECORD_FORMAT = "eapstab-run/1"

_METHOD_LABEL = {
    "eap": "EAP",
    "eap-ig-inputs": "EAP-IG-inputs",
    "eap-ig-activations": "EAP-IG-activations",
    "clean-corrupted": "clean-corrupted",
}


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _sha(obj: Any) -> str:
    return hashlib.sha256(_canonical(obj)).hexdigest()


# --------------------------------------------------------------------------
# Configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscoveryConfig:
    """Everything that turns (model, dataset) into one circuit and its evaluation.

    ``eval_intervention`` defaults to the scoring intervention.
    """

    task_id: str = "toy-ioi"
    n_pairs: int = 64
    dataset_seed: int = 0
    template: int = 0
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval_intervention: InterventionSpec | None = None
    restrict_to_answers: bool = False

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")

    @property
    def evaluation_intervention(self) -> InterventionSpec:
        return self.eval_intervention or self.scoring.intervention

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "n_pairs": self.n_pairs,
            "dataset_seed": self.dataset_seed,
            "template": self.template,
            "scoring": self.scoring.to_dict(),
            "selection": self.selection.to_dict(),
            "eval_intervention": None if self.eval_intervention is None else self.eval_intervention.to_dict(),
            "restrict_to_answers": self.restrict_to_answers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoveryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown discovery config field(s): {sorted(unknown)}")
        kw = dict(d)
        if "scoring" in kw:
            kw["scoring"] = ScoringConfig.from_dict({**ScoringConfig().to_dict(), **kw["scoring"]})
        if "selection" in kw:
            kw["selection"] = SelectionConfig.from_dict(kw["selection"])
        if kw.get("eval_intervention") is not None:
            kw["eval_intervention"] = InterventionSpec.from_dict(kw["eval_intervention"])
        return cls(**kw)


@dataclass(frozen=True)
class PerturbationSuite:
    """One perturbation axis and its run count.

    ``seeds`` defaults to ``seed, seed+1, ...`` (``n_runs`` of them).
    Paraphrase suites run one circuit per template; hyper-grid and
    base-method suites run one per row; noise sweeps run every seed at
    every amplitude.
    """

    kind: str
    n_runs: int = 20
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    templates: tuple[int, ...] | None = None
    grid: tuple[tuple[str, str, str], ...] = HYPER_GRID
    amplitudes: tuple[float, ...] = NOISE_AMPLITUDES

    def __post_init__(self):
        if self.kind not in SUITE_KINDS:
            raise ValueError(f"unknown suite kind {self.kind!r}; expected one of {SUITE_KINDS}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if any(not (a > 0 and np.isfinite(a)) for a in self.amplitudes):
            raise ValueError("noise amplitudes must be finite and > 0")
        for row in self.grid:
            ScoringConfig(row[0], aggregation=row[1], intervention=InterventionSpec(row[2]))

    def run_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(int(s) for s in self.seeds)
        return tuple(range(self.seed, self.seed + self.n_runs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [list(r) for r in self.grid]
        d["amplitudes"] = list(self.amplitudes)
        d["seeds"] = None if self.seeds is None else list(self.seeds)
        d["templates"] = None if self.templates is None else list(self.templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSuite":
        kw = dict(d)
        if kw.get("seeds") is not None:
            kw["seeds"] = tuple(int(s) for s in kw["seeds"])
        if kw.get("templates") is not None:
            kw["templates"] = tuple(int(t) for t in kw["templates"])
        if "grid" in kw:
            kw["grid"] = tuple(tuple(r) for r in kw["grid"])
        if "amplitudes" in kw:
            kw["amplitudes"] = tuple(float(a) for a in kw["amplitudes"])
        return cls(**kw)

    def plan(self, gen: TaskGenerator) -> list[tuple[int, dict]]:
        """``(seed, axis value)`` per run, in run order."""
        if self.kind in ("bootstrap", "meta-dataset"):
            return [(s, {"seed": s}) for s in self.run_seeds()]
        if self.kind == "paraphrase":
            if not gen.supports_paraphrase:
                raise UnsupportedTaskError(f"{gen.task_id} has no paraphrase templates")
            temps = self.templates if self.templates is not None else tuple(range(gen.n_templates))
            return [(self.seed, {"template": int(t)}) for t in temps]
        if self.kind == "hyper-grid":
            return [(self.seed, {"method": m, "aggregation": a, "intervention": i}) for m, a, i in self.grid]
        if self.kind == "base-method-comparison":
            return [(self.seed, {"method": m, "aggregation": "sum", "intervention": "patching"}) for m in METHODS]
        return [(s, {"amplitude": float(a), "seed": s}) for a in self.amplitudes for s in self.run_seeds()]


def resolve(kind: str, base: DiscoveryConfig, axis: dict) -> tuple[DiscoveryConfig, dict]:
    """Concrete discovery config and dataset recipe of one run."""
    recipe = {
        "task_id": base.task_id,
        "n_pairs": base.n_pairs,
        "seed": base.dataset_seed,
        "template": base.template,
        "provenance": "base",
        "resample_seed": None,
        "paraphrase_template": None,
    }
    cfg = base
    if kind == "bootstrap":
        recipe.update(provenance="bootstrap", resample_seed=axis["seed"])
    elif kind == "meta-dataset":
        recipe.update(provenance="meta", seed=axis["seed"])
    elif kind == "paraphrase":
        recipe.update(provenance="paraphrase", paraphrase_template=axis["template"])
    elif kind in ("hyper-grid", "base-method-comparison"):
        old = base.scoring
        iv = replace(old.intervention, kind=axis["intervention"])
        cfg = replace(base, scoring=ScoringConfig(axis["method"], old.ig_steps, axis["aggregation"], iv))
    elif kind == "noise-sweep":
        iv = InterventionSpec("noisy-embed", axis["amplitude"], axis["seed"], base.scoring.intervention.all_positions)
        cfg = replace(base, scoring=replace(base.scoring, intervention=iv))
    else:
        raise ValueError(f"unknown suite kind {kind!r}")
    return cfg, recipe


def build_dataset(recipe: dict) -> TaskDataset:
    gen = TaskGenerator(recipe["task_id"], recipe["template"])
    prov = "meta" if recipe["provenance"] == "meta" else "base"
    ds = generate_dataset(gen, recipe["n_pairs"], recipe["seed"], provenance=prov)
    if recipe["resample_seed"] is not None:
        ds = bootstrap_resample(ds, recipe["resample_seed"])
    if recipe["paraphrase_template"] is not None:
        ds = paraphrase_dataset(ds, recipe["paraphrase_template"])
    return ds


def axis_label(kind: str, axis: dict) -> str:
    if kind in ("hyper-grid", "base-method-comparison"):
        return f"{_METHOD_LABEL[axis['method']]}, {axis['aggregation']}, {axis['intervention']}"
    return ";".join(f"{k}={axis[k]}" for k in sorted(axis))


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


class ReplayMismatch(ValueError):
    """A record's stored hash does not match its contents (or the model)."""


@dataclass(frozen=True)
class RunRecord:
    index: int
    suite_kind: str
    axis: dict
    seed: int
    config: DiscoveryConfig
    dataset: dict
    model_fingerprint: str
    base_hash: str
    config_hash: str
    dataset_id: str = ""
    status: str = "ok"  # ok | no-faithful-circuit | non-finite
    edges: tuple[str, ...] | None = None
    n_selected: int | None = None
    report: EvalReport | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def label(self) -> str:
        return axis_label(self.suite_kind, self.axis)

    def circuit(self, dag_hash: str) -> Circuit:
        if self.edges is None:
            raise ValueError(f"run {self.index} has no circuit ({self.status})")
        return Circuit(frozenset(self.edges), dag_hash, {"n": self.n_selected, "run": self.index})

    def to_json(self) -> dict:
        return {
            "format": RECORD_FORMAT,
            "index": self.index,
            "suite_kind": self.suite_kind,
            "axis": self.axis,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "dataset": self.dataset,
            "model_fingerprint": self.model_fingerprint,
            "base_hash": self.base_hash,
            "config_hash": self.config_hash,
            "dataset_id": self.dataset_id,
            "status": self.status,
            "edges": None if self.edges is None else list(self.edges),
            "n_selected": self.n_selected,
            "report": None if self.report is None else self.report.to_dict(),
            "message": self.message,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        if d.get("format") != RECORD_FORMAT:
            raise ValueError(f"not a run record: format={d.get('format')!r}")
        return cls(
            index=int(d["index"]),
            suite_kind=d["suite_kind"],
            axis=dict(d["axis"]),
            seed=int(d["seed"]),
            config=DiscoveryConfig.from_dict(d["config"]),
            dataset=dict(d["dataset"]),
            model_fingerprint=d["model_fingerprint"],
            base_hash=d["base_hash"],
            config_hash=d["config_hash"],
            dataset_id=d["dataset_id"],
            status=d["status"],
            edges=None if d["edges"] is None else tuple(d["edges"]),
            n_selected=d["n_selected"],
            report=None if d["report"] is None else EvalReport(**d["report"]),
            message=d.get("message", ""),
        )


def record_hash(kind: str, axis: dict, seed: int, cfg: DiscoveryConfig, recipe: dict, fingerprint: str) -> str:
    return _sha(
        {"kind": kind, "axis": axis, "seed": seed, "config": cfg.to_dict(), "dataset": recipe, "model": fingerprint}
    )[:16]


def base_hash(kind: str, base: DiscoveryConfig, fingerprint: str) -> str:
    return _sha({"kind": kind, "base": base.to_dict(), "model": fingerprint})[:16]


def _discover(model: ToyTransformer, cfg: DiscoveryConfig, recipe: dict) -> dict:
    ds = build_dataset(recipe)
    out: dict[str, Any] = {"dataset_id": ds.ident()}
    try:
        table = score_edges(model, ds, cfg.scoring)
    except NonFiniteError as exc:
        return {**out, "status": "non-finite", "message": str(exc)}
    found = select_circuit(table, model.dag, cfg.selection)
    if not found:
        return {**out, "status": "no-faithful-circuit", "message": f"no connected top-n circuit up to n={found.n_max}"}
    report = evaluate_circuit(model, found, ds, cfg.evaluation_intervention, cfg.restrict_to_answers)
    ordered = tuple(e for e in model.dag.edges if e in found.edges)
    return {**out, "status": "ok", "edges": ordered, "n_selected": found.meta["n"], "report": report}


def execute_run(
    model: ToyTransformer, kind: str, base: DiscoveryConfig, index: int, seed: int, axis: dict
) -> RunRecord:
    cfg, recipe = resolve(kind, base, axis)
    fp = model.fingerprint()
    res = _discover(model, cfg, recipe)
    return RunRecord(
        index=index,
        suite_kind=kind,
        axis=axis,
        seed=seed,
        config=cfg,
        dataset=recipe,
        model_fingerprint=fp,
        base_hash=base_hash(kind, base, fp),
        config_hash=record_hash(kind, axis, seed, cfg, recipe, fp),
        **res,
    )


def replay_run(record: RunRecord, model: ToyTransformer) -> RunRecord:
    """Re-execute a stored record; rejects records whose hash no longer matches."""
    fp = model.fingerprint()
    if fp != record.model_fingerprint:
        raise ReplayMismatch(f"record {record.index} was produced by model {record.model_fingerprint}, not {fp}")
    expect = record_hash(record.suite_kind, record.axis, record.seed, record.config, record.dataset, fp)
    if expect != record.config_hash:
        raise ReplayMismatch(f"record {record.index}: config hash {record.config_hash} does not match contents ({expect})")
    res = _discover(model, record.config, record.dataset)
    return replace(record, **{"edges": None, "n_selected": None, "report": None, "message": "", **res})


_WORKER_MODEL: ToyTransformer | None = None


def _init_worker(model: ToyTransformer) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _worker(args) -> RunRecord:
    return execute_run(_WORKER_MODEL, *args)


def run_suite(
    model: ToyTransformer,
    generator: TaskGenerator,
    suite: PerturbationSuite,
    base_config: DiscoveryConfig = DiscoveryConfig(),
    jobs: int = 1,
) -> list[RunRecord]:
    """Execute every run of ``suite``; records come back sorted by run index."""
    base = replace(base_config, task_id=generator.task_id, template=generator.template)
    jobs_list = [(suite.kind, base, i, seed, axis) for i, (seed, axis) in enumerate(suite.plan(generator))]
    if jobs <= 1 or len(jobs_list) <= 1:
        records = [execute_run(model, *a) for a in jobs_list]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
            records = list(pool.map(_worker, jobs_list))
    records.sort(key=lambda r: r.index)
    hashes = {r.base_hash for r in records}
    if len(hashes) > 1:
        raise RuntimeError("records of one suite disagree outside the varied axis")
    return records


# --------------------------------------------------------------------------
# Report directory
# --------------------------------------------------------------------------


def _csv_text(header: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _group_key(rec: RunRecord) -> str:
    if rec.suite_kind == "noise-sweep":
        return f"amplitude={rec.axis['amplitude']!r}"
    return "all"


@dataclass
class StabilityReport:
    """In-memory view of a suite's report; ``write`` lays it out on disk."""

    suite: PerturbationSuite
    records: list[RunRecord]
    files: dict[str, str] = field(default_factory=dict)
    empty_structure: bool = False

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.records)


def _summary_rows(recs: list[RunRecord], group: str) -> list[list[str]]:
    rows = []
    ok = [r for r in recs if r.ok]
    if ok:
        for name, vals in (
            ("circuit_error", [r.report.circuit_error for r in ok]),
            ("kl_divergence", [r.report.kl_divergence for r in ok]),
            ("size", [float(r.report.size) for r in ok]),
        ):
            s = summarize(vals)
            rows.append([group, name, *s.to_row()])
    if len(ok) >= 2:
        jm = jaccard_matrix([r.edges for r in ok])
        iu = np.triu_indices(len(ok), k=1)
        s = summarize(jm[iu].tolist())
        rows.append([group, "pairwise_jaccard", *s.to_row()])
    rows.append([group, "failure_rate", repr(sum(not r.ok for r in recs) / len(recs)), "", "", str(len(recs))])
    return rows


def build_report(records: Sequence[RunRecord], suite: PerturbationSuite, dag_hash: str) -> StabilityReport:
    """Fold sorted records into report files (name -> text).  No I/O."""
    recs = sorted(records, key=lambda r: r.index)
    if not recs:
        raise ValueError("no records to report")
    rep = StabilityReport(suite, recs)
    ok = [r for r in recs if r.ok]
    files = rep.files
    for r in recs:
        files[f"runs/run_{r.index:03d}.json"] = json.dumps(r.to_json(), indent=1, sort_keys=True) + "\n"

    files["records.csv"] = _csv_text(
        f"eapstab-records v{REPORT_VERSION}",
        ["run", "label", "seed", "dataset_id", "config_hash", "status", "n_selected", "size", "circuit_error", "kl_divergence"],
        [
            [
                r.index, r.label, r.seed, r.dataset_id, r.config_hash, r.status, _fmt(r.n_selected),
                _fmt(r.report.size if r.report else None),
                _fmt(r.report.circuit_error if r.report else None),
                _fmt(r.report.kl_divergence if r.report else None),
            ]
            for r in recs
        ],
    )

    groups: dict[str, list[RunRecord]] = {}
    for r in recs:
        groups.setdefault(_group_key(r), []).append(r)
    summary = _summary_rows(recs, "all")
    if len(groups) > 1:
        for g, members in groups.items():
            summary += _summary_rows(members, g)
    files["summary.csv"] = _csv_text(
        f"eapstab-summary v{REPORT_VERSION} variance=population cv=sigma/mu",
        ["group", "metric", "mean", "variance", "cv", "n"],
        summary,
    )

    rep.empty_structure = not ok
    if ok:
        circuits = [r.circuit(dag_hash) for r in ok]
        med, uni = median_circuit(circuits), union_circuit(circuits)
        for name, c in (("median_circuit.json", med), ("union_circuit.json", uni)):
            body = {"format": "eapstab-circuit/1", "dag_hash": dag_hash, "edges": sorted(c.edges), "meta": c.meta}
            files[name] = json.dumps(body, indent=1, sort_keys=True) + "\n"
        ids = [f"run_{r.index:03d}" for r in ok]
        if len(ok) >= 2:
            jm = jaccard_matrix(circuits)
            files["jaccard.csv"] = _csv_text(
                f"eapstab-jaccard v{REPORT_VERSION} mean_pairwise={mean_pairwise_jaccard(jm)!r}",
                ["run", *ids],
                [[ids[i], *[repr(float(v)) for v in jm[i]]] for i in range(len(ok))],
            )
            emb = classical_mds(1.0 - jm)
            files["mds.csv"] = _csv_text(
                f"eapstab-mds v{REPORT_VERSION} method=classical distance=1-jaccard stress={emb.stress!r}",
                ["run", "x", "y"],
                [[ids[i], repr(float(emb.coords[i, 0])), repr(float(emb.coords[i, 1]))] for i in range(len(ok))],
            )
        if suite.kind in ("hyper-grid", "base-method-comparison"):
            rows = []
            for r in recs:
                if r.ok:
                    jm_med = jaccard(r.edges, med.edges) if (r.edges or med.edges) else 1.0
                    rows.append([r.label, repr(r.report.circuit_error), repr(r.report.kl_divergence), r.report.size,
                                 repr(jm_med), int(frozenset(r.edges) == med.edges)])
                else:
                    rows.append([r.label, "", "", "", "", 0])
            task = recs[0].config.task_id
            files["grid_table.csv"] = _csv_text(
                f"eapstab-grid v{REPORT_VERSION} task={task} median=strict-majority n_rows={len(recs)}",
                ["parameters", "circuit_error", "kl_divergence", "size", "jaccard_to_median", "is_median"],
                rows,
            )
    return rep


def write_report(rep: StabilityReport, out: str | Path, extra: dict | None = None) -> str:
    """Write report files plus ``manifest.json``; returns the directory hash."""
    out = Path(out)
    for name, text in rep.files.items():
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    manifest = {
        "format": f"eapstab-report/{REPORT_VERSION}",
        "suite": rep.suite.to_dict(),
        "n_runs": len(rep.records),
        "n_failed": rep.n_failed,
        "empty_structure": rep.empty_structure,
        "model_fingerprint": rep.records[0].model_fingerprint,
        "base_hash": rep.records[0].base_hash,
        "files": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(rep.files.items())},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory_hash(out)


def directory_hash(path: str | Path) -> str:
    """sha256 over (relative path, content) of every file, in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def load_records(report_dir: str | Path) -> list[RunRecord]:
    runs = sorted((Path(report_dir) / "runs").glob("run_*.json"))
    return [RunRecord.from_json(json.loads(p.read_text())) for p in runs]


def load_manifest(report_dir: str | Path) -> dict:
    return json.loads((Path(report_dir) / "manifest.json").read_text())
