"""Seeded toy tasks with clean/corrupted prompt pairs.

Three closed-vocabulary tasks mirror the causal structure of the usual
circuit-discovery benchmarks:

``toy-ioi``
    ``... N1 and N2 ... S gave ... to`` where ``S`` repeats one of the two
    names; the answer is the other one.  Corruption replaces ``S`` with a
    third name.  Metric: logit difference answer minus ``S``.
``toy-greater-than``
    ``the NOUN lasted from the year C YY to the year C``; answers are the
    year suffixes above ``YY``.  Corruption sets ``YY`` to the smallest
    suffix (``01``).  Metric: probability mass on answers minus foils.
``toy-sva``
    ``the ADJ ADJ NOUN``; the next token should be a verb agreeing in
    number with the noun.  Corruption flips the noun's number.  Metric:
    mean logit of agreeing verb forms minus the non-agreeing forms.

Each task vocabulary has fewer than 64 tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TASKS = ("toy-ioi", "toy-greater-than", "toy-sva")
PROVENANCES = ("base", "bootstrap", "meta", "paraphrase")
DATASET_FORMAT = "eapstab-dataset/1"


class UnsupportedTaskError(ValueError):
    pass


# --------------------------------------------------------------------------
# Vocabularies and templates
# --------------------------------------------------------------------------

_NAMES = ["ANN", "BOB", "CAT", "DAN", "EVE", "FAY", "GUS", "HAL",
          "IVY", "JON", "KIM", "LEO", "MAY", "NED", "OLA", "PAM"]
_IOI_WORDS = ["THEN", "AND", "WENT", "TO", "GARDEN", "GAVE", "DRINK", "WHEN", "GOT",
              "LUNCH", "HANDED", "BOOK", "HAD", "FUN", "AT", "STORE", "AFTER", "RING"]
_IOI_TEMPLATES = [
    ["THEN", "N1", "AND", "N2", "WENT", "TO", "GARDEN", "S", "GAVE", "DRINK", "TO"],
    ["WHEN", "N1", "AND", "N2", "GOT", "LUNCH", "S", "HANDED", "BOOK", "TO"],
    ["N1", "AND", "N2", "HAD", "FUN", "AT", "STORE", "AFTER", "S", "GAVE", "RING", "TO"],
]

_GT_NOUNS = ["WAR", "PLAN", "TRIP", "REIGN", "STRIKE", "SIEGE"]
_GT_CENTURIES = ["C11", "C12", "C13", "C14"]
_GT_WORDS = ["THE", "LASTED", "FROM", "YEAR", "TO", "WENT", "ON", "SPANNED"]
_GT_MAX_YEAR = 39  # suffixes 01..39
_GT_TEMPLATES = [
    ["THE", "NOUN", "LASTED", "FROM", "THE", "YEAR", "C", "YY", "TO", "THE", "YEAR", "C"],
    ["THE", "NOUN", "WENT", "ON", "FROM", "C", "YY", "TO", "C"],
    ["THE", "NOUN", "SPANNED", "C", "YY", "TO", "C"],
]

_SVA_ADJ = ["OLD", "TALL", "KIND", "SHY", "LOUD", "CALM"]
_SVA_NOUNS = ["DOG", "CAR", "GIRL", "BOY", "TREE", "CUP", "BIRD", "LAMP", "SHIP", "KEY"]
_SVA_VERBS = [("IS", "ARE"), ("WAS", "WERE"), ("HAS", "HAVE"), ("RUNS", "RUN")]
_SVA_TEMPLATES = [["THE", "A1", "A2", "NOUN"]]


def _build_vocab(words: Sequence[str]) -> dict[str, int]:
    vocab = {"BOS": 0}
    for w in words:
        if w not in vocab:
            vocab[w] = len(vocab)
    return vocab


_VOCABS = {
    "toy-ioi": _build_vocab(_NAMES + _IOI_WORDS),
    "toy-greater-than": _build_vocab(
        _GT_NOUNS + _GT_CENTURIES + _GT_WORDS + [f"Y{y:02d}" for y in range(1, _GT_MAX_YEAR + 1)]
    ),
    "toy-sva": _build_vocab(
        ["THE"] + _SVA_ADJ + [n + "_SG" for n in _SVA_NOUNS] + [n + "_PL" for n in _SVA_NOUNS]
        + [v for pair in _SVA_VERBS for v in pair]
    ),
}
_TEMPLATES = {"toy-ioi": _IOI_TEMPLATES, "toy-greater-than": _GT_TEMPLATES, "toy-sva": _SVA_TEMPLATES}
METRIC_KIND = {"toy-ioi": "logit_diff", "toy-greater-than": "prob_diff", "toy-sva": "logit_diff"}


def vocab(task_id: str) -> dict[str, int]:
    return dict(_VOCABS[_check_task(task_id)])


def vocab_size(task_id: str) -> int:
    return len(_VOCABS[_check_task(task_id)])


def _check_task(task_id: str) -> str:
    if task_id not in TASKS:
        raise ValueError(f"unknown task {task_id!r}; expected one of {TASKS}")
    return task_id


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptPair:
    clean: tuple[int, ...]
    corrupted: tuple[int, ...]
    answers: tuple[int, ...]
    foils: tuple[int, ...]
    slots: tuple[tuple[str, int], ...] = ()
    template: int = 0

    def __post_init__(self):
        if len(self.clean) != len(self.corrupted):
            raise ValueError("clean and corrupted sequences differ in length")
        if not self.answers or not self.foils:
            raise ValueError("answer and foil sets must be nonempty")
        if set(self.answers) & set(self.foils):
            raise ValueError("answer and foil sets overlap")

    @property
    def slot_values(self) -> dict[str, int]:
        return dict(self.slots)

    def corruption_positions(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.clean) != np.asarray(self.corrupted))

    def to_json(self) -> dict:
        return {
            "clean": list(self.clean),
            "corrupted": list(self.corrupted),
            "answers": list(self.answers),
            "foils": list(self.foils),
            "slots": [list(s) for s in self.slots],
            "template": self.template,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PromptPair":
        return cls(
            tuple(d["clean"]), tuple(d["corrupted"]), tuple(d["answers"]), tuple(d["foils"]),
            tuple((str(k), int(v)) for k, v in d["slots"]), int(d["template"]),
        )


@dataclass(frozen=True)
class TaskDataset:
    pairs: tuple[PromptPair, ...]
    task_id: str
    generator_seed: int
    provenance: str = "base"
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("dataset must be nonempty")
        _check_task(self.task_id)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        V = vocab_size(self.task_id)
        for p in self.pairs:
            if max(p.clean + p.corrupted + p.answers + p.foils) >= V:
                raise ValueError(f"token id outside the {self.task_id} vocabulary")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def uniform_length(self) -> bool:
        return len({len(p.clean) for p in self.pairs}) == 1

    def clean_tokens(self) -> np.ndarray:
        return self._stack("clean")

    def corrupted_tokens(self) -> np.ndarray:
        return self._stack("corrupted")

    def _stack(self, attr: str) -> np.ndarray:
        if not self.uniform_length:
            raise ValueError("dataset mixes sequence lengths; use groups()")
        return np.array([getattr(p, attr) for p in self.pairs], dtype=np.int64)

    def groups(self) -> Iterator[tuple[np.ndarray, "TaskDataset"]]:
        """Yield ``(indices, sub_dataset)`` per sequence length, in length order."""
        lengths = np.array([len(p.clean) for p in self.pairs])
        for L in np.unique(lengths):
            idx = np.flatnonzero(lengths == L)
            yield idx, replace(self, pairs=tuple(self.pairs[i] for i in idx))

    def ident(self) -> str:
        bits = [self.task_id, self.provenance, f"seed{self.generator_seed}", f"n{len(self)}"]
        bits += [f"{k}{v}" for k, v in sorted(self.info.items())]
        return "/".join(bits)

    def to_json(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "task_id": self.task_id,
            "generator_seed": self.generator_seed,
            "provenance": self.provenance,
            "info": self.info,
            "pairs": [p.to_json() for p in self.pairs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskDataset":
        if d.get("format") != DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format {d.get('format')!r}")
        return cls(
            tuple(PromptPair.from_json(p) for p in d["pairs"]),
            d["task_id"], int(d["generator_seed"]), d["provenance"], dict(d["info"]),
        )


def save_dataset(ds: TaskDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ds.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> TaskDataset:
    return TaskDataset.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskGenerator:
    task_id: str
    template: int = 0

    def __post_init__(self):
        _check_task(self.task_id)
        if not 0 <= self.template < len(_TEMPLATES[self.task_id]):
            raise ValueError(f"{self.task_id} has no template {self.template}")

    @property
    def n_templates(self) -> int:
        return len(_TEMPLATES[self.task_id])

    @property
    def supports_paraphrase(self) -> bool:
        return self.task_id != "toy-sva"

    def capacity(self) -> int:
        if self.task_id == "toy-ioi":
            n = len(_NAMES)
            return n * (n - 1) * 2 * (n - 2)
        if self.task_id == "toy-greater-than":
            return len(_GT_NOUNS) * len(_GT_CENTURIES) * (_GT_MAX_YEAR - 2)
        n_adj = len(_SVA_ADJ)
        return n_adj * (n_adj - 1) * len(_SVA_NOUNS) * 2

    def slots_for_index(self, i: int) -> dict[str, int]:
        """Decode a combination index into slot values (mixed radix)."""
        if not 0 <= i < self.capacity():
            raise IndexError(i)
        if self.task_id == "toy-ioi":
            n = len(_NAMES)
            a, i = i % n, i // n
            others = [x for x in range(n) if x != a]
            b, i = others[i % (n - 1)], i // (n - 1)
            s_first, i = i % 2, i // 2
            rest = [x for x in range(n) if x not in (a, b)]
            c = rest[i]
            return {"N1": a, "N2": b, "S": a if s_first else b, "C": c}
        if self.task_id == "toy-greater-than":
            noun, i = i % len(_GT_NOUNS), i // len(_GT_NOUNS)
            cent, i = i % len(_GT_CENTURIES), i // len(_GT_CENTURIES)
            return {"NOUN": noun, "C": cent, "YY": 2 + i}  # 2..MAX-1
        n_adj = len(_SVA_ADJ)
        a1, i = i % n_adj, i // n_adj
        others = [x for x in range(n_adj) if x != a1]
        a2, i = others[i % (n_adj - 1)], i // (n_adj - 1)
        noun, i = i % len(_SVA_NOUNS), i // len(_SVA_NOUNS)
        return {"A1": a1, "A2": a2, "NOUN": noun, "PLURAL": i}

    def render(self, slots: dict[str, int], template: int | None = None) -> PromptPair:
        template = self.template if template is None else template
        words = _TEMPLATES[self.task_id][template]
        V = _VOCABS[self.task_id]
        clean, corrupt = [V["BOS"]], [V["BOS"]]
        t = self.task_id
        for w in words:
            if t == "toy-ioi" and w in ("N1", "N2"):
                tok = V[_NAMES[slots[w]]]
                clean.append(tok)
                corrupt.append(tok)
            elif t == "toy-ioi" and w == "S":
                clean.append(V[_NAMES[slots["S"]]])
                corrupt.append(V[_NAMES[slots["C"]]])
            elif t == "toy-greater-than" and w == "NOUN":
                clean.append(V[_GT_NOUNS[slots["NOUN"]]])
                corrupt.append(clean[-1])
            elif t == "toy-greater-than" and w == "C":
                clean.append(V[_GT_CENTURIES[slots["C"]]])
                corrupt.append(clean[-1])
            elif t == "toy-greater-than" and w == "YY":
                clean.append(V[f"Y{slots['YY']:02d}"])
                corrupt.append(V["Y01"])
            elif t == "toy-sva" and w in ("A1", "A2"):
                clean.append(V[_SVA_ADJ[slots[w]]])
                corrupt.append(clean[-1])
            elif t == "toy-sva" and w == "NOUN":
                noun = _SVA_NOUNS[slots["NOUN"]]
                sg, pl = V[noun + "_SG"], V[noun + "_PL"]
                clean.append(pl if slots["PLURAL"] else sg)
                corrupt.append(sg if slots["PLURAL"] else pl)
            else:
                clean.append(V[w])
                corrupt.append(V[w])
        answers, foils = self._answer_spec(slots)
        return PromptPair(tuple(clean), tuple(corrupt), answers, foils, tuple(sorted(slots.items())), template)

    def _answer_spec(self, slots: dict[str, int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        V = _VOCABS[self.task_id]
        if self.task_id == "toy-ioi":
            io = slots["N1"] if slots["S"] == slots["N2"] else slots["N2"]
            return (V[_NAMES[io]],), (V[_NAMES[slots["S"]]],)
        if self.task_id == "toy-greater-than":
            yy = slots["YY"]
            answers = tuple(V[f"Y{y:02d}"] for y in range(yy + 1, _GT_MAX_YEAR + 1))
            foils = tuple(V[f"Y{y:02d}"] for y in range(1, yy + 1))
            return answers, foils
        form = 1 if slots["PLURAL"] else 0
        answers = tuple(V[v[form]] for v in _SVA_VERBS)
        foils = tuple(V[v[1 - form]] for v in _SVA_VERBS)
        return answers, foils


def generate_dataset(
    gen: TaskGenerator, n: int, seed: int, provenance: str = "base", templates: Sequence[int] | None = None
) -> TaskDataset:
    """``n`` distinct slot combinations drawn without replacement.

    ``templates`` (optional) cycles the surface template per pair; it is
    used for training data so the model sees every paraphrase.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cap = gen.capacity()
    if n > cap:
        raise ValueError(f"{gen.task_id} grammar has {cap} distinct pairs; requested {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(cap, size=n, replace=False)
    if templates is None:
        pairs = tuple(gen.render(gen.slots_for_index(int(i))) for i in idx)
        info = {"template": gen.template}
    else:
        pairs = tuple(
            gen.render(gen.slots_for_index(int(i)), templates[k % len(templates)]) for k, i in enumerate(idx)
        )
        info = {"templates": "-".join(map(str, templates))}
    return TaskDataset(pairs, gen.task_id, int(seed), provenance, info)


def bootstrap_resample(d: TaskDataset, seed: int) -> TaskDataset:
    """Resample pairs with replacement; pairs stay atomic."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(d), size=len(d))
    info = {**d.info, "bootstrap": int(seed)}
    return TaskDataset(tuple(d.pairs[i] for i in idx), d.task_id, d.generator_seed, "bootstrap", info)


def paraphrase_dataset(d: TaskDataset, template_id: int | str) -> TaskDataset:
    """Re-render every pair through another surface template.

    ``template_id`` of ``"identity"`` (or a pair's own template) leaves the
    pair untouched.  Answer sets and slot values are preserved.
    """
    gen = TaskGenerator(d.task_id)
    if not gen.supports_paraphrase:
        raise UnsupportedTaskError(f"paraphrasing is not supported for {d.task_id}")
    if template_id == "identity":
        return d
    template_id = int(template_id)
    if not 0 <= template_id < gen.n_templates:
        raise ValueError(f"{d.task_id} has no template {template_id}")
    pairs = tuple(
        p if p.template == template_id else gen.render(p.slot_values, template_id) for p in d.pairs
    )
    if pairs == d.pairs:
        return d
    return TaskDataset(pairs, d.task_id, d.generator_seed, "paraphrase", {**d.info, "template": template_id})


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


class TaskMetric:
    """Batched task metric on final-position logits.

    ``logit_diff``: mean answer logit minus mean foil logit.
    ``prob_diff``: softmax mass on answers minus mass on foils.
    """

    def __init__(self, kind: str, weights: np.ndarray):
        if kind not in ("logit_diff", "prob_diff"):
            raise ValueError(kind)
        self.kind = kind
        self.weights = weights

    @classmethod
    def for_pairs(cls, pairs: Sequence[PromptPair], task_id: str, d_vocab: int) -> "TaskMetric":
        kind = METRIC_KIND[task_id]
        w = np.zeros((len(pairs), d_vocab))
        for b, p in enumerate(pairs):
            if not p.answers or not p.foils:
                raise ValueError("empty answer set")
            if kind == "logit_diff":
                w[b, list(p.answers)] += 1.0 / len(p.answers)
                w[b, list(p.foils)] -= 1.0 / len(p.foils)
            else:
                w[b, list(p.answers)] = 1.0
                w[b, list(p.foils)] = -1.0
        return cls(kind, w)

    @classmethod
    def for_dataset(cls, d: TaskDataset, d_vocab: int) -> "TaskMetric":
        return cls.for_pairs(d.pairs, d.task_id, d_vocab)

    def values(self, logits: np.ndarray) -> np.ndarray:
        last = logits[:, -1, :]
        if self.kind == "logit_diff":
            return (self.weights * last).sum(axis=-1)
        return (self.weights * _softmax(last)).sum(axis=-1)

    def grad(self, logits: np.ndarray) -> np.ndarray:
        g = np.zeros_like(logits)
        if self.kind == "logit_diff":
            g[:, -1, :] = self.weights
        else:
            p = _softmax(logits[:, -1, :])
            mean_w = (self.weights * p).sum(axis=-1, keepdims=True)
            g[:, -1, :] = p * (self.weights - mean_w)
        return g


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def task_metric(logits: np.ndarray, pair: PromptPair, task_id: str) -> float:
    """Metric of one pair from ``[T, V]`` (or ``[V]`` final-position) logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
    m = TaskMetric.for_pairs([pair], task_id, logits.shape[-1])
    return float(m.values(logits[None])[0])
