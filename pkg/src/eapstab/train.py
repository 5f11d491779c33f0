"""Minimal Adam trainer for the toy transformer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import ModelConfig, ToyTransformer, backward, init_model, run_model
from .tasks import TaskDataset, TaskGenerator, TaskMetric, generate_dataset, vocab_size

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


PLATEAU_TOL = 1e-3


@dataclass
class TrainResult:
    """Trained model plus traces.

    ``losses`` holds the minibatch loss of every step.  Every ``window``
    steps the loss and mean task metric are also measured on a fixed
    evaluation slice of the training data (``eval_losses``/``metric_trace``).
    """

    model: ToyTransformer
    losses: list[float] = field(default_factory=list)
    window: int = 100
    eval_losses: list[float] = field(default_factory=list)
    metric_trace: list[float] = field(default_factory=list)

    def fraction_nonincreasing(self, tol: float = PLATEAU_TOL) -> float:
        """Share of consecutive eval windows whose loss does not rise by more than ``tol`` nats.

        Once a model sits at the loss floor, Adam keeps taking lr-sized steps
        and the eval loss jitters by ~1e-4; ``tol`` keeps that from counting
        as an increase.
        """
        if len(self.eval_losses) < 2:
            return 1.0
        return float(np.mean(np.diff(self.eval_losses) <= tol))


def answer_set_loss(logits: np.ndarray, answer_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Final-position cross-entropy against the uniform distribution on the answer set.

    Returns the batch mean and its logit gradient.  A target spread over
    the whole set (rather than just mass on the set) keeps multi-answer
    tasks from collapsing onto one token that every answer set shares.
    """
    last = logits[:, -1, :]
    z = last - last.max(axis=-1, keepdims=True)
    q = answer_mask / answer_mask.sum(axis=-1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        log_all = np.log(np.exp(z).sum(axis=-1))
        loss = float(np.mean(log_all - (q * z).sum(axis=-1)))
        p = np.exp(z - log_all[:, None])
    g = np.zeros_like(logits)
    g[:, -1, :] = (p - q) / len(last)
    return loss, g


def _answer_mask(ds: TaskDataset, V: int) -> np.ndarray:
    mask = np.zeros((len(ds), V), dtype=bool)
    for b, p in enumerate(ds.pairs):
        mask[b, list(p.answers)] = True
    return mask


def train_toy_model(
    config: ModelConfig,
    dataset: TaskDataset,
    steps: int,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 64,
    window: int = 100,
) -> TrainResult:
    """Train on the clean prompts of ``dataset`` to spread its prediction over the answer set.

    Adam with a cosine learning-rate decay.  Pairs of different lengths are
    batched separately, cycling through the length groups step by step.
    With ``steps=0`` the returned model is exactly ``init_model(config, seed)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    model = init_model(config, seed)
    rng = np.random.default_rng([seed, 1])
    groups = []
    for _, sub in dataset.groups():
        groups.append((sub.clean_tokens(), _answer_mask(sub, config.d_vocab), TaskMetric.for_dataset(sub, config.d_vocab)))

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    result = TrainResult(model, window=window)
    for step in range(steps):
        tokens, amask, metric = groups[step % len(groups)]
        idx = rng.integers(0, len(tokens), size=min(batch_size, len(tokens)))
        cache = run_model(model, tokens[idx])
        loss, dlogits = answer_set_loss(cache.logits, amask[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(step)
        result.losses.append(loss)
        _, grads = backward(model, cache, dlogits, want_params=True)
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(step)
        lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        t = step + 1
        for k, g in grads.items():
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v2[k] = beta2 * v2[k] + (1 - beta2) * g * g
            mhat = m[k] / (1 - beta1**t)
            vhat = v2[k] / (1 - beta2**t)
            model.params[k] -= lr_t * mhat / (np.sqrt(vhat) + eps)
            if not np.isfinite(model.params[k]).all():
                raise TrainingDiverged(step)
        if (step + 1) % window == 0:
            ev_loss, ev_metric = _evaluate(model, groups)
            result.eval_losses.append(ev_loss)
            result.metric_trace.append(ev_metric)
            log.debug("step %d loss %.6f metric %.4f", step + 1, ev_loss, ev_metric)
    return result


def _evaluate(model: ToyTransformer, groups, limit: int = 256) -> tuple[float, float]:
    losses, metrics = [], []
    for tokens, amask, metric in groups:
        logits = run_model(model, tokens[:limit]).logits
        losses.append(answer_set_loss(logits, amask[:limit])[0])
        metrics.append(float(np.mean(TaskMetric(metric.kind, metric.weights[:limit]).values(logits))))
    return float(np.mean(losses)), float(np.mean(metrics))


def task_accuracy(model: ToyTransformer, dataset: TaskDataset) -> float:
    """Fraction of clean prompts whose full-vocabulary argmax is an answer token."""
    hits = 0
    for _, sub in dataset.groups():
        logits = run_model(model, sub.clean_tokens()).logits[:, -1, :]
        pred = logits.argmax(axis=-1)
        hits += sum(int(pred[b] in p.answers) for b, p in enumerate(sub.pairs))
    return hits / len(dataset)


@dataclass(frozen=True)
class TrainSpec:
    """Serializable recipe for a task model: data, model shape and optimiser."""

    task_id: str = "toy-ioi"
    steps: int = 2000
    lr: float = 3e-3
    seed: int = 0
    batch_size: int = 64
    n_train: int = 2000
    data_seed: int = 100
    model: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({"d_vocab": vocab_size(self.task_id), **self.model})

    def training_data(self) -> TaskDataset:
        gen = TaskGenerator(self.task_id)
        n = min(self.n_train, gen.capacity())
        return generate_dataset(gen, n, self.data_seed, templates=list(range(gen.n_templates)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training field(s): {sorted(unknown)}")
        return cls(**d)


def train_task_model(spec: TrainSpec) -> TrainResult:
    cfg = spec.model_config()
    if cfg.d_vocab != vocab_size(spec.task_id):
        raise ValueError(f"model.d_vocab must be {vocab_size(spec.task_id)} for {spec.task_id}")
    return train_toy_model(cfg, spec.training_data(), spec.steps, spec.lr, spec.seed, spec.batch_size)
