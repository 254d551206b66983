"""Stochastic gradient training with Adam, warm-up and half-labeled batches."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import checkpoint
from .autodiff import NonFiniteError, backward
from .bounds import Batch, alpha, elbo_objective, potential_objective, total_objective
from .datasets import LabeledDataset, PotentialTarget, binarize
from .models import SEMI_SUPERVISED, UNSUPERVISED, Kind, Model

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "tau", "J", "L_labeled", "U_unlabeled", "class_loss", "train_err", "test_err", "wallclock_s")


class TrainingAborted(RuntimeError):
    """Raised when the objective or a gradient becomes non-finite."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    beta_alpha: float = 0.1
    warmup_epochs: int | None = None  # None: 200 for AVAE, 0 otherwise
    batch_size: int = 100
    labeled_per_batch: int | None = None  # None: all labels if they fit in half a batch
    n_mc: int = 1
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    eval_n_mc: int = 10
    checkpoint_every: int = 0
    steps_per_epoch: int = 100  # potential fitting has no dataset to sweep
    dtype: str = "float64"
    record_wallclock: bool = False

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.n_mc < 1 or self.epochs < 0:
            raise ValueError("lr, batch_size, n_mc must be positive and epochs >= 0")
        if self.labeled_per_batch is not None and not 0 <= self.labeled_per_batch <= self.batch_size:
            raise ValueError("labeled_per_batch must lie in [0, batch_size]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def resolved_warmup(self, kind: Kind) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return 200 if kind is Kind.AVAE else 0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(np.float64, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def warmup_temperature(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp min(1, epoch / warmup_epochs); 1 when warm-up is off."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


# ---------------------------------------------------------------------------
# randomness


def _key_int(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


class RngStream:
    """Counter-based generators keyed by (epoch, batch, sample, purpose, ...).

    The same seed and key always give the same draws, independent of the
    order in which generators are requested.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# batching


def resolve_labeled_per_batch(config: TrainConfig, n_labeled: int) -> int:
    if config.labeled_per_batch is not None:
        return config.labeled_per_batch
    return min(n_labeled, config.batch_size // 2)


def _even_draw(y: np.ndarray, count: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    per, extra = divmod(count, n_classes)
    picks = []
    for k in range(n_classes):
        rows = np.flatnonzero(y == k)
        want = per + (1 if k < extra else 0)
        picks.append(rng.choice(rows, want, replace=False))
    return np.concatenate(picks)


def assemble_batch(
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    unlabeled_x: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    n_classes: int,
) -> Batch:
    """Combine the labeled part with ``batch_size - labeled_per_batch`` unlabeled rows.

    When the labeled subset fits it is included whole; otherwise an
    even-per-class draw of ``labeled_per_batch`` rows is taken.
    """
    lpb = resolve_labeled_per_batch(config, len(labeled_x))
    if lpb > len(labeled_x):
        raise ValueError(f"requested {lpb} labeled items per batch, only {len(labeled_x)} available")
    if lpb == len(labeled_x):
        idx = np.arange(lpb)
    else:
        idx = _even_draw(labeled_y, lpb, n_classes, rng)
    n_u = config.batch_size - lpb
    x_u = unlabeled_x[:n_u] if n_u else unlabeled_x[:0]
    if lpb == 0:
        return Batch(None, None, x_u)
    return Batch(labeled_x[idx], np.eye(n_classes)[labeled_y[idx]], x_u if len(x_u) else None)


def iter_batches(x: np.ndarray, lab: np.ndarray, unl: np.ndarray, y: np.ndarray, n_classes: int,
                 config: TrainConfig, rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch: unlabeled rows without replacement, labeled rows every batch."""
    lpb = resolve_labeled_per_batch(config, len(lab))
    n_u = config.batch_size - lpb
    order = unl[rng.permutation(len(unl))]
    lx, ly = x[lab], y[lab]
    if n_u == 0:
        n_batches = max(1, len(unl) // max(lpb, 1))
        for _ in range(n_batches):
            yield assemble_batch(lx, ly, x[:0], config, rng, n_classes)
        return
    for start in range(0, len(order) - n_u + 1, n_u):
        yield assemble_batch(lx, ly, x[order[start : start + n_u]], config, rng, n_classes)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    train: LabeledDataset | None = None
    test: LabeledDataset | None = None
    binary: bool = False
    target: PotentialTarget | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, history: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in history:
        lines.append(",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    model: Model,
    data: TrainData,
    config: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimise the variant's loss; returns the model and per-epoch metrics.

    Semi-supervised variants minimise J (sum of labeled objectives and
    negated unlabeled bounds); VAE/AVAE minimise the negative ELBO and the
    potential-fit model the negative bound on log Z.
    """
    from .evaluation import classification_error, classify

    kind = model.kind
    dtype = np.dtype(config.dtype)
    stream = RngStream(config.seed)
    result = TrainResult(model)
    warm = config.resolved_warmup(kind)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_set, test_set = data.train, data.test
    if kind in SEMI_SUPERVISED or kind in UNSUPERVISED:
        if train_set is None:
            raise ValueError("training data required")
        if train_set.x.shape[1] != model.variant.x_dim:
            raise ValueError(f"data has dim {train_set.x.shape[1]}, model expects {model.variant.x_dim}")
    if kind is Kind.POTENTIAL_FIT and data.target is None:
        raise ValueError("potential fitting needs a target")

    test_x = None
    if test_set is not None:
        test_x = binarize(test_set.x, stream.generator("test", "binarize")) if data.binary else test_set.x

    if kind in SEMI_SUPERVISED:
        lab = train_set.labeled_index
        unl = train_set.unlabeled_index
        alpha_ = alpha(config.beta_alpha, len(lab), len(unl)) if len(lab) else 0.0
    elif kind in UNSUPERVISED:
        lab = np.zeros(0, dtype=np.int64)
        unl = np.arange(len(train_set))

    adam = AdamState()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        tau = warmup_temperature(epoch, warm)
        sums = {"J": 0.0, "L_labeled": 0.0, "U_unlabeled": 0.0, "class_loss": 0.0}
        counts = dict.fromkeys(sums, 0)

        if kind is Kind.POTENTIAL_FIT:
            steps = ((None, None) for _ in range(config.steps_per_epoch))
        else:
            x_epoch = binarize(train_set.x, stream.generator(epoch, "binarize")) if data.binary else train_set.x
            order_rng = stream.generator(epoch, "order")
            if kind in SEMI_SUPERVISED:
                steps = ((b, None) for b in iter_batches(
                    x_epoch, lab, unl, train_set.y, train_set.n_classes, config, order_rng))
            else:
                perm = order_rng.permutation(len(unl))
                bs = config.batch_size
                steps = ((None, x_epoch[perm[s : s + bs]]) for s in range(0, len(perm) - bs + 1, bs))

        for step, (batch, xb) in enumerate(steps):
            noise = stream.generator(epoch, step, "noise").standard_normal
            tape = model.tape(dtype)
            try:
                if kind is Kind.POTENTIAL_FIT:
                    res = potential_objective(tape, model, data.target.log_potential, config.batch_size, tau, noise)
                elif kind in SEMI_SUPERVISED:
                    res = total_objective(tape, model, batch, alpha_, tau, noise, config.n_mc)
                else:
                    res = elbo_objective(tape, model, xb, tau, noise, config.n_mc)
                grads = backward(tape, res.J)
            except NonFiniteError as e:
                raise TrainingAborted(f"non-finite value at epoch {epoch + 1}, step {step}: {e}") from e
            if not np.isfinite(res.J.data):
                raise TrainingAborted(f"non-finite objective at epoch {epoch + 1}, step {step}")
            adam_step(adam, model.params, grads, config.lr, config.beta1, config.beta2, config.adam_eps)
            for key, val in (("J", float(res.J.data)), ("L_labeled", res.labeled),
                             ("U_unlabeled", res.unlabeled), ("class_loss", res.class_loss)):
                if val is not None:
                    sums[key] += val
                    counts[key] += 1

        row = {"epoch": epoch + 1, "tau": tau}
        for key in sums:
            row[key] = sums[key] / counts[key] if counts[key] else None
        if kind in SEMI_SUPERVISED and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            ev = stream.generator(epoch, "eval")
            with model.evaluating():
                row["train_err"] = classification_error(
                    classify(x_epoch, model, config.eval_n_mc, ev), train_set.y)
                if test_set is not None:
                    row["test_err"] = classification_error(
                        classify(test_x, model, config.eval_n_mc, ev), test_set.y)
        elapsed = time.perf_counter() - t0
        row["wallclock_s"] = elapsed if config.record_wallclock else None
        row["_elapsed"] = elapsed
        result.history.append(row)
        log.info("epoch %d: J=%.4f test_err=%s", epoch + 1, row["J"] or float("nan"), row.get("test_err"))
        if on_epoch is not None:
            on_epoch(row)
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint.save(out / f"checkpoint_epoch{epoch + 1}.axdg", model.state_dict())

    if out is not None:
        write_metrics_csv(out / "metrics.csv", result.history)
        checkpoint.save(out / "model.axdg", model.state_dict())
    return result
