"""Student training: supervised imitation, KL-regularized Bayesian imitation,
the unsupervised CVaR + entropy objective, and the three-stage sandwich.

Each loss returns ``(value, dL/dweights)`` so it plugs straight into
:func:`nn_core.backward`. Training is full-batch plain gradient descent with
global gradient-norm clipping unless a batch size is configured.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .allocators import LabeledPair, tail_count
from .errors import DivergenceError
from .nn_core import Network, NetworkSpec
from .rng import stream


@dataclass(frozen=True)
class TrainConfig:
    beta: float | None = None  # None: 1 / number of labeled examples
    lambda_cvar: float = 1.0
    lambda_div: float = 0.05
    epochs_s0: int = 200
    cycles: int = 5
    epochs_sup: int = 50
    epochs_unsup: int = 50
    epochs_s2: int = 100
    learning_rate: float = 0.2
    batch_size: int | None = None
    model_seed: int = 0
    grad_clip: float = 5.0
    alpha: float = 0.95

    def __post_init__(self):
        for name in ("lambda_cvar", "lambda_div", "learning_rate", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")
        for name in ("epochs_s0", "cycles", "epochs_sup", "epochs_unsup", "epochs_s2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def supervised_epochs(self) -> int:
        """Supervised epochs of the full sandwich, used for the supervised-only twin."""
        return self.epochs_s0 + self.cycles * self.epochs_sup + self.epochs_s2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class UnlabeledExample:
    features: np.ndarray
    window: np.ndarray  # W x N scenario returns


@dataclass
class Dataset:
    labeled: list
    unlabeled: list = field(default_factory=list)

    def labeled_arrays(self):
        X = np.stack([p.features for p in self.labeled])
        Y = np.stack([p.teacher for p in self.labeled])
        return X, Y


# --- losses ----------------------------------------------------------------------


def supervised_loss(predicted, teacher):
    """Mean squared distance ``mean_b ||w_b - t_b||^2`` and its gradient."""
    P = np.atleast_2d(np.asarray(predicted, dtype=float))
    T = np.atleast_2d(np.asarray(teacher, dtype=float))
    if P.shape != T.shape:
        raise ValueError(f"prediction {P.shape} and teacher {T.shape} differ in shape")
    if P.shape[0] == 0:
        raise ValueError("empty batch")
    diff = P - T
    B = P.shape[0]
    return float((diff**2).sum() / B), 2.0 * diff / B


def bnn_supervised_loss(predicted, teacher, kl_total: float, beta: float):
    mse, grad = supervised_loss(predicted, teacher)
    return mse + beta * kl_total, grad


def neg_entropy(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0).sum())


def unsupervised_loss(weights, window, lambda_cvar: float = 1.0, lambda_div: float = 0.05, alpha: float = 0.95):
    """``lambda_cvar * CVaR_alpha(-R w) + lambda_div * sum(w log w)`` for one portfolio.

    The CVaR gradient averages the scenarios in the top-K loss set (ties broken
    by a stable sort, which selects a valid subgradient).
    """
    w = np.asarray(weights, dtype=float)
    R = np.asarray(window, dtype=float)
    losses = -R @ w
    k = tail_count(losses.size, alpha)
    top = np.argsort(losses, kind="stable")[-k:]
    cvar = float(losses[top].mean())
    value = lambda_cvar * cvar + lambda_div * neg_entropy(w)
    g = -lambda_cvar * R[top].mean(axis=0)
    g = g + lambda_div * (np.log(np.maximum(w, 1e-300)) + 1.0)
    return value, g


def batch_unsupervised_loss(W, windows, lambda_cvar, lambda_div, alpha=0.95):
    B = W.shape[0]
    vals, grads = zip(*(unsupervised_loss(W[b], windows[b], lambda_cvar, lambda_div, alpha) for b in range(B)))
    return float(np.mean(vals)), np.stack(grads) / B


# --- standardization and checkpoints ----------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass
class StudentCheckpoint:
    net: Network
    standardizer: Standardizer
    config: TrainConfig
    model_id: str = "student"
    curves: list = field(default_factory=list)
    steps: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def predict(self, X, M: int = 20, seed: int = 0) -> np.ndarray:
        return nn_core.predict(self.net, self.standardizer(X), M, seed)

    def save(self, path) -> None:
        header = {
            "format": 1,
            "model_id": self.model_id,
            "spec": self.net.spec.to_dict(),
            "config": self.config.to_dict(),
            "steps": self.steps,
            "provenance": self.provenance,
            "curves": self.curves,
        }
        blocks = {"standardizer.mean": self.standardizer.mean, "standardizer.scale": self.standardizer.scale}
        blocks.update(self.net.state())
        nn_core.write_blocks(path, header, blocks)

    @classmethod
    def load(cls, path) -> "StudentCheckpoint":
        header, blocks = nn_core.read_blocks(path)
        spec = NetworkSpec.from_dict(header["spec"])
        net = nn_core.network_from_blocks(spec, blocks)
        std = Standardizer(blocks["standardizer.mean"], blocks["standardizer.scale"])
        return cls(net, std, TrainConfig.from_dict(header["config"]), header["model_id"],
                   header.get("curves", []), header.get("steps", {}), header.get("provenance", {}))


def write_curves_csv(path, curves: list) -> None:
    lines = ["stage,epoch,mse,kl,unsup,total"]
    for c in curves:
        lines.append(f"{c['stage']},{c['epoch']},{c['mse']!r},{c['kl']!r},{c['unsup']!r},{c['total']!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


# --- training loop -----------------------------------------------------------------


def clip_gradients(grads: dict, max_norm: float) -> dict:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}


def _add(a: dict, b: dict, scale: float) -> dict:
    out = dict(a)
    for k, g in b.items():
        out[k] = out[k] + scale * g if k in out else scale * g
    return out


def _batches(n: int, batch_size: int | None, rng) -> list[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def n_batches(n: int, batch_size: int | None) -> int:
    return 1 if batch_size is None or batch_size >= n else math.ceil(n / batch_size)


class _Trainer:
    """Holds the network, data and RNG streams shared by all stages of one run."""

    def __init__(self, net: Network, X, Y, config: TrainConfig, unlabeled=None):
        self.net = net
        self.X, self.Y = X, Y
        self.cfg = config
        self.beta = (1.0 / len(X)) if config.beta is None else config.beta
        self.unlabeled = unlabeled
        seed = config.model_seed
        # independent streams: disabling one phase never shifts the draws of another
        self.rng_sup = stream(seed, "train.supervised")
        self.rng_unsup = stream(seed, "train.unsupervised")
        self.rng_order = stream(seed, "train.batch_order")
        self.curves: list = []
        self.steps = {"supervised": 0, "unsupervised": 0}

    def _record(self, stage, epoch, mse, kl, unsup):
        total = mse + self.beta * kl + unsup
        if not np.isfinite(total):
            raise DivergenceError(f"loss became non-finite in stage {stage}, epoch {epoch}")
        self.curves.append({"stage": stage, "epoch": epoch, "mse": mse, "kl": kl, "unsup": unsup, "total": total})

    def supervised_epochs(self, stage: str, epochs: int) -> None:
        net, cfg = self.net, self.cfg
        bayes = net.spec.bayesian
        for e in range(epochs):
            mse_sum = 0.0
            batches = _batches(len(self.X), cfg.batch_size, self.rng_order)
            for idx in batches:
                mode = "sampled" if bayes else "deterministic"
                W, tape = nn_core.forward(net, self.X[idx], mode, self.rng_sup)
                mse, up = supervised_loss(W, self.Y[idx])
                grads = nn_core.backward(net, tape, up)
                if bayes:
                    grads = _add(grads, nn_core.kl_grad(net), self.beta * len(idx) / len(self.X))
                net.step(clip_gradients(grads, cfg.grad_clip), cfg.learning_rate)
                mse_sum += mse * len(idx)
                self.steps["supervised"] += 1
            kl = nn_core.kl_total(net) if bayes else 0.0
            self._record(stage, e, mse_sum / len(self.X), kl, 0.0)

    def unsupervised_epochs(self, stage: str, epochs: int) -> None:
        net, cfg = self.net, self.cfg
        Xu, windows = self.unlabeled
        mode = "sampled" if net.spec.bayesian else "deterministic"
        for e in range(epochs):
            total = 0.0
            for idx in _batches(len(Xu), cfg.batch_size, self.rng_order):
                W, tape = nn_core.forward(net, Xu[idx], mode, self.rng_unsup)
                val, up = batch_unsupervised_loss(W, [windows[i] for i in idx], cfg.lambda_cvar,
                                                  cfg.lambda_div, cfg.alpha)
                grads = nn_core.backward(net, tape, up)
                net.step(clip_gradients(grads, cfg.grad_clip), cfg.learning_rate)
                total += val * len(idx)
                self.steps["unsupervised"] += 1
            self._record(stage, e, 0.0, 0.0, total / len(Xu))

    def initial_mse(self) -> float:
        W, _ = nn_core.forward(self.net, self.X)
        return supervised_loss(W, self.Y)[0]


def _prepare(net: Network, labeled, config: TrainConfig, standardizer: Standardizer | None):
    if not labeled:
        raise ValueError("training needs at least one labeled pair")
    X = np.stack([np.asarray(p.features, dtype=float) for p in labeled])
    Y = np.stack([np.asarray(p.teacher, dtype=float) for p in labeled])
    if X.shape[1] != net.spec.sizes[0] or Y.shape[1] != net.spec.sizes[-1]:
        raise ValueError("labeled pairs do not match the network dimensions")
    std = Standardizer.fit(X) if standardizer is None else standardizer
    return std, std(X), Y


def train_supervised(net: Network, labeled: list[LabeledPair], config: TrainConfig, *, epochs: int | None = None,
                     standardizer: Standardizer | None = None, model_id: str = "sup") -> StudentCheckpoint:
    """Plain imitation for ``epochs`` (default: the sandwich's supervised total)."""
    std, X, Y = _prepare(net, labeled, config, standardizer)
    tr = _Trainer(net, X, Y, config)
    init = tr.initial_mse()
    epochs = config.supervised_epochs if epochs is None else epochs
    tr.supervised_epochs("SUP", epochs)
    steps = dict(tr.steps, expected=expected_steps(config, len(X), 0, sandwich=False, epochs=epochs))
    _check_steps(steps)
    return StudentCheckpoint(net, std, config, model_id, tr.curves, steps, {"initial_mse": init})


def train_sandwich(net: Network, dataset: Dataset, config: TrainConfig, *,
                   standardizer: Standardizer | None = None, model_id: str = "sandwich") -> StudentCheckpoint:
    """S0 warm-up, ``cycles`` x (supervised, unsupervised), S2 anchoring."""
    if config.cycles > 0 and not dataset.unlabeled:
        raise ValueError("sandwich training needs an unlabeled pool")
    std, X, Y = _prepare(net, dataset.labeled, config, standardizer)
    unl = None
    if dataset.unlabeled:
        Xu = std(np.stack([u.features for u in dataset.unlabeled]))
        unl = (Xu, [np.asarray(u.window, dtype=float) for u in dataset.unlabeled])
    tr = _Trainer(net, X, Y, config, unl)
    init = tr.initial_mse()
    tr.supervised_epochs("S0", config.epochs_s0)
    for c in range(config.cycles):
        tr.supervised_epochs(f"S1.{c}.sup", config.epochs_sup)
        tr.unsupervised_epochs(f"S1.{c}.unsup", config.epochs_unsup)
    tr.supervised_epochs("S2", config.epochs_s2)
    n_unl = 0 if unl is None else len(unl[0])
    steps = dict(tr.steps, expected=expected_steps(config, len(X), n_unl, sandwich=True))
    _check_steps(steps)
    return StudentCheckpoint(net, std, config, model_id, tr.curves, steps, {"initial_mse": init})


def expected_steps(config: TrainConfig, n_labeled: int, n_unlabeled: int, *, sandwich: bool,
                   epochs: int | None = None) -> dict:
    bl = n_batches(n_labeled, config.batch_size)
    if not sandwich:
        e = config.supervised_epochs if epochs is None else epochs
        return {"supervised": e * bl, "unsupervised": 0}
    bu = n_batches(n_unlabeled, config.batch_size) if n_unlabeled else 0
    sup = (config.epochs_s0 + config.cycles * config.epochs_sup + config.epochs_s2) * bl
    return {"supervised": sup, "unsupervised": config.cycles * config.epochs_unsup * bu}


def _check_steps(steps: dict) -> None:
    exp = steps["expected"]
    if steps["supervised"] != exp["supervised"] or steps["unsupervised"] != exp["unsupervised"]:
        raise RuntimeError(f"schedule accounting mismatch: {steps}")


def stage_losses(curves: list, stage: str, key: str = "mse") -> np.ndarray:
    return np.array([c[key] for c in curves if c["stage"] == stage])


# --- splitting -------------------------------------------------------------------


def split_sizes(total: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_train = math.floor(round(ratios[0] * total, 9))
    n_val = math.floor(round(ratios[1] * total, 9))
    return n_train, n_val, total - n_train - n_val


def split_dataset(labeled_real: list, labeled_synth: list, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """All real pairs go to train; synthetic pairs top train up, then fill val and test.

    Synthetic pairs are assigned by a seeded shuffle; each split is returned in
    its original order.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be non-negative and sum to 1")
    total = len(labeled_real) + len(labeled_synth)
    n_train, n_val, _ = split_sizes(total, ratios)
    if len(labeled_real) > n_train:
        warnings.warn(f"{len(labeled_real)} real pairs exceed the {n_train}-pair train share; all kept in train",
                      stacklevel=2)
    if not labeled_synth:
        warnings.warn("no synthetic pairs: validation and test splits are empty", stacklevel=2)
    order = stream(seed, "split").permutation(len(labeled_synth))
    k_train = max(0, n_train - len(labeled_real))
    remaining = len(labeled_synth) - k_train
    k_val = min(n_val, remaining) if remaining > 0 else 0
    train_idx = np.sort(order[:k_train])
    val_idx = np.sort(order[k_train : k_train + k_val])
    test_idx = np.sort(order[k_train + k_val :])
    train = list(labeled_real) + [labeled_synth[i] for i in train_idx]
    return train, [labeled_synth[i] for i in val_idx], [labeled_synth[i] for i in test_idx]


def write_config(path, config: TrainConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
