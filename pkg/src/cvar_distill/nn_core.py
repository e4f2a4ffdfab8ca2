"""Small dense networks with a softmax head and hand-written reverse mode.

Two layer types exist: point-estimate dense layers and mean-field Gaussian
(variational) layers whose standard deviation is ``softplus(rho)``. A forward
pass records a :class:`Tape`; :func:`backward` consumes it and returns the
gradient of every parameter, including the ``rho`` path through the
reparameterization ``W = mu + softplus(rho) * eps``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StaleTapeError
from .rng import as_generator

CHECKPOINT_MAGIC = b"CVDCKPT1"


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, z: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a, z: (z > 0).astype(float)),
}


@dataclass(frozen=True)
class NetworkSpec:
    sizes: tuple[int, ...]
    variational: tuple[bool, ...]
    activation: str = "tanh"
    prior_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "variational", tuple(bool(v) for v in self.variational))
        if len(self.sizes) < 2 or len(self.variational) != len(self.sizes) - 1:
            raise ValueError("need one variational flag per weight map")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.prior_sigma <= 0:
            raise ValueError("prior_sigma must be positive")

    @classmethod
    def for_universe(cls, n_assets: int, n_features: int = 16, hidden=(256, 128),
                     bayesian: bool = False, n_variational: int = 2, **kw) -> "NetworkSpec":
        sizes = (n_assets * n_features, *hidden, n_assets)
        n_maps = len(sizes) - 1
        flags = tuple(bayesian and k >= n_maps - n_variational for k in range(n_maps))
        return cls(sizes, flags, **kw)

    @property
    def bayesian(self) -> bool:
        return any(self.variational)

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "variational": list(self.variational),
                "activation": self.activation, "prior_sigma": self.prior_sigma}

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(tuple(d["sizes"]), tuple(d["variational"]), d["activation"], d["prior_sigma"])


class DenseLayer:
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)


class VariationalLayer:
    kind = "variational"
    param_names = ("mu_w", "rho_w", "mu_b", "rho_b")

    def __init__(self, mu_w, rho_w, mu_b, rho_b, prior_sigma=1.0):
        self.mu_w = np.asarray(mu_w, dtype=float)
        self.rho_w = np.asarray(rho_w, dtype=float)
        self.mu_b = np.asarray(mu_b, dtype=float)
        self.rho_b = np.asarray(rho_b, dtype=float)
        self.prior_sigma = float(prior_sigma)

    @property
    def sigma_w(self):
        return softplus(self.rho_w)

    @property
    def sigma_b(self):
        return softplus(self.rho_b)


class Network:
    """Ordered layers plus a version counter bumped on every parameter write."""

    def __init__(self, spec: NetworkSpec, layers):
        self.spec = spec
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def init(cls, spec: NetworkSpec, rng, init_sigma_frac: float = 0.05) -> "Network":
        rng = as_generator(rng, "init")
        layers = []
        for (n_in, n_out), var in zip(zip(spec.sizes[:-1], spec.sizes[1:]), spec.variational):
            limit = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            b = np.zeros(n_out)
            if var:
                rho = float(softplus_inv(init_sigma_frac * spec.prior_sigma))
                layers.append(VariationalLayer(w, np.full_like(w, rho), b, np.full_like(b, rho), spec.prior_sigma))
            else:
                layers.append(DenseLayer(w, b))
        return cls(spec, layers)

    def named_parameters(self):
        for k, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield f"{k}.{name}", getattr(layer, name)

    def get(self, key: str) -> np.ndarray:
        k, name = key.split(".")
        return getattr(self.layers[int(k)], name)

    def set(self, key: str, value) -> None:
        k, name = key.split(".")
        layer = self.layers[int(k)]
        setattr(layer, name, np.array(value, dtype=float).reshape(getattr(layer, name).shape))
        self.version += 1

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, _ in list(self.named_parameters()):
            self.set(k, state[k])

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """Plain gradient-descent update."""
        if lr == 0:
            return
        for k, v in self.named_parameters():
            g = grads.get(k)
            if g is not None:
                v -= lr * g
        self.version += 1

    def copy(self) -> "Network":
        net = Network(self.spec, [])
        for layer in self.layers:
            if layer.kind == "dense":
                net.layers.append(DenseLayer(layer.weight.copy(), layer.bias.copy()))
            else:
                net.layers.append(VariationalLayer(layer.mu_w.copy(), layer.rho_w.copy(), layer.mu_b.copy(),
                                                   layer.rho_b.copy(), layer.prior_sigma))
        return net

    @property
    def n_params(self) -> int:
        return sum(v.size for _, v in self.named_parameters())


@dataclass
class _LayerRecord:
    a_in: np.ndarray
    z: np.ndarray
    a_out: np.ndarray
    W: np.ndarray
    eps_w: np.ndarray | None = None
    eps_b: np.ndarray | None = None


@dataclass
class Tape:
    version: int
    records: list = field(default_factory=list)
    weights: np.ndarray | None = None
    squeeze: bool = False


def forward(net: Network, x, mode: str = "deterministic", rng=None, per_example: bool = True):
    """Run the network; returns ``(weights, tape)``.

    ``mode="sampled"`` draws ``eps ~ N(0, I)`` for every variational layer from
    ``rng`` (a seed or Generator). With ``per_example`` each row of ``x`` gets
    its own weight sample, otherwise one sample is shared by the whole batch.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != net.spec.sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != network input {net.spec.sizes[0]}")
    if mode not in ("deterministic", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    sampled = mode == "sampled" and net.spec.bayesian
    if sampled:
        rng = as_generator(0 if rng is None else rng, "forward")
    act, _ = _ACTIVATIONS[net.spec.activation]
    tape = Tape(net.version, squeeze=squeeze)
    B = a.shape[0]
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        eps_w = eps_b = None
        if layer.kind == "dense":
            W, b = layer.weight, layer.bias
            z = a @ W.T + b
        elif not sampled:
            W, b = layer.mu_w, layer.mu_b
            z = a @ W.T + b
        elif per_example:
            eps_w = rng.standard_normal((B,) + layer.mu_w.shape)
            eps_b = rng.standard_normal((B,) + layer.mu_b.shape)
            W = layer.mu_w + layer.sigma_w * eps_w
            b = layer.mu_b + layer.sigma_b * eps_b
            z = np.matmul(W, a[:, :, None])[:, :, 0] + b
        else:
            eps_w = rng.standard_normal(layer.mu_w.shape)
            eps_b = rng.standard_normal(layer.mu_b.shape)
            W = layer.mu_w + layer.sigma_w * eps_w
            b = layer.mu_b + layer.sigma_b * eps_b
            z = a @ W.T + b
        a_out = z if k == last else act(z)
        tape.records.append(_LayerRecord(a, z, a_out, W, eps_w, eps_b))
        a = a_out
    w = softmax(a)
    tape.weights = w
    return (w[0] if squeeze else w), tape


def backward(net: Network, tape: Tape, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * weights)`` w.r.t. every parameter."""
    if tape.version != net.version:
        raise StaleTapeError("tape was recorded before the latest parameter update")
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    w = tape.weights
    if g.shape != w.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {w.shape}")
    _, dact = _ACTIVATIONS[net.spec.activation]
    dz = w * (g - (g * w).sum(axis=1, keepdims=True))
    grads: dict[str, np.ndarray] = {}
    for k in range(len(net.layers) - 1, -1, -1):
        layer, rec = net.layers[k], tape.records[k]
        if k != len(net.layers) - 1:
            dz = dz * dact(rec.a_out, rec.z)
        a = rec.a_in
        gW = dz.T @ a
        gb = dz.sum(axis=0)
        if layer.kind == "dense":
            grads[f"{k}.weight"] = gW
            grads[f"{k}.bias"] = gb
        else:
            grads[f"{k}.mu_w"] = gW
            grads[f"{k}.mu_b"] = gb
            if rec.eps_w is None:
                grads[f"{k}.rho_w"] = np.zeros_like(layer.rho_w)
                grads[f"{k}.rho_b"] = np.zeros_like(layer.rho_b)
            elif rec.eps_w.ndim == 3:
                grads[f"{k}.rho_w"] = np.einsum("bo,boi,bi->oi", dz, rec.eps_w, a, optimize=True) * sigmoid(layer.rho_w)
                grads[f"{k}.rho_b"] = (dz * rec.eps_b).sum(axis=0) * sigmoid(layer.rho_b)
            else:
                grads[f"{k}.rho_w"] = gW * rec.eps_w * sigmoid(layer.rho_w)
                grads[f"{k}.rho_b"] = gb * rec.eps_b * sigmoid(layer.rho_b)
        if k > 0:
            if rec.W.ndim == 3:
                dz = np.matmul(dz[:, None, :], rec.W)[:, 0, :]
            else:
                dz = dz @ rec.W
    return grads


def _kl_terms(mu, sigma, prior_sigma):
    ratio = (sigma / prior_sigma) ** 2
    return 0.5 * ((sigma**2 + mu**2) / prior_sigma**2 - 1.0 - np.log(ratio))


def kl_divergence(layer: VariationalLayer) -> float:
    """Closed-form KL(q || N(0, prior_sigma^2 I)) over weights and biases."""
    return float(_kl_terms(layer.mu_w, layer.sigma_w, layer.prior_sigma).sum()
                 + _kl_terms(layer.mu_b, layer.sigma_b, layer.prior_sigma).sum())


def kl_total(net: Network) -> float:
    return sum(kl_divergence(l) for l in net.layers if l.kind == "variational")


def kl_grad(net: Network) -> dict[str, np.ndarray]:
    grads = {}
    for k, layer in enumerate(net.layers):
        if layer.kind != "variational":
            continue
        p2 = layer.prior_sigma**2
        for mu_name, rho_name in (("mu_w", "rho_w"), ("mu_b", "rho_b")):
            mu, rho = getattr(layer, mu_name), getattr(layer, rho_name)
            sig = softplus(rho)
            grads[f"{k}.{mu_name}"] = mu / p2
            grads[f"{k}.{rho_name}"] = (sig / p2 - 1.0 / sig) * sigmoid(rho)
    return grads


def mc_average(net: Network, x, M: int = 20, seed=0):
    """Mean and per-asset dispersion of ``M`` sampled softmax outputs.

    Each pass draws one parameter sample shared by all rows of ``x``; the same
    ``seed`` therefore reuses the same ``M`` parameter draws for every input.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not net.spec.bayesian:
        w, _ = forward(net, x)
        return w, np.zeros_like(w)
    rng = as_generator(seed, "mc_average")
    draws = np.stack([forward(net, x, "sampled", rng, per_example=False)[0] for _ in range(M)])
    return draws.mean(axis=0), draws.std(axis=0)


def predict(net: Network, x, M: int = 20, seed=0) -> np.ndarray:
    """Deterministic forward for point networks, MC average for Bayesian ones."""
    if net.spec.bayesian:
        return mc_average(net, x, M, seed)[0]
    return forward(net, x)[0]


# --- checkpoint file -----------------------------------------------------------
#
# layout: 8-byte magic | uint64 LE header length | UTF-8 JSON header |
#         float64 LE parameter block. The header lists every block with its
#         shape and element offset into the parameter block.


def write_blocks(path, header: dict, blocks: dict[str, np.ndarray]) -> None:
    entries, offset, parts = [], 0, []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        parts.append(arr.ravel().tobytes())
    header = dict(header, blocks=entries)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for p in parts:
            fh.write(p)


def read_blocks(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    flat = np.frombuffer(data[16 + n :], dtype="<f8")
    blocks = {}
    for e in header["blocks"]:
        blocks[e["name"]] = flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(float)
    return header, blocks


def network_from_blocks(spec: NetworkSpec, blocks: dict[str, np.ndarray]) -> Network:
    net = Network.init(spec, 0)
    for key, _ in list(net.named_parameters()):
        net.set(key, blocks[key])
    net.version = 0
    return net
