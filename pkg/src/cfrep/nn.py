"""Dense feedforward nets with hand-rolled reverse-mode gradients and Adam.

Just enough machinery for the generative models: sequential dense stacks,
four losses (mse, bce-from-logits, standard-normal KL, pairwise L2 norm),
Xavier-uniform init, and an Adam optimizer. Everything is float64 numpy.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")
LOSS_KINDS = ("mse", "bce", "kl_gaussian_standard", "l2_pairwise")

CHECKPOINT_FORMAT = "cfrep-checkpoint/1"


class NnError(Exception):
    pass


class DimensionMismatch(NnError):
    pass


class NonFiniteGradient(NnError):
    pass


class CheckpointError(NnError):
    pass


@dataclass(frozen=True)
class LossSpec:
    kind: str
    weight: float

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise NnError(f"unknown loss kind {self.kind!r}")
        if self.weight < 0:
            raise NnError(f"loss weight must be nonnegative, got {self.weight}")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise NnError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "tanh":
        return 1.0 - out * out
    raise NnError(f"unknown activation {name!r}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def xavier_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseNet:
    """Sequential dense stack. Weight matrices are (out, in); biases (out,).

    ``forward`` keeps the last pass's cache for ``backward``; for graphs that
    reuse one net several times per step, use ``forward_cached`` /
    ``backward_cached`` with explicit cache objects. Parameter gradients
    accumulate in ``gw``/``gb`` until ``zero_grads``.
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        if len(dims) < 2:
            raise DimensionMismatch("need at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise DimensionMismatch(
                f"{len(dims) - 1} layers but {len(activations)} activations"
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise NnError(f"unknown activation {a!r}")
        self.dims = tuple(int(d) for d in dims)
        self.activations = tuple(activations)
        self.weights = [
            xavier_uniform(self.dims[i + 1], self.dims[i], rng) for i in range(len(self.dims) - 1)
        ]
        self.biases = [np.zeros(self.dims[i + 1]) for i in range(len(self.dims) - 1)]
        self.gw = [np.zeros_like(w) for w in self.weights]
        self.gb = [np.zeros_like(b) for b in self.biases]
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def forward_cached(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise DimensionMismatch(
                f"input has {X.shape[1]} columns, net expects {self.input_dim}"
            )
        cache = []
        out = X
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = out @ W.T + b
            a = _act(act, z)
            cache.append((out, z, a))
            out = a
        return (out[0] if squeeze else out), (cache, squeeze)

    def forward(self, X: np.ndarray) -> np.ndarray:
        out, self._cache = self.forward_cached(X)
        return out

    def backward_cached(self, cache, dout: np.ndarray, accumulate: bool = True) -> np.ndarray:
        layers, squeeze = cache
        d = np.asarray(dout, dtype=np.float64)
        if squeeze and d.ndim == 1:
            d = d[None, :]
        for i in range(len(self.weights) - 1, -1, -1):
            x_in, z, a = layers[i]
            d = d * _act_grad(self.activations[i], z, a)
            gw = d.T @ x_in
            gb = d.sum(axis=0)
            if accumulate:
                self.gw[i] += gw
                self.gb[i] += gb
            else:
                self.gw[i], self.gb[i] = gw, gb
            d = d @ self.weights[i]
        return d[0] if squeeze else d

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NnError("backward called before forward")
        return self.backward_cached(self._cache, dout)

    def zero_grads(self):
        for g in self.gw:
            g[...] = 0.0
        for g in self.gb:
            g[...] = 0.0

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def grads(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.gw, self.gb):
            out.extend((gw, gb))
        return out


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


# -- losses -------------------------------------------------------------------
# Batch convention: values are means over rows of per-row sums, so gradients
# carry the 1/n factor already.


def mse_loss(pred: np.ndarray, target: np.ndarray):
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise DimensionMismatch(f"mse shapes differ {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if logits.shape != target.shape:
        raise DimensionMismatch(f"bce shapes differ {logits.shape} vs {target.shape}")
    n = logits.shape[0]
    # log(1 + e^z) computed as max(z, 0) + log1p(e^{-|z|}) to dodge overflow.
    value = np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - target) / n
    return float(np.sum(value) / n), grad


def kl_gaussian_standard(mu: np.ndarray, log_var: np.ndarray):
    """KL(N(mu, e^log_var) || N(0, I)) summed over the last axis.

    1-D inputs give a scalar; 2-D inputs give one value per row.
    """
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise DimensionMismatch(f"kl shapes differ {mu.shape} vs {log_var.shape}")
    val = 0.5 * np.sum(np.exp(log_var) + mu * mu - 1.0 - log_var, axis=-1)
    return float(val) if val.ndim == 0 else val


def kl_gaussian_standard_grad(mu: np.ndarray, log_var: np.ndarray):
    """Gradients of the summed KL with respect to mu and log_var."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    return mu.copy(), 0.5 * (np.exp(log_var) - 1.0)


def l2_pairwise(y0: np.ndarray, y1: np.ndarray):
    """Euclidean norm of the flattened difference, with its gradients.

    The subgradient at zero difference is taken as 0.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    if y0.shape != y1.shape:
        raise DimensionMismatch(f"l2_pairwise shapes differ {y0.shape} vs {y1.shape}")
    diff = y0 - y1
    value = float(np.sqrt(np.sum(diff * diff)))
    if value == 0.0:
        zero = np.zeros_like(diff)
        return 0.0, zero, zero.copy()
    d0 = diff / value
    return value, d0, -d0


class Adam:
    """Standard Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise NnError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise DimensionMismatch(
                f"{len(grads)} gradients for {len(self.params)} parameters"
            )
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient in optimizer step")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def step(opt: Adam, grads: list[np.ndarray]):
    opt.step(grads)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, nets: dict[str, DenseNet], meta: dict | None = None):
    """Persist named nets plus metadata to one .npz archive.

    Written with fixed zip timestamps so identical parameters give identical
    bytes (np.savez would embed the wall clock).
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "nets": {
            name: {"dims": list(net.dims), "activations": list(net.activations)}
            for name, net in nets.items()
        },
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for name, net in nets.items():
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}/W{i}"] = W
            arrays[f"{name}/b{i}"] = b
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict]:
    """Rebuild nets from an archive, validating the format tag and shapes."""
    with np.load(path) as archive:
        if "__header__" not in archive:
            raise CheckpointError(f"{path}: not a checkpoint (no header)")
        header = json.loads(bytes(archive["__header__"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"{path}: format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
            )
        nets: dict[str, DenseNet] = {}
        rng = np.random.default_rng(0)  # immediately overwritten
        for name, arch in header["nets"].items():
            net = DenseNet(arch["dims"], arch["activations"], rng)
            for i in range(len(net.weights)):
                W = archive[f"{name}/W{i}"]
                b = archive[f"{name}/b{i}"]
                if W.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                    raise CheckpointError(
                        f"{path}: shape mismatch for {name} layer {i}"
                    )
                net.weights[i] = W.astype(np.float64)
                net.biases[i] = b.astype(np.float64)
            nets[name] = net
        return nets, header.get("meta", {})
