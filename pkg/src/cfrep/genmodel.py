"""Learned causal models: conditional and disentangled VAEs over tabular data.

Two families share one training harness:

* ``Cvae``: a single encoder over all features (plus the sensitive value and
  optionally the label) with decoders f_alpha(u), f_beta(u, a), f_y(u, a).
* ``Dcevae``: split latents, with an encoder per feature group yielding
  (u_alpha, u_beta), decoders f_alpha(u_alpha), f_beta(u_beta, a),
  f_y(u_alpha, u_beta, a), and a discriminator that estimates the total
  correlation between the two latent blocks from within-batch permutations.

Both expose deterministic abduction (encoder means) and counterfactual
decoding under any sensitive value, so they plug into the same
representation and baseline machinery as exact structural models.
The "no label" variants drop the label from the encoder input and omit
f_y entirely; they are what label-free consumers train on.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, Schema

log = logging.getLogger(__name__)

MODEL_FAMILIES = ("cvae", "cvae-noY", "dcevae", "dcevae-noY")
GROUP_LOSS_KINDS = ("auto", "mse", "bce")


class GenModelError(Exception):
    pass


class NonFiniteLoss(GenModelError):
    pass


class EmptyDataset(GenModelError):
    pass


class DimensionMismatch(GenModelError):
    pass


@dataclass(frozen=True)
class VaeTrainConfig:
    """Hyperparameters for either VAE family.

    ``l_alpha`` / ``l_beta`` / ``l_y`` pick the reconstruction losses per
    feature group ("auto" derives them from column encodings: continuous
    columns get mse, binary get bce, categorical get a softmax
    cross-entropy head). ``w_h`` only matters for the disentangled family.
    """

    latent_dim: int = 10
    latent_alpha: int = 5
    latent_beta: int = 5
    hidden: tuple[int, ...] = (64, 64)
    use_label: bool = True
    l_alpha: str = "auto"
    l_beta: str = "auto"
    l_y: str = "auto"
    w_alpha: float = 1.0
    w_beta: float = 1.0
    w_y: float = 1.0
    w_u: float = 1.0
    w_fair: float = 0.15
    w_h: float = 0.4
    batch_size: int = 256
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10

    def __post_init__(self):
        for name in ("w_alpha", "w_beta", "w_y", "w_u", "w_fair", "w_h"):
            if getattr(self, name) < 0:
                raise GenModelError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise GenModelError("batch_size must be >= 1")
        if min(self.latent_dim, self.latent_alpha, self.latent_beta) < 1:
            raise GenModelError("latent dimensions must be >= 1")
        for name in ("l_alpha", "l_beta", "l_y"):
            if getattr(self, name) not in GROUP_LOSS_KINDS:
                raise GenModelError(f"{name} must be one of {GROUP_LOSS_KINDS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class GroupHead:
    """One feature's slice within a group matrix and its loss kind."""

    name: str
    start: int
    stop: int
    kind: str  # mse | bce | softmax


@dataclass(frozen=True)
class ModelLayout:
    """Column bookkeeping tying a trained model back to its schema."""

    feature_dim: int
    alpha_cols: tuple[int, ...]
    beta_cols: tuple[int, ...]
    alpha_heads: tuple[GroupHead, ...]
    beta_heads: tuple[GroupHead, ...]
    label_kind: str
    levels: int
    feature_names: tuple[str, ...]
    feature_col_map: dict[str, tuple[int, ...]] = field(hash=False)
    schema_hash: str = ""

    @property
    def width_alpha(self) -> int:
        return len(self.alpha_cols)

    @property
    def width_beta(self) -> int:
        return len(self.beta_cols)


def schema_hash(schema: Schema) -> str:
    doc = [
        {"name": c.name, "role": c.role, "encoding": c.encoding,
         "levels": list(c.levels) if c.levels else None, "group": c.group}
        for c in schema.columns
    ]
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _head_kind(encoding: str, declared: str) -> str:
    if declared == "mse":
        return "mse"
    if declared == "bce":
        # Multi-category columns always get a softmax head; a continuous
        # column in a group declared bce falls back to mse.
        return {"binary": "bce", "categorical": "softmax", "continuous": "mse"}[encoding]
    return {"continuous": "mse", "binary": "bce", "categorical": "softmax"}[encoding]


def _group_heads(blocks, declared: str) -> tuple[GroupHead, ...]:
    heads = []
    offset = 0
    for b in blocks:
        width = b.stop - b.start
        heads.append(GroupHead(b.name, offset, offset + width,
                               _head_kind(b.encoding, declared)))
        offset += width
    return tuple(heads)


def layout_from_dataset(dataset: Dataset, cfg: VaeTrainConfig) -> ModelLayout:
    schema = dataset.schema
    if schema.grouped:
        alpha_blocks = [b for b in dataset.blocks if b.group == "alpha"]
        beta_blocks = [b for b in dataset.blocks if b.group == "beta"]
    else:
        alpha_blocks = []
        beta_blocks = list(dataset.blocks)
    if cfg.l_y == "auto":
        label_kind = "mse" if dataset.task == "regression" else "bce"
    else:
        label_kind = cfg.l_y
    return ModelLayout(
        feature_dim=dataset.feature_dim,
        alpha_cols=tuple(int(c) for b in alpha_blocks for c in b.cols),
        beta_cols=tuple(int(c) for b in beta_blocks for c in b.cols),
        alpha_heads=_group_heads(alpha_blocks, cfg.l_alpha),
        beta_heads=_group_heads(beta_blocks, cfg.l_beta),
        label_kind=label_kind,
        levels=schema.sensitive_levels,
        feature_names=tuple(b.name for b in dataset.blocks),
        feature_col_map={b.name: tuple(int(c) for c in b.cols) for b in dataset.blocks},
        schema_hash=schema_hash(schema),
    )


def _mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int, rng) -> nn.DenseNet:
    dims = (in_dim, *hidden, out_dim)
    acts = ("relu",) * len(hidden) + ("identity",)
    return nn.DenseNet(dims, acts, rng)


def _col(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 1)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_ce(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of one-hot targets against softmax logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - logz
    value = float(-(target * log_p).sum() / n)
    grad = (_softmax(logits) - target) / n
    return value, grad


def _group_loss(out: np.ndarray, target: np.ndarray,
                heads: tuple[GroupHead, ...]) -> tuple[float, np.ndarray]:
    """Summed per-head reconstruction loss and its gradient wrt ``out``."""
    total = 0.0
    grad = np.zeros_like(out)
    for h in heads:
        sl = slice(h.start, h.stop)
        if h.kind == "mse":
            v, g = nn.mse_loss(out[:, sl], target[:, sl])
        elif h.kind == "bce":
            v, g = nn.bce_with_logits(out[:, sl], target[:, sl])
        else:
            v, g = _softmax_ce(out[:, sl], target[:, sl])
        total += v
        grad[:, sl] = g
    return total, grad


def _sample_heads(out: np.ndarray, heads: tuple[GroupHead, ...]) -> np.ndarray:
    """Decoder outputs mapped into feature space (thresholds and argmax)."""
    sampled = np.empty_like(out)
    for h in heads:
        sl = slice(h.start, h.stop)
        if h.kind == "mse":
            sampled[:, sl] = out[:, sl]
        elif h.kind == "bce":
            sampled[:, sl] = (nn.sigmoid(out[:, sl]) >= 0.5).astype(np.float64)
        else:
            block = out[:, sl]
            onehot = np.zeros_like(block)
            onehot[np.arange(block.shape[0]), block.argmax(axis=1)] = 1.0
            sampled[:, sl] = onehot
    return sampled


def _first_cf_level(a: np.ndarray, levels: int) -> np.ndarray:
    """Smallest sensitive level differing from each row's factual one."""
    if levels < 2:
        raise GenModelError("need at least two sensitive levels")
    return np.where(a == 0, 1.0, 0.0)


def _label_outputs(z: np.ndarray, kind: str) -> np.ndarray:
    return nn.sigmoid(z) if kind == "bce" else z


class _VaeCommon:
    """Shared inference surface; subclasses fill the nets and steps."""

    layout: ModelLayout
    cfg: VaeTrainConfig

    @property
    def use_label(self) -> bool:
        return self.cfg.use_label

    def _check_x(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.layout.feature_dim:
            raise DimensionMismatch(
                f"expected (n, {self.layout.feature_dim}) features, got {X.shape}")
        return X

    def _label_input(self, y, n: int) -> np.ndarray | None:
        if not self.use_label:
            return None
        if y is None:
            raise DimensionMismatch("this model variant encodes the label; pass y")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape[0] != n:
            raise DimensionMismatch(f"label length {y.shape[0]} != {n} rows")
        return y.reshape(-1, 1)

    def _assemble(self, alpha_out: np.ndarray | None, beta_out: np.ndarray,
                  n: int) -> np.ndarray:
        X = np.zeros((n, self.layout.feature_dim))
        if alpha_out is not None and self.layout.width_alpha:
            X[:, list(self.layout.alpha_cols)] = alpha_out
        if self.layout.width_beta:
            X[:, list(self.layout.beta_cols)] = beta_out
        return X

    def _level_col(self, a_cf, n: int) -> np.ndarray:
        arr = np.asarray(a_cf, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(n, float(arr))
        if arr.shape[0] != n:
            raise DimensionMismatch(f"sensitive array length {arr.shape[0]} != {n}")
        return arr.reshape(-1, 1)


class Cvae(_VaeCommon):
    """Single-latent conditional VAE: u ~ enc(x, (y), a)."""

    def __init__(self, layout: ModelLayout, cfg: VaeTrainConfig, rng):
        self.layout = layout
        self.cfg = cfg
        L = cfg.latent_dim
        enc_in = layout.feature_dim + (1 if cfg.use_label else 0) + 1
        self.encoder = _mlp(enc_in, cfg.hidden, 2 * L, rng)
        self.dec_alpha = _mlp(L, cfg.hidden, layout.width_alpha, rng) \
            if layout.width_alpha else None
        self.dec_beta = _mlp(L + 1, cfg.hidden, layout.width_beta, rng) \
            if layout.width_beta else None
        self.dec_y = _mlp(L + 1, cfg.hidden, 1, rng) if cfg.use_label else None

    @property
    def family(self) -> str:
        return "cvae" if self.use_label else "cvae-noY"

    @property
    def latent_width(self) -> int:
        return self.cfg.latent_dim

    def _nets(self) -> dict[str, nn.DenseNet]:
        nets = {"encoder": self.encoder}
        if self.dec_alpha is not None:
            nets["dec_alpha"] = self.dec_alpha
        if self.dec_beta is not None:
            nets["dec_beta"] = self.dec_beta
        if self.dec_y is not None:
            nets["dec_y"] = self.dec_y
        return nets

    def _trainable(self) -> list[nn.DenseNet]:
        return list(self._nets().values())

    def _encode(self, X: np.ndarray, a: np.ndarray, y) -> tuple:
        parts = [X[:, list(self.layout.alpha_cols)], X[:, list(self.layout.beta_cols)]]
        ycol = self._label_input(y, X.shape[0])
        if ycol is not None:
            parts.append(ycol)
        parts.append(_col(a))
        enc_in = np.hstack(parts)
        out, cache = self.encoder.forward_cached(enc_in)
        L = self.cfg.latent_dim
        return out[:, :L], out[:, L:], cache

    def abduct(self, X, a, y=None) -> np.ndarray:
        X = self._check_x(X)
        mu, _, _ = self._encode(X, np.asarray(a), y)
        return mu

    def decode_counterfactual(self, u, a_cf):
        """Sampled (x_alpha, x_beta, y_or_None) under sensitive value a_cf."""
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 2 or u.shape[1] != self.latent_width:
            raise DimensionMismatch(
                f"expected (n, {self.latent_width}) exogenous block, got {u.shape}")
        acol = self._level_col(a_cf, u.shape[0])
        alpha = None
        if self.dec_alpha is not None:
            alpha = _sample_heads(self.dec_alpha.forward(u), self.layout.alpha_heads)
        beta = _sample_heads(self.dec_beta.forward(np.hstack([u, acol])),
                             self.layout.beta_heads) \
            if self.dec_beta is not None else np.zeros((u.shape[0], 0))
        y_out = None
        if self.dec_y is not None:
            z = self.dec_y.forward(np.hstack([u, acol])).ravel()
            y_out = _label_outputs(z, self.layout.label_kind)
        return alpha, beta, y_out

    def _step(self, X, a, y, rng, *, train: bool) -> float:
        """One full forward (and backward when training); returns the loss."""
        cfg = self.cfg
        n = X.shape[0]
        L = cfg.latent_dim
        mu, log_var, enc_cache = self._encode(X, a, y)
        if train:
            eps = rng.standard_normal(mu.shape)
        else:
            eps = np.zeros_like(mu)
        sig = np.exp(0.5 * log_var)
        u = mu + sig * eps
        acol = _col(a)

        total = 0.0
        du = np.zeros_like(u)

        caches = []
        if self.dec_alpha is not None:
            out_a, cache_a = self.dec_alpha.forward_cached(u)
            l_a, g_a = _group_loss(out_a, X[:, list(self.layout.alpha_cols)],
                                   self.layout.alpha_heads)
            total += cfg.w_alpha * l_a
            caches.append((self.dec_alpha, cache_a, cfg.w_alpha * g_a, slice(0, L)))
        if self.dec_beta is not None:
            out_b, cache_b = self.dec_beta.forward_cached(np.hstack([u, acol]))
            l_b, g_b = _group_loss(out_b, X[:, list(self.layout.beta_cols)],
                                   self.layout.beta_heads)
            total += cfg.w_beta * l_b
            caches.append((self.dec_beta, cache_b, cfg.w_beta * g_b, slice(0, L)))

        if self.dec_y is not None:
            yv = np.asarray(y, dtype=np.float64).reshape(-1)
            out_y, cache_y = self.dec_y.forward_cached(np.hstack([u, acol]))
            z0 = out_y.ravel()
            if self.layout.label_kind == "bce":
                l_y, g_y = nn.bce_with_logits(z0, yv)
            else:
                l_y, g_y = nn.mse_loss(z0, yv)
            total += cfg.w_y * l_y
            dz0 = cfg.w_y * g_y

            # Counterfactual-label gap, pushed through probability space for
            # classifiers and raw outputs for regressors.
            a_cf = _first_cf_level(np.asarray(a), self.layout.levels)
            out_y1, cache_y1 = self.dec_y.forward_cached(
                np.hstack([u, a_cf.reshape(-1, 1)]))
            z1 = out_y1.ravel()
            p0 = _label_outputs(z0, self.layout.label_kind)
            p1 = _label_outputs(z1, self.layout.label_kind)
            l_fair, d0, d1 = nn.l2_pairwise(p0, p1)
            total += cfg.w_fair * l_fair
            if self.layout.label_kind == "bce":
                d0 = d0 * p0 * (1.0 - p0)
                d1 = d1 * p1 * (1.0 - p1)
            dz0 = dz0 + cfg.w_fair * d0
            dz1 = cfg.w_fair * d1
            caches.append((self.dec_y, cache_y, dz0.reshape(-1, 1), slice(0, L)))
            caches.append((self.dec_y, cache_y1, dz1.reshape(-1, 1), slice(0, L)))

        kl_rows = nn.kl_gaussian_standard(mu, log_var)
        l_u = float(np.mean(kl_rows))
        total += cfg.w_u * l_u

        if not np.isfinite(total):
            raise NonFiniteLoss(f"loss became non-finite: {total}")
        if not train:
            return total

        for net, cache, dout, u_slice in caches:
            din = net.backward_cached(cache, dout)
            du += din[:, u_slice]
        dmu_kl, dlv_kl = nn.kl_gaussian_standard_grad(mu, log_var)
        dmu = du + cfg.w_u * dmu_kl / n
        dlv = du * eps * 0.5 * sig + cfg.w_u * dlv_kl / n
        self.encoder.backward_cached(enc_cache, np.hstack([dmu, dlv]))
        return total


class Dcevae(_VaeCommon):
    """Disentangled VAE: separate latents per feature group plus a
    total-correlation discriminator tying them apart."""

    def __init__(self, layout: ModelLayout, cfg: VaeTrainConfig, rng):
        if not layout.width_alpha or not layout.width_beta:
            raise GenModelError(
                "disentangled family needs a grouped schema with non-empty "
                "alpha and beta feature groups")
        self.layout = layout
        self.cfg = cfg
        La, Lb = cfg.latent_alpha, cfg.latent_beta
        y_extra = 1 if cfg.use_label else 0
        self.enc_alpha = _mlp(layout.width_alpha + y_extra, cfg.hidden, 2 * La, rng)
        self.enc_beta = _mlp(layout.width_beta + 1 + y_extra, cfg.hidden, 2 * Lb, rng)
        self.dec_alpha = _mlp(La, cfg.hidden, layout.width_alpha, rng)
        self.dec_beta = _mlp(Lb + 1, cfg.hidden, layout.width_beta, rng)
        self.dec_y = _mlp(La + Lb + 1, cfg.hidden, 1, rng) if cfg.use_label else None
        self.discriminator = _mlp(La + Lb, (64, 64), 1, rng)

    @property
    def family(self) -> str:
        return "dcevae" if self.use_label else "dcevae-noY"

    @property
    def latent_width(self) -> int:
        return self.cfg.latent_alpha + self.cfg.latent_beta

    def _nets(self) -> dict[str, nn.DenseNet]:
        nets = {
            "enc_alpha": self.enc_alpha,
            "enc_beta": self.enc_beta,
            "dec_alpha": self.dec_alpha,
            "dec_beta": self.dec_beta,
            "discriminator": self.discriminator,
        }
        if self.dec_y is not None:
            nets["dec_y"] = self.dec_y
        return nets

    def _trainable(self) -> list[nn.DenseNet]:
        return [net for name, net in self._nets().items() if name != "discriminator"]

    def _encode(self, X: np.ndarray, a: np.ndarray, y) -> tuple:
        n = X.shape[0]
        ycol = self._label_input(y, n)
        in_a = X[:, list(self.layout.alpha_cols)]
        in_b = [X[:, list(self.layout.beta_cols)], _col(a)]
        if ycol is not None:
            in_a = np.hstack([in_a, ycol])
            in_b.append(ycol)
        out_a, cache_a = self.enc_alpha.forward_cached(in_a)
        out_b, cache_b = self.enc_beta.forward_cached(np.hstack(in_b))
        La, Lb = self.cfg.latent_alpha, self.cfg.latent_beta
        return (out_a[:, :La], out_a[:, La:], cache_a,
                out_b[:, :Lb], out_b[:, Lb:], cache_b)

    def abduct(self, X, a, y=None) -> np.ndarray:
        X = self._check_x(X)
        mu_a, _, _, mu_b, _, _ = self._encode(X, np.asarray(a), y)
        return np.hstack([mu_a, mu_b])

    def _split_u(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 2 or u.shape[1] != self.latent_width:
            raise DimensionMismatch(
                f"expected (n, {self.latent_width}) exogenous block, got {u.shape}")
        return u[:, :self.cfg.latent_alpha], u[:, self.cfg.latent_alpha:]

    def decode_counterfactual(self, u, a_cf):
        u_a, u_b = self._split_u(u)
        acol = self._level_col(a_cf, u_a.shape[0])
        alpha = _sample_heads(self.dec_alpha.forward(u_a), self.layout.alpha_heads)
        beta = _sample_heads(self.dec_beta.forward(np.hstack([u_b, acol])),
                             self.layout.beta_heads)
        y_out = None
        if self.dec_y is not None:
            z = self.dec_y.forward(np.hstack([u_a, u_b, acol])).ravel()
            y_out = _label_outputs(z, self.layout.label_kind)
        return alpha, beta, y_out

    def _disc_pass(self, u_a: np.ndarray, u_b: np.ndarray, perm: np.ndarray):
        """Discriminator BCE on joint (label 1) vs permuted (label 0) pairs."""
        joint = np.hstack([u_a, u_b])
        prod = np.hstack([u_a, u_b[perm]])
        zj, cache_j = self.discriminator.forward_cached(joint)
        zp, cache_p = self.discriminator.forward_cached(prod)
        lj, gj = nn.bce_with_logits(zj.ravel(), np.ones(len(zj)))
        lp, gp = nn.bce_with_logits(zp.ravel(), np.zeros(len(zp)))
        return 0.5 * (lj + lp), (0.5 * gj, cache_j), (0.5 * gp, cache_p)

    def _disc_step(self, u_a, u_b, perm, opt: nn.Adam) -> float:
        loss, (gj, cache_j), (gp, cache_p) = self._disc_pass(u_a, u_b, perm)
        self.discriminator.zero_grads()
        self.discriminator.backward_cached(cache_j, gj.reshape(-1, 1))
        self.discriminator.backward_cached(cache_p, gp.reshape(-1, 1))
        opt.step(self.discriminator.grads())
        return loss

    def _step(self, X, a, y, rng, *, train: bool, disc_opt: nn.Adam | None = None) -> float:
        cfg = self.cfg
        n = X.shape[0]
        La = cfg.latent_alpha
        mu_a, lv_a, cache_ea, mu_b, lv_b, cache_eb = self._encode(X, a, y)
        if train:
            eps_a = rng.standard_normal(mu_a.shape)
            eps_b = rng.standard_normal(mu_b.shape)
        else:
            eps_a = np.zeros_like(mu_a)
            eps_b = np.zeros_like(mu_b)
        sig_a = np.exp(0.5 * lv_a)
        sig_b = np.exp(0.5 * lv_b)
        u_a = mu_a + sig_a * eps_a
        u_b = mu_b + sig_b * eps_b
        acol = _col(a)

        if train and cfg.w_h > 0 and disc_opt is not None:
            self._disc_step(u_a, u_b, rng.permutation(n), disc_opt)

        total = 0.0
        du_a = np.zeros_like(u_a)
        du_b = np.zeros_like(u_b)
        caches = []

        out_a, cache_a = self.dec_alpha.forward_cached(u_a)
        l_a, g_a = _group_loss(out_a, X[:, list(self.layout.alpha_cols)],
                               self.layout.alpha_heads)
        total += cfg.w_alpha * l_a
        caches.append((self.dec_alpha, cache_a, cfg.w_alpha * g_a, "a", slice(0, La)))

        out_b, cache_b = self.dec_beta.forward_cached(np.hstack([u_b, acol]))
        l_b, g_b = _group_loss(out_b, X[:, list(self.layout.beta_cols)],
                               self.layout.beta_heads)
        total += cfg.w_beta * l_b
        caches.append((self.dec_beta, cache_b, cfg.w_beta * g_b, "b",
                       slice(0, cfg.latent_beta)))

        if self.dec_y is not None:
            yv = np.asarray(y, dtype=np.float64).reshape(-1)
            uy = np.hstack([u_a, u_b, acol])
            out_y, cache_y = self.dec_y.forward_cached(uy)
            z0 = out_y.ravel()
            if self.layout.label_kind == "bce":
                l_y, g_y = nn.bce_with_logits(z0, yv)
            else:
                l_y, g_y = nn.mse_loss(z0, yv)
            total += cfg.w_y * l_y
            dz0 = cfg.w_y * g_y

            a_cf = _first_cf_level(np.asarray(a), self.layout.levels)
            out_y1, cache_y1 = self.dec_y.forward_cached(
                np.hstack([u_a, u_b, a_cf.reshape(-1, 1)]))
            z1 = out_y1.ravel()
            p0 = _label_outputs(z0, self.layout.label_kind)
            p1 = _label_outputs(z1, self.layout.label_kind)
            l_fair, d0, d1 = nn.l2_pairwise(p0, p1)
            total += cfg.w_fair * l_fair
            if self.layout.label_kind == "bce":
                d0 = d0 * p0 * (1.0 - p0)
                d1 = d1 * p1 * (1.0 - p1)
            caches.append((self.dec_y, cache_y, (dz0 + cfg.w_fair * d0).reshape(-1, 1),
                           "ab", None))
            caches.append((self.dec_y, cache_y1, (cfg.w_fair * d1).reshape(-1, 1),
                           "ab", None))

        kl = float(np.mean(nn.kl_gaussian_standard(mu_a, lv_a))
                   + np.mean(nn.kl_gaussian_standard(mu_b, lv_b)))
        total += cfg.w_u * kl

        tc_backprop = None
        if train and cfg.w_h > 0:
            perm = rng.permutation(n)
            disc_loss, (gj, cache_j), (gp, cache_p) = self._disc_pass(u_a, u_b, perm)
            total += cfg.w_h * (-disc_loss)
            tc_backprop = (perm, gj, cache_j, gp, cache_p)

        if not np.isfinite(total):
            raise NonFiniteLoss(f"loss became non-finite: {total}")
        if not train:
            return total

        for net, cache, dout, branch, u_slice in caches:
            din = net.backward_cached(cache, dout)
            if branch == "a":
                du_a += din[:, u_slice]
            elif branch == "b":
                du_b += din[:, u_slice]
            else:
                du_a += din[:, :La]
                du_b += din[:, La:La + self.cfg.latent_beta]

        if tc_backprop is not None:
            perm, gj, cache_j, gp, cache_p = tc_backprop
            # Negated discriminator loss, pushed through frozen
            # discriminator weights into both latent blocks.
            dj = self.discriminator.backward_cached(
                cache_j, (-cfg.w_h * gj).reshape(-1, 1), accumulate=False)
            dp = self.discriminator.backward_cached(
                cache_p, (-cfg.w_h * gp).reshape(-1, 1), accumulate=False)
            du_a += dj[:, :La] + dp[:, :La]
            du_b += dj[:, La:]
            du_b[perm] += dp[:, La:]

        dmu_a_kl, dlv_a_kl = nn.kl_gaussian_standard_grad(mu_a, lv_a)
        dmu_b_kl, dlv_b_kl = nn.kl_gaussian_standard_grad(mu_b, lv_b)
        dmu_a = du_a + cfg.w_u * dmu_a_kl / n
        dlv_a = du_a * eps_a * 0.5 * sig_a + cfg.w_u * dlv_a_kl / n
        dmu_b = du_b + cfg.w_u * dmu_b_kl / n
        dlv_b = du_b * eps_b * 0.5 * sig_b + cfg.w_u * dlv_b_kl / n
        self.enc_alpha.backward_cached(cache_ea, np.hstack([dmu_a, dlv_a]))
        self.enc_beta.backward_cached(cache_eb, np.hstack([dmu_b, dlv_b]))
        return total


def _dataset_arrays(data: Dataset):
    if data.n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    return data.X, data.a.astype(np.float64), data.y.astype(np.float64)


def _snapshot(nets: list[nn.DenseNet]) -> list[np.ndarray]:
    return [p.copy() for net in nets for p in net.params()]


def _restore(nets: list[nn.DenseNet], saved: list[np.ndarray]) -> None:
    params = [p for net in nets for p in net.params()]
    for p, s in zip(params, saved):
        p[...] = s


def _train(model, data: Dataset, cfg: VaeTrainConfig, seed: int,
           validation: Dataset | None):
    X, a, y = _dataset_arrays(data)
    rng = np.random.default_rng(seed)
    trainable = model._trainable()
    opt = nn.Adam([p for net in trainable for p in net.params()], lr=cfg.lr)
    disc_opt = None
    if isinstance(model, Dcevae):
        disc_opt = nn.Adam(model.discriminator.params(), lr=cfg.lr)

    if validation is not None and validation.n:
        Xv, av, yv = _dataset_arrays(validation)
    else:
        Xv, av, yv = X, a, y

    def eval_loss() -> float:
        return model._step(Xv, av, yv, rng, train=False)

    best = eval_loss()
    best_params = _snapshot(trainable)
    since_best = 0
    history = [best]
    n = X.shape[0]
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for net in trainable:
                net.zero_grads()
            if isinstance(model, Dcevae):
                model._step(X[idx], a[idx], y[idx], rng, train=True, disc_opt=disc_opt)
            else:
                model._step(X[idx], a[idx], y[idx], rng, train=True)
            opt.step([g for net in trainable for g in net.grads()])
        val = eval_loss()
        history.append(val)
        if val < best - 1e-12:
            best = val
            best_params = _snapshot(trainable)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best val %.6f)", epoch + 1, best)
                break
    _restore(trainable, best_params)
    model.history = history
    return model


def train_cvae(data: Dataset, cfg: VaeTrainConfig, seed: int,
               validation: Dataset | None = None) -> Cvae:
    layout = layout_from_dataset(data, cfg)
    model = Cvae(layout, cfg, np.random.default_rng(seed))
    return _train(model, data, cfg, seed, validation)


def train_dcevae(data: Dataset, cfg: VaeTrainConfig, seed: int,
                 validation: Dataset | None = None) -> Dcevae:
    layout = layout_from_dataset(data, cfg)
    model = Dcevae(layout, cfg, np.random.default_rng(seed))
    return _train(model, data, cfg, seed, validation)


class VaeBackend:
    """Adapter exposing a trained VAE through the causal-backend protocol.

    The factual family member is the model's own reconstruction rather than
    the observed row, so that the per-level family depends only on (u, level)
    and representations built from any family member coincide exactly.
    """

    reconstructs_factual = True

    def __init__(self, model):
        self.model = model
        self.layout = model.layout
        self.levels = model.layout.levels
        self.feature_names = model.layout.feature_names
        self.exog_dim = model.latent_width
        self.exogenous_names = tuple(f"u{i}" for i in range(self.exog_dim))
        # Consumers that need sensitive-independent raw features get the
        # alpha group, whose decoder never sees the sensitive value.
        self.nondescendant_cols = np.asarray(self.layout.alpha_cols, dtype=np.int64)

    def feature_cols(self, name: str) -> np.ndarray:
        try:
            return np.asarray(self.layout.feature_col_map[name], dtype=np.int64)
        except KeyError:
            raise DimensionMismatch(f"no feature column named {name!r}") from None

    def abduct(self, X, a, u_hint=None, y=None) -> np.ndarray:
        return self.model.abduct(X, a, y=y)

    def generate(self, U, level, clamp=None) -> np.ndarray:
        U = np.asarray(U, dtype=np.float64)
        alpha, beta, _ = self.model.decode_counterfactual(U, level)
        X = self.model._assemble(alpha, beta, U.shape[0])
        if clamp is not None:
            cols, values = clamp
            X[:, np.asarray(cols, dtype=np.int64)] = values
        return X

    def generate_label(self, U, level) -> np.ndarray | None:
        _, _, y_out = self.model.decode_counterfactual(np.asarray(U, np.float64), level)
        if y_out is None:
            return None
        if self.layout.label_kind == "bce":
            return (y_out >= 0.5).astype(np.float64)
        return y_out

    def label_probability(self, U, level) -> np.ndarray | None:
        _, _, y_out = self.model.decode_counterfactual(np.asarray(U, np.float64), level)
        return y_out


def save_model(path, model) -> None:
    meta = {
        "family": model.family,
        "cfg": {**vars(model.cfg)} if not hasattr(model.cfg, "__dataclass_fields__")
        else {k: getattr(model.cfg, k) for k in model.cfg.__dataclass_fields__},
        "layout": {
            "feature_dim": model.layout.feature_dim,
            "alpha_cols": list(model.layout.alpha_cols),
            "beta_cols": list(model.layout.beta_cols),
            "alpha_heads": [vars(h) for h in model.layout.alpha_heads],
            "beta_heads": [vars(h) for h in model.layout.beta_heads],
            "label_kind": model.layout.label_kind,
            "levels": model.layout.levels,
            "feature_names": list(model.layout.feature_names),
            "feature_col_map": {k: list(v) for k, v in
                                model.layout.feature_col_map.items()},
            "schema_hash": model.layout.schema_hash,
        },
        "latent": {"cvae": model.cfg.latent_dim,
                   "alpha": model.cfg.latent_alpha,
                   "beta": model.cfg.latent_beta},
    }
    meta["cfg"]["hidden"] = list(model.cfg.hidden)
    nn.save_checkpoint(path, model._nets(), meta)


def load_model(path):
    nets, meta = nn.load_checkpoint(path)
    family = meta.get("family")
    if family not in MODEL_FAMILIES:
        raise GenModelError(f"unknown model family {family!r} in checkpoint")
    cfg_doc = dict(meta["cfg"])
    cfg_doc["hidden"] = tuple(cfg_doc["hidden"])
    cfg = VaeTrainConfig(**cfg_doc)
    lay = meta["layout"]
    layout = ModelLayout(
        feature_dim=lay["feature_dim"],
        alpha_cols=tuple(lay["alpha_cols"]),
        beta_cols=tuple(lay["beta_cols"]),
        alpha_heads=tuple(GroupHead(**h) for h in lay["alpha_heads"]),
        beta_heads=tuple(GroupHead(**h) for h in lay["beta_heads"]),
        label_kind=lay["label_kind"],
        levels=lay["levels"],
        feature_names=tuple(lay["feature_names"]),
        feature_col_map={k: tuple(v) for k, v in lay["feature_col_map"].items()},
        schema_hash=lay["schema_hash"],
    )
    cls = Cvae if family.startswith("cvae") else Dcevae
    model = cls(layout, cfg, np.random.default_rng(0))
    for name, net in model._nets().items():
        if name not in nets:
            raise GenModelError(f"checkpoint is missing net {name!r}")
        loaded = nets[name]
        for p, q in zip(net.params(), loaded.params()):
            if p.shape != q.shape:
                raise GenModelError(
                    f"checkpoint shape mismatch in {name}: {q.shape} vs {p.shape}")
            p[...] = q
    return model
