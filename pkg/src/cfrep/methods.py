"""Downstream predictors and the training procedures they are fit under.

The predictors are deliberately small (linear and logistic regression); the
interesting part is what they are fed:

* ``UF``: raw features plus the sensitive attribute, no constraint.
* ``CA``: the same input space, but trained on model-generated rows for
  every sensitive level (counterfactual augmentation).
* ``ICA``: original rows plus the generated counterfactual rows.
* ``CE``: exogenous variables plus features the sensitive attribute cannot
  reach, so counterfactual substitution cannot move the prediction.
* ``CR``: raw inputs with a penalty on the norm of the factual-vs-
  counterfactual prediction gap.
* ``OURS``: the symmetric counterfactual representation.

``train_method`` returns the fitted predictor bundled with the closure that
maps raw ``(x, a)`` to the method's input space, so evaluation code treats
every method identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import sensitive_onehot
from .representation import (PathSpec, SYMMETRIC_KINDS, counterfactual_family,
                             representation_matrix)

METHOD_NAMES = ("UF", "CA", "ICA", "CE", "CR", "OURS")
PREDICTOR_FORMAT = "cfrep-predictor/1"


class MethodError(Exception):
    pass


class SingularSystem(MethodError):
    pass


class NonFiniteLoss(MethodError):
    pass


class DimensionMismatch(MethodError):
    pass


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float

    def predict(self, R: np.ndarray) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        if R.shape[1] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"{R.shape[1]} input columns for {self.weights.shape[0]} weights")
        return R @ self.weights + self.bias


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float

    def predict(self, R: np.ndarray) -> np.ndarray:
        """Class-1 probability."""
        R = np.asarray(R, dtype=np.float64)
        if R.shape[1] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"{R.shape[1]} input columns for {self.weights.shape[0]} weights")
        return nn.sigmoid(R @ self.weights + self.bias)


@dataclass(frozen=True)
class FitConfig:
    solver: str = "closed_form"  # closed_form | gradient
    learning_rate: float = 0.1
    epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("closed_form", "gradient"):
            raise MethodError(f"unknown solver {self.solver!r}")
        if self.epochs < 1:
            raise MethodError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise MethodError("learning rate must be positive")


@dataclass(frozen=True)
class TrainMethod:
    """A named training procedure plus its knobs.

    ``cr_lambda`` weighs the counterfactual-gap penalty (CR only).
    ``ica_attribute`` picks which sensitive value is paired with generated
    counterfactual rows: the value that generated them ("counterfactual",
    default) or the row's factual one ("factual").
    """

    name: str
    cr_lambda: float = 0.0
    symmetric: str = "mean"
    path: PathSpec | None = None
    ica_attribute: str = "counterfactual"

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise MethodError(f"unknown method {self.name!r}")
        if self.cr_lambda < 0:
            raise MethodError("cr_lambda must be >= 0")
        if self.symmetric not in SYMMETRIC_KINDS:
            raise MethodError(f"unknown symmetric function {self.symmetric!r}")
        if self.ica_attribute not in ("counterfactual", "factual"):
            raise MethodError(
                f"ica_attribute must be counterfactual or factual, "
                f"got {self.ica_attribute!r}")


def _check_xy(inputs: np.ndarray, targets: np.ndarray):
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if inputs.ndim != 2:
        raise MethodError(f"inputs must be 2-D, got shape {inputs.shape}")
    if inputs.shape[0] != targets.shape[0]:
        raise DimensionMismatch(
            f"{inputs.shape[0]} input rows vs {targets.shape[0]} targets")
    if inputs.shape[0] < 1:
        raise MethodError("need at least one training row")
    return inputs, targets


def _fit_linear_closed_form(inputs: np.ndarray, targets: np.ndarray) -> LinearModel:
    n = inputs.shape[0]
    Z = np.hstack([inputs, np.ones((n, 1))])
    gram = Z.T @ Z + 1e-8 * np.eye(Z.shape[1])
    try:
        theta = np.linalg.solve(gram, Z.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations unsolvable: {exc}") from exc
    return LinearModel(weights=theta[:-1], bias=float(theta[-1]))


def _cr_grad(pred: np.ndarray, pred_cf: np.ndarray, lam: float):
    """Value and (d_pred, d_pred_cf) of lam * ||pred - pred_cf||_2."""
    diff = pred - pred_cf
    norm = float(np.sqrt(np.sum(diff * diff)))
    if norm == 0.0 or lam == 0.0:
        return lam * norm, np.zeros_like(pred), np.zeros_like(pred)
    g = lam * diff / norm
    return lam * norm, g, -g


def _fit_gradient(kind: str, inputs: np.ndarray, targets: np.ndarray,
                  cfg: FitConfig, cf_inputs: np.ndarray | None = None,
                  lam: float = 0.0):
    """Full-batch descent; optionally with the counterfactual-gap penalty.

    The penalty is non-smooth where the gap vanishes, so a fixed step
    oscillates around the optimum with amplitude proportional to the step
    times ``lam``. When the penalty is active the fit keeps the fixed step
    for the first three quarters of the epochs (so the smooth part still
    converges), then decays it as 1/sqrt(k) and returns the average of the
    last-quarter iterates; without the penalty the plain fixed-step final
    iterate is kept.
    """
    n, d = inputs.shape
    w = np.zeros(d)
    b = 0.0
    penalized = cf_inputs is not None and lam > 0.0
    avg_from = cfg.epochs - max(1, cfg.epochs // 4) if penalized else cfg.epochs
    w_sum, b_sum, averaged = np.zeros(d), 0.0, 0
    for t in range(cfg.epochs):
        z = inputs @ w + b
        if kind == "logistic":
            p = nn.sigmoid(z)
            gz = (p - targets) / n
            out = p
        else:
            gz = 2.0 * (z - targets) / n
            out = z
        gw = inputs.T @ gz
        gb = float(np.sum(gz))
        if penalized:
            z_cf = cf_inputs @ w + b
            out_cf = nn.sigmoid(z_cf) if kind == "logistic" else z_cf
            _, d_out, d_out_cf = _cr_grad(out, out_cf, lam)
            if kind == "logistic":
                d_out = d_out * out * (1.0 - out)
                d_out_cf = d_out_cf * out_cf * (1.0 - out_cf)
            gw += inputs.T @ d_out + cf_inputs.T @ d_out_cf
            gb += float(np.sum(d_out) + np.sum(d_out_cf))
        step = cfg.learning_rate / np.sqrt(1.0 + t - avg_from) \
            if penalized and t >= avg_from else cfg.learning_rate
        w -= step * gw
        b -= step * gb
        if not (np.all(np.isfinite(w)) and np.isfinite(b)):
            raise NonFiniteLoss("parameters diverged during descent")
        if t >= avg_from:
            w_sum += w
            b_sum += b
            averaged += 1
    if penalized:
        w, b = w_sum / averaged, b_sum / averaged
    return LogisticModel(w, b) if kind == "logistic" else LinearModel(w, b)


def fit(model_kind: str, inputs: np.ndarray, targets: np.ndarray,
        cfg: FitConfig | None = None):
    """Fit a linear or logistic predictor. Deterministic given the config."""
    if model_kind not in ("linear", "logistic"):
        raise MethodError(f"unknown model kind {model_kind!r}")
    inputs, targets = _check_xy(inputs, targets)
    if cfg is None:
        cfg = FitConfig() if model_kind == "linear" else \
            FitConfig(solver="gradient", learning_rate=0.1, epochs=2000)
    if cfg.solver == "closed_form":
        if model_kind != "linear":
            raise MethodError("closed-form solving applies to linear models only")
        return _fit_linear_closed_form(inputs, targets)
    return _fit_gradient(model_kind, inputs, targets, cfg)


def fit_cr(model_kind: str, inputs: np.ndarray, cf_inputs: np.ndarray,
           targets: np.ndarray, lam: float, cfg: FitConfig | None = None):
    """Fit with the counterfactual-gap penalty (always gradient-based)."""
    if lam < 0:
        raise MethodError("penalty weight must be >= 0")
    inputs, targets = _check_xy(inputs, targets)
    cf_inputs = np.asarray(cf_inputs, dtype=np.float64)
    if cf_inputs.shape != inputs.shape:
        raise DimensionMismatch(
            f"counterfactual inputs {cf_inputs.shape} vs inputs {inputs.shape}")
    if cfg is None:
        cfg = FitConfig(solver="gradient", learning_rate=0.05, epochs=6000) \
            if model_kind == "linear" else \
            FitConfig(solver="gradient", learning_rate=0.1, epochs=2000)
    return _fit_gradient(model_kind, inputs, targets, cfg,
                         cf_inputs=cf_inputs, lam=lam)


# -- input builders -------------------------------------------------------------


def _raw_inputs(backend, X, a) -> np.ndarray:
    return np.hstack([np.asarray(X, dtype=np.float64),
                      sensitive_onehot(np.asarray(a, np.int64), backend.levels)])


def _ce_inputs(backend, X, a, u_hint=None) -> np.ndarray:
    U = backend.abduct(np.asarray(X, np.float64), np.asarray(a, np.int64),
                       u_hint=u_hint)
    cols = np.asarray(backend.nondescendant_cols, dtype=np.int64)
    return np.hstack([U, np.asarray(X, np.float64)[:, cols]])


def _ours_inputs(backend, X, a, method: TrainMethod, u_hint=None) -> np.ndarray:
    return representation_matrix(backend, X, a, kind=method.symmetric,
                                 path=method.path, u_hint=u_hint)


@dataclass
class TrainedMethod:
    """A fitted predictor plus the map from raw samples to its input space."""

    method: TrainMethod
    model: LinearModel | LogisticModel
    backend: object
    task: str
    input_space: str = "raw"

    def inputs(self, X, a, u_hint=None) -> np.ndarray:
        if self.method.name in ("UF", "CA", "ICA", "CR"):
            return _raw_inputs(self.backend, X, a)
        if self.method.name == "CE":
            return _ce_inputs(self.backend, X, a, u_hint=u_hint)
        return _ours_inputs(self.backend, X, a, self.method, u_hint=u_hint)

    def predict(self, X, a, u_hint=None) -> np.ndarray:
        """Regression value or class-1 probability per row."""
        return self.model.predict(self.inputs(X, a, u_hint=u_hint))

    def predict_counterfactual(self, X, a, X_cf, a_cf, u_hint=None) -> np.ndarray:
        """Prediction on the counterfactual sample sharing the factual row's
        exogenous assignment. The exogenous-plus-nondescendant method keeps
        its factual inputs: nothing it consumes changes under substitution."""
        if self.method.name == "CE":
            return self.predict(X, a, u_hint=u_hint)
        return self.predict(X_cf, a_cf, u_hint=u_hint)

    def training_loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        pred = self.model.predict(inputs)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        if self.task == "classification":
            eps = 1e-12
            p = np.clip(pred, eps, 1.0 - eps)
            return float(-np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p)))
        return float(np.mean((pred - targets) ** 2))


def _cf_levels_per_row(a: np.ndarray, levels: int) -> list[np.ndarray]:
    """j-th counterfactual level per row, levels != factual, ascending."""
    a = np.asarray(a, dtype=np.int64)
    ladder = np.tile(np.arange(levels), (a.shape[0], 1))
    keep = ladder != a[:, None]
    # each row keeps levels-1 entries, already ascending
    picked = ladder[keep].reshape(a.shape[0], levels - 1)
    return [picked[:, j].astype(np.float64) for j in range(levels - 1)]


def _augmented_rows(backend, data, method: TrainMethod, u_hint=None):
    """Generated training rows for the augmentation-style methods.

    Returns (X_rows, a_rows, y_rows). For the full-augmentation method the
    factual level's rows come from the model family (observed rows on exact
    backends, reconstructions on learned ones); labels are generated when the
    backend can produce them and the factual ones otherwise.
    """
    X, a, y = data.X, data.a, data.y
    U = backend.abduct(X, a, u_hint=u_hint, y=y)
    parts_X, parts_a, parts_y = [], [], []
    if method.name == "CA":
        members = counterfactual_family(backend, X, a, U)
        for lvl, member in enumerate(members):
            gen_y = backend.generate_label(U, float(lvl)) \
                if hasattr(backend, "generate_label") else None
            parts_X.append(member)
            parts_a.append(np.full(X.shape[0], lvl, dtype=np.int64))
            parts_y.append(y if gen_y is None else gen_y)
    else:  # ICA: originals plus counterfactual rows
        parts_X.append(X)
        parts_a.append(a)
        parts_y.append(y)
        for lvl_rows in _cf_levels_per_row(a, backend.levels):
            gen = backend.generate(U, lvl_rows)
            gen_y = backend.generate_label(U, lvl_rows) \
                if hasattr(backend, "generate_label") else None
            attr = lvl_rows.astype(np.int64) if method.ica_attribute == "counterfactual" \
                else a
            parts_X.append(gen)
            parts_a.append(attr)
            parts_y.append(y if gen_y is None else gen_y)
    return np.vstack(parts_X), np.concatenate(parts_a), np.concatenate(parts_y)


def train_method(method: TrainMethod, backend, data, cfg: FitConfig | None = None,
                 u_hint: np.ndarray | None = None) -> TrainedMethod:
    """Fit one method's predictor on a dataset through a causal backend."""
    if data.n == 0:
        raise MethodError("cannot train on an empty dataset")
    kind = "linear" if data.task == "regression" else "logistic"
    X, a, y = data.X, data.a, data.y

    if method.name in ("CA", "ICA"):
        Xr, ar, yr = _augmented_rows(backend, data, method, u_hint=u_hint)
        inputs = _raw_inputs(backend, Xr, ar)
        targets = yr
        model = fit(kind, inputs, targets, cfg)
        space = "raw"
    elif method.name == "CR":
        inputs = _raw_inputs(backend, X, a)
        U = backend.abduct(X, a, u_hint=u_hint, y=y)
        a_cf = _cf_levels_per_row(a, backend.levels)[0]
        X_cf = backend.generate(U, a_cf)
        cf_inputs = _raw_inputs(backend, X_cf, a_cf.astype(np.int64))
        model = fit_cr(kind, inputs, cf_inputs, y, method.cr_lambda, cfg)
        space = "raw"
    elif method.name == "UF":
        inputs = _raw_inputs(backend, X, a)
        model = fit(kind, inputs, y, cfg)
        space = "raw"
    elif method.name == "CE":
        inputs = _ce_inputs(backend, X, a, u_hint=u_hint)
        model = fit(kind, inputs, y, cfg)
        space = "exogenous+nondescendants"
    else:  # OURS
        inputs = _ours_inputs(backend, X, a, method, u_hint=u_hint)
        model = fit(kind, inputs, y, cfg)
        space = f"representation:{method.symmetric}"
    return TrainedMethod(method=method, model=model, backend=backend,
                         task=data.task, input_space=space)


def predictor_json(trained: TrainedMethod) -> str:
    doc = {
        "format": PREDICTOR_FORMAT,
        "method": trained.method.name,
        "input_space": trained.input_space,
        "model": "linear" if isinstance(trained.model, LinearModel) else "logistic",
        "weights": [float(v) for v in trained.model.weights],
        "bias": float(trained.model.bias),
    }
    return json.dumps(doc, indent=1) + "\n"


def save_predictor(path, trained: TrainedMethod) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(predictor_json(trained))


def load_predictor(path):
    """The bare model and its descriptor (re-binding to a backend is the
    caller's job, since backends are not stored with predictors)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != PREDICTOR_FORMAT:
        raise MethodError(f"{path}: not a predictor file")
    cls = LinearModel if doc["model"] == "linear" else LogisticModel
    model = cls(weights=np.asarray(doc["weights"], dtype=np.float64),
                bias=float(doc["bias"]))
    return model, {"method": doc["method"], "input_space": doc["input_space"]}
