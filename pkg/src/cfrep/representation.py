"""Counterfactually invariant representations over causal-model backends.

A backend (exact SCM adapter or trained generative model) exposes:

* ``levels``: number of sensitive-attribute values,
* ``abduct(X, a, u_hint=None, y=None)``: exogenous point assignment per row,
* ``generate(U, level, clamp=None)``: features regenerated under
  ``do(A = level)``, with optional (columns, values) clamping,
* ``reconstructs_factual``: True when the factual family member should be
  the model's own reconstruction (learned models) rather than the observed
  row (exact models, where abduction inverts generation),
* ``feature_names`` / ``feature_cols(name)``: encoded-column bookkeeping.

A representation concatenates [clamped passthrough block, symmetric summary
of the per-level counterfactual family, exogenous block]. Because the family
contains one member per sensitive level regardless of which level is factual,
the representation built from a counterfactual sample with the same exogenous
assignment is the same vector, which is what makes every downstream predictor
counterfactually fair by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SYMMETRIC_KINDS = ("mean", "elementwise_min", "elementwise_max", "sorted_concat")


class ReprError(Exception):
    pass


class ArityMismatch(ReprError):
    pass


class DimensionMismatch(ReprError):
    pass


class InvalidPathSpec(ReprError):
    pass


@dataclass(frozen=True)
class SymmetricFn:
    kind: str
    arity: int

    def __post_init__(self):
        if self.kind not in SYMMETRIC_KINDS:
            raise ReprError(f"unknown symmetric function kind {self.kind!r}")
        if self.arity < 1:
            raise ArityMismatch(f"arity must be >= 1, got {self.arity}")


@dataclass(frozen=True)
class PathSpec:
    """Features clamped to their factual values (off every unfair path)."""

    off_path_features: tuple[str, ...]


@dataclass(frozen=True)
class Representation:
    """One sample's representation, in [passthrough, summary, exogenous] order."""

    summary: np.ndarray
    exogenous: np.ndarray
    passthrough: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.passthrough, self.summary, self.exogenous])


def _canonical_rows(stack: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically, so reductions ignore input order.

    Sorting before reducing makes even non-associative reductions (float
    mean) bit-stable under permutation of the inputs.
    """
    if stack.shape[1] == 0:
        return stack
    order = np.lexsort(stack.T[::-1])
    return stack[order]


def _reduce(kind: str, stack: np.ndarray) -> np.ndarray:
    stack = _canonical_rows(stack)
    if kind == "mean":
        return np.add.reduce(stack, axis=0) / stack.shape[0]
    if kind == "elementwise_min":
        return np.minimum.reduce(stack, axis=0)
    if kind == "elementwise_max":
        return np.maximum.reduce(stack, axis=0)
    if kind == "sorted_concat":
        return stack.reshape(-1)
    raise ReprError(f"unknown symmetric function kind {kind!r}")


def apply_symmetric(s: SymmetricFn | str, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Permutation-invariant summary of equal-length vectors."""
    kind = s.kind if isinstance(s, SymmetricFn) else s
    if isinstance(s, SymmetricFn) and len(inputs) != s.arity:
        raise ArityMismatch(f"expected {s.arity} inputs, got {len(inputs)}")
    if not inputs:
        raise ArityMismatch("need at least one input vector")
    rows = [np.asarray(v, dtype=np.float64).ravel() for v in inputs]
    dim = rows[0].shape[0]
    if any(r.shape[0] != dim for r in rows):
        raise DimensionMismatch(f"input dimensions differ: {[r.shape[0] for r in rows]}")
    return _reduce(kind, np.vstack(rows))


def summary_width(kind: str, feature_dim: int, levels: int) -> int:
    return feature_dim * levels if kind == "sorted_concat" else feature_dim


def _off_path_cols(model, path: PathSpec | None) -> np.ndarray:
    if path is None or not path.off_path_features:
        return np.empty(0, dtype=np.int64)
    known = set(model.feature_names)
    unknown = [f for f in path.off_path_features if f not in known]
    if unknown:
        raise InvalidPathSpec(f"off-path entries are not feature columns: {unknown}")
    off = set(path.off_path_features)
    cols = [model.feature_cols(name) for name in model.feature_names if name in off]
    return np.concatenate(cols).astype(np.int64)


def counterfactual_family(model, X: np.ndarray, a: np.ndarray, U: np.ndarray,
                          clamp_cols: np.ndarray | None = None) -> list[np.ndarray]:
    """One generated feature matrix per sensitive level, ascending.

    For exact backends the factual level's rows are the observed features;
    learned backends use their own reconstruction so the family is exactly
    level-indexed model output.
    """
    X = np.asarray(X, dtype=np.float64)
    a = np.asarray(a, dtype=np.int64)
    clamp = None
    if clamp_cols is not None and clamp_cols.size:
        clamp = (clamp_cols, X[:, clamp_cols])
    members = []
    for lvl in range(model.levels):
        gen = model.generate(U, float(lvl), clamp)
        if not model.reconstructs_factual:
            gen = np.where((a == lvl)[:, None], X, gen)
        members.append(gen)
    return members


def _batch_summary(kind: str, members: list[np.ndarray]) -> np.ndarray:
    """Rowwise symmetric summary over family members."""
    L = len(members)
    if L == 0 or members[0].shape[1] == 0:
        n = members[0].shape[0] if members else 0
        width = 0 if not members else summary_width(kind, members[0].shape[1], L)
        return np.zeros((n, width))
    if L == 2 and kind == "mean":
        return (members[0] + members[1]) / 2.0
    if kind == "elementwise_min":
        return np.minimum.reduce(members)
    if kind == "elementwise_max":
        return np.maximum.reduce(members)
    stack = np.stack(members, axis=0)  # (L, n, d)
    n = stack.shape[1]
    out = np.empty((n, summary_width(kind, stack.shape[2], L)))
    for i in range(n):
        out[i] = _reduce(kind, stack[:, i, :])
    return out


def representation_matrix(model, X: np.ndarray, a: np.ndarray, kind: str = "mean",
                          path: PathSpec | None = None, u: np.ndarray | None = None,
                          u_hint: np.ndarray | None = None,
                          y: np.ndarray | None = None) -> np.ndarray:
    """Batched representations: rows of [passthrough, summary, exogenous].

    ``u`` short-circuits abduction with an explicit exogenous assignment;
    ``u_hint`` is forwarded to the backend's abduction (only backends without
    their own inversion consume it).
    """
    if kind not in SYMMETRIC_KINDS:
        raise ReprError(f"unknown symmetric function kind {kind!r}")
    X = np.asarray(X, dtype=np.float64)
    a = np.asarray(a, dtype=np.int64)
    U = np.asarray(u, dtype=np.float64) if u is not None else model.abduct(X, a, u_hint=u_hint, y=y)
    off_cols = _off_path_cols(model, path)
    on_cols = np.setdiff1d(np.arange(X.shape[1]), off_cols)
    members = counterfactual_family(model, X, a, U, clamp_cols=off_cols if off_cols.size else None)
    if off_cols.size:
        members = [m[:, on_cols] for m in members]
        passthrough = X[:, off_cols]
    else:
        passthrough = np.zeros((X.shape[0], 0))
    summary = _batch_summary(kind, members)
    return np.hstack([passthrough, summary, U])


def _single(model, x, a, kind, path, u):
    x = np.asarray(x, dtype=np.float64).ravel()[None, :]
    a_arr = np.asarray([a], dtype=np.int64)
    u_arr = None if u is None else np.asarray(u, dtype=np.float64).ravel()[None, :]
    off_cols = _off_path_cols(model, path)
    U = u_arr if u_arr is not None else model.abduct(x, a_arr)
    on_cols = np.setdiff1d(np.arange(x.shape[1]), off_cols)
    members = counterfactual_family(model, x, a_arr, U, clamp_cols=off_cols if off_cols.size else None)
    if off_cols.size:
        members = [m[:, on_cols] for m in members]
        passthrough = x[0, off_cols]
    else:
        passthrough = np.zeros(0)
    summary = _batch_summary(kind, members)[0]
    return Representation(summary=summary, exogenous=U[0], passthrough=passthrough)


def cf_representation(model, x, a, s: SymmetricFn | str = "mean",
                      u: np.ndarray | None = None) -> Representation:
    """Counterfactually invariant representation of one sample."""
    kind = s.kind if isinstance(s, SymmetricFn) else s
    if kind not in SYMMETRIC_KINDS:
        raise ReprError(f"unknown symmetric function kind {kind!r}")
    return _single(model, x, a, kind, None, u)


def pcf_representation(model, x, a, s: SymmetricFn | str, path: PathSpec,
                       u: np.ndarray | None = None) -> Representation:
    """Path-restricted variant: off-path features pass through clamped."""
    kind = s.kind if isinstance(s, SymmetricFn) else s
    if kind not in SYMMETRIC_KINDS:
        raise ReprError(f"unknown symmetric function kind {kind!r}")
    return _single(model, x, a, kind, path, u)
