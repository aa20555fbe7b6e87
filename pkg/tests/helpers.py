"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from cfrep.scm import CausalGraph, Prior, Scm, StructuralEquation, Variable


def _linear_fn(bias: float, weights: np.ndarray):
    weights = np.asarray(weights, dtype=np.float64)

    def fn(*args):
        total = np.asarray(bias, dtype=np.float64)
        for w, v in zip(weights, args):
            total = total + w * np.asarray(v, dtype=np.float64)
        return total

    return fn


def random_additive_scm(rng: np.random.Generator, max_features: int = 6,
                        levels: int | None = None) -> Scm:
    """A random linear-additive model over <= 8 observable nodes.

    One sensitive node (2-4 levels unless pinned), 1..max_features features
    wired as a random DAG over earlier features plus optionally the sensitive
    node, and one label reading a random subset of features. Every feature
    and the label carries its own unit-normal noise term.
    """
    if levels is None:
        levels = int(rng.integers(2, 5))
    k = int(rng.integers(1, max_features + 1))
    feature_names = [f"X{i}" for i in range(k)]

    variables = [Variable("U_A", "exogenous"), Variable("A", "sensitive")]
    edges: list[tuple[str, str]] = [("U_A", "A")]
    equations = {
        "A": StructuralEquation("A", (), ("U_A",), lambda: 0.0, additive=True),
    }
    priors = {"U_A": Prior("categorical", tuple([1.0 / levels] * levels))}

    for i, name in enumerate(feature_names):
        u_name = f"U_{name}"
        variables += [Variable(u_name, "exogenous"), Variable(name, "feature")]
        priors[u_name] = Prior("normal", (0.0, 1.0))
        parents = [p for p in feature_names[:i] if rng.random() < 0.5]
        if rng.random() < 0.7 or not parents:
            parents = ["A"] + parents
        weights = rng.normal(0.0, 1.0, size=len(parents))
        equations[name] = StructuralEquation(
            name, tuple(parents), (u_name,),
            _linear_fn(float(rng.normal()), weights), additive=True,
        )
        edges += [(p, name) for p in parents] + [(u_name, name)]

    n_label_parents = int(rng.integers(1, k + 1))
    label_parents = list(rng.choice(feature_names, size=n_label_parents, replace=False))
    variables += [Variable("U_Y", "exogenous"), Variable("Y", "label")]
    priors["U_Y"] = Prior("normal", (0.0, 1.0))
    weights = rng.normal(0.0, 1.0, size=len(label_parents))
    equations["Y"] = StructuralEquation(
        "Y", tuple(label_parents), ("U_Y",),
        _linear_fn(float(rng.normal()), weights), additive=True,
    )
    edges += [(p, "Y") for p in label_parents] + [("U_Y", "Y")]

    graph = CausalGraph(variables, edges)
    return Scm(graph, equations, priors, sensitive_levels=levels)


def sample_rows(scm: Scm, n: int, rng: np.random.Generator):
    """(X, a, u_matrix) drawn from the model, in backend column order."""
    u = scm.sample_exogenous(n, rng)
    values = scm.simulate(u)
    X = np.column_stack([values[f] for f in scm.feature_names])
    a = values[scm.sensitive].astype(np.int64)
    U = np.column_stack([u[name] for name in scm.feature_exogenous_names])
    return X, a, U


def dataset_for_scm(scm: Scm, n: int, rng: np.random.Generator):
    """Sample a Dataset (with labels and retained noise) from any model."""
    from cfrep.data import ColumnSpec, Dataset, Schema, _blocks

    u = scm.sample_exogenous(n, rng)
    values = scm.simulate(u)
    X = np.column_stack([values[f] for f in scm.feature_names])
    a = values[scm.sensitive].astype(np.int64)
    y = values[scm.label]
    U = np.column_stack([u[name] for name in scm.feature_exogenous_names])

    cols = [ColumnSpec(f, "feature", "continuous") for f in scm.feature_names]
    if scm.sensitive_levels == 2:
        cols.append(ColumnSpec(scm.sensitive, "sensitive", "binary"))
    else:
        cols.append(ColumnSpec(
            scm.sensitive, "sensitive", "categorical",
            levels=tuple(str(i) for i in range(scm.sensitive_levels))))
    cols.append(ColumnSpec(scm.label, "label", "continuous"))
    schema = Schema(tuple(cols))
    return Dataset(X=X, a=a, y=y, schema=schema, blocks=_blocks(schema),
                   exogenous=U,
                   exogenous_names=scm.feature_exogenous_names)
