"""Structural causal models: graphs, equations, interventions, counterfactuals.

A model is a DAG over exogenous noise variables and observable nodes (one
sensitive attribute, features, one label), plus one structural equation per
observable and a prior per exogenous node.  The sensitive attribute is wired
as a passthrough of its own exogenous draw, so every observable is a
deterministic function of the exogenous assignment and interventions.

Everything here is float64 and vectorized: node values may be scalars or
aligned 1-D arrays, so a whole dataset simulates in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import yaml

KINDS = ("feature", "sensitive", "label", "exogenous")

SCM_FILE_FORMAT = 1


class ScmError(Exception):
    """Base class for structural-causal-model errors."""


class CycleDetected(ScmError):
    def __init__(self, edges):
        self.edges = tuple(edges)
        super().__init__(f"graph contains a cycle among edges {self.edges}")


class UnknownVariable(ScmError):
    pass


class InvalidGraph(ScmError):
    pass


class InvalidIntervention(ScmError):
    pass


class NonAdditiveEquation(ScmError):
    pass


class MissingExogenous(ScmError):
    pass


class IncompleteObservation(ScmError):
    pass


class EvaluationFailure(ScmError):
    pass


class ScmFileError(ScmError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidGraph(f"variable {self.name!r} has unknown kind {self.kind!r}")


class CausalGraph:
    """Directed acyclic graph over named, kinded variables.

    Construction validates uniqueness of names, edge endpoints, acyclicity,
    that exogenous nodes have no parents, and that every observable is
    reachable from an exogenous or sensitive root.
    """

    def __init__(self, variables: Sequence[Variable], edges: Sequence[tuple[str, str]]):
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise InvalidGraph(f"duplicate variable names: {dupes}")
        self.variables = tuple(variables)
        self._by_name = {v.name: v for v in variables}

        labels = [v.name for v in variables if v.kind == "label"]
        if len(labels) != 1:
            raise InvalidGraph(f"expected exactly one label variable, found {labels}")
        sensitives = [v.name for v in variables if v.kind == "sensitive"]
        if len(sensitives) != 1:
            raise InvalidGraph(f"expected exactly one sensitive variable, found {sensitives}")
        self.label = labels[0]
        self.sensitive = sensitives[0]

        for parent, child in edges:
            for end in (parent, child):
                if end not in self._by_name:
                    raise UnknownVariable(f"edge ({parent!r}, {child!r}) references unknown variable {end!r}")
            if self._by_name[child].kind == "exogenous":
                raise InvalidGraph(f"exogenous variable {child!r} cannot have parents")
        self.edges = tuple((p, c) for p, c in edges)

        self._parents: dict[str, list[str]] = {n: [] for n in names}
        self._children: dict[str, list[str]] = {n: [] for n in names}
        for p, c in self.edges:
            self._parents[c].append(p)
            self._children[p].append(c)

        self._topo = self._topological_sort()
        self._check_reachability()

    def _topological_sort(self) -> tuple[str, ...]:
        indeg = {v.name: len(self._parents[v.name]) for v in self.variables}
        ready = [v.name for v in self.variables if indeg[v.name] == 0]
        order: list[str] = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for child in self._children[node]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    ready.append(child)
        if len(order) != len(self.variables):
            stuck = {n for n, d in indeg.items() if d > 0}
            offending = [e for e in self.edges if e[0] in stuck and e[1] in stuck]
            raise CycleDetected(offending)
        return tuple(order)

    def _check_reachability(self):
        roots = {v.name for v in self.variables if v.kind in ("exogenous", "sensitive")}
        reached = set(roots)
        for node in self._topo:
            if node in reached:
                reached.update(self._children[node])
            elif any(p in reached for p in self._parents[node]):
                reached.add(node)
                reached.update(self._children[node])
        unreachable = [
            v.name for v in self.variables
            if v.kind in ("feature", "label") and v.name not in reached
        ]
        if unreachable:
            raise InvalidGraph(
                f"observable nodes unreachable from any exogenous/sensitive root: {unreachable}"
            )

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def kind_of(self, name: str) -> str:
        if name not in self._by_name:
            raise UnknownVariable(f"unknown variable {name!r}")
        return self._by_name[name].kind

    def parents(self, name: str) -> tuple[str, ...]:
        if name not in self._by_name:
            raise UnknownVariable(f"unknown variable {name!r}")
        return tuple(self._parents[name])

    def children(self, name: str) -> tuple[str, ...]:
        if name not in self._by_name:
            raise UnknownVariable(f"unknown variable {name!r}")
        return tuple(self._children[name])

    def topological_order(self) -> tuple[str, ...]:
        return self._topo

    def descendants(self, name: str) -> set[str]:
        """All nodes reachable from ``name`` by directed paths, excluding itself."""
        if name not in self._by_name:
            raise UnknownVariable(f"unknown variable {name!r}")
        out: set[str] = set()
        stack = list(self._children[name])
        while stack:
            node = stack.pop()
            if node not in out:
                out.add(node)
                stack.extend(self._children[node])
        return out


def topological_order(graph: CausalGraph) -> tuple[str, ...]:
    return graph.topological_order()


def descendants(graph: CausalGraph, name: str) -> set[str]:
    return graph.descendants(name)


@dataclass(frozen=True)
class StructuralEquation:
    """One observable's generating function.

    ``additive`` equations compute ``fn(*observable parents) + u`` with exactly
    one exogenous parent; general equations compute
    ``fn(*observable parents, *exogenous parents)`` directly.  Parent order is
    the declared order, and every value may be a scalar or an aligned array.
    """

    target: str
    parents: tuple[str, ...]
    exogenous: tuple[str, ...]
    fn: Callable[..., np.ndarray]
    additive: bool = False

    def __post_init__(self):
        if self.additive and len(self.exogenous) != 1:
            raise InvalidGraph(
                f"additive equation for {self.target!r} needs exactly one exogenous parent, "
                f"got {self.exogenous}"
            )


@dataclass(frozen=True)
class Prior:
    """Sampler spec for one exogenous node."""

    kind: str  # normal | bernoulli | uniform | categorical
    params: tuple

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "normal":
            mu, sigma = self.params
            return rng.normal(mu, sigma, size=n)
        if self.kind == "bernoulli":
            (p,) = self.params
            return (rng.random(n) < p).astype(np.float64)
        if self.kind == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, size=n)
        if self.kind == "categorical":
            probs = np.asarray(self.params, dtype=np.float64)
            return rng.choice(len(probs), size=n, p=probs).astype(np.float64)
        raise ScmError(f"unknown prior kind {self.kind!r}")


class Scm:
    """A complete structural causal model.

    ``equations`` must cover every non-exogenous node; ``priors`` must cover
    every exogenous node.  ``sensitive_levels`` is the number of values the
    sensitive attribute can take (levels are integers ``0..L-1``).
    """

    def __init__(
        self,
        graph: CausalGraph,
        equations: Mapping[str, StructuralEquation],
        priors: Mapping[str, Prior],
        sensitive_levels: int = 2,
    ):
        self.graph = graph
        self.equations = dict(equations)
        self.priors = dict(priors)
        if sensitive_levels < 2:
            raise InvalidGraph("sensitive attribute needs at least two levels")
        self.sensitive_levels = int(sensitive_levels)

        observables = {v.name for v in graph.variables if v.kind != "exogenous"}
        if set(self.equations) != observables:
            raise InvalidGraph(
                f"equations must cover exactly the non-exogenous nodes; "
                f"missing {sorted(observables - set(self.equations))}, "
                f"extra {sorted(set(self.equations) - observables)}"
            )
        exogenous = {v.name for v in graph.variables if v.kind == "exogenous"}
        if set(self.priors) != exogenous:
            raise InvalidGraph(
                f"priors must cover exactly the exogenous nodes; "
                f"missing {sorted(exogenous - set(self.priors))}, "
                f"extra {sorted(set(self.priors) - exogenous)}"
            )
        for name, eq in self.equations.items():
            if eq.target != name:
                raise InvalidGraph(f"equation keyed {name!r} targets {eq.target!r}")
            declared = set(eq.parents) | set(eq.exogenous)
            if declared != set(graph.parents(name)):
                raise InvalidGraph(
                    f"equation for {name!r} declares parents {sorted(declared)} but the "
                    f"graph has {sorted(graph.parents(name))}"
                )
            for e in eq.exogenous:
                if graph.kind_of(e) != "exogenous":
                    raise InvalidGraph(f"equation for {name!r} lists non-exogenous {e!r} as exogenous")

    # -- structure helpers ------------------------------------------------

    @property
    def sensitive(self) -> str:
        return self.graph.sensitive

    @property
    def label(self) -> str:
        return self.graph.label

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.graph.topological_order() if self.graph.kind_of(n) == "feature")

    @property
    def exogenous_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.graph.variables if v.kind == "exogenous")

    @property
    def feature_exogenous_names(self) -> tuple[str, ...]:
        """Exogenous parents of feature equations, in declaration order.

        These are the noise terms recoverable from features at inference time;
        the label's noise never enters a representation.
        """
        used: set[str] = set()
        for f in self.feature_names:
            used.update(self.equations[f].exogenous)
        return tuple(n for n in self.exogenous_names if n in used)

    # -- evaluation --------------------------------------------------------

    def _evaluate(self, available: dict, intervention: Mapping) -> dict:
        """Evaluate every computable node given partial inputs.

        Nodes whose required parents or exogenous values are absent are
        skipped (and stay unavailable for their children).
        """
        values = dict(available)
        for node in self.graph.topological_order():
            if self.graph.kind_of(node) == "exogenous":
                continue
            if node in intervention:
                values[node] = np.asarray(intervention[node], dtype=np.float64)
                continue
            eq = self.equations[node]
            needed = list(eq.parents) + list(eq.exogenous)
            if not all(p in values for p in needed):
                continue
            args = [values[p] for p in eq.parents]
            try:
                if eq.additive:
                    values[node] = np.asarray(eq.fn(*args), dtype=np.float64) + values[eq.exogenous[0]]
                else:
                    values[node] = np.asarray(
                        eq.fn(*args, *[values[e] for e in eq.exogenous]), dtype=np.float64
                    )
            except ScmError:
                raise
            except Exception as exc:
                raise EvaluationFailure(f"equation for {node!r} failed: {exc}") from exc
        return values

    def simulate(self, u: Mapping, intervention: Mapping | None = None) -> dict:
        """Full value assignment from an exogenous assignment plus interventions.

        ``u`` must cover every exogenous node; intervened nodes take their
        assigned values, all others follow their equations in topological
        order.  Returns a dict over all nodes (exogenous included).
        """
        intervention = dict(intervention or {})
        for name in intervention:
            if name not in self.graph:
                raise UnknownVariable(f"intervention targets unknown variable {name!r}")
            if self.graph.kind_of(name) == "exogenous":
                raise InvalidIntervention(f"cannot intervene on exogenous variable {name!r}")
        missing = [e for e in self.exogenous_names if e not in u]
        if missing:
            raise MissingExogenous(f"exogenous assignment missing {missing}")
        available = {e: np.asarray(u[e], dtype=np.float64) for e in self.exogenous_names}
        return self._evaluate(available, intervention)

    def abduct_additive(self, observation: Mapping) -> dict:
        """Recover exogenous values for every observed node's additive equation.

        For each observed node, ``u = value - g(observed parents)``.  Nodes
        absent from the observation are skipped, so their noise terms are
        simply omitted from the result (labels usually are, at inference).
        """
        out: dict = {}
        for node in self.graph.topological_order():
            if self.graph.kind_of(node) == "exogenous" or node not in observation:
                continue
            eq = self.equations[node]
            if not eq.additive:
                raise NonAdditiveEquation(
                    f"equation for {node!r} is not additive in a single exogenous term"
                )
            missing = [p for p in eq.parents if p not in observation]
            if missing:
                raise IncompleteObservation(
                    f"abduction for {node!r} needs observed parents {missing}"
                )
            args = [np.asarray(observation[p], dtype=np.float64) for p in eq.parents]
            base = np.asarray(eq.fn(*args), dtype=np.float64)
            out[eq.exogenous[0]] = np.asarray(observation[node], dtype=np.float64) - base
        return out

    def counterfactual(self, observation: Mapping, u: Mapping, a_cf, clamp: Mapping | None = None) -> dict:
        """Regenerate observables under ``do(A = a_cf)`` with noise held at ``u``.

        ``clamp`` optionally pins further nodes (off-path features) to fixed
        values.  ``u`` may be partial: a node whose noise is missing keeps its
        observed value when it is not downstream of any intervened node (the
        intervention cannot have changed it), and is omitted from the result
        otherwise, so a feature-only ``u`` yields a feature-only counterfactual.
        """
        intervention = {self.sensitive: a_cf}
        if clamp:
            for name in clamp:
                if name not in self.graph:
                    raise UnknownVariable(f"clamp targets unknown variable {name!r}")
                if self.graph.kind_of(name) != "feature":
                    raise InvalidIntervention(f"clamp target {name!r} is not a feature")
            intervention.update(clamp)
        available = {
            e: np.asarray(u[e], dtype=np.float64) for e in self.exogenous_names if e in u
        }
        affected: set[str] = set()
        for target in intervention:
            affected.add(target)
            affected |= self.graph.descendants(target)
        for node in self.graph.topological_order():
            if self.graph.kind_of(node) in ("feature", "label") and node in observation:
                if node not in affected:
                    available.setdefault(node, np.asarray(observation[node], dtype=np.float64))
        values = self._evaluate(available, intervention)
        return {
            n: values[n]
            for n in self.graph.topological_order()
            if self.graph.kind_of(n) != "exogenous" and n in values
        }

    def sample_exogenous(self, n: int, rng: np.random.Generator) -> dict:
        return {name: self.priors[name].sample(n, rng) for name in self.exogenous_names}


def simulate(scm: Scm, u: Mapping, intervention: Mapping | None = None) -> dict:
    return scm.simulate(u, intervention)


def abduct_additive(scm: Scm, observation: Mapping) -> dict:
    return scm.abduct_additive(observation)


def counterfactual(scm: Scm, observation: Mapping, u: Mapping, a_cf, clamp: Mapping | None = None) -> dict:
    return scm.counterfactual(observation, u, a_cf, clamp)


# -- bundled models ---------------------------------------------------------


def synthetic_scm() -> Scm:
    """Two-noise, one-feature, one-label benchmark model.

    A ~ Bernoulli(0.4) via its passthrough noise; X = sin(U1) + cos(U2*A) +
    A + 0.1; Y = 0.2*X**2 + 1.2*X + 0.2 (noise-free label).  X is not
    additive in its noise, so point abduction from (x, a) is unavailable;
    pipelines keep the generator's exogenous draws instead.
    """
    variables = [
        Variable("U_A", "exogenous"),
        Variable("U1", "exogenous"),
        Variable("U2", "exogenous"),
        Variable("A", "sensitive"),
        Variable("X", "feature"),
        Variable("Y", "label"),
    ]
    edges = [("U_A", "A"), ("A", "X"), ("U1", "X"), ("U2", "X"), ("X", "Y")]
    graph = CausalGraph(variables, edges)
    equations = {
        "A": StructuralEquation("A", (), ("U_A",), lambda: 0.0, additive=True),
        "X": StructuralEquation(
            "X", ("A",), ("U1", "U2"),
            lambda a, u1, u2: np.sin(u1) + np.cos(u2 * a) + a + 0.1,
        ),
        "Y": StructuralEquation("Y", ("X",), (), lambda x: 0.2 * x**2 + 1.2 * x + 0.2),
    }
    priors = {
        "U_A": Prior("bernoulli", (0.4,)),
        "U1": Prior("normal", (0.0, 1.0)),
        "U2": Prior("normal", (0.0, 1.0)),
    }
    return Scm(graph, equations, priors, sensitive_levels=2)


LAW_SCHOOL_LEVELS = ((0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0))


def law_school_scm(params: Sequence[float]) -> Scm:
    """Three additive equations driven by a composite 4-level sensitive node.

    ``params`` is (b_G, wq_G, ws_G, b_L, wq_L, ws_L, b_F, wq_F, ws_F): each of
    grade G, test score L, and outcome F gets a bias plus weights on the two
    binary components (q, s) packed into the sensitive level as q*2 + s.
    """
    params = [float(p) for p in params]
    if len(params) != 9:
        raise ScmError(f"law_school_scm expects 9 parameters, got {len(params)}")
    b_g, wq_g, ws_g, b_l, wq_l, ws_l, b_f, wq_f, ws_f = params

    def base(b, wq, ws):
        def fn(a):
            a = np.asarray(a, dtype=np.float64)
            q = np.floor_divide(a, 2.0)
            s = np.mod(a, 2.0)
            return b + wq * q + ws * s

        return fn

    variables = [
        Variable("U_QS", "exogenous"),
        Variable("U_G", "exogenous"),
        Variable("U_L", "exogenous"),
        Variable("U_F", "exogenous"),
        Variable("QS", "sensitive"),
        Variable("G", "feature"),
        Variable("L", "feature"),
        Variable("F", "label"),
    ]
    edges = [
        ("U_QS", "QS"),
        ("QS", "G"), ("U_G", "G"),
        ("QS", "L"), ("U_L", "L"),
        ("QS", "F"), ("U_F", "F"),
    ]
    graph = CausalGraph(variables, edges)
    equations = {
        "QS": StructuralEquation("QS", (), ("U_QS",), lambda: 0.0, additive=True),
        "G": StructuralEquation("G", ("QS",), ("U_G",), base(b_g, wq_g, ws_g), additive=True),
        "L": StructuralEquation("L", ("QS",), ("U_L",), base(b_l, wq_l, ws_l), additive=True),
        "F": StructuralEquation("F", ("QS",), ("U_F",), base(b_f, wq_f, ws_f), additive=True),
    }
    priors = {
        "U_QS": Prior("categorical", (0.25, 0.25, 0.25, 0.25)),
        "U_G": Prior("normal", (0.0, 1.0)),
        "U_L": Prior("normal", (0.0, 1.0)),
        "U_F": Prior("normal", (0.0, 1.0)),
    }
    return Scm(graph, equations, priors, sensitive_levels=4)


# -- file format --------------------------------------------------------------


def _prior_from_spec(name: str, spec) -> Prior:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ScmFileError(f"prior for {name!r} must be a mapping with a 'kind' key")
    kind = spec["kind"]
    try:
        if kind == "normal":
            return Prior("normal", (float(spec["mu"]), float(spec["sigma"])))
        if kind == "bernoulli":
            return Prior("bernoulli", (float(spec["p"]),))
        if kind == "uniform":
            return Prior("uniform", (float(spec["low"]), float(spec["high"])))
        if kind == "categorical":
            return Prior("categorical", tuple(float(p) for p in spec["probs"]))
    except KeyError as exc:
        raise ScmFileError(f"prior for {name!r} is missing parameter {exc}") from exc
    raise ScmFileError(f"prior for {name!r} has unknown kind {kind!r}")


def _linear_base(bias: float, weights: dict[str, float], effects, parent_order: tuple[str, ...], sensitive: str):
    effects_arr = None if effects is None else np.asarray(effects, dtype=np.float64)

    def fn(*args):
        total = np.asarray(bias, dtype=np.float64)
        for name, value in zip(parent_order, args):
            if name == sensitive:
                idx = np.asarray(value, dtype=np.int64)
                total = total + effects_arr[idx]
            else:
                total = total + weights[name] * np.asarray(value, dtype=np.float64)
        return total

    return fn


def scm_from_file(path) -> Scm:
    """Build an additive SCM from its YAML description.

    The file declares variables (with priors and, for the sensitive node, a
    level count), and one linear-additive equation per feature/label: a bias,
    optional weights on numeric parents, an optional per-level
    ``sensitive_effects`` list, and one exogenous term.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ScmFileError(f"{path}: expected a mapping at top level")
    if doc.get("format") != SCM_FILE_FORMAT:
        raise ScmFileError(f"{path}: expected format: {SCM_FILE_FORMAT}, got {doc.get('format')!r}")

    variables: list[Variable] = []
    priors: dict[str, Prior] = {}
    sensitive_name = None
    sensitive_levels = 2
    for entry in doc.get("variables", []):
        name, kind = entry.get("name"), entry.get("kind")
        if not name or kind not in KINDS:
            raise ScmFileError(f"{path}: bad variable entry {entry!r}")
        variables.append(Variable(name, kind))
        if kind == "exogenous":
            priors[name] = _prior_from_spec(name, entry.get("prior"))
        if kind == "sensitive":
            sensitive_name = name
            sensitive_levels = int(entry.get("levels", 2))
            sens_prior = entry.get(
                "prior", {"kind": "categorical", "probs": [1.0 / sensitive_levels] * sensitive_levels}
            )
            exo_name = f"U_{name}"
            variables.append(Variable(exo_name, "exogenous"))
            priors[exo_name] = _prior_from_spec(exo_name, sens_prior)
    if sensitive_name is None:
        raise ScmFileError(f"{path}: no sensitive variable declared")

    edges: list[tuple[str, str]] = [(f"U_{sensitive_name}", sensitive_name)]
    equations: dict[str, StructuralEquation] = {
        sensitive_name: StructuralEquation(
            sensitive_name, (), (f"U_{sensitive_name}",), lambda: 0.0, additive=True
        )
    }
    for entry in doc.get("equations", []):
        target = entry.get("target")
        if not target:
            raise ScmFileError(f"{path}: equation entry without target: {entry!r}")
        exo = entry.get("exogenous")
        if not exo:
            raise ScmFileError(f"{path}: equation for {target!r} needs an exogenous term")
        bias = float(entry.get("bias", 0.0))
        weights = {str(k): float(v) for k, v in (entry.get("weights") or {}).items()}
        effects = entry.get("sensitive_effects")
        if effects is not None and len(effects) != sensitive_levels:
            raise ScmFileError(
                f"{path}: sensitive_effects for {target!r} needs {sensitive_levels} entries"
            )
        parent_order = tuple(([sensitive_name] if effects is not None else []) + sorted(weights))
        equations[target] = StructuralEquation(
            target, parent_order, (str(exo),),
            _linear_base(bias, weights, effects, parent_order, sensitive_name),
            additive=True,
        )
        for p in parent_order:
            edges.append((p, target))
        edges.append((str(exo), target))

    graph = CausalGraph(variables, edges)
    return Scm(graph, equations, priors, sensitive_levels=sensitive_levels)


# -- array-facing backend ------------------------------------------------------


class ScmBackend:
    """Adapts an :class:`Scm` to the matrix interface the pipelines use.

    Rows of ``X`` follow ``feature_names`` order; ``abduct`` returns noise
    columns in ``exog_names`` order.  ``mode='additive'`` abducts from the
    sample; ``mode='ground_truth'`` requires the caller to supply the stored
    generator noise (for models whose equations are not invertible).
    """

    reconstructs_factual = False

    def __init__(self, scm: Scm, mode: str = "additive", generate_labels: bool = False):
        if mode not in ("additive", "ground_truth"):
            raise ScmError(f"unknown backend mode {mode!r}")
        self.scm = scm
        self.mode = mode
        self.generate_labels = generate_labels
        self.levels = scm.sensitive_levels
        self.feature_names = scm.feature_names
        self.exog_names = scm.feature_exogenous_names
        desc = scm.graph.descendants(scm.sensitive)
        self.nondescendant_cols = np.asarray(
            [j for j, f in enumerate(self.feature_names) if f not in desc], dtype=np.int64
        )

    @property
    def feature_dim(self) -> int:
        return len(self.feature_names)

    @property
    def exog_dim(self) -> int:
        return len(self.exog_names)

    def feature_cols(self, name: str) -> np.ndarray:
        try:
            return np.asarray([self.feature_names.index(name)], dtype=np.int64)
        except ValueError:
            raise UnknownVariable(f"no feature named {name!r}") from None

    def _observation(self, X: np.ndarray, a: np.ndarray) -> dict:
        obs = {f: X[:, j] for j, f in enumerate(self.feature_names)}
        obs[self.scm.sensitive] = np.asarray(a, dtype=np.float64)
        return obs

    def abduct(self, X: np.ndarray, a: np.ndarray, u_hint: np.ndarray | None = None,
               y: np.ndarray | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.mode == "ground_truth":
            if u_hint is None:
                raise ScmError(
                    "ground-truth backend has no abduction; supply the stored exogenous values"
                )
            return np.asarray(u_hint, dtype=np.float64)
        u = self.scm.abduct_additive(self._observation(X, a))
        return np.column_stack([u[name] for name in self.exog_names])

    def _u_dict(self, U: np.ndarray) -> dict:
        U = np.asarray(U, dtype=np.float64)
        return {name: U[:, j] for j, name in enumerate(self.exog_names)}

    def generate(self, U: np.ndarray, level, clamp: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        """Feature matrix regenerated from noise ``U`` under ``do(A = level)``.

        ``level`` may be a scalar or per-row array; ``clamp`` is an optional
        (column indices, values matrix) pair pinning off-path features.
        """
        clamp_map = None
        if clamp is not None:
            cols, vals = clamp
            vals = np.asarray(vals, dtype=np.float64)
            clamp_map = {self.feature_names[c]: vals[:, k] for k, c in enumerate(cols)}
        values = self.scm.counterfactual({}, self._u_dict(U), level, clamp_map)
        return np.column_stack([values[f] for f in self.feature_names])

    def generate_label(self, U: np.ndarray, level) -> np.ndarray | None:
        if not self.generate_labels:
            return None
        values = self.scm.counterfactual({}, self._u_dict(U), level)
        if self.scm.label not in values:
            return None
        return np.asarray(values[self.scm.label], dtype=np.float64)
