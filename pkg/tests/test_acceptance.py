"""Release gate: one test per acceptance criterion.

Every test prints a single ``criterion N: PASS|FAIL`` line (visible with
``-s`` or in the captured output of a failure) and then asserts, so the
pytest verdict and the printed line always agree.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from cfrep import metrics
from cfrep.data import generate_synthetic, load_csv, schema_from_file, split
from cfrep.experiment import load_config, run_experiment
from cfrep.genmodel import VaeBackend, VaeTrainConfig, train_cvae, train_dcevae
from cfrep.methods import TrainMethod, train_method
from cfrep.nn import DenseNet
from cfrep.representation import PathSpec, representation_matrix
from cfrep.scm import ScmBackend, synthetic_scm

from helpers import random_additive_scm, sample_rows
from test_nn import (ACTIVATIONS, _backprop_loss, _loss_through_net,
                     _num_grad, _rel_err)
from test_representation import _example2_backend

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# Reference synthetic-benchmark table: method -> (mse mean, mse std,
# te mean, te std); a te of None means exactly zero (below 1e-9).
EXPECTED_TABLE = {
    "UF": (0.0172, 0.0009, 1.2499, 0.0093),
    "CA": (0.3467, 0.0208, 0.5372, 0.0057),
    "CE": (0.7868, 0.0556, None, None),
    "CR": (0.8598, 0.0521, 0.2572, 0.0036),
    "OURS": (0.4739, 0.0202, None, None),
}


def _verdict(number: int, problems: list[str], detail: str) -> None:
    status = "FAIL" if problems else "PASS"
    text = "; ".join(problems) if problems else detail
    print(f"criterion {number}: {status} ({text})")
    assert not problems, text


def _random_counterfactual_levels(a, levels, rng):
    shift = rng.integers(1, levels, size=a.shape)
    return (a + shift) % levels


def test_criterion_1_synthetic_benchmark_table(tmp_path):
    start = time.perf_counter()
    cfg = load_config(FIXTURES / "synthetic.yaml")
    artifacts = run_experiment(cfg, tmp_path / "run")
    elapsed = time.perf_counter() - start

    got = {(r["method"], r["metric"], r["group"]): r["mean"]
           for r in artifacts.report.rows()}
    problems = []
    for name, (mse_m, mse_s, te_m, te_s) in EXPECTED_TABLE.items():
        mse = got[(name, "mse", "")]
        if abs(mse - mse_m) > max(3 * mse_s, 0.05):
            problems.append(f"{name} mse {mse:.4f} vs {mse_m:.4f}")
        te = got[(name, "te", "")]
        if te_m is None:
            if not te < 1e-9:
                problems.append(f"{name} te {te:.3g} expected ~0")
        elif abs(te - te_m) > max(3 * te_s, 0.05):
            problems.append(f"{name} te {te:.4f} vs {te_m:.4f}")
    if elapsed >= 30:
        problems.append(f"runtime {elapsed:.1f}s exceeds 30s")
    _verdict(1, problems,
             f"five methods within tolerance in {elapsed:.1f}s")


def test_criterion_2_counterfactual_invariance_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(321)
    worst = 0.0
    for _ in range(1000):
        scm = random_additive_scm(rng)
        backend = ScmBackend(scm, mode="additive")
        X, a, _ = sample_rows(scm, 3, rng)
        U = backend.abduct(X, a)
        a_cf = _random_counterfactual_levels(a, scm.sensitive_levels, rng)
        X_cf = backend.generate(U, a_cf.astype(np.float64))
        r_f = representation_matrix(backend, X, a)
        r_c = representation_matrix(backend, X_cf, a_cf)
        w = rng.standard_normal(r_f.shape[1])
        worst = max(worst, float(np.max(np.abs(r_f @ w - r_c @ w))))

    # learned backends: representations built from a shared u must agree
    # bit for bit between the factual and counterfactual views
    data = load_csv(FIXTURES / "law_fixture.csv",
                    schema_from_file(FIXTURES / "law_fixture_schema.yaml"))
    vae_cfg = VaeTrainConfig(latent_dim=3, latent_alpha=2, latent_beta=2,
                             hidden=(16,), batch_size=64, max_epochs=3,
                             patience=3, use_label=False)
    bitwise = True
    for trainer in (train_cvae, train_dcevae):
        backend = VaeBackend(trainer(data, vae_cfg, 0))
        U = backend.abduct(data.X, data.a)
        a_cf = np.where(data.a == 0, 1.0, 0.0)
        X_cf = backend.generate(U, a_cf)
        r_f = representation_matrix(backend, data.X, data.a, u=U)
        r_c = representation_matrix(backend, X_cf, a_cf.astype(np.int64),
                                    u=U)
        bitwise = bitwise and np.array_equal(r_f, r_c)
    elapsed = time.perf_counter() - start

    problems = []
    if not worst < 1e-9:
        problems.append(f"prediction gap {worst:.3g} over random models")
    if not bitwise:
        problems.append("learned-backend shared-u representations differ")
    if elapsed >= 60:
        problems.append(f"runtime {elapsed:.1f}s exceeds 60s")
    _verdict(2, problems,
             f"1000 models, worst gap {worst:.3g}, learned backends "
             f"bit-identical, {elapsed:.1f}s")


def test_criterion_3_path_specific_invariance_suite():
    rng = np.random.default_rng(5150)

    # fixed two-feature chain with a direct and a mediated sensitive path;
    # factual and counterfactual views share the exogenous assignment
    backend = _example2_backend()
    path = PathSpec(off_path_features=("X1",))
    worst = 0.0
    for _ in range(200):
        u = rng.normal(size=(4, 2))
        a = rng.integers(0, 2, size=4)
        X = backend.generate(u, a.astype(np.float64))
        a_cf = 1.0 - a
        X_pcf = backend.generate(u, a_cf, clamp=([0], X[:, [0]]))
        r_f = representation_matrix(backend, X, a, path=path, u=u)
        r_c = representation_matrix(backend, X_pcf, a_cf.astype(np.int64),
                                    path=path, u=u)
        worst = max(worst, float(np.max(np.abs(r_f - r_c))))

    # randomized off-path subsets over random models
    exact_empty = True
    for _ in range(200):
        scm = random_additive_scm(rng)
        b = ScmBackend(scm, mode="additive")
        X, a, _ = sample_rows(scm, 3, rng)
        U = b.abduct(X, a)
        a_cf = _random_counterfactual_levels(a, scm.sensitive_levels, rng)

        k = int(rng.integers(0, len(b.feature_names) + 1))
        off = tuple(rng.choice(b.feature_names, size=k, replace=False))
        spec = PathSpec(off_path_features=off)
        if off:
            cols = np.concatenate([b.feature_cols(f) for f in off])
            X_pcf = b.generate(U, a_cf.astype(np.float64),
                               clamp=(cols, X[:, cols]))
        else:
            X_pcf = b.generate(U, a_cf.astype(np.float64))
        r_f = representation_matrix(b, X, a, path=spec, u=U)
        r_c = representation_matrix(b, X_pcf, a_cf, path=spec, u=U)
        worst = max(worst, float(np.max(np.abs(r_f - r_c))))

        plain = representation_matrix(b, X, a)
        empty = representation_matrix(b, X, a,
                                      path=PathSpec(off_path_features=()))
        exact_empty = exact_empty and np.array_equal(plain, empty)

    problems = []
    if not worst < 1e-9:
        problems.append(f"path-specific gap {worst:.3g}")
    if not exact_empty:
        problems.append("empty off-path set deviates from the plain "
                        "representation")
    _verdict(3, problems, f"worst path-specific gap {worst:.3g}, empty "
                          f"off-path set exact")


def test_criterion_4_counterfactual_engine_identities():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(1000):
        scm = random_additive_scm(rng)
        X, a, _ = sample_rows(scm, 2, rng)
        obs = {f: X[:, j] for j, f in enumerate(scm.feature_names)}
        obs[scm.sensitive] = a.astype(np.float64)
        u = scm.abduct_additive(obs)

        back = scm.counterfactual(obs, u, a.astype(np.float64))
        a_cf = _random_counterfactual_levels(a, scm.sensitive_levels, rng)
        cf = scm.counterfactual(obs, u, a_cf.astype(np.float64))
        cf_obs = {f: cf[f] for f in scm.feature_names}
        cf_obs[scm.sensitive] = a_cf.astype(np.float64)
        u2 = scm.abduct_additive(cf_obs)
        back2 = scm.counterfactual(cf_obs, u2, a.astype(np.float64))

        for j, f in enumerate(scm.feature_names):
            worst = max(worst, float(np.max(np.abs(back[f] - X[:, j]))),
                        float(np.max(np.abs(back2[f] - X[:, j]))))
        for name in scm.feature_exogenous_names:
            worst = max(worst, float(np.max(np.abs(u2[name] - u[name]))))

    problems = [] if worst < 1e-10 else \
        [f"round-trip/involution/consistency deviation {worst:.3g}"]
    _verdict(4, problems, f"1000 instances, worst deviation {worst:.3g}")


def test_criterion_5_gradient_checks():
    worst = 0.0
    for act in ACTIVATIONS:
        for loss_name in ("mse", "bce", "kl", "l2"):
            rng = np.random.default_rng(
                abs(hash((act, loss_name, "gate"))) % 2**32)
            done = 0
            while done < 100:
                din = int(rng.integers(1, 4))
                dh = int(rng.integers(1, 4))
                dout = int(rng.integers(1, 3)) * (2 if loss_name == "kl"
                                                  else 1)
                n = int(rng.integers(1, 4))
                net = DenseNet((din, dh, dout), (act, "identity"), rng)
                X = rng.normal(size=(n, din))
                if act == "relu":
                    z = X @ net.weights[0].T + net.biases[0]
                    if np.min(np.abs(z)) < 1e-4:
                        continue
                if loss_name == "bce":
                    target = rng.integers(0, 2, size=(n, dout)) \
                        .astype(np.float64)
                else:
                    target = rng.normal(size=(n, dout))
                _backprop_loss(net, X, loss_name, target)
                analytic = [g.copy() for g in net.grads()]
                for arr, got in zip(net.params(), analytic):
                    want = _num_grad(
                        lambda: _loss_through_net(net, X, loss_name, target),
                        arr)
                    worst = max(worst, _rel_err(got, want))
                done += 1

    problems = [] if worst < 1e-4 else [f"relative error {worst:.3g}"]
    _verdict(5, problems, f"16 layer/loss pairings x 100 cases, worst "
                          f"relative error {worst:.3g}")


def test_criterion_6_penalty_monotonicity():
    backend = ScmBackend(synthetic_scm(), mode="ground_truth")
    dataset = generate_synthetic(n=3000, seed=0)
    means = []
    for lam in (0.0, 0.01, 0.05, 0.25):
        tes = []
        for seed in (1, 2, 3, 4, 5):
            parts = split(dataset, {"train": 0.8, "test": 0.2}, seed)
            train, test = parts["train"], parts["test"]
            trained = train_method(TrainMethod(name="CR", cr_lambda=lam),
                                   backend, train, u_hint=train.exogenous)
            U = backend.abduct(test.X, test.a, u_hint=test.exogenous)
            a_cf = np.where(test.a == 0, 1.0, 0.0)
            X_cf = backend.generate(U, a_cf)
            preds = trained.predict(test.X, test.a, u_hint=test.exogenous)
            preds_cf = trained.predict_counterfactual(
                test.X, test.a, X_cf, a_cf.astype(np.int64),
                u_hint=test.exogenous)
            tes.append(metrics.total_effect(preds, preds_cf))
        means.append(float(np.mean(tes)))

    problems = []
    for prev, cur in zip(means, means[1:]):
        if cur > prev + 1e-12:
            problems.append(f"mean te increased {prev:.4f} -> {cur:.4f}")
    _verdict(6, problems, "mean te over lambda 0/0.01/0.05/0.25: "
             + " >= ".join(f"{m:.4f}" for m in means))


def test_criterion_7_generative_pipeline_fixtures(tmp_path):
    problems = []
    details = []
    for name in ("law_cvae.yaml", "adult_dcevae.yaml"):
        start = time.perf_counter()
        cfg = load_config(FIXTURES / name)
        artifacts = run_experiment(cfg, tmp_path / name.split(".")[0])
        elapsed = time.perf_counter() - start

        rows = artifacts.report.rows()
        labels = {s.label for s in cfg.methods}
        if {r["method"] for r in rows} != labels:
            problems.append(f"{name}: incomplete report")
        tes = {r["method"]: r["mean"] for r in rows
               if r["metric"] == "te" and r["group"] == ""}
        if not tes["OURS"] < tes["UF"]:
            problems.append(f"{name}: OURS te {tes['OURS']:.4f} not below "
                            f"UF te {tes['UF']:.4f}")
        smallest = sorted(tes, key=tes.get)[:2]
        if set(smallest) != {"OURS", "CE"}:
            problems.append(f"{name}: two smallest te are {smallest}")
        if elapsed >= 300:
            problems.append(f"{name}: runtime {elapsed:.1f}s exceeds 300s")
        details.append(f"{name} in {elapsed:.1f}s")
    _verdict(7, problems, "OURS and CE lead both fixture runs: "
             + ", ".join(details))


def test_criterion_8_metric_identities():
    rng = np.random.default_rng(2)
    worst = 0.0
    problems = []
    for _ in range(300):
        n = int(rng.integers(1, 200))
        levels = int(rng.integers(1, 6))
        a = rng.integers(0, levels, size=n)
        p = rng.normal(size=n)
        q = rng.normal(size=n)

        te = metrics.total_effect(p, q)
        by_group = metrics.group_total_effect(p, q, a)
        recombined = sum(v * int(np.sum(a == lvl))
                         for lvl, v in by_group.items()) / n
        worst = max(worst, abs(recombined - te))

        if abs(metrics.mse(p, q) - sum((pi - qi) ** 2
                                       for pi, qi in zip(p, q)) / n) > 1e-12:
            problems.append("mse deviates from the loop oracle")
        if abs(te - sum(abs(pi - qi) for pi, qi in zip(p, q)) / n) > 1e-12:
            problems.append("total effect deviates from the loop oracle")
        probs = rng.uniform(size=n)
        y01 = rng.integers(0, 2, size=n).astype(np.float64)
        looped = sum(float(pi >= 0.5) == yi for pi, yi in zip(probs, y01)) / n
        if metrics.accuracy(probs, y01) != looped:
            problems.append("accuracy deviates from the loop oracle")

    f, c = rng.normal(size=500), rng.normal(size=500)
    d = metrics.density_data(f, c, bins=8)
    for series, counts in ((f, d.factual_counts),
                           (c, d.counterfactual_counts)):
        manual = np.zeros(8, dtype=np.int64)
        for v in series:
            for b in range(8):  # last bin closed on the right
                below = v <= d.bin_edges[b + 1] if b == 7 \
                    else v < d.bin_edges[b + 1]
                if v >= d.bin_edges[b] and below:
                    manual[b] += 1
                    break
        if not np.array_equal(manual, counts):
            problems.append("density counts deviate from the loop oracle")

    if worst > 1e-12:
        problems.append(f"group recombination gap {worst:.3g}")
    _verdict(8, sorted(set(problems)),
             f"300 randomized inputs, recombination gap {worst:.3g}")
