from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from cfrep import nn
from cfrep.data import generate_synthetic, load_csv, schema_from_file, split
from cfrep.genmodel import (
    Cvae,
    Dcevae,
    DimensionMismatch,
    EmptyDataset,
    GenModelError,
    VaeBackend,
    VaeTrainConfig,
    _group_loss,
    layout_from_dataset,
    load_model,
    save_model,
    train_cvae,
    train_dcevae,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

SMALL = dict(latent_dim=3, latent_alpha=2, latent_beta=2, hidden=(16,),
             batch_size=64, max_epochs=30, patience=5)


def _law_data():
    schema = schema_from_file(FIXTURES / "law_fixture_schema.yaml")
    return load_csv(FIXTURES / "law_fixture.csv", schema)


class TestLayout:
    def test_law_fixture_layout(self):
        data = _law_data()
        layout = layout_from_dataset(data, VaeTrainConfig())
        assert layout.feature_dim == 5
        assert layout.alpha_cols == (0, 1, 2)  # 3-level categorical race
        assert layout.beta_cols == (3, 4)
        assert layout.label_kind == "mse"  # regression task, auto
        assert layout.levels == 2

    def test_ungrouped_schema_puts_everything_downstream(self):
        data = generate_synthetic(n=50)
        layout = layout_from_dataset(data, VaeTrainConfig())
        assert layout.alpha_cols == ()
        assert layout.beta_cols == (0,)

    def test_auto_head_kinds_follow_encodings(self):
        data = _law_data()
        layout = layout_from_dataset(data, VaeTrainConfig())
        kinds = {h.name: h.kind for h in layout.alpha_heads + layout.beta_heads}
        assert kinds == {"race": "softmax", "lsat": "mse", "gpa": "mse"}

    def test_declared_bce_keeps_multicategory_as_softmax(self):
        data = _law_data()
        layout = layout_from_dataset(
            data, VaeTrainConfig(l_alpha="bce", l_beta="mse", l_y="mse"))
        kinds = {h.name: h.kind for h in layout.alpha_heads}
        assert kinds == {"race": "softmax"}
        assert layout.label_kind == "mse"

    def test_fixture_configs_declare_documented_loss_kinds(self):
        from cfrep.experiment import load_config
        law = load_config(FIXTURES / "law_cvae.yaml")
        assert (law.backend.vae.l_alpha, law.backend.vae.l_beta,
                law.backend.vae.l_y) == ("bce", "mse", "mse")
        adult = load_config(FIXTURES / "adult_dcevae.yaml")
        assert (adult.backend.vae.l_alpha, adult.backend.vae.l_beta,
                adult.backend.vae.l_y) == ("bce", "bce", "bce")


class TestConfigValidation:
    def test_negative_weight_rejected(self):
        with pytest.raises(GenModelError):
            VaeTrainConfig(w_fair=-0.1)

    def test_zero_latent_rejected(self):
        with pytest.raises(GenModelError):
            VaeTrainConfig(latent_dim=0)

    def test_bad_batch_size_rejected(self):
        with pytest.raises(GenModelError):
            VaeTrainConfig(batch_size=0)

    def test_unknown_loss_kind_rejected(self):
        with pytest.raises(GenModelError):
            VaeTrainConfig(l_beta="huber")


class TestCvae:
    def test_training_reduces_loss_substantially(self):
        data = generate_synthetic(n=400, seed=0)
        cfg = VaeTrainConfig(**SMALL)
        model = train_cvae(data, cfg, seed=1)
        assert min(model.history) <= 0.7 * model.history[0]

    def test_abduction_is_deterministic(self):
        data = generate_synthetic(n=100, seed=0)
        model = train_cvae(data, VaeTrainConfig(**{**SMALL, "max_epochs": 3}), seed=2)
        u1 = model.abduct(data.X, data.a, y=data.y)
        u2 = model.abduct(data.X, data.a, y=data.y)
        np.testing.assert_array_equal(u1, u2)

    def test_zero_weight_encoder_returns_bias_head(self):
        data = generate_synthetic(n=20, seed=0)
        cfg = VaeTrainConfig(**SMALL)
        layout = layout_from_dataset(data, cfg)
        model = Cvae(layout, cfg, np.random.default_rng(0))
        for w in model.encoder.weights:
            w[...] = 0.0
        for b in model.encoder.biases:
            b[...] = 0.0
        bias = np.arange(2 * cfg.latent_dim) * 0.1
        model.encoder.biases[-1][...] = bias
        u = model.abduct(data.X, data.a, y=data.y)
        np.testing.assert_array_equal(u, np.tile(bias[:cfg.latent_dim],
                                                 (20, 1)))

    def test_abduction_matches_encoder_forward_oracle(self):
        data = generate_synthetic(n=30, seed=1)
        cfg = VaeTrainConfig(**SMALL)
        model = Cvae(layout_from_dataset(data, cfg), cfg,
                     np.random.default_rng(3))
        # inputs assemble as [alpha block, beta block, label, attribute]
        enc_in = np.hstack([data.X, data.y.reshape(-1, 1),
                            data.a.astype(np.float64).reshape(-1, 1)])
        want = model.encoder.forward(enc_in)[:, :cfg.latent_dim]
        got = model.abduct(data.X, data.a, y=data.y)
        np.testing.assert_array_equal(got, want)

    def test_eval_loss_matches_manual_oracle_without_fairness(self):
        data = generate_synthetic(n=60, seed=2)
        cfg = VaeTrainConfig(**SMALL, w_fair=0.0, w_beta=0.7, w_y=1.3, w_u=0.4)
        model = Cvae(layout_from_dataset(data, cfg), cfg,
                     np.random.default_rng(4))
        X, a, y = data.X, data.a.astype(np.float64), data.y
        got = model._step(X, a, y, np.random.default_rng(0), train=False)

        # eval path samples at the mean (eps = 0)
        mu = model.abduct(X, a, y=y)
        acol = a.reshape(-1, 1)
        l_b, _ = _group_loss(model.dec_beta.forward(np.hstack([mu, acol])),
                             X, model.layout.beta_heads)
        z = model.dec_y.forward(np.hstack([mu, acol])).ravel()
        l_y, _ = nn.mse_loss(z, y)
        # encode once more for log-var
        enc_in = np.hstack([X, y.reshape(-1, 1), acol])
        out = model.encoder.forward(enc_in)
        lv = out[:, cfg.latent_dim:]
        kl = float(np.mean(nn.kl_gaussian_standard(mu, lv)))
        want = cfg.w_beta * l_b + cfg.w_y * l_y + cfg.w_u * kl
        assert got == pytest.approx(want, rel=1e-12)

    def test_fairness_weight_moves_the_loss(self):
        data = generate_synthetic(n=60, seed=2)
        base = VaeTrainConfig(**SMALL, w_fair=0.0)
        fair = VaeTrainConfig(**SMALL, w_fair=2.0)
        m0 = Cvae(layout_from_dataset(data, base), base,
                  np.random.default_rng(4))
        m1 = Cvae(layout_from_dataset(data, fair), fair,
                  np.random.default_rng(4))
        X, a, y = data.X, data.a.astype(np.float64), data.y
        l0 = m0._step(X, a, y, np.random.default_rng(0), train=False)
        l1 = m1._step(X, a, y, np.random.default_rng(0), train=False)
        assert l1 > l0  # identical nets, so the gap is the fairness term

    def test_early_stopping_halts_near_best_and_restores_it(self):
        data = generate_synthetic(n=200, seed=3)
        cfg = VaeTrainConfig(**SMALL)
        parts = split(data, {"train": 0.8, "validation": 0.2}, seed=0)
        model = train_cvae(parts["train"], cfg, seed=5,
                           validation=parts["validation"])
        history = model.history
        assert len(history) - 1 <= cfg.max_epochs
        best_idx = int(np.argmin(history))
        # halted within patience epochs of the best observation
        assert (len(history) - 1) - best_idx <= cfg.patience
        # parameters restored to the best snapshot
        Xv, av, yv = (parts["validation"].X,
                      parts["validation"].a.astype(np.float64),
                      parts["validation"].y)
        final = model._step(Xv, av, yv, np.random.default_rng(0), train=False)
        assert final == pytest.approx(min(history), abs=1e-12)

    def test_wrong_feature_width_rejected(self):
        data = generate_synthetic(n=10, seed=0)
        cfg = VaeTrainConfig(**SMALL)
        model = Cvae(layout_from_dataset(data, cfg), cfg,
                     np.random.default_rng(0))
        with pytest.raises(DimensionMismatch):
            model.abduct(np.zeros((5, 3)), np.zeros(5), y=np.zeros(5))

    def test_empty_dataset_rejected(self):
        data = generate_synthetic(n=10, seed=0)
        empty = data.subset(np.array([], dtype=np.int64))
        with pytest.raises(EmptyDataset):
            train_cvae(empty, VaeTrainConfig(**SMALL), seed=0)


class TestDcevae:
    def _cfg(self, **kw):
        merged = {**SMALL, **kw}
        return VaeTrainConfig(**merged)

    def test_requires_grouped_schema(self):
        data = generate_synthetic(n=30, seed=0)
        cfg = self._cfg()
        with pytest.raises(GenModelError):
            Dcevae(layout_from_dataset(data, cfg), cfg,
                   np.random.default_rng(0))

    def test_upstream_decoder_ignores_sensitive_value(self):
        data = _law_data()
        cfg = self._cfg(max_epochs=3)
        model = train_dcevae(data, cfg, seed=1)
        u = model.abduct(data.X[:15], data.a[:15], y=data.y[:15])
        alpha0, _, _ = model.decode_counterfactual(u, 0)
        alpha1, _, _ = model.decode_counterfactual(u, 1)
        np.testing.assert_array_equal(alpha0, alpha1)

    def test_cvae_upstream_decoder_ignores_sensitive_value(self):
        data = _law_data()
        cfg = self._cfg(max_epochs=3)
        model = train_cvae(data, cfg, seed=1)
        u = model.abduct(data.X[:15], data.a[:15], y=data.y[:15])
        alpha0, _, _ = model.decode_counterfactual(u, 0)
        alpha1, _, _ = model.decode_counterfactual(u, 1)
        np.testing.assert_array_equal(alpha0, alpha1)

    def test_zero_tc_weight_leaves_discriminator_untrained(self):
        data = _law_data()
        cfg = self._cfg(w_h=0.0, max_epochs=3)
        model = train_dcevae(data, cfg, seed=7)
        fresh = Dcevae(model.layout, cfg, np.random.default_rng(7))
        for p, q in zip(model.discriminator.params(),
                        fresh.discriminator.params()):
            np.testing.assert_array_equal(p, q)

    def test_positive_tc_weight_trains_discriminator(self):
        data = _law_data()
        cfg = self._cfg(w_h=0.4, max_epochs=3)
        model = train_dcevae(data, cfg, seed=7)
        fresh = Dcevae(model.layout, cfg, np.random.default_rng(7))
        diffs = [np.max(np.abs(p - q)) for p, q in
                 zip(model.discriminator.params(),
                     fresh.discriminator.params())]
        assert max(diffs) > 0

    def test_zero_tc_training_step_matches_manual_loss(self):
        data = _law_data()
        cfg = self._cfg(w_h=0.0)
        model = Dcevae(layout_from_dataset(data, cfg), cfg,
                       np.random.default_rng(2))
        X = data.X[:40]
        a = data.a[:40].astype(np.float64)
        y = data.y[:40]
        for net in model._trainable():
            net.zero_grads()
        got = model._step(X, a, y, np.random.default_rng(11), train=True)

        # replay the same noise draw; parameters were not stepped inside
        rng = np.random.default_rng(11)
        mu_a, lv_a, _, mu_b, lv_b, _ = model._encode(X, a, y)
        eps_a = rng.standard_normal(mu_a.shape)
        eps_b = rng.standard_normal(mu_b.shape)
        u_a = mu_a + np.exp(0.5 * lv_a) * eps_a
        u_b = mu_b + np.exp(0.5 * lv_b) * eps_b
        acol = a.reshape(-1, 1)
        l_a, _ = _group_loss(model.dec_alpha.forward(u_a),
                             X[:, list(model.layout.alpha_cols)],
                             model.layout.alpha_heads)
        l_b, _ = _group_loss(model.dec_beta.forward(np.hstack([u_b, acol])),
                             X[:, list(model.layout.beta_cols)],
                             model.layout.beta_heads)
        z0 = model.dec_y.forward(np.hstack([u_a, u_b, acol])).ravel()
        l_y, _ = nn.mse_loss(z0, y)
        a_cf = np.where(a == 0, 1.0, 0.0)
        z1 = model.dec_y.forward(
            np.hstack([u_a, u_b, a_cf.reshape(-1, 1)])).ravel()
        l_fair = float(np.linalg.norm(z0 - z1))
        kl = float(np.mean(nn.kl_gaussian_standard(mu_a, lv_a))
                   + np.mean(nn.kl_gaussian_standard(mu_b, lv_b)))
        want = (cfg.w_alpha * l_a + cfg.w_beta * l_b + cfg.w_y * l_y
                + cfg.w_fair * l_fair + cfg.w_u * kl)
        assert got == pytest.approx(want, rel=1e-10)

    def test_discriminator_on_independent_latents_stays_near_chance(self):
        data = _law_data()
        cfg = self._cfg()
        model = Dcevae(layout_from_dataset(data, cfg), cfg,
                       np.random.default_rng(3))
        opt = nn.Adam(model.discriminator.params(), lr=1e-3)
        rng = np.random.default_rng(8)
        n = 512
        accs = []
        for _ in range(40):
            u_a = rng.standard_normal((n, cfg.latent_alpha))
            u_b = rng.standard_normal((n, cfg.latent_beta))
            perm = rng.permutation(n)
            model._disc_step(u_a, u_b, perm, opt)
            zj = model.discriminator.forward(np.hstack([u_a, u_b])).ravel()
            zp = model.discriminator.forward(
                np.hstack([u_a, u_b[perm]])).ravel()
            acc = 0.5 * (np.mean(zj >= 0.0) + np.mean(zp < 0.0))
            accs.append(acc)
        assert abs(np.mean(accs[-10:]) - 0.5) < 0.05


class TestBackend:
    def _trained(self, use_label=True):
        data = _law_data()
        cfg = VaeTrainConfig(**{**SMALL, "max_epochs": 5}, use_label=use_label)
        model = train_cvae(data, cfg, seed=4)
        return data, model, VaeBackend(model)

    def test_nondescendant_cols_are_the_alpha_block(self):
        _, model, backend = self._trained()
        np.testing.assert_array_equal(backend.nondescendant_cols, [0, 1, 2])
        assert backend.levels == 2
        assert backend.exog_dim == model.latent_width

    def test_factual_level_generation_matches_family_member(self):
        from cfrep.representation import counterfactual_family
        data, _, backend = self._trained()
        X, a = data.X[:25], data.a[:25]
        U = backend.abduct(X, a, y=data.y[:25])
        fam = counterfactual_family(backend, X, a, U)
        for lvl in (0, 1):
            member = fam[lvl]
            gen = backend.generate(U, float(lvl))
            np.testing.assert_array_equal(member, gen)

    def test_generate_clamp_overwrites_columns(self):
        data, _, backend = self._trained()
        U = backend.abduct(data.X[:10], data.a[:10], y=data.y[:10])
        pinned = np.full((10, 1), 9.125)
        out = backend.generate(U, 1.0, clamp=([3], pinned))
        np.testing.assert_array_equal(out[:, 3], np.full(10, 9.125))

    def test_generate_label_none_without_label_decoder(self):
        _, _, backend = self._trained(use_label=False)
        U = np.zeros((4, backend.exog_dim))
        assert backend.generate_label(U, 0.0) is None

    def test_regression_label_passes_through_raw(self):
        data, model, backend = self._trained()
        U = backend.abduct(data.X[:6], data.a[:6], y=data.y[:6])
        lab = backend.generate_label(U, 0.0)
        prob = backend.label_probability(U, 0.0)
        np.testing.assert_array_equal(lab, prob)  # mse head: no threshold

    def test_unknown_feature_name_rejected(self):
        _, _, backend = self._trained()
        with pytest.raises(DimensionMismatch):
            backend.feature_cols("salary")


class TestPersistence:
    def test_round_trip_preserves_behavior(self, tmp_path):
        data = _law_data()
        cfg = VaeTrainConfig(**{**SMALL, "max_epochs": 4})
        model = train_cvae(data, cfg, seed=6)
        path = tmp_path / "model.npz"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.family == model.family
        u0 = model.abduct(data.X, data.a, y=data.y)
        u1 = loaded.abduct(data.X, data.a, y=data.y)
        np.testing.assert_array_equal(u0, u1)
        g0 = VaeBackend(model).generate(u0, 1.0)
        g1 = VaeBackend(loaded).generate(u1, 1.0)
        np.testing.assert_array_equal(g0, g1)

    def test_dcevae_round_trip(self, tmp_path):
        data = _law_data()
        cfg = VaeTrainConfig(**{**SMALL, "max_epochs": 3})
        model = train_dcevae(data, cfg, seed=6)
        path = tmp_path / "model.npz"
        save_model(path, model)
        loaded = load_model(path)
        assert isinstance(loaded, Dcevae)
        np.testing.assert_array_equal(
            model.abduct(data.X[:8], data.a[:8], y=data.y[:8]),
            loaded.abduct(data.X[:8], data.a[:8], y=data.y[:8]))

    def test_non_model_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "weights.npz"
        nn.save_checkpoint(path, {"net": nn.DenseNet(
            (2, 2), ("identity",), np.random.default_rng(0))},
            {"family": "mystery"})
        with pytest.raises(GenModelError):
            load_model(path)
