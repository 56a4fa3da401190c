"""Random-effects subnetwork: KL, modulation wiring, training, projection."""

import numpy as np
import pytest

from helpers import numeric_grad, rel_err
from mixedae.data import one_hot
from mixedae.errors import ConfigError, DataError
from mixedae.fixed import LabeledMatrix
from mixedae.nn import Tensor, dense_forward
from mixedae.nn import autodiff as ad
from mixedae.nn import functional as F
from mixedae.randomfx import (
    REConfig,
    REModel,
    _graph_cce,
    _graph_mse,
    _re_eval_components,
    encode_re,
    kl_gaussian,
    load_re,
    project_counterfactual,
    re_loss_components,
    save_re,
    softplus_inverse,
    train_random_effects,
)
from mixedae.rng import derive_rng


def tiny_cfg(**kw):
    base = dict(
        n_genes=6,
        n_batches=3,
        layer_units=(5, 4),
        n_latent=2,
        lambda_mse=1.0,
        lambda_cluster=0.5,
        lambda_kl=0.01,
        cluster_head_units=(3,),
        batch_size=8,
        epochs=3,
        patience=2,
        learning_rate=1e-3,
        seed=0,
    )
    base.update(kw)
    return REConfig(**base)


def toy_data(n=24, cfg=None, seed=0):
    cfg = cfg or tiny_cfg()
    rng = derive_rng(seed, "toy")
    x = rng.uniform(0.0, 1.0, size=(n, cfg.n_genes))
    batches = rng.integers(0, cfg.n_batches, size=n)
    z = one_hot(
        batches.astype(str).astype(object), sorted({str(b) for b in range(cfg.n_batches)})
    )
    return LabeledMatrix(x, z)


class TestKlGaussian:
    def test_worked_scalar_example(self):
        # q = N(0, 0.5^2) against p = N(0, 0.25^2):
        # log(0.25/0.5) + (0.25 + 0) / (2 * 0.0625) - 0.5
        want = np.log(0.25 / 0.5) + 0.25 / (2 * 0.0625) - 0.5
        np.testing.assert_allclose(kl_gaussian(0.0, 0.5, 0.0, 0.25), want)
        np.testing.assert_allclose(want, 0.8068528194400547)

    def test_zero_when_equal(self):
        assert kl_gaussian(1.3, 0.7, 1.3, 0.7) == 0.0
        assert kl_gaussian(1.3, 0.7, 1.3, 0.7, reversed_form=True) == 0.0

    def test_reversed_form_is_the_swapped_divergence(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mq, mp = rng.normal(size=2)
            sq, sp = rng.uniform(0.2, 2.0, size=2)
            # D(p||q) computed by swapping arguments of the standard form
            np.testing.assert_allclose(
                kl_gaussian(mq, sq, mp, sp, reversed_form=True),
                kl_gaussian(mp, sp, mq, sq),
                rtol=1e-12,
            )

    def test_monte_carlo_agreement(self):
        # E_q[log q - log p] estimated by sampling; the scale ratio is kept
        # moderate so the estimator's standard error stays well under the
        # tolerance (the log-ratio variance grows like (r^2-1)^2)
        rng = np.random.default_rng(1)
        mq, sq, mp, sp = 0.3, 0.8, -0.2, 0.7
        z = rng.normal(mq, sq, size=200_000)
        log_q = -0.5 * ((z - mq) / sq) ** 2 - np.log(sq) - 0.5 * np.log(2 * np.pi)
        log_p = -0.5 * ((z - mp) / sp) ** 2 - np.log(sp) - 0.5 * np.log(2 * np.pi)
        mc = (log_q - log_p).mean()
        np.testing.assert_allclose(kl_gaussian(mq, sq, mp, sp), mc, atol=8e-3)

    def test_elementwise_shape_and_validation(self):
        got = kl_gaussian(np.zeros((2, 3)), np.full((2, 3), 0.5), 0.0, 0.25)
        assert got.shape == (2, 3)
        with pytest.raises(DataError, match="positive"):
            kl_gaussian(0.0, 0.0, 0.0, 1.0)

    def test_softplus_inverse_round_trip(self):
        y = 0.125
        np.testing.assert_allclose(np.logaddexp(0.0, softplus_inverse(y)), y, rtol=1e-12)


class TestModelStructure:
    def test_posterior_init(self):
        cfg = tiny_cfg()
        model = REModel(cfg)
        assert model.effects_mult.loc.data.shape == (3, 5)
        np.testing.assert_allclose(model.effects_mult.scales(), cfg.prior_scale / 2.0)
        assert model.effects_mult.loc.data.std() < 3 * cfg.posterior_loc_init_scale
        # decoder owns its weights: no tying in this subnetwork
        assert all(layer.tied_source is None for layer in model.decoder)

    def test_modulation_wiring_matches_manual_chain(self):
        cfg = tiny_cfg()
        model = REModel(cfg)
        data = toy_data(n=5, cfg=cfg)
        batch_idx = np.argmax(data.batch_onehot, axis=1)
        out = model.forward(Tensor(data.x), batch_idx, train=False)

        h = dense_forward(model.encoder[0], data.x)
        h = h * (1.0 + model.effects_mult.loc.data[batch_idx]) + model.effects_add.loc.data[
            batch_idx
        ]
        for layer in model.encoder[1:]:
            h = dense_forward(layer, h)
        lat = dense_forward(model.latent_layer, h)
        rec = lat
        for layer in model.decoder:
            rec = dense_forward(layer, rec)
        np.testing.assert_allclose(out["latent"].data, lat, rtol=1e-12)
        np.testing.assert_allclose(out["recon"].data, rec, rtol=1e-12)

    def test_one_draw_per_posterior_per_forward(self):
        cfg = tiny_cfg()
        model = REModel(cfg)
        x = np.tile(np.linspace(0.1, 0.9, cfg.n_genes), (2, 1))
        idx = np.array([1, 1])
        out = model.forward(Tensor(x), idx, train=True, noise_rng=derive_rng(0, "n", 0))
        # identical rows in the same batch share the sampled modulation
        np.testing.assert_array_equal(out["recon"].data[0], out["recon"].data[1])
        out2 = model.forward(Tensor(x), idx, train=True, noise_rng=derive_rng(0, "n", 1))
        assert not np.array_equal(out["recon"].data, out2["recon"].data)

    def test_train_forward_requires_noise(self):
        model = REModel(tiny_cfg())
        with pytest.raises(ConfigError, match="noise"):
            model.forward(Tensor(np.zeros((2, 6))), np.array([0, 1]), train=True)

    def test_bad_batch_index_rejected(self):
        model = REModel(tiny_cfg())
        with pytest.raises(DataError, match="outside"):
            model.forward(Tensor(np.zeros((2, 6))), np.array([0, 7]), train=False)

    def test_kl_value_matches_closed_form(self):
        cfg = tiny_cfg()
        model = REModel(cfg)
        want = 0.0
        for table in (model.effects_mult, model.effects_add):
            want += kl_gaussian(table.loc.data, table.scales(), 0.0, cfg.prior_scale).sum()
        np.testing.assert_allclose(model.kl_value(), want, rtol=1e-12)
        np.testing.assert_allclose(model.graph_kl().item(), want, rtol=1e-12)

    def test_graph_kl_reversed_matches_closed_form(self):
        cfg = tiny_cfg(kl_reversed=True)
        model = REModel(cfg)
        want = 0.0
        for table in (model.effects_mult, model.effects_add):
            want += kl_gaussian(
                table.loc.data, table.scales(), 0.0, cfg.prior_scale, reversed_form=True
            ).sum()
        np.testing.assert_allclose(model.graph_kl().item(), want, rtol=1e-12)
        np.testing.assert_allclose(model.kl_value(), want, rtol=1e-12)


class TestGradients:
    def test_full_loss_gradients_with_fixed_noise(self):
        cfg = tiny_cfg()
        model = REModel(cfg)
        data = toy_data(n=8, cfg=cfg)
        batch_idx = np.argmax(data.batch_onehot, axis=1)
        rng = derive_rng(0, "fixed")
        eps = (
            rng.standard_normal(model.effects_mult.loc.data.shape),
            rng.standard_normal(model.effects_add.loc.data.shape),
        )
        x = Tensor(data.x)

        def loss():
            out = model.forward(x, batch_idx, train=True, noise=eps)
            total = ad.mul(_graph_mse(x, out["recon"]), ad.constant(cfg.lambda_mse))
            total = ad.add(
                total,
                ad.mul(
                    _graph_cce(data.batch_onehot, out["cluster_probs"]),
                    ad.constant(cfg.lambda_cluster),
                ),
            )
            return ad.add(total, ad.mul(model.graph_kl(), ad.constant(cfg.lambda_kl)))

        loss().backward()
        for p in model.parameters():
            a = p.grad.copy()
            n = numeric_grad(lambda: loss().item(), p.data)
            assert rel_err(a, n) < 1e-4, p.name

    def test_kl_gradient_reaches_posteriors_of_absent_batches(self):
        cfg = tiny_cfg(lambda_kl=1.0)
        model = REModel(cfg)
        data = toy_data(n=6, cfg=cfg)
        # restrict the minibatch to batch 0 only
        idx = np.zeros(6, dtype=int)
        out = model.forward(
            Tensor(data.x), idx, train=True, noise_rng=derive_rng(0, "n")
        )
        total = ad.add(
            _graph_mse(Tensor(data.x), out["recon"]),
            ad.mul(model.graph_kl(), ad.constant(cfg.lambda_kl)),
        )
        total.backward()
        # batch 2 never appeared, yet its posterior gets KL gradient
        assert np.abs(model.effects_mult.loc.grad[2]).max() > 0


class TestTraining:
    def test_loss_decreases_and_best_restored(self):
        cfg = tiny_cfg(epochs=25, patience=25, learning_rate=3e-3)
        data = toy_data(n=40, cfg=cfg)
        model, report = train_random_effects(data, data, cfg)
        totals = report.series("val", "total")
        assert report.best_val_total == min(totals)
        assert _re_eval_components(model, data)["total"] == report.best_val_total
        assert np.all(model.effects_mult.scales() > 0)

    def test_loss_component_formula(self):
        cfg = tiny_cfg(lambda_mse=2.0, lambda_cluster=3.0, lambda_kl=0.5)
        x = np.zeros((2, 6))
        xhat = np.ones((2, 6))
        z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        probs = np.full((2, 3), 1.0 / 3.0)
        comps = re_loss_components(x, xhat, z, probs, kl_value=4.0, cfg=cfg)
        np.testing.assert_allclose(comps["total"], 2.0 * 6.0 + 3.0 * np.log(3.0) + 0.5 * 4.0)

    def test_bit_determinism(self):
        cfg = tiny_cfg(epochs=4)
        data = toy_data(n=24, cfg=cfg)
        m1, r1 = train_random_effects(data, data, cfg)
        m2, r2 = train_random_effects(data, data, cfg)
        for (n1, a1), (n2, a2) in zip(m1.state_arrays(), m2.state_arrays()):
            np.testing.assert_array_equal(a1, a2), n1
        assert r1.series("val", "total") == r2.series("val", "total")

    def test_missing_batch_labels_rejected(self):
        cfg = tiny_cfg()
        data = toy_data(cfg=cfg)
        bare = LabeledMatrix(data.x)
        with pytest.raises(DataError, match="batch"):
            train_random_effects(bare, bare, cfg)


class TestProjection:
    def trained(self):
        cfg = tiny_cfg(epochs=5)
        data = toy_data(n=30, cfg=cfg)
        model, _ = train_random_effects(data, data, cfg)
        return model, data

    def test_own_batch_projection_equals_reconstruction(self):
        model, data = self.trained()
        batch_idx = np.argmax(data.batch_onehot, axis=1)
        own = model.forward(Tensor(data.x), batch_idx, train=False)["recon"].data
        rows = batch_idx == 1
        proj = project_counterfactual(model, data.x[rows], target_batch=1)
        np.testing.assert_array_equal(proj, own[rows])

    def test_projection_depends_on_target_batch(self):
        model, data = self.trained()
        a = project_counterfactual(model, data.x, target_batch=0)
        b = project_counterfactual(model, data.x, target_batch=1)
        assert not np.array_equal(a, b)
        with pytest.raises(DataError, match="target batch"):
            project_counterfactual(model, data.x, target_batch=9)

    def test_encode_re_eval_deterministic(self):
        model, data = self.trained()
        idx = np.argmax(data.batch_onehot, axis=1)
        np.testing.assert_array_equal(
            encode_re(model, data.x, idx), encode_re(model, data.x, idx)
        )


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        cfg = tiny_cfg(epochs=2)
        data = toy_data(cfg=cfg)
        model, report = train_random_effects(data, data, cfg)
        model.batch_categories = ["b0", "b1", "b2"]
        p = str(tmp_path / "re.ckpt")
        save_re(p, model, report)
        back, back_report, _ = load_re(p)
        assert back.cfg == model.cfg
        idx = np.argmax(data.batch_onehot, axis=1)
        np.testing.assert_array_equal(
            encode_re(back, data.x, idx), encode_re(model, data.x, idx)
        )
        np.testing.assert_array_equal(
            project_counterfactual(back, data.x, 2), project_counterfactual(model, data.x, 2)
        )
        assert back.batch_categories == ["b0", "b1", "b2"]
        assert back_report.best_epoch == report.best_epoch
