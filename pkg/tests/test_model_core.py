import numpy as np
import pytest

from conftest import generic_instance, randomized_params
from cozad.errors import ContractError
from cozad.model_core import (
    NoiseConfig,
    TRAINABLE_FIELDS,
    adam_step,
    adaptor_forward,
    anomaly_score,
    discriminator_forward,
    grads_to_vector,
    init_adam,
    init_params,
    load_checkpoint,
    loss_backward,
    margin_loss,
    params_to_vector,
    save_checkpoint,
    synth_anomaly,
    vector_to_params,
    zero_grads,
)
from cozad.oracles import fd_gradient


class TestInitParams:
    def test_square_adaptor_is_identity(self):
        p = init_params(4, 4, 4, seed=0)
        assert np.array_equal(p.adaptor_weight, np.eye(4))

    def test_same_seed_identical(self):
        a = init_params(5, 3, 7, seed=5)
        b = init_params(5, 3, 7, seed=5)
        assert np.array_equal(params_to_vector(a), params_to_vector(b))
        assert np.array_equal(a.bn_running_mean, b.bn_running_mean)

    def test_running_var_starts_at_one(self):
        p = init_params(3, 3, 6, seed=1)
        assert np.array_equal(p.bn_running_var, np.ones(6))
        assert np.array_equal(p.bn_running_mean, np.zeros(6))

    def test_rectangular_adaptor_near_identity(self):
        p = init_params(4, 6, 4, seed=2)
        bound = 1.0 / np.sqrt(4)
        assert np.abs(p.adaptor_weight[:4, :4] - np.eye(4)).max() <= bound
        assert np.abs(p.adaptor_weight).max() <= 1.0 + bound

    def test_discriminator_bounds(self):
        p = init_params(4, 9, 16, seed=3)
        assert np.abs(p.disc_w1).max() <= 1.0 / 3.0
        assert np.abs(p.disc_w2).max() <= 0.25


class TestAdaptorForward:
    def test_identity_weight_passes_through(self, rng):
        p = init_params(4, 4, 4, seed=0)
        x = rng.normal(size=(5, 4))
        assert np.allclose(adaptor_forward(p, x), x)

    def test_zero_input_zero_output(self):
        p = init_params(3, 5, 4, seed=1)
        assert np.array_equal(adaptor_forward(p, np.zeros((2, 3))), np.zeros((2, 5)))

    def test_homogeneity(self, rng):
        p = init_params(4, 6, 4, seed=2)
        x = rng.normal(size=(3, 4))
        alpha = 2.7
        assert np.allclose(adaptor_forward(p, alpha * x), alpha * adaptor_forward(p, x))

    def test_shape_mismatch_rejected(self):
        p = init_params(4, 4, 4, seed=0)
        with pytest.raises(ContractError):
            adaptor_forward(p, np.zeros((2, 5)))


class TestSynthAnomaly:
    def test_vanishing_sigma_is_identity(self, rng):
        x = rng.normal(size=(4, 6))
        out = synth_anomaly(x, NoiseConfig.from_seed(1e-12, 0))
        assert np.abs(out - x).max() < 1e-9

    def test_empirical_std_matches_sigma(self):
        x = np.zeros((1000, 1000))
        out = synth_anomaly(x, NoiseConfig.from_seed(0.015, 1))
        assert abs(out.std() - 0.015) < 0.0005

    def test_same_stream_same_noise(self, rng):
        x = rng.normal(size=(3, 3))
        a = synth_anomaly(x, NoiseConfig.from_seed(0.05, 9))
        b = synth_anomaly(x, NoiseConfig.from_seed(0.05, 9))
        assert np.array_equal(a, b)


class TestDiscriminatorForward:
    def test_zero_weights_emit_bias(self, rng):
        p = init_params(4, 4, 4, seed=0)
        p.disc_w1 = np.zeros_like(p.disc_w1)
        p.disc_w2 = np.zeros_like(p.disc_w2)
        p.disc_b2 = np.asarray(3.25)
        scores, _ = discriminator_forward(p, rng.normal(size=(5, 4)), "eval")
        assert np.allclose(scores, 3.25)

    def test_train_mode_normalizes_batch(self, rng):
        # Normalized activations (from the forward cache, before scale and
        # shift) have per-feature mean 0 and variance 1 within 1e-5.
        p = randomized_params(4, 4, 6, seed=5)
        x = 3.0 * rng.normal(size=(64, 4))  # pre-activation variance >= 1
        _, cache = discriminator_forward(p, x, "train")
        z_hat = cache["z_hat"]
        assert np.abs(z_hat.mean(0)).max() < 1e-5
        assert np.abs(z_hat.var(0) - 1.0).max() < 1e-5

    def test_eval_mode_is_pure(self, rng):
        p = randomized_params(4, 4, 4, seed=6)
        before = p.tobytes()
        x = rng.normal(size=(7, 4))
        s1, _ = discriminator_forward(p, x, "eval")
        s2, _ = discriminator_forward(p, x, "eval")
        assert np.array_equal(s1, s2)
        assert p.tobytes() == before

    def test_train_mode_updates_running_stats(self, rng):
        p = randomized_params(4, 4, 4, seed=7)
        before = (p.bn_running_mean.copy(), p.bn_running_var.copy())
        discriminator_forward(p, rng.normal(size=(8, 4)), "train")
        assert not np.array_equal(p.bn_running_mean, before[0])
        assert not np.array_equal(p.bn_running_var, before[1])

    def test_single_row_train_mode_rejected(self):
        p = init_params(4, 4, 4, seed=0)
        with pytest.raises(ContractError):
            discriminator_forward(p, np.zeros((1, 4)), "train")


class TestMarginLoss:
    def test_saturated_hinges_give_zero(self):
        assert margin_loss([1.0], [-1.0], 0.5, 0.5) == 0.0

    def test_zero_scores(self):
        assert margin_loss([0.0], [0.0], 0.5, 0.5) == 1.0

    def test_hand_computed_value(self):
        # Independent scalar evaluation: mean over the two positive hinges
        # plus mean over the two negative hinges.
        pos = [0.2, 0.8]
        neg = [-0.1, 0.3]
        expected = ((max(0, 0.5 - 0.2) + max(0, 0.5 - 0.8)) / 2
                    + (max(0, -0.1 + 0.5) + max(0, 0.3 + 0.5)) / 2)
        assert abs(expected - 0.75) < 1e-10
        assert abs(margin_loss(pos, neg) - 0.75) < 1e-10

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            margin_loss([], [0.0])


class TestAnomalyScore:
    def test_score_is_negated_output(self, rng):
        p = randomized_params(3, 5, 4, seed=8)
        x = rng.normal(size=(6, 3))
        scores, _ = discriminator_forward(p, adaptor_forward(p, x), "eval")
        assert np.allclose(anomaly_score(p, x), -scores)

    def test_never_mutates_params(self, rng):
        p = randomized_params(3, 5, 4, seed=9)
        before = p.tobytes()
        anomaly_score(p, rng.normal(size=(10, 3)))
        assert p.tobytes() == before

    def test_bias_offset_shifts_scores(self, rng):
        p = randomized_params(3, 3, 3, seed=10)
        x = rng.normal(size=(4, 3))
        base = anomaly_score(p, x)
        shifted = p.copy()
        shifted.disc_b2 = shifted.disc_b2 + 0.7
        assert np.allclose(anomaly_score(shifted, x), base - 0.7)


class TestLossBackward:
    def test_unit_weights_match_unweighted_margin(self, rng):
        p = randomized_params(4, 4, 5, seed=11)
        x = rng.normal(size=(5, 4))
        noise = NoiseConfig.from_seed(0.05, 3)
        res = loss_backward(p.copy(), x, noise, np.ones(5), 0.0)
        q = p.copy()
        adapted = adaptor_forward(q, x)
        negatives = synth_anomaly(adapted, NoiseConfig.from_seed(0.05, 3))
        scores, _ = discriminator_forward(q, np.vstack([adapted, negatives]), "train")
        assert abs(res.loss - margin_loss(scores[:5], scores[5:])) < 1e-12

    def test_uniform_half_weights_same_gradient(self, rng):
        p = randomized_params(4, 4, 5, seed=12)
        x = rng.normal(size=(4, 4))
        g1 = loss_backward(p.copy(), x, NoiseConfig.from_seed(0.05, 1), np.ones(4), 0.0)
        g2 = loss_backward(p.copy(), x, NoiseConfig.from_seed(0.05, 1), np.full(4, 0.5), 0.0)
        a = grads_to_vector(g1.grads)
        b = grads_to_vector(g2.grads)
        assert np.abs(a - b).max() <= 1e-10 * max(1.0, np.abs(a).max())

    def test_all_zero_weights_rejected(self, rng):
        p = randomized_params(3, 3, 3, seed=13)
        with pytest.raises(ContractError):
            loss_backward(p, rng.normal(size=(3, 3)), NoiseConfig.from_seed(0.05, 0), np.zeros(3), 0.0)

    def test_gradient_matches_finite_differences(self):
        for i in range(6):
            params, batch, weights, seed = generic_instance(i)
            lam = 0.01 if i % 2 else 0.0

            def loss_at(vec):
                q = vector_to_params(vec, params)
                return loss_backward(
                    q, batch, NoiseConfig.from_seed(0.05, seed + 7), weights, lam,
                    update_stats=False,
                ).loss

            res = loss_backward(
                params.copy(), batch, NoiseConfig.from_seed(0.05, seed + 7),
                weights, lam, update_stats=False,
            )
            fd = fd_gradient(loss_at, params_to_vector(params), 1e-4)
            analytic = grads_to_vector(res.grads)
            denom = np.maximum(np.abs(fd), 1e-4)
            assert (np.abs(analytic - fd) / denom).max() < 1e-3

    def test_saturated_hinges_zero_loss_and_zero_grads(self):
        # All positive scores >= th_pos and all negative scores <= -th_neg:
        # with thresholds at -50 every hinge is inactive for bounded scores,
        # so the loss is 0 and every gradient is exactly 0 (reg off).
        assert margin_loss([2.0, 3.0], [-1.0, -2.0], 0.5, 0.5) == 0.0
        params, batch, weights, seed = generic_instance(0)
        noise = NoiseConfig.from_seed(0.05, seed + 7)
        res = loss_backward(params.copy(), batch, noise, weights, 0.0, th_pos=-50.0, th_neg=-50.0)
        assert res.loss == 0.0
        assert np.all(grads_to_vector(res.grads) == 0.0)


class TestAdamStep:
    def test_zero_gradient_fixed_point(self):
        p = randomized_params(3, 3, 3, seed=14)
        before = params_to_vector(p)
        state = init_adam(p)
        adam_step(state, p, zero_grads(p), 1e-3, 2e-3, 0.0)
        assert np.array_equal(params_to_vector(p), before)
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        p = randomized_params(3, 3, 3, seed=15)
        state = init_adam(p)
        rng = np.random.default_rng(0)
        grads = zero_grads(p)
        for name in TRAINABLE_FIELDS:
            g = rng.normal(size=getattr(p, name).shape)
            g = np.where(np.abs(g) < 0.1, 0.5, g)  # keep |g| >> eps
            setattr(grads, name, g)
        before = {n: getattr(p, n).copy() for n in TRAINABLE_FIELDS}
        adam_step(state, p, grads, 1e-3, 2e-3, 0.0)
        for name in TRAINABLE_FIELDS:
            lr = 1e-3 if name == "adaptor_weight" else 2e-3
            delta = getattr(p, name) - before[name]
            assert np.abs(delta + lr * np.sign(getattr(grads, name))).max() < 1e-6

    def test_group_isolation(self):
        p = randomized_params(3, 3, 3, seed=16)
        state = init_adam(p)
        grads = zero_grads(p)
        for name in TRAINABLE_FIELDS:
            setattr(grads, name, np.ones_like(getattr(p, name)))
        adaptor_before = p.adaptor_weight.copy()
        w1_before = p.disc_w1.copy()
        adam_step(state, p, grads, 0.0, 2e-3, 0.0)
        assert np.array_equal(p.adaptor_weight, adaptor_before)
        assert not np.array_equal(p.disc_w1, w1_before)

    def test_weight_decay_moves_params_with_zero_grad(self):
        p = randomized_params(3, 3, 3, seed=17)
        before = params_to_vector(p)
        adam_step(init_adam(p), p, zero_grads(p), 1e-3, 1e-3, 0.1)
        assert not np.array_equal(params_to_vector(p), before)


class TestCheckpoint:
    def test_round_trip_float32_exact(self, tmp_path):
        p = randomized_params(5, 4, 6, seed=18)
        path = tmp_path / "m.cozm"
        save_checkpoint(p, path)
        loaded, adam = load_checkpoint(path)
        assert adam is None
        # float32 quantization is applied on save; loading is exact after it
        assert np.array_equal(
            params_to_vector(loaded),
            params_to_vector(p).astype(np.float32).astype(np.float64),
        )
        assert loaded.leaky_slope == np.float32(p.leaky_slope)

    def test_round_trip_with_adam(self, tmp_path):
        p = randomized_params(3, 3, 3, seed=19)
        state = init_adam(p)
        adam_step(state, p, zero_grads(p), 1e-3, 1e-3, 0.01)
        path = tmp_path / "m.cozm"
        save_checkpoint(p, path, state)
        _, loaded = load_checkpoint(path)
        assert loaded is not None
        assert loaded.step == 1
        assert loaded.beta1 == np.float32(0.9)

    def test_save_deterministic(self, tmp_path):
        p = randomized_params(3, 3, 3, seed=20)
        a, b = tmp_path / "a.cozm", tmp_path / "b.cozm"
        save_checkpoint(p, a)
        save_checkpoint(p, b)
        assert a.read_bytes() == b.read_bytes()
