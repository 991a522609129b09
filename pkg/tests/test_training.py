import hashlib

import numpy as np
import pytest

import canopyheight as ch
from canopyheight import tensor as T
from canopyheight.training import _center_mask
from conftest import finite_difference

rng = np.random.default_rng(33)


def _dense(shape, mask, values):
    out = np.zeros(shape, dtype=np.float32)
    out[mask] = values
    return out


class TestGaussianNLL:
    def test_perfect_mean_unit_variance_gives_zero(self):
        mask = np.array([[True]])
        mean = T.tensor(np.array([[2.5]], np.float32))
        log_var = T.tensor(np.array([[0.0]], np.float32))
        loss = ch.gaussian_nll(mean, log_var, np.array([[2.5]], np.float32), mask)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-7)

    def test_error_two_unit_variance_gives_two(self):
        mask = np.array([[True]])
        mean = T.tensor(np.array([[3.0]], np.float32))
        log_var = T.tensor(np.array([[0.0]], np.float32))
        loss = ch.gaussian_nll(mean, log_var, np.array([[1.0]], np.float32), mask)
        assert float(loss.data) == pytest.approx(2.0, abs=1e-6)

    def test_matches_formula_on_random_batch(self):
        shape = (4, 1, 5, 5)
        mask = rng.random(shape) < 0.2
        mask[0, 0, 0, 0] = True
        mu = rng.standard_normal(shape).astype(np.float32)
        s = rng.standard_normal(shape).astype(np.float32)
        y = rng.standard_normal(shape).astype(np.float32)
        loss = ch.gaussian_nll(T.tensor(mu), T.tensor(s), y, mask)
        d = (mu[mask].astype(np.float64) - y[mask]) ** 2
        expected = np.mean(d / (2 * np.exp(s[mask])) + 0.5 * s[mask])
        assert float(loss.data) == pytest.approx(expected, rel=1e-5)

    def test_unlabeled_pixels_do_not_affect_loss_or_grad(self):
        shape = (2, 1, 4, 4)
        mask = np.zeros(shape, bool)
        mask[:, 0, 2, 2] = True
        y = _dense(shape, mask, np.array([1.0, -0.5], np.float32))
        base = rng.standard_normal(shape).astype(np.float32)
        x1 = T.parameter(base.copy(), "m")
        s1 = T.tensor(np.zeros(shape, np.float32))
        l1 = ch.gaussian_nll(x1, s1, y, mask)
        perturbed = base.copy()
        perturbed[~mask] += 10.0
        x2 = T.parameter(perturbed, "m")
        l2 = ch.gaussian_nll(x2, T.tensor(np.zeros(shape, np.float32)), y, mask)
        assert float(l1.data) == float(l2.data)
        l1.backward()
        assert np.all(x1.grad[~mask] == 0)

    def test_empty_mask_rejected(self):
        mask = np.zeros((1, 1, 2, 2), bool)
        t = T.tensor(np.zeros((1, 1, 2, 2), np.float32))
        with pytest.raises(ValueError, match="empty label mask"):
            ch.gaussian_nll(t, t, np.zeros((1, 1, 2, 2), np.float32), mask)

    def test_gradient_matches_finite_differences(self):
        shape = (2, 1, 4, 4)
        mask = rng.random(shape) < 0.3
        mask[0, 0, 1, 1] = True
        y = rng.standard_normal(shape)

        def loss_fn(ps):
            return ch.gaussian_nll(ps["mu"], ps["s"], y, mask)

        arrays = {"mu": rng.standard_normal(shape), "s": rng.standard_normal(shape)}
        assert finite_difference(loss_fn, arrays, probes=30, rng=rng) < 1e-4

    def test_uniform_weights_equal_plain_mean(self):
        shape = (3, 1, 3, 3)
        mask = rng.random(shape) < 0.4
        mask[1, 0, 1, 1] = True
        mu = rng.standard_normal(shape).astype(np.float32)
        s = rng.standard_normal(shape).astype(np.float32)
        y = rng.standard_normal(shape).astype(np.float32)
        w = np.full(shape, 0.37)
        plain = ch.gaussian_nll(T.tensor(mu), T.tensor(s), y, mask)
        weighted = ch.gaussian_nll(T.tensor(mu), T.tensor(s), y, mask, weights=w)
        assert float(weighted.data) == pytest.approx(float(plain.data), rel=1e-5)


class TestBalanceWeights:
    def test_uniform_histogram_gives_uniform_weights(self):
        labels = np.repeat(np.arange(5) + 0.5, 10)
        bw = ch.compute_balance_weights(labels)
        np.testing.assert_allclose(bw.bin_weights, 0.2)
        np.testing.assert_allclose(bw.weights_for(labels), 0.2)

    def test_two_bin_hand_worked_case(self):
        labels = np.concatenate([np.full(100, 0.5), np.full(1, 1.5)])
        bw = ch.compute_balance_weights(labels)
        np.testing.assert_allclose(bw.bin_weights, [1.0 / 11.0, 10.0 / 11.0], rtol=1e-12)
        q = bw.weights_for(labels)
        assert q[0] == pytest.approx(1.0 / 11.0)
        assert q[-1] == pytest.approx(10.0 / 11.0)

    def test_single_bin_gives_weight_one(self):
        bw = ch.compute_balance_weights(np.array([0.1, 0.2, 0.9]))
        np.testing.assert_allclose(bw.bin_weights, [1.0])

    def test_empty_bins_excluded_from_denominator(self):
        labels = np.array([0.5, 0.5, 7.5])  # bins 0 and 7; bins 1..6 empty
        bw = ch.compute_balance_weights(labels)
        raw = np.sqrt([1 / 2, 1 / 1])
        np.testing.assert_allclose(bw.bin_weights, raw / raw.sum())

    def test_bin_weights_sum_to_one(self):
        labels = np.abs(rng.standard_normal(500)) * 12
        bw = ch.compute_balance_weights(labels)
        assert bw.bin_weights.sum() == pytest.approx(1.0, rel=1e-12)

    def test_bin_edge_goes_to_upper_bin(self):
        bw = ch.compute_balance_weights(np.array([0.0, 1.0, 1.5]))
        np.testing.assert_array_equal(bw.bin_ids, [0, 1])
        np.testing.assert_array_equal(bw.counts, [1, 2])

    def test_unseen_bin_rejected(self):
        bw = ch.compute_balance_weights(np.array([0.5]))
        with pytest.raises(ValueError, match="no recorded count"):
            bw.weights_for(np.array([5.5]))


class TestSchedule:
    def test_lr_trace_is_exact(self):
        config = ch.TrainConfig(iterations=100, base_lr=1e-4)
        trace = [config.lr_at(s) for s in range(1, 101)]
        expected = [1e-4] * 40 + [1e-4 * 0.1] * 30 + [1e-4 * 0.1 * 0.1] * 30
        assert trace == expected

    def test_lr_non_increasing(self):
        config = ch.TrainConfig(iterations=977, base_lr=1e-4, lr_drop_at=(0.25, 0.5, 0.9))
        trace = [config.lr_at(s) for s in range(1, 978)]
        assert all(a >= b for a, b in zip(trace, trace[1:]))

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            ch.TrainConfig(base_lr=0.0)
        with pytest.raises(ValueError):
            ch.TrainConfig(lr_drop_at=(0.7, 0.4))
        with pytest.raises(ValueError):
            ch.TrainConfig(iterations=0)


def _toy_patches(n, labels, seed=0, noise=0.02):
    """Patches whose channel 0 center encodes the label; other channels noise."""
    r = np.random.default_rng(seed)
    patches = r.standard_normal((n, 15, 15, 15)).astype(np.float32) * noise
    patches[:, 0] += labels[:, None, None].astype(np.float32)
    return patches


class TestTrainLoop:
    def test_constant_label_converges_to_constant(self):
        n = 64
        labels = np.zeros(n, np.float32)
        patches = np.random.default_rng(1).standard_normal((n, 15, 15, 15)).astype(np.float32)
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=8), seed=1)
        ch.train(params, patches, labels, ch.TrainConfig(iterations=400, seed=1))
        pair = ch.predict(params, patches[:16])
        center = pair.mean[:, 0, 7, 7]
        assert np.abs(center).max() < 0.05

    def test_same_seed_reproduces_checkpoint_bytes(self):
        labels = rng.standard_normal(40).astype(np.float32)
        patches = _toy_patches(40, labels, seed=2)

        def run():
            params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=6), seed=5)
            ch.train(params, patches, labels, ch.TrainConfig(iterations=50, seed=5))
            return b"".join(t.data.tobytes() for t in params.tensors.values())

        assert run() == run()

    def test_log_records_schedule_and_finite_values(self):
        labels = rng.standard_normal(30).astype(np.float32)
        patches = _toy_patches(30, labels, seed=3)
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=6), seed=0)
        config = ch.TrainConfig(iterations=20, seed=0)
        log = ch.train(params, patches, labels, config)
        assert [r["step"] for r in log] == list(range(1, 21))
        assert all(np.isfinite(r["loss"]) and r["grad_norm"] >= 0 for r in log)
        assert [r["lr"] for r in log] == [config.lr_at(s) for s in range(1, 21)]

    def test_divergence_aborts_with_diagnostic(self):
        labels = np.full(10, np.nan, np.float32)
        patches = _toy_patches(10, np.zeros(10, np.float32), seed=4)
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=4), seed=0)
        with pytest.raises(RuntimeError, match="diverged at step 1"):
            ch.train(params, patches, labels, ch.TrainConfig(iterations=5, seed=0))

    def test_heteroscedastic_noise_learned_by_variance_head(self):
        # labels carry noise whose std doubles for the tall half
        r = np.random.default_rng(9)
        n = 400
        base = r.uniform(-1.0, 1.0, n).astype(np.float32)
        tall = base > 0
        noise = r.standard_normal(n).astype(np.float32) * np.where(tall, 0.5, 0.1)
        labels = base + noise
        patches = _toy_patches(n, base, seed=9)
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=8), seed=2)
        ch.train(params, patches, labels, ch.TrainConfig(iterations=1500, seed=2))
        pair = ch.predict(params, patches)
        sigma = np.sqrt(pair.variance[:, 0, 7, 7])
        assert sigma[tall].mean() > sigma[~tall].mean()

    def test_masked_loss_locality_on_input_gradient(self):
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=6), seed=4)
        radius = ch.receptive_field_radius(params.config)
        x = T.parameter(rng.standard_normal((1, 15, 20, 20)).astype(np.float32), "img")
        mean, log_var = ch.forward(params, x)
        mask = np.zeros((1, 1, 20, 20), bool)
        mask[0, 0, 4, 5] = True
        y = _dense(mask.shape, mask, np.array([0.7], np.float32))
        loss = ch.gaussian_nll(mean, log_var, y, mask)
        loss.backward()
        nz = np.abs(x.grad).sum(axis=(0, 1)) > 0
        r_idx, c_idx = np.nonzero(nz)
        assert r_idx.size > 0
        assert np.all(np.abs(r_idx - 4) <= radius)
        assert np.all(np.abs(c_idx - 5) <= radius)


class TestFinetune:
    @pytest.fixture(scope="class")
    def setup(self):
        r = np.random.default_rng(12)
        n = 300
        labels_m = np.concatenate([r.uniform(0, 5, 270), r.uniform(20, 30, 30)]).astype(np.float32)
        perm = r.permutation(n)
        labels_m = labels_m[perm]
        norm_labels = ((labels_m - labels_m.mean()) / labels_m.std()).astype(np.float32)
        patches = _toy_patches(n, norm_labels, seed=12)
        params = ch.build(ch.ModelConfig(num_blocks=1, filters_per_block=8), seed=6)
        ch.train(params, patches, norm_labels, ch.TrainConfig(iterations=800, seed=6))
        q = ch.compute_balance_weights(labels_m.astype(np.float64)).weights_for(labels_m)
        return params, patches, norm_labels, labels_m, q

    def _hash_non_head(self, params):
        h = hashlib.sha256()
        for name, t in params.tensors.items():
            if name not in ch.NetworkParams.MEAN_HEAD:
                h.update(t.data.tobytes())
        return h.hexdigest()

    def test_non_head_parameters_bit_identical(self, setup):
        params, patches, norm_labels, _, q = setup
        before = self._hash_non_head(params)
        tuned, _ = ch.finetune_mean_head(params, patches, norm_labels, q, iterations=60, seed=1)
        assert self._hash_non_head(tuned) == before
        assert self._hash_non_head(params) == before  # input untouched
        head = any(
            not np.array_equal(tuned[name].data, params[name].data)
            for name in ch.NetworkParams.MEAN_HEAD
        )
        assert head, "mean head should have moved"

    def test_variance_outputs_preserved_on_probe_batch(self, setup):
        params, patches, norm_labels, _, q = setup
        probe = patches[:32]
        before = ch.predict(params, probe).variance
        tuned, _ = ch.finetune_mean_head(params, patches, norm_labels, q, iterations=60, seed=1)
        after = ch.predict(tuned, probe).variance
        assert np.array_equal(before, after)

    def test_uniform_weights_match_head_only_training(self, setup):
        params, patches, norm_labels, _, _ = setup
        uniform = np.ones(len(norm_labels))
        tuned_w, _ = ch.finetune_mean_head(params, patches, norm_labels, uniform,
                                           iterations=40, seed=3)
        plain = params.copy()
        config = ch.TrainConfig(iterations=40, seed=3, lr_drop_at=())
        ch.train(plain, patches, norm_labels, config, head_only=True)
        for name in ch.NetworkParams.MEAN_HEAD:
            np.testing.assert_allclose(tuned_w[name].data, plain[name].data, atol=1e-6)

    def test_balanced_finetune_reduces_tall_bin_bias(self, setup):
        params, patches, norm_labels, labels_m, q = setup
        tuned, _ = ch.finetune_mean_head(params, patches, norm_labels, q, iterations=600, seed=2)
        lm, ls = labels_m.mean(), labels_m.std()
        tall = labels_m >= 20
        pred_before = ch.predict(params, patches).mean[:, 0, 7, 7] * ls + lm
        pred_after = ch.predict(tuned, patches).mean[:, 0, 7, 7] * ls + lm
        me_before = ch.me(pred_before[tall], labels_m[tall])
        me_after = ch.me(pred_after[tall], labels_m[tall])
        assert abs(me_after) < abs(me_before)


def test_center_mask_shape():
    mask = _center_mask(4, 15, 15)
    assert mask.sum() == 4 and mask[2, 0, 7, 7]
