import numpy as np
import pytest

from agvm.models import ModulePartition
from agvm.optim import (AgvmAdamW, AgvmSgd, Modulator, OptimizerError,
                        compute_mu, enable_modulation, force_unit_mu,
                        load_checkpoint, save_checkpoint, smooth_mu)
from agvm.variance import GroupedGradients


def two_module_partition(sizes=(3, 2)):
    return ModulePartition(modules=(("trunk", (0,)), ("head", (1,))),
                           param_sizes=sizes)


def groups_from(g1, g2, partition, b=4):
    return GroupedGradients.from_half_means(np.asarray(g1, float),
                                            np.asarray(g2, float), partition, b)


def reference_adamw_step(w, grad, m, v, t, lr, beta1, beta2, eps, lam):
    """Straight-line AdamW oracle, independent of the optimizer module."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad ** 2
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    w = w - lr * (m_hat / np.sqrt(v_hat + eps) + lam * w)
    return w, m, v


class TestComputeMu:
    def make(self, **kw):
        return Modulator(n_modules=3, anchor=0, **kw)

    def test_equal_phi_gives_unit(self):
        mod = self.make()
        raw = compute_mu(np.array([2e-4, 2e-4, 2e-4]), mod)
        np.testing.assert_array_equal(raw, [1.0, 1.0, 1.0])

    def test_ratio_square_root(self):
        mod = self.make()
        raw = compute_mu(np.array([4e-4, 1e-4, 4e-4]), mod)
        assert raw[1] == pytest.approx(2.0, rel=1e-6)

    def test_zero_phi_clipped_to_upper(self):
        mod = self.make()
        raw = compute_mu(np.array([4e-4, 0.0, 1e-4]), mod)
        # raw ratio ~ 2e4 before the clip
        assert raw[1] == 10.0

    def test_huge_phi_clipped_to_lower(self):
        mod = self.make()
        raw = compute_mu(np.array([1e-8, 1.0, 1e-8]), mod)
        assert raw[1] == 0.1

    def test_anchor_exactly_one(self):
        mod = self.make()
        raw = compute_mu(np.array([0.0, 1.0, 2.0]), mod)
        assert raw[0] == 1.0

    def test_invalid_phi_rejected(self):
        mod = self.make()
        with pytest.raises(ValueError):
            compute_mu(np.array([1.0, -0.5, 1.0]), mod)
        with pytest.raises(ValueError):
            compute_mu(np.array([1.0, np.nan, 1.0]), mod)


class TestSmoothMu:
    def test_momentum_blend(self):
        mod = Modulator(n_modules=2, alpha=0.97)
        smooth_mu(mod, np.array([1.0, 2.0]))
        assert mod.mu[1] == pytest.approx(0.97 * 1.0 + 0.03 * 2.0, abs=1e-15)

    def test_alpha_zero_takes_raw(self):
        mod = Modulator(n_modules=2, alpha=0.0)
        smooth_mu(mod, np.array([1.0, 7.5]))
        assert mod.mu[1] == 7.5

    def test_upper_fixpoint(self):
        mod = Modulator(n_modules=2, alpha=0.97)
        mod.mu = np.array([1.0, 10.0])
        smooth_mu(mod, np.array([1.0, 10.0]))
        assert mod.mu[1] == 10.0

    def test_anchor_held_at_one(self):
        mod = Modulator(n_modules=2, alpha=0.5)
        smooth_mu(mod, np.array([1.0, 3.0]))
        assert mod.mu[0] == 1.0

    def test_smoothing_step_bounded(self):
        # |mu_t - mu_{t-1}| <= (1 - alpha) * (clip_hi - clip_lo) per event
        rng = np.random.default_rng(0)
        mod = Modulator(n_modules=4, alpha=0.9)
        bound = (1 - mod.alpha) * (mod.clip_hi - mod.clip_lo)
        for _ in range(500):
            before = mod.mu.copy()
            mod.update(rng.uniform(0, 1e-3, 4))
            assert np.all(np.abs(mod.mu - before) <= bound + 1e-15)


class TestModulatorInvariants:
    def test_adversarial_phi_keeps_clip_and_anchor(self):
        # acceptance: 1000 update events with extreme phi values
        rng = np.random.default_rng(7)
        mod = Modulator(n_modules=5, anchor=0, tau=1)
        extremes = np.array([0.0, 1e-300, 1e300, 5e-324, 1.0, 1e12, 1e-15])
        for step in range(1000):
            phi = rng.choice(extremes, size=5)
            mod.update(phi)
            assert np.all(mod.mu >= mod.clip_lo)
            assert np.all(mod.mu <= mod.clip_hi)
            assert mod.mu[0] == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            Modulator(n_modules=0)
        with pytest.raises(ValueError):
            Modulator(n_modules=2, alpha=1.0)
        with pytest.raises(ValueError):
            Modulator(n_modules=2, tau=0)
        with pytest.raises(ValueError):
            Modulator(n_modules=2, clip_lo=2.0)
        with pytest.raises(ValueError):
            Modulator(n_modules=2, anchor=5)


class TestSgdStep:
    def test_plain_first_step(self):
        part = two_module_partition((1, 1))
        opt = AgvmSgd(part, beta1=0.0, weight_decay=0.0,
                      modulator=Modulator(2, tau=10))
        w = np.array([1.0, 1.0])
        opt.step(w, np.array([2.0, 2.0]), eta=0.1)
        assert w[0] == pytest.approx(0.8, abs=1e-15)

    def test_doubled_multiplier_on_non_anchor(self):
        part = two_module_partition((1, 1))
        mod = Modulator(2, tau=10)
        mod.mu = np.array([1.0, 2.0])
        opt = AgvmSgd(part, beta1=0.0, weight_decay=0.0, modulator=mod)
        w = np.array([1.0, 1.0])
        opt.step(w, np.array([2.0, 2.0]), eta=0.1)
        assert w[0] == pytest.approx(0.8, abs=1e-15)   # anchor: eta_hat = 0.1
        assert w[1] == pytest.approx(0.6, abs=1e-15)   # head: eta_hat = 0.2

    def test_momentum_first_step(self):
        part = two_module_partition((1, 1))
        opt = AgvmSgd(part, beta1=0.9, weight_decay=0.0, modulator=Modulator(2, tau=10))
        w = np.array([1.0, 1.0])
        opt.step(w, np.array([2.0, 2.0]), eta=0.1)
        np.testing.assert_allclose(opt.m, [0.2, 0.2], atol=1e-15)
        assert w[0] == pytest.approx(0.98, abs=1e-15)

    def test_nonfinite_gradient_names_module(self):
        part = two_module_partition((2, 2))
        opt = AgvmSgd(part, modulator=Modulator(2, tau=10))
        w = np.zeros(4)
        with pytest.raises(OptimizerError, match="head"):
            opt.step(w, np.array([0.0, 0.0, np.inf, 0.0]), eta=0.1)

    def test_modulation_step_requires_groups(self):
        part = two_module_partition((1, 1))
        opt = AgvmSgd(part, modulator=Modulator(2, tau=1))
        with pytest.raises(OptimizerError, match="grouped"):
            opt.step(np.zeros(2), np.ones(2), eta=0.1)

    def test_negative_eta_rejected(self):
        part = two_module_partition((1, 1))
        opt = AgvmSgd(part, modulator=Modulator(2, tau=10))
        with pytest.raises(OptimizerError):
            opt.step(np.zeros(2), np.ones(2), eta=-0.1)


class TestAdamWStep:
    def test_first_step_unit_magnitude(self):
        part = two_module_partition((1, 1))
        opt = AgvmAdamW(part, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                        modulator=Modulator(2, tau=10))
        w = np.array([1.0, 1.0])
        opt.step(w, np.array([1.0, 1.0]), eta=0.01)
        # m_hat = v_hat = 1 -> r = 1/sqrt(1 + eps)
        assert w[0] == pytest.approx(1.0 - 0.01 / np.sqrt(1 + 1e-8), abs=1e-12)

    def test_decoupled_decay_alone(self):
        part = two_module_partition((1, 1))
        opt = AgvmAdamW(part, weight_decay=0.05, modulator=Modulator(2, tau=10))
        w = np.array([1.0, 1.0])
        opt.step(w, np.zeros(2), eta=0.01)
        # r = 0, so only the decay term moves the weights
        assert w[0] == pytest.approx(0.9995, abs=1e-15)

    def test_mu_constant_between_updates(self):
        part = two_module_partition((2, 2))
        mod = Modulator(2, tau=10, alpha=0.5)
        opt = AgvmAdamW(part, modulator=mod)
        rng = np.random.default_rng(3)
        w = rng.normal(0, 1, 4)
        snapshots = []
        for t in range(1, 26):
            groups = groups_from(rng.normal(0, 1, 4), rng.normal(0, 1, 4), part)
            opt.step(w, rng.normal(0, 1, 4), eta=0.01, groups=groups)
            snapshots.append(opt.modulator.mu.copy())
        for t in range(1, 26):
            if t % 10 != 0 and t > 1:
                assert np.array_equal(snapshots[t - 1], snapshots[t - 2]), t
        assert not np.array_equal(snapshots[9], snapshots[8])


class TestBaselineReduction:
    def test_pinned_sgd_bit_identical_to_plain(self):
        part = two_module_partition((5, 3))
        mod = Modulator(2, tau=10)
        force_unit_mu(mod)
        opt = AgvmSgd(part, beta1=0.9, weight_decay=1e-4, modulator=mod)

        rng = np.random.default_rng(4)
        w = rng.normal(0, 1, 8)
        w_ref = w.copy()
        m_ref = np.zeros(8)
        for t in range(100):
            grad = rng.normal(0, 1, 8)
            eta = 0.05 / (1 + 0.01 * t)
            opt.step(w, grad, eta=eta)
            m_ref = 0.9 * m_ref + (1.0 - 0.9) * (grad + 1e-4 * w_ref)
            w_ref -= eta * m_ref
        assert np.array_equal(w, w_ref)
        assert np.array_equal(opt.m, m_ref)

    def test_pinned_adamw_matches_reference_oracle(self):
        part = two_module_partition((5, 3))
        mod = Modulator(2, tau=10)
        force_unit_mu(mod)
        opt = AgvmAdamW(part, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
                        modulator=mod)

        rng = np.random.default_rng(5)
        w = rng.normal(0, 1, 8)
        w_ref = w.copy()
        m_ref = np.zeros(8)
        v_ref = np.zeros(8)
        for t in range(1, 101):
            grad = rng.normal(0, 1, 8)
            opt.step(w, grad, eta=0.01)
            w_ref, m_ref, v_ref = reference_adamw_step(
                w_ref, grad, m_ref, v_ref, t, 0.01, 0.9, 0.999, 1e-8, 0.01)
        np.testing.assert_allclose(w, w_ref, rtol=0, atol=1e-12)

    def test_equal_phi_keeps_modulated_run_identical(self):
        # identical per-module group vectors give bitwise-equal variance
        # proxies, so every multiplier stays exactly 1
        part = two_module_partition((2, 2))
        opt = AgvmSgd(part, beta1=0.9, weight_decay=0.0,
                      modulator=Modulator(2, tau=5, alpha=0.97))
        rng = np.random.default_rng(6)
        w = rng.normal(0, 1, 4)
        w_ref = w.copy()
        m_ref = np.zeros(4)
        for t in range(1, 51):
            grad = rng.normal(0, 1, 4)
            g1 = np.tile(rng.normal(0, 1, 2), 2)
            g2 = np.tile(rng.normal(0, 1, 2), 2)
            opt.step(w, grad, eta=0.02, groups=groups_from(g1, g2, part))
            m_ref = 0.9 * m_ref + 0.1 * grad
            w_ref -= 0.02 * m_ref
        assert np.array_equal(w, w_ref)
        np.testing.assert_array_equal(opt.modulator.mu, [1.0, 1.0])

    def test_reenabling_updates_at_next_interval(self):
        part = two_module_partition((2, 2))
        mod = Modulator(2, tau=5, alpha=0.0)
        opt = AgvmSgd(part, beta1=0.0, modulator=mod)
        force_unit_mu(mod)
        rng = np.random.default_rng(7)
        w = np.zeros(4)

        def run_step():
            groups = groups_from(rng.normal(0, 1, 4), rng.normal(0, 1, 4), part)
            opt.step(w, rng.normal(0, 1, 4), eta=0.01, groups=groups)

        for _ in range(7):
            run_step()
        assert np.array_equal(mod.mu, [1.0, 1.0])
        enable_modulation(mod)
        run_step()  # t=8
        run_step()  # t=9
        assert np.array_equal(mod.mu, [1.0, 1.0])
        run_step()  # t=10: modulation fires
        assert mod.mu[1] != 1.0


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["sgd", "adamw"])
    def test_round_trip_bit_exact(self, tmp_path, kind):
        part = two_module_partition((4, 3))
        mod = Modulator(2, tau=3, alpha=0.7)
        if kind == "sgd":
            opt = AgvmSgd(part, beta1=0.9, weight_decay=1e-4, modulator=mod)
        else:
            opt = AgvmAdamW(part, beta1=0.9, beta2=0.999, weight_decay=0.01,
                            modulator=mod)
        rng = np.random.default_rng(8)
        w = rng.normal(0, 1, 7)

        def drive(o, vec, steps):
            for _ in range(steps):
                groups = groups_from(rng2.normal(0, 1, 7), rng2.normal(0, 1, 7), part)
                o.step(vec, rng2.normal(0, 1, 7), eta=0.03, groups=groups)

        rng2 = np.random.default_rng(9)
        drive(opt, w, 10)
        path = tmp_path / "state.ckpt"
        save_checkpoint(opt, str(path))
        clone = load_checkpoint(str(path))

        w_a, w_b = w.copy(), w.copy()
        rng2 = np.random.default_rng(10)
        drive(opt, w_a, 10)
        rng2 = np.random.default_rng(10)
        drive(clone, w_b, 10)
        assert np.array_equal(w_a, w_b)
        assert np.array_equal(opt.m, clone.m)
        assert np.array_equal(opt.modulator.mu, clone.modulator.mu)
        if kind == "adamw":
            assert np.array_equal(opt.v, clone.v)

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(OptimizerError, match="not an optimizer checkpoint"):
            load_checkpoint(str(path))

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "future.json"
        path.write_text('{"format": "agvm-checkpoint", "version": 99}')
        with pytest.raises(OptimizerError, match="version"):
            load_checkpoint(str(path))
