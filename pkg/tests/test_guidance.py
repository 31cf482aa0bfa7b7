import numpy as np
import pytest

from diffdistill.errors import ValidationError
from diffdistill.guidance import (
    FeatureExtractor,
    GuidanceConfig,
    GuidanceStats,
    ReferenceBank,
    guidance_gradient,
    guided_step,
    reference_stream,
    representativeness_energy,
    sample_distilled,
    trajectory_stream,
)
from diffdistill.kernels import FeatureMapSpec, KernelSpec, induced_distance
from diffdistill.scores import DenoiserScoreModel, gmm_eps, init_denoiser
from diffdistill.sde import RngStream, ancestral_step, reverse_trajectory


def fd_gradient(cfg, x, refs, h=1e-6, extractor=None, t=None, label=None):
    fd = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        fd[i] = (
            representativeness_energy(cfg, x + e, refs, extractor=extractor, t=t, label=label)
            - representativeness_energy(cfg, x - e, refs, extractor=extractor, t=t, label=label)
        ) / (2 * h)
    return fd


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            GuidanceConfig(gamma=-0.1)
        with pytest.raises(ValidationError):
            GuidanceConfig(gamma=np.inf)
        with pytest.raises(ValidationError):
            GuidanceConfig(t_stop=-1)
        with pytest.raises(ValidationError):
            GuidanceConfig(reference_batch=0)

    def test_roundtrip_dict(self):
        cfg = GuidanceConfig(gamma=0.3, t_stop=10, kernel=KernelSpec(kind="rbf", bandwidth=2.0),
                             feature_map=FeatureMapSpec(kind="denoiser-hidden", layer_index=2),
                             reference_batch=33, frozen_ref_noise=True)
        back = GuidanceConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()


class TestEnergy:
    def test_zero_at_single_matching_reference(self):
        cfg = GuidanceConfig(gamma=1.0)
        x = np.array([0.4, 0.6])
        assert representativeness_energy(cfg, x, x[None, :]) == 0.0

    def test_two_equidistant_refs(self):
        cfg = GuidanceConfig(gamma=1.0)
        x = np.zeros(2)
        refs = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert representativeness_energy(cfg, x, refs) == pytest.approx(1.0, rel=1e-12)

    def test_matches_brute_force_loop(self):
        rng = np.random.default_rng(0)
        for kernel in (KernelSpec(), KernelSpec(kind="rbf", bandwidth=0.7)):
            cfg = GuidanceConfig(gamma=1.0, kernel=kernel)
            x = rng.standard_normal(3)
            refs = rng.standard_normal((17, 3))
            naive = np.mean([induced_distance(kernel, x, r) for r in refs])
            assert abs(representativeness_energy(cfg, x, refs) - naive) < 1e-12

    def test_empty_refs(self):
        with pytest.raises(ValidationError):
            representativeness_energy(GuidanceConfig(), np.zeros(2), np.empty((0, 2)))


class TestGradient:
    def test_single_reference_closed_form(self):
        cfg = GuidanceConfig(gamma=1.0)
        x = np.array([2.0, 1.0])
        r = np.array([0.0, 0.0])
        want = -(x - r) / np.linalg.norm(x - r)
        np.testing.assert_allclose(guidance_gradient(cfg, x, r[None, :]), want, rtol=1e-12)

    def test_zero_at_reference(self):
        cfg = GuidanceConfig(gamma=1.0)
        x = np.array([1.0, 1.0])
        g = guidance_gradient(cfg, x, x[None, :])
        assert np.array_equal(g, np.zeros(2))

    @pytest.mark.parametrize("kernel", [KernelSpec(), KernelSpec(kind="rbf", bandwidth=1.3)],
                             ids=["linear", "rbf"])
    def test_identity_map_fd(self, kernel):
        rng = np.random.default_rng(1)
        cfg = GuidanceConfig(gamma=1.0, kernel=kernel)
        for _ in range(25):
            x = rng.standard_normal(3)
            refs = rng.standard_normal((9, 3))
            g = guidance_gradient(cfg, x, refs)
            fd = fd_gradient(cfg, x, refs)
            assert np.linalg.norm(g + fd) / np.linalg.norm(fd) < 1e-4

    def test_projection_map_fd(self):
        rng = np.random.default_rng(2)
        fmap = FeatureMapSpec(kind="random-projection", out_dim=5, seed=3)
        cfg = GuidanceConfig(gamma=1.0, feature_map=fmap)
        for _ in range(25):
            x = rng.standard_normal(4)
            refs = rng.standard_normal((7, 4))
            g = guidance_gradient(cfg, x, refs)
            fd = fd_gradient(cfg, x, refs)
            assert np.linalg.norm(g + fd) / np.linalg.norm(fd) < 1e-4

    def test_denoiser_hidden_map_fd(self):
        rng = np.random.default_rng(3)
        model = DenoiserScoreModel(init_denoiser(3, (0,), RngStream(12), hidden=(12, 10)))
        fmap = FeatureMapSpec(kind="denoiser-hidden", layer_index=1)
        cfg = GuidanceConfig(gamma=1.0, feature_map=fmap)
        ext = FeatureExtractor(fmap, model)
        for _ in range(25):
            x = 0.7 * rng.standard_normal(3)
            refs = rng.standard_normal((6, 3))
            g = guidance_gradient(cfg, x, refs, t=4, label=0, extractor=ext)
            fd = fd_gradient(cfg, x, refs, extractor=ext, t=4, label=0)
            assert np.linalg.norm(g + fd) / np.linalg.norm(fd) < 1e-4

    def test_descent_direction(self):
        rng = np.random.default_rng(4)
        cfg = GuidanceConfig(gamma=1.0)
        x = rng.standard_normal(2) * 3
        refs = rng.standard_normal((20, 2))
        g = guidance_gradient(cfg, x, refs)
        e0 = representativeness_energy(cfg, x, refs)
        e1 = representativeness_energy(cfg, x + 1e-3 * g, refs)
        assert e1 < e0

    def test_denoiser_hidden_requires_backend(self):
        fmap = FeatureMapSpec(kind="denoiser-hidden")
        with pytest.raises(ValidationError):
            FeatureExtractor(fmap, None)


class TestEnergyDescent:
    def test_pure_guidance_descends_to_minimizer(self):
        # score term disabled: iterate x += gamma * g with a small step and
        # require strict energy decrease until the gradient nearly vanishes
        rng = np.random.default_rng(5)
        cfg = GuidanceConfig(gamma=1.0)
        refs = rng.standard_normal((30, 2))
        x = np.array([4.0, -3.0])
        step = 0.02
        prev = representativeness_energy(cfg, x, refs)
        for _ in range(2000):
            g = guidance_gradient(cfg, x, refs)
            if np.linalg.norm(g) < 0.05:
                break
            x = x + step * g
            cur = representativeness_energy(cfg, x, refs)
            assert cur < prev
            prev = cur
        assert np.linalg.norm(guidance_gradient(cfg, x, refs)) < 0.05


class TestReferenceBank:
    def test_subsample_size(self, default_task):
        bank = ReferenceBank(default_task.train)
        refs = bank.sample_refs(0, 64, RngStream(0))
        assert refs.shape == (64, 2)
        everything = bank.sample_refs(0, 10_000, RngStream(0))
        assert everything.shape == (bank.class_size(0), 2)

    def test_unknown_class(self, default_task):
        bank = ReferenceBank(default_task.train)
        with pytest.raises(ValidationError):
            bank.sample_refs(9, 4, RngStream(0))

    def test_noised_refs_cache(self, default_task, schedule):
        bank = ReferenceBank(default_task.train)
        refs = bank.sample_refs(1, 8, RngStream(1))
        a = bank.noised_refs(refs, schedule, 5, RngStream(2), cache_key=(1, 5, "k"))
        b = bank.noised_refs(refs, schedule, 5, RngStream(99), cache_key=(1, 5, "k"))
        assert np.array_equal(a, b)

    def test_frozen_eps_reused_across_steps(self, default_task, schedule):
        bank = ReferenceBank(default_task.train)
        refs = bank.sample_refs(1, 8, RngStream(1))
        eps = RngStream(3).normal(refs.shape)
        a = bank.noised_refs(refs, schedule, 10, eps=eps)
        b = bank.noised_refs(refs, schedule, 10, eps=eps)
        assert np.array_equal(a, b)


class TestGuidedStep:
    def test_gamma_zero_bitwise_identical(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=0.0, t_stop=0)
        for t in (50, 25, 1):
            x = RngStream(7, key=(t,)).normal(2)
            got = guided_step(cfg, schedule, analytic_score, bank, 2, x, t,
                              RngStream(8, key=(t,)), ref_rng=RngStream(9))
            eps = analytic_score.eps(x, t, 2)
            want = ancestral_step(schedule, x, eps, t, RngStream(8, key=(t,)))
            assert np.array_equal(got, want)

    def test_branch_not_evaluated_below_t_stop(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=1.0, t_stop=25, reference_batch=16)
        stats = GuidanceStats()
        x = RngStream(1).normal(2)
        for t in (25, 10, 1):
            guided_step(cfg, schedule, analytic_score, bank, 0, x, t, RngStream(2),
                        ref_rng=RngStream(3), stats=stats)
        assert stats.guided_steps == 0
        guided_step(cfg, schedule, analytic_score, bank, 0, x, 26, RngStream(2),
                    ref_rng=RngStream(3), stats=stats)
        assert stats.guided_steps == 1

    def test_guidance_moves_toward_references(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        x = np.array([4.0, 4.0])
        base = guided_step(GuidanceConfig(gamma=0.0, t_stop=0), schedule, analytic_score,
                           bank, 0, x, 30, RngStream(5), ref_rng=RngStream(6))
        pulled = guided_step(GuidanceConfig(gamma=2.0, t_stop=0, reference_batch=64),
                             schedule, analytic_score, bank, 0, x, 30,
                             RngStream(5), ref_rng=RngStream(6))
        assert not np.array_equal(base, pulled)
        assert np.linalg.norm(pulled - base) <= 2.0 + 1e-12

    def test_guide_denoised_mode_runs(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=0.5, t_stop=0, guide_denoised=True, reference_batch=16)
        x = RngStream(4).normal(2)
        out = guided_step(cfg, schedule, analytic_score, bank, 1, x, 20, RngStream(5),
                          ref_rng=RngStream(6))
        assert np.all(np.isfinite(out))
        again = guided_step(cfg, schedule, analytic_score, bank, 1, x, 20, RngStream(5),
                            ref_rng=RngStream(6))
        assert np.array_equal(out, again)


class TestSampleDistilled:
    def test_zero_gamma_matches_unguided_sampler(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=0.0, t_stop=0)
        got = sample_distilled(cfg, schedule, analytic_score, bank, 3, ipc=4, seed=11)
        for i in range(4):
            s = trajectory_stream(11, i)
            x0 = reverse_trajectory(
                schedule, lambda x, t: gmm_eps(default_task.gmm, schedule, x, t, 3),
                s.normal(2), s,
            )
            assert np.array_equal(got[i], x0)

    def test_t_stop_at_T_matches_unguided_sampler(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=5.0, t_stop=schedule.T)
        stats = GuidanceStats()
        got = sample_distilled(cfg, schedule, analytic_score, bank, 1, ipc=3, seed=2, stats=stats)
        assert stats.guided_steps == 0
        for i in range(3):
            s = trajectory_stream(2, i)
            x0 = reverse_trajectory(
                schedule, lambda x, t: gmm_eps(default_task.gmm, schedule, x, t, 1),
                s.normal(2), s,
            )
            assert np.array_equal(got[i], x0)

    def test_deterministic_given_seed(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=0.4, t_stop=0, reference_batch=32)
        a = sample_distilled(cfg, schedule, analytic_score, bank, 0, ipc=3, seed=5)
        b = sample_distilled(cfg, schedule, analytic_score, bank, 0, ipc=3, seed=5)
        assert np.array_equal(a, b)
        c = sample_distilled(cfg, schedule, analytic_score, bank, 0, ipc=3, seed=6)
        assert not np.array_equal(a, c)

    def test_guided_step_counts(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        for t_stop in (0, 12, 25, 50):
            cfg = GuidanceConfig(gamma=0.3, t_stop=t_stop, reference_batch=8)
            stats = GuidanceStats()
            sample_distilled(cfg, schedule, analytic_score, bank, 0, ipc=2, seed=1, stats=stats)
            assert stats.per_trajectory == [schedule.T - t_stop] * 2

    def test_frozen_vs_fresh_reference_noise_differ(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        base = dict(gamma=0.4, t_stop=0, reference_batch=16)
        a = sample_distilled(GuidanceConfig(**base), schedule, analytic_score, bank, 0, 2, 7)
        b = sample_distilled(GuidanceConfig(**base, frozen_ref_noise=True),
                             schedule, analytic_score, bank, 0, 2, 7)
        assert not np.array_equal(a, b)
        b2 = sample_distilled(GuidanceConfig(**base, frozen_ref_noise=True),
                              schedule, analytic_score, bank, 0, 2, 7)
        assert np.array_equal(b, b2)

    def test_t_stop_beyond_schedule_rejected(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        cfg = GuidanceConfig(gamma=0.1, t_stop=51)
        with pytest.raises(ValidationError):
            sample_distilled(cfg, schedule, analytic_score, bank, 0, 1, 0)

    def test_bad_ipc(self, default_task, schedule, analytic_score):
        bank = ReferenceBank(default_task.train)
        with pytest.raises(ValidationError):
            sample_distilled(GuidanceConfig(), schedule, analytic_score, bank, 0, 0, 0)


def test_stream_helpers_are_independent():
    a = trajectory_stream(4, 0).normal(4)
    b = reference_stream(4, 0).normal(4)
    c = trajectory_stream(4, 1).normal(4)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
