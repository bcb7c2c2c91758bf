import math

import numpy as np
import pytest

from falcon_dp.denoiser import ActionChunk, MixtureDenoiser, ObservationWindow
from falcon_dp.samplers import (
    ChainResult,
    ddim_step,
    ddpm_step,
    dpmsolver_step,
    gaussian_start,
    log_snr,
    run_chain,
)
from falcon_dp.schedule import build_schedule, full_grid, make_step_grid

from conftest import schedule_with_abars
from test_denoiser import const_mixture

OBS = ObservationWindow(np.zeros((1, 1)), t=1)


def zero_denoiser(obs, values, k):
    return np.zeros_like(values)


class TestDdpmStep:
    def test_reduces_to_alpha_rescale_without_noise(self):
        sched = schedule_with_abars([0.81])  # alpha_1 = 0.81
        out = ddpm_step(sched, zero_denoiser, OBS, ActionChunk([[0.9]], 1), rng=None)
        assert out.noise_level == 0
        assert out.values[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_point_mass_deterministic_chain_hits_mean(self):
        sched = build_schedule("cosine", 100)
        mu = np.array([[0.6], [-0.4]])
        den = MixtureDenoiser(const_mixture(mu[None], std=0.0), sched)
        start = ActionChunk(np.full((2, 1), 3.0), 100)
        res = run_chain("ddpm", sched, full_grid(100), den, OBS, start, rng=None)
        assert res.nfe == 100
        assert np.max(np.abs(res.final.values - mu)) < 1e-6

    def test_full_chain_nfe_is_k(self):
        sched = build_schedule("cosine", 100)
        den = MixtureDenoiser(const_mixture(np.zeros((1, 1, 1)), std=1.0), sched)
        rng = np.random.default_rng(7)
        res = run_chain(
            "ddpm", sched, full_grid(100), den, OBS, gaussian_start(1, 1, 100, rng), rng
        )
        assert res.nfe == 100
        assert den.calls == 100

    def test_rejects_level_zero(self):
        sched = schedule_with_abars([0.81])
        with pytest.raises(ValueError):
            ddpm_step(sched, zero_denoiser, OBS, ActionChunk([[1.0]], 0), rng=None)


class TestDdimStep:
    def test_alpha_bar_ratio_rescale(self):
        sched = schedule_with_abars([0.9, 0.72])
        out = ddim_step(sched, zero_denoiser, OBS, ActionChunk([[1.0]], 2), k_target=1)
        assert out.noise_level == 1
        assert out.values[0, 0] == pytest.approx(math.sqrt(0.9 / 0.72), abs=1e-12)
        assert out.values[0, 0] == pytest.approx(1.11803, abs=5e-6)

    def test_deterministic_when_sigma_zero(self, rng):
        sched = build_schedule("cosine", 20)
        den = MixtureDenoiser(const_mixture(rng.normal(size=(2, 2, 1)), std=0.5), sched)
        chunk = ActionChunk(rng.normal(size=(2, 1)), 20)
        a = ddim_step(sched, den, OBS, chunk, 10)
        b = ddim_step(sched, den, OBS, chunk, 10)
        assert np.array_equal(a.values, b.values)

    def test_point_mass_sixteen_step_grid(self):
        sched = build_schedule("cosine", 100)
        mu = np.array([[0.25], [0.5]])
        den = MixtureDenoiser(const_mixture(mu[None], std=0.0), sched)
        grid = make_step_grid(100, 16)
        start = ActionChunk(np.full((2, 1), -2.0), 100)
        res = run_chain("ddim", sched, grid, den, OBS, start, rng=None)
        assert res.nfe == 16
        assert np.max(np.abs(res.final.values - mu)) < 1e-5

    def test_rejects_non_decreasing_target(self):
        sched = schedule_with_abars([0.9, 0.72])
        with pytest.raises(ValueError):
            ddim_step(sched, zero_denoiser, OBS, ActionChunk([[1.0]], 1), k_target=1)


class TestDpmSolverStep:
    def test_alpha_ratio_scaling(self):
        sched = schedule_with_abars([0.9, 0.72])
        out = dpmsolver_step(sched, zero_denoiser, OBS, ActionChunk([[1.0]], 2), k_target=1)
        assert out.values[0, 0] == pytest.approx(math.sqrt(0.9 / 0.72), abs=1e-12)

    def test_log_snr_gap(self):
        sched = schedule_with_abars([0.9, 0.72])
        lam_hi = log_snr(sched, 1)   # alpha_bar = 0.9
        lam_lo = log_snr(sched, 2)   # alpha_bar = 0.72
        assert lam_hi == pytest.approx(0.5 * math.log(9.0), abs=1e-9)
        assert lam_lo == pytest.approx(0.5 * math.log(0.72 / 0.28), abs=1e-9)
        h = lam_hi - lam_lo
        assert h == pytest.approx(0.6263814642666373, abs=1e-7)
        assert h == pytest.approx(0.62630, abs=2e-4)

    def test_point_mass_sixteen_step_grid(self):
        sched = build_schedule("cosine", 100)
        mu = np.array([[0.8]])
        den = MixtureDenoiser(const_mixture(mu[None], std=0.0), sched)
        grid = make_step_grid(100, 16)
        start = ActionChunk(np.full((1, 1), 2.5), 100)
        res = run_chain("dpmsolver", sched, grid, den, OBS, start, rng=None)
        assert res.nfe == 16
        assert np.max(np.abs(res.final.values - mu)) < 1e-3

    def test_rejects_bad_targets(self):
        sched = schedule_with_abars([0.9, 0.72])
        with pytest.raises(ValueError):
            dpmsolver_step(sched, zero_denoiser, OBS, ActionChunk([[1.0]], 1), k_target=2)


class TestRunChain:
    def setup_method(self):
        self.sched = build_schedule("cosine", 40)
        self.grid = make_step_grid(40, 8)
        self.den = MixtureDenoiser(const_mixture(np.zeros((1, 2, 1)), std=0.5), self.sched)

    def test_nfe_counts_steps_from_start_position(self, rng):
        for k in self.grid.levels:
            start = ActionChunk(rng.normal(size=(2, 1)), int(k))
            res = run_chain("ddim", self.sched, self.grid, self.den, OBS, start, rng=None)
            assert res.nfe == self.grid.steps_from(int(k))
            assert res.final.noise_level == 0

    def test_sink_sees_every_prestep_chunk(self, rng):
        seen = []
        start = ActionChunk(rng.normal(size=(2, 1)), 40)
        res = run_chain(
            "ddim", self.sched, self.grid, self.den, OBS, start, rng=None, sink=seen.append
        )
        assert len(seen) == res.nfe
        levels = [c.noise_level for c in seen]
        assert levels == sorted(levels, reverse=True)
        assert all(c.noise_level >= 1 for c in seen)
        assert np.array_equal(seen[0].values, start.values)

    def test_trajectory_matches_sink(self, rng):
        start = ActionChunk(rng.normal(size=(2, 1)), 40)
        res = run_chain("ddim", self.sched, self.grid, self.den, OBS, start, rng=None)
        assert isinstance(res, ChainResult)
        assert [c.noise_level for c in res.trajectory][0] == 40
        assert len(res.trajectory) == res.nfe

    def test_rejects_start_off_grid(self, rng):
        start = ActionChunk(rng.normal(size=(2, 1)), 39)
        with pytest.raises(ValueError):
            run_chain("ddim", self.sched, self.grid, self.den, OBS, start, rng=None)

    def test_ddpm_requires_identity_grid(self, rng):
        start = ActionChunk(rng.normal(size=(2, 1)), 40)
        with pytest.raises(ValueError):
            run_chain("ddpm", self.sched, self.grid, self.den, OBS, start, rng=None)

    def test_unknown_kind_rejected(self, rng):
        start = ActionChunk(rng.normal(size=(2, 1)), 40)
        with pytest.raises(ValueError):
            run_chain("euler", self.sched, self.grid, self.den, OBS, start, rng=None)

    def test_nfe_equals_instrumented_denoiser_calls(self, rng):
        before = self.den.calls
        start = ActionChunk(rng.normal(size=(2, 1)), 40)
        res = run_chain("ddim", self.sched, self.grid, self.den, OBS, start, rng=None)
        assert self.den.calls - before == res.nfe


class TestDistributionProperties:
    def test_ddpm_chain_moments_match_single_gaussian(self):
        sched = build_schedule("cosine", 100)
        mu = 0.4
        den = MixtureDenoiser(const_mixture(np.full((1, 1, 1), mu), std=1.0), sched)
        grid = full_grid(100)
        n = 2000
        finals = np.empty(n)
        for i in range(n):
            rng = np.random.default_rng(1000 + i)
            res = run_chain(
                "ddpm", sched, grid, den, OBS, gaussian_start(1, 1, 100, rng), rng
            )
            finals[i] = res.final.values[0, 0]
        assert abs(finals.mean() - mu) < 4.0 / math.sqrt(n)
        assert abs(finals.var() - 1.0) < 0.15

    @pytest.mark.parametrize("kind", ["ddim", "dpmsolver"])
    def test_grid_refinement_reduces_error(self, kind):
        K = 1000
        sched = build_schedule("cosine", K)
        means = np.array([[[0.8]], [[-0.8]]])
        den = MixtureDenoiser(const_mixture(means, std=0.4), sched)
        ref_grid = full_grid(K)
        grids = {M: make_step_grid(K, M) for M in (4, 8, 16, 32)}
        errors = {M: [] for M in grids}
        for seed in range(64):
            rng = np.random.default_rng(seed)
            start = gaussian_start(1, 1, K, rng)
            ref = run_chain(kind, sched, ref_grid, den, OBS, start, rng=None)
            for M, grid in grids.items():
                approx = run_chain(kind, sched, grid, den, OBS, start, rng=None)
                errors[M].append(abs(approx.final.values[0, 0] - ref.final.values[0, 0]))
        medians = [float(np.median(errors[M])) for M in (4, 8, 16, 32)]
        assert medians[0] > medians[1] > medians[2] > medians[3]
