"""Reverse-process step rules and full-chain generation with NFE accounting.

Three baselines share one schedule: the stochastic ancestral sampler (full
K-step chain), the deterministic skip-step sampler, and a first-order
exponential-integrator solver in log-SNR time.  Each step rule performs
exactly one denoiser evaluation; chains count them as NFE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .denoiser import ActionChunk, ObservationWindow
from .schedule import NoiseSchedule, StepGrid

SAMPLER_KINDS = ("ddpm", "ddim", "dpmsolver")

Denoiser = Callable[[ObservationWindow, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class ChainResult:
    """Outcome of one generation chain.

    ``trajectory`` holds the chunk at every visited nonzero level (the state
    *before* each step, highest level first); ``nfe`` counts denoiser
    evaluations, one per step.
    """

    final: ActionChunk
    trajectory: list
    nfe: int


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return arr


def ddpm_step(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    obs: ObservationWindow,
    a_k: ActionChunk,
    rng: Optional[np.random.Generator],
) -> ActionChunk:
    """One ancestral step k -> k-1; noise is forced to zero on the final step.

    Passing ``rng=None`` zeroes the noise at every level, which turns the
    chain into its deterministic mean path.
    """
    k = a_k.noise_level
    if k < 1:
        raise ValueError("ddpm_step requires noise level k >= 1")
    eps = denoiser(obs, a_k.values, k)
    alpha = schedule.alpha(k)
    abar = schedule.alpha_bar(k)
    mean = (a_k.values - (1.0 - alpha) / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)
    if rng is not None and k > 1:
        mean = mean + schedule.sigma(k) * rng.standard_normal(a_k.values.shape)
    return ActionChunk(_check_finite(mean, "ddpm_step"), k - 1)


def ddim_step(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    obs: ObservationWindow,
    a_k: ActionChunk,
    k_target: int,
    sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> ActionChunk:
    """One deterministic (or sigma-noised) skip step k -> k_target < k.

    Both levels use cumulative alpha products; level 0 maps to the clean
    prediction exactly.
    """
    k = a_k.noise_level
    if k_target >= k:
        raise ValueError(f"target level {k_target} must be below current {k}")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    ab_k = schedule.alpha_bar(k)
    ab_t = schedule.alpha_bar(k_target)
    eps = denoiser(obs, a_k.values, k)
    x0 = (a_k.values - math.sqrt(1.0 - ab_k) * eps) / math.sqrt(ab_k)
    dir_sq = 1.0 - ab_t - sigma * sigma
    if dir_sq < -1e-12:
        raise ValueError("sigma too large for target level")
    new = math.sqrt(ab_t) * x0 + math.sqrt(max(dir_sq, 0.0)) * eps
    if sigma > 0.0 and rng is not None and k_target >= 1:
        new = new + sigma * rng.standard_normal(a_k.values.shape)
    return ActionChunk(_check_finite(new, "ddim_step"), k_target)


def log_snr(schedule: NoiseSchedule, k: int) -> float:
    """Half the log signal-to-noise ratio at level k: ln(sqrt(abar/(1-abar)))."""
    abar = schedule.alpha_bar(k)
    if abar <= 0.0 or abar >= 1.0:
        raise ValueError(f"log-SNR undefined at level {k} (alpha_bar={abar})")
    return 0.5 * math.log(abar / (1.0 - abar))


def dpmsolver_step(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    obs: ObservationWindow,
    a_k: ActionChunk,
    k_target: int,
) -> ActionChunk:
    """First-order exponential-integrator step k -> k_target in log-SNR time.

    Using signal/noise scales alpha = sqrt(abar), sigma = sqrt(1 - abar):
    x' = (alpha'/alpha) x - sigma' (e^h - 1) eps with h the log-SNR gap.
    The terminal step to level 0 takes the exact sigma' -> 0 limit, which is
    the clean prediction (x - sigma eps) / alpha.
    """
    k = a_k.noise_level
    if k_target >= k:
        raise ValueError(f"target level {k_target} must be below current {k}")
    ab_k = schedule.alpha_bar(k)
    if ab_k <= 0.0 or ab_k >= 1.0:
        raise ValueError(f"log-SNR undefined at source level {k}")
    a_src = math.sqrt(ab_k)
    s_src = math.sqrt(1.0 - ab_k)
    eps = denoiser(obs, a_k.values, k)
    if k_target == 0:
        new = (a_k.values - s_src * eps) / a_src
        return ActionChunk(_check_finite(new, "dpmsolver_step"), 0)
    ab_t = schedule.alpha_bar(k_target)
    if ab_t <= 0.0 or ab_t >= 1.0:
        raise ValueError(f"log-SNR undefined at target level {k_target}")
    a_tgt = math.sqrt(ab_t)
    s_tgt = math.sqrt(1.0 - ab_t)
    h = log_snr(schedule, k_target) - log_snr(schedule, k)
    new = (a_tgt / a_src) * a_k.values - s_tgt * math.expm1(h) * eps
    return ActionChunk(_check_finite(new, "dpmsolver_step"), k_target)


def run_chain(
    kind: str,
    schedule: NoiseSchedule,
    grid: StepGrid,
    denoiser: Denoiser,
    obs: ObservationWindow,
    start: ActionChunk,
    rng: Optional[np.random.Generator],
    sink: Optional[Callable[[ActionChunk], None]] = None,
) -> ChainResult:
    """Run the step rule from the start level down to a clean level-0 chunk.

    The start level must lie on the grid.  Before every step the current
    chunk is handed to ``sink`` (the coupling point for the latent buffer),
    so the sink sees exactly ``nfe`` chunks at strictly decreasing levels.
    """
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}; expected one of {SAMPLER_KINDS}")
    levels = grid.levels_from(start.noise_level)  # raises if off-grid
    if kind == "ddpm" and not np.all(-np.diff(grid.levels) == 1):
        raise ValueError("ddpm requires the identity (full) grid")
    chunk = start
    trajectory = []
    nfe = 0
    for i, k in enumerate(levels):
        k = int(k)
        if sink is not None:
            sink(chunk)
        trajectory.append(chunk)
        target = int(levels[i + 1]) if i + 1 < len(levels) else 0
        if kind == "ddpm":
            chunk = ddpm_step(schedule, denoiser, obs, chunk, rng)
        elif kind == "ddim":
            chunk = ddim_step(schedule, denoiser, obs, chunk, target)
        else:
            chunk = dpmsolver_step(schedule, denoiser, obs, chunk, target)
        nfe += 1
    return ChainResult(final=chunk, trajectory=trajectory, nfe=nfe)


def gaussian_start(T_p: int, D_a: int, K: int, rng: np.random.Generator) -> ActionChunk:
    """Fresh pure-noise chunk at the top level."""
    return ActionChunk(rng.standard_normal((T_p, D_a)), K)
