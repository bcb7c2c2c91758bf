"""Discrete noise schedules and few-step sampling grids.

A schedule holds the per-level coefficients (beta, alpha, alpha_bar, sigma)
for K discrete noise levels, indexed 1..K.  Level 0 is the clean sample and
is handled by convention: ``alpha_bar(0) == 1.0``.  Step grids pick M of the
K levels for few-step solvers; the terminal descent to level 0 is implicit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

# Reverse-step noise rules: "posterior" uses the forward-process posterior
# variance beta_k * (1 - abar_{k-1}) / (1 - abar_k); "beta" uses beta_k.
SIGMA_KINDS = ("posterior", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients of a K-level discrete diffusion, levels 1..K.

    Arrays are stored 0-indexed (entry ``i`` is level ``i + 1``); use the
    level accessors for 1-based lookup.  Immutable after construction.
    """

    kind: str
    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_kind: str = "posterior"

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _validate(self)

    def beta(self, k: int) -> float:
        return float(self.betas[self._idx(k)])

    def alpha(self, k: int) -> float:
        return float(self.alphas[self._idx(k)])

    def alpha_bar(self, k: int) -> float:
        if k == 0:
            return 1.0
        return float(self.alpha_bars[self._idx(k)])

    def sigma(self, k: int) -> float:
        return float(self.sigmas[self._idx(k)])

    def _idx(self, k: int) -> int:
        if not 1 <= k <= self.K:
            raise ValueError(f"noise level {k} outside [1, {self.K}]")
        return k - 1

    def to_json(self) -> str:
        obj = {"kind": self.kind, "K": self.K, "betas": self.betas.tolist()}
        return json.dumps(obj, sort_keys=True)

    @staticmethod
    def from_json(text: str, sigma_kind: str = "posterior") -> "NoiseSchedule":
        obj = json.loads(text)
        return schedule_from_betas(obj["betas"], kind=obj["kind"], sigma_kind=sigma_kind)


def _validate(s: NoiseSchedule) -> None:
    if s.K < 1:
        raise ValueError("K must be >= 1")
    for name in ("betas", "alphas", "alpha_bars", "sigmas"):
        if getattr(s, name).shape != (s.K,):
            raise ValueError(f"{name} must have shape ({s.K},)")
    if np.any(s.betas <= 0.0) or np.any(s.betas >= 1.0):
        raise ValueError("betas must lie strictly inside (0, 1)")
    if not np.allclose(s.alphas, 1.0 - s.betas, rtol=0, atol=0):
        raise ValueError("alphas must equal 1 - betas exactly")
    if s.K > 1 and np.any(np.diff(s.alpha_bars) >= 0.0):
        raise ValueError("alpha_bars must be strictly decreasing")
    prev = np.concatenate(([1.0], s.alpha_bars[:-1]))
    if np.max(np.abs(s.alpha_bars - s.alphas * prev)) > 1e-12:
        raise ValueError("alpha_bars inconsistent with cumulative product of alphas")
    if np.any(s.sigmas < 0.0) or np.any(s.sigmas**2 > s.betas * (1 + 1e-12)):
        raise ValueError("sigmas must satisfy 0 <= sigma_k^2 <= beta_k")


def _linear_betas(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    return np.linspace(beta_start, beta_end, K, dtype=np.float64)


def _cosine_betas(K: int, offset: float = 0.008) -> np.ndarray:
    # Squared-cosine alpha_bar curve; betas recovered from consecutive ratios
    # and capped so every beta stays inside (0, 1).
    steps = np.arange(K + 1, dtype=np.float64) / K
    curve = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
    curve = curve / curve[0]
    betas = 1.0 - curve[1:] / curve[:-1]
    return np.clip(betas, 1e-8, 0.999)


def schedule_from_betas(
    betas, kind: str = "custom", sigma_kind: str = "posterior"
) -> NoiseSchedule:
    """Build a schedule from an explicit beta vector."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("betas must be a nonempty 1-D vector")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma_kind == "posterior":
        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    elif sigma_kind == "beta":
        sigmas = np.sqrt(betas)
    else:
        raise ValueError(f"unknown sigma_kind {sigma_kind!r}; expected one of {SIGMA_KINDS}")
    return NoiseSchedule(
        kind=kind,
        K=int(betas.size),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        sigma_kind=sigma_kind,
    )


def build_schedule(kind: str, K: int, sigma_kind: str = "posterior") -> NoiseSchedule:
    """Construct a K-level schedule of the given family.

    ``linear`` ramps beta over the classic (1e-4, 0.02) range and exists
    mainly for tests; ``cosine`` is the default family for experiments.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "linear":
        betas = _linear_betas(K)
    elif kind == "cosine":
        betas = _cosine_betas(K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return schedule_from_betas(betas, kind=kind, sigma_kind=sigma_kind)


@dataclass(frozen=True)
class StepGrid:
    """Few-step solver grid: M distinct levels, descending, topped at K.

    ``levels[0] == K`` and the final transition from ``levels[-1]`` down to
    level 0 is implicit, so a chain over the grid applies exactly
    ``len(levels)`` solver steps.
    """

    K: int
    levels: np.ndarray = field(repr=True)

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.int64)
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)
        if lv.ndim != 1 or lv.size < 1:
            raise ValueError("levels must be a nonempty 1-D vector")
        if lv[0] != self.K:
            raise ValueError("grid must start at level K")
        if np.any(lv < 1) or np.any(lv > self.K):
            raise ValueError("grid levels must lie in [1, K]")
        if np.any(np.diff(lv) >= 0):
            raise ValueError("grid levels must be strictly decreasing")

    @property
    def M(self) -> int:
        return int(self.levels.size)

    def position(self, k: int) -> int:
        """Index of level k within the grid (0 is the top, K)."""
        hits = np.nonzero(self.levels == k)[0]
        if hits.size == 0:
            raise ValueError(f"level {k} is not on the grid")
        return int(hits[0])

    def steps_from(self, k: int) -> int:
        """Number of solver steps remaining when starting at grid level k."""
        return self.M - self.position(k)

    def levels_from(self, k: int) -> np.ndarray:
        """Grid levels visited starting at k (inclusive), descending."""
        return self.levels[self.position(k):]


def make_step_grid(K: int, M: int) -> StepGrid:
    """Uniform-stride grid: k_i = round(i*K/M) for i = M..1, deduplicated."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 1 <= M <= K:
        raise ValueError(f"M must satisfy 1 <= M <= K, got M={M}, K={K}")
    raw = [int(np.rint(i * K / M)) for i in range(M, 0, -1)]
    levels = []
    for k in raw:
        if not levels or k < levels[-1]:
            levels.append(k)
    return StepGrid(K=K, levels=np.asarray(levels, dtype=np.int64))


def full_grid(K: int) -> StepGrid:
    """The K-step identity grid used by the full-chain stochastic sampler."""
    return make_step_grid(K, K)
