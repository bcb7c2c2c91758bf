"""Warm-start action generation from buffered partially denoised chunks.

Instead of denoising every decision from fresh Gaussian noise, past chains'
intermediate chunks are kept in a bounded priority buffer.  At each decision
the buffer is screened in one batched pass: every entry is jumped to a clean
posterior-mean estimate with a single denoiser evaluation, compared against
the unexecuted tail of the previous prediction on the overlapping wall-clock
rows, and the surviving candidates compete in a temperature softmax that
prefers low noise levels.  An exploration coin occasionally forces a fresh
Gaussian restart so the buffer never starves the policy of diversity.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .denoiser import ActionChunk, ObservationWindow
from .samplers import Denoiser, run_chain
from .schedule import NoiseSchedule, StepGrid


@dataclass(frozen=True)
class PartialAction:
    """An action chunk frozen mid-chain: origin decision step and noise level."""

    tau: int
    k: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if self.tau < 1:
            raise ValueError("origin step tau must be >= 1")
        if self.k < 1:
            raise ValueError("buffered noise level must be >= 1")
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("values must be a finite T_p x D_a matrix")


class LatentBuffer:
    """Bounded container of partial actions with deterministic eviction.

    When full, the entry with the smallest origin step is evicted first;
    ties break toward the highest noise level, then insertion order.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._heap: list = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def insert(self, p: PartialAction) -> None:
        heapq.heappush(self._heap, (p.tau, -p.k, self._seq, p))
        self._seq += 1
        if len(self._heap) > self.capacity:
            heapq.heappop(self._heap)

    def entries(self) -> list:
        """Current entries in deterministic (tau asc, k desc, age) order."""
        return [item[3] for item in sorted(self._heap)]

    def clear(self) -> None:
        self._heap.clear()


@dataclass(frozen=True)
class FalconConfig:
    """Knobs of the warm-start mechanism.

    ``epsilon`` is the candidate distance threshold (by default on the
    row-count-normalized RMS scale, see ``normalized_distance``), ``delta``
    the probability of a fresh Gaussian restart, ``kappa`` the softmax
    temperature over candidate noise levels, ``k_min`` the lowest reusable
    level, and ``capacity`` the buffer bound.  ``fixed_start_level`` bypasses
    adaptive selection and always reuses the newest entry at that level (the
    degraded variant used for selection-mechanism comparisons).
    """

    epsilon: float
    delta: float
    kappa: float = 1.0
    k_min: int = 1
    capacity: int = 50
    normalized_distance: bool = True
    fixed_start_level: Optional[int] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")


@dataclass(frozen=True)
class ReferenceAction:
    """Unexecuted tail of the previous prediction, anchored at wall-clock t.

    Covers steps [t, t + rows); rows = T_p - T_a.
    """

    values: np.ndarray
    t: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("reference must have at least one row")


@dataclass(frozen=True)
class DecisionResult:
    """One decision's output: the clean chunk plus cost accounting.

    ``start_origin`` is (tau, k_s) when a buffered partial was reused and
    None for a fresh Gaussian start.  ``nfe_sequential`` counts chain steps;
    the batched screening pass is reported separately in
    ``estimation_batch`` since it parallelizes across the buffer.
    """

    chunk: ActionChunk
    start_origin: Optional[tuple]
    nfe_sequential: int
    estimation_batch: int

    @property
    def explored(self) -> bool:
        return self.start_origin is None


@dataclass
class FalconState:
    """Per-episode mutable state: the buffer and the pending reference."""

    buffer: LatentBuffer
    reference: Optional[ReferenceAction]
    T_a: int

    @staticmethod
    def fresh(cfg: FalconConfig, T_a: int) -> "FalconState":
        return FalconState(buffer=LatentBuffer(cfg.capacity), reference=None, T_a=T_a)


def overlap_range(tau: int, t: int, T_p: int, T_a: int) -> tuple:
    """Wall-clock intersection of a candidate span with the reference span.

    Candidate covers [tau, tau + T_p); the reference covers
    [t, t - T_a + T_p).  Returns (lo, hi); empty when lo >= hi.
    """
    lo = max(tau, t)
    hi = min(tau + T_p, t - T_a + T_p)
    return lo, hi


def tweedie_estimate(
    schedule,
    denoiser: Denoiser,
    obs: ObservationWindow,
    p: PartialAction,
    T_a: int,
) -> Optional[np.ndarray]:
    """Posterior-mean jump of a buffered partial, restricted to overlap rows.

    Costs exactly one denoiser evaluation.  Returns None when the candidate
    shares no wall-clock rows with the reference span (such candidates are
    skipped, not an error).
    """
    if p.k < 1:
        raise ValueError("cannot estimate a clean entry")
    T_p = p.values.shape[0]
    lo, hi = overlap_range(p.tau, obs.t, T_p, T_a)
    if lo >= hi:
        return None
    abar = schedule.alpha_bar(p.k)
    eps = denoiser(obs, p.values, p.k)
    estimate = (p.values - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
    return estimate[lo - p.tau: hi - p.tau]


def candidate_distance(
    estimate: np.ndarray,
    reference: ReferenceAction,
    p: PartialAction,
    T_a: int,
    normalized: bool = True,
) -> float:
    """L2 distance between an overlap-restricted estimate and the reference.

    With ``normalized`` the raw norm is divided by sqrt(rows * D_a) so the
    threshold reads as a per-element RMS, comparable across horizons.
    """
    T_p = p.values.shape[0]
    lo, hi = overlap_range(p.tau, reference.t, T_p, T_a)
    ref_rows = reference.values[lo - reference.t: hi - reference.t]
    if estimate.shape != ref_rows.shape:
        raise ValueError(
            f"estimate rows {estimate.shape} misaligned with reference rows {ref_rows.shape}"
        )
    d = float(np.linalg.norm(estimate - ref_rows))
    if normalized:
        d /= math.sqrt(estimate.size)
    return d


def build_candidate_set(
    entries: list,
    estimates: list,
    reference: ReferenceAction,
    cfg: FalconConfig,
    T_a: int,
) -> list:
    """Entries whose estimates fall strictly inside epsilon, at reusable levels."""
    if len(entries) != len(estimates):
        raise ValueError("estimates must align one-to-one with buffer entries")
    chosen = []
    for p, est in zip(entries, estimates):
        if est is None or p.k < cfg.k_min:
            continue
        d = candidate_distance(est, reference, p, T_a, cfg.normalized_distance)
        if d < cfg.epsilon:
            chosen.append(p)
    return chosen


def selection_probabilities(candidates: list, cfg: FalconConfig) -> np.ndarray:
    """Softmax weights exp(-k/kappa) over the candidate set, low noise favored."""
    ks = np.array([p.k for p in candidates], dtype=np.float64)
    logits = -(ks - ks.min()) / cfg.kappa
    w = np.exp(logits)
    return w / w.sum()


def select_start(
    candidates: list,
    cfg: FalconConfig,
    rng: np.random.Generator,
    K: int,
) -> Optional[PartialAction]:
    """Pick a warm start, or None for a fresh Gaussian restart at level K.

    The exploration coin is always drawn first so the decision consumes a
    stable number of draws from the selection stream.
    """
    coin = rng.uniform()
    if coin < cfg.delta or not candidates:
        return None
    probs = selection_probabilities(candidates, cfg)
    idx = int(rng.choice(len(candidates), p=probs))
    return candidates[idx]


def _pick_fixed_level(entries: list, level: int) -> Optional[PartialAction]:
    at_level = [p for p in entries if p.k == level]
    if not at_level:
        return None
    return max(at_level, key=lambda p: p.tau)


def falcon_decide(
    kind: str,
    schedule: NoiseSchedule,
    grid: StepGrid,
    denoiser: Denoiser,
    obs: ObservationWindow,
    state: FalconState,
    cfg: FalconConfig,
    rng: np.random.Generator,
    select_rng: np.random.Generator,
    T_p: int,
    D_a: int,
) -> DecisionResult:
    """Produce one decision's clean action chunk, warm-starting when possible.

    The first decision (no reference yet) runs the full baseline chain from
    Gaussian noise.  Later decisions screen the whole buffer with one batched
    estimation pass, pick a start, reassign its values to the current window
    and complete the chain; every visited level is buffered for the future.
    The chain consumes only ``rng`` so that with delta = 1 the emitted chunks
    are bit-identical to the plain sampler under a shared stream.
    """
    t = obs.t
    chosen = None
    est_count = 0
    if state.reference is not None:
        entries = state.buffer.entries()
        estimates = [
            tweedie_estimate(schedule, denoiser, obs, p, state.T_a) for p in entries
        ]
        est_count = sum(e is not None for e in estimates)
        if cfg.fixed_start_level is not None:
            if select_rng.uniform() >= cfg.delta:
                chosen = _pick_fixed_level(entries, cfg.fixed_start_level)
        else:
            candidates = build_candidate_set(
                entries, estimates, state.reference, cfg, state.T_a
            )
            chosen = select_start(candidates, cfg, select_rng, schedule.K)
    if chosen is None:
        start = ActionChunk(rng.standard_normal((T_p, D_a)), schedule.K)
        origin = None
    else:
        # Time-shift reuse: the buffered values become this window's chunk
        # verbatim; conditioning on the current observation corrects them
        # over the remaining chain.
        start = ActionChunk(chosen.values.copy(), chosen.k)
        origin = (chosen.tau, chosen.k)

    def sink(chunk: ActionChunk) -> None:
        state.buffer.insert(PartialAction(tau=t, k=chunk.noise_level, values=chunk.values))

    result = run_chain(kind, schedule, grid, denoiser, obs, start, rng, sink)
    state.reference = ReferenceAction(result.final.values[state.T_a:], t + state.T_a)
    return DecisionResult(
        chunk=result.final,
        start_origin=origin,
        nfe_sequential=result.nfe,
        estimation_batch=est_count,
    )
