"""Synthetic sequential-decision tasks with analytic expert action mixtures.

Each task is a point agent under direct velocity integration (unit timestep,
one action row per step).  The expert behavior is an observation-conditioned
Gaussian mixture over full action chunks, which makes the exact denoiser
available and gives every claim a ground truth:

- ``smooth_track``: one component following a fixed smooth curve to a goal;
  consecutive plans overlap almost exactly (strong sequential dependency).
- ``bimodal_push``: two equal-weight components, one per goal, until the
  first decisive motion commits a mode; preserves multimodality questions.
- ``jumpy_switch``: one component tracking a commanded constant-speed
  direction that reverses abruptly at random switch steps, breaking plan
  overlap (weak sequential dependency).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .denoiser import ConditionalMixture, ObservationWindow

ENV_NAMES = ("smooth_track", "bimodal_push", "jumpy_switch")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    T_o: int = 2
    T_a: int = 8
    T_p: int = 16
    D_o: int = 4
    D_a: int = 2
    episode_length: int = 64
    success_radius: float = 0.3
    component_std: float = 0.02
    # smooth_track: fixed curve from the anchor to anchor + path_span with a
    # sine arc of height path_arc; executed rows absorb the tracking offset.
    path_span: tuple = (2.0, 0.0)
    path_arc: float = 0.5
    # bimodal_push: candidate goals and speed cap.
    goals: tuple = ((-1.0, 1.2), (1.0, 1.2))
    speed: float = 0.12
    # jumpy_switch: per-step probability that the commanded direction
    # reverses (plus jitter); the score target is the commanded endpoint.
    switch_rate: float = 0.1

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.name!r}; expected one of {ENV_NAMES}")
        if not 1 <= self.T_a < self.T_p:
            raise ValueError("horizons must satisfy 1 <= T_a < T_p")
        if self.T_o < 1:
            raise ValueError("T_o must be >= 1")
        if self.episode_length % self.T_a != 0 or self.episode_length < self.T_a:
            raise ValueError("episode length must be a positive multiple of T_a")
        if self.D_o != 4 or self.D_a != 2:
            raise ValueError("synthetic tasks are defined for D_o=4, D_a=2")
        if self.success_radius <= 0:
            raise ValueError("success radius must be positive")

    @property
    def decisions(self) -> int:
        return self.episode_length // self.T_a


_DEFAULTS = {
    "smooth_track": dict(speed=0.12),
    "bimodal_push": dict(speed=0.12),
    "jumpy_switch": dict(speed=0.5, success_radius=1.5),
}


def make_env_spec(name: str, **overrides) -> EnvSpec:
    params = dict(_DEFAULTS.get(name, {}))
    params.update(overrides)
    return EnvSpec(name=name, **params)


@dataclass
class EnvState:
    pos: np.ndarray
    t: int
    mode: Optional[int]
    anchor: np.ndarray
    dirs: Optional[np.ndarray]  # (episode_length, 2) commanded unit dirs, jumpy
    path: Optional[np.ndarray]  # (episode_length + 1, 2) commanded positions
    history: list = field(default_factory=list)


def _shape_point(spec: EnvSpec, g: float) -> np.ndarray:
    """Curve displacement at wall-clock step g, clamped at the episode end."""
    u = min(max(g / spec.episode_length, 0.0), 1.0)
    span = np.asarray(spec.path_span, dtype=np.float64)
    return span * u + np.array([0.0, spec.path_arc * math.sin(math.pi * u)])


def _encode(state: EnvState, spec: EnvSpec) -> np.ndarray:
    if spec.name == "smooth_track":
        off = state.anchor + _shape_point(spec, state.t) - state.pos
        return np.array([off[0], off[1], state.t / spec.episode_length, 0.0])
    if spec.name == "bimodal_push":
        flag = 0.0 if state.mode is None else (-1.0 if state.mode == 0 else 1.0)
        return np.array([state.pos[0], state.pos[1], flag, state.t / spec.episode_length])
    off = state.path[state.t] - state.pos
    d = state.dirs[min(state.t, spec.episode_length - 1)]
    return np.array([off[0], off[1], d[0], d[1]])


def rebuild_commanded_path(state: EnvState, spec: EnvSpec) -> None:
    """Recompute the commanded positions from the direction schedule."""
    state.path = np.empty((spec.episode_length + 1, 2))
    state.path[0] = state.anchor
    for g in range(spec.episode_length):
        state.path[g + 1] = state.path[g] + spec.speed * state.dirs[g]


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Fresh episode state; positions start inside a +-0.1 box around origin."""
    anchor = rng.uniform(-0.1, 0.1, size=2)
    pos = anchor + rng.uniform(-0.05, 0.05, size=2)
    dirs = None
    state = EnvState(pos=pos, t=0, mode=None, anchor=anchor, dirs=dirs, path=None)
    if spec.name == "jumpy_switch":
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dirs = np.empty((spec.episode_length, 2))
        for g in range(spec.episode_length):
            if g > 0 and rng.uniform() < spec.switch_rate:
                # Reverse (with jitter) so overlapping plans genuinely break.
                angle = angle + math.pi + rng.uniform(-math.pi / 3, math.pi / 3)
            dirs[g] = (math.cos(angle), math.sin(angle))
        state.dirs = dirs
        rebuild_commanded_path(state, spec)
    state.history.append(_encode(state, spec))
    return state


def observe(state: EnvState, spec: EnvSpec) -> ObservationWindow:
    """Window of the latest T_o encodings, repeated backwards at episode start."""
    rows = [
        state.history[max(0, len(state.history) - 1 - j)]
        for j in range(spec.T_o - 1, -1, -1)
    ]
    return ObservationWindow(np.stack(rows), t=state.t + 1)


def _toward(pos: np.ndarray, goal: np.ndarray, speed: float, rows: int) -> np.ndarray:
    """Velocity rows chasing a goal under a per-step speed cap."""
    out = np.empty((rows, 2))
    p = pos.astype(np.float64).copy()
    for j in range(rows):
        d = goal - p
        dist = float(np.linalg.norm(d))
        step = d if dist <= speed else d * (speed / dist)
        out[j] = step
        p += step
    return out


def _smooth_mean(spec: EnvSpec, enc: np.ndarray) -> np.ndarray:
    off = enc[:2]
    g = int(round(enc[2] * spec.episode_length))
    rows = np.empty((spec.T_p, 2))
    for j in range(spec.T_p):
        rows[j] = _shape_point(spec, g + j + 1) - _shape_point(spec, g + j)
        if j < spec.T_a:
            rows[j] += off / spec.T_a
    return rows


def _jumpy_mean(spec: EnvSpec, enc: np.ndarray) -> np.ndarray:
    # The expert cannot anticipate future reversals: it extends the current
    # commanded direction and absorbs the tracking offset over the executed
    # prefix.
    off, d = enc[:2], enc[2:4]
    rows = np.tile(spec.speed * d, (spec.T_p, 1))
    rows[: spec.T_a] += off / spec.T_a
    return rows


def expert_mixture(spec: EnvSpec, obs: ObservationWindow) -> ConditionalMixture:
    """Ground-truth conditional mixture over action chunks for this observation.

    The returned means callable re-reads whatever observation it is handed,
    so one mixture serves every denoiser evaluation within the decision.
    """
    s = spec.component_std
    if spec.name == "smooth_track":
        return ConditionalMixture(
            weights=np.array([1.0]),
            means=lambda o: _smooth_mean(spec, o.values[-1])[None],
            component_std=s,
        )
    if spec.name == "bimodal_push":
        goals = np.asarray(spec.goals, dtype=np.float64)
        flag = obs.values[-1, 2]

        def means(o: ObservationWindow) -> np.ndarray:
            pos = o.values[-1, :2]
            f = o.values[-1, 2]
            if f == 0.0:
                return np.stack(
                    [_toward(pos, g, spec.speed, spec.T_p) for g in goals]
                )
            goal = goals[0] if f < 0 else goals[1]
            return _toward(pos, goal, spec.speed, spec.T_p)[None]

        if flag == 0.0:
            weights = np.array([0.5, 0.5])
        else:
            weights = np.array([1.0])
        return ConditionalMixture(weights=weights, means=means, component_std=s)
    # jumpy_switch
    return ConditionalMixture(
        weights=np.array([1.0]),
        means=lambda o: _jumpy_mean(spec, o.values[-1])[None],
        component_std=s,
    )


def step_execute(state: EnvState, actions: np.ndarray, spec: EnvSpec) -> EnvState:
    """Integrate the executed T_a velocity rows; commits the bimodal mode once."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (spec.T_a, spec.D_a):
        raise ValueError(f"expected ({spec.T_a}, {spec.D_a}) action rows, got {actions.shape}")
    if not np.all(np.isfinite(actions)):
        raise ValueError("non-finite action rows")
    if state.t + spec.T_a > spec.episode_length:
        raise ValueError("episode is already complete")
    before = state.pos.copy()
    for row in actions:
        state.pos = state.pos + row
        state.t += 1
        state.history.append(_encode(state, spec))
    if spec.name == "bimodal_push" and state.mode is None:
        disp = state.pos - before
        if np.linalg.norm(disp) >= 0.25 * spec.speed * spec.T_a:
            goals = np.asarray(spec.goals, dtype=np.float64)
            sims = [
                float(np.dot(disp, g - before) / (np.linalg.norm(g - before) + 1e-12))
                for g in goals
            ]
            state.mode = int(np.argmax(sims))
            # Refresh history rows are not rewritten; future encodings carry
            # the committed flag.
            state.history[-1] = _encode(state, spec)
    return state


def episode_goal(state: EnvState, spec: EnvSpec) -> Optional[np.ndarray]:
    """Terminal target the score measures against (None if uncommitted bimodal)."""
    if spec.name == "smooth_track":
        return state.anchor + _shape_point(spec, spec.episode_length)
    if spec.name == "bimodal_push":
        if state.mode is None:
            return None
        return np.asarray(spec.goals[state.mode], dtype=np.float64)
    return state.path[spec.episode_length]


@dataclass
class EpisodeRecord:
    """Everything one episode produced, in decision order."""

    spec_name: str
    seed: int
    decisions: list
    executed: list
    final_pos: np.ndarray
    goal: Optional[np.ndarray]
    mode: Optional[int]
    complete: bool

    @property
    def finals(self) -> list:
        return [d.chunk.values for d in self.decisions]


def score(record: EpisodeRecord, spec: EnvSpec) -> float:
    """Binary success: strictly inside the radius of the episode's goal."""
    if not record.complete or len(record.executed) != spec.decisions:
        raise ValueError("score requires a complete episode")
    if record.goal is None:
        return 0.0
    dist = float(np.linalg.norm(record.final_pos - record.goal))
    return 1.0 if dist < spec.success_radius else 0.0


def expert_rollout(spec: EnvSpec, seed: int) -> EpisodeRecord:
    """Closed-loop rollout executing the expert mean at every decision."""
    rng = np.random.default_rng([seed, 0])
    state = reset(spec, rng)
    executed = []
    for _ in range(spec.decisions):
        obs = observe(state, spec)
        mix = expert_mixture(spec, obs)
        means = np.asarray(mix.means(obs))
        if means.shape[0] > 1:
            comp = int(rng.integers(means.shape[0]))
        else:
            comp = 0
        chunk = means[comp]
        step_execute(state, chunk[: spec.T_a], spec)
        executed.append(chunk[: spec.T_a])
    return EpisodeRecord(
        spec_name=spec.name,
        seed=seed,
        decisions=[],
        executed=executed,
        final_pos=state.pos.copy(),
        goal=episode_goal(state, spec),
        mode=state.mode,
        complete=True,
    )


def export_expert_dataset(spec: EnvSpec, n_episodes: int, seed: int, path) -> int:
    """Write (observation, clean chunk) rows from expert rollouts as CSV.

    The one-line header names the flattened layout; returns the row count.
    """
    rows = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep])
        state = reset(spec, rng)
        for _ in range(spec.decisions):
            obs = observe(state, spec)
            mix = expert_mixture(spec, obs)
            means = np.asarray(mix.means(obs))
            comp = int(rng.choice(means.shape[0], p=mix.weights))
            chunk = means[comp] + mix.component_std * rng.standard_normal(means[comp].shape)
            rows.append(np.concatenate([obs.values.ravel(), chunk.ravel()]))
            step_execute(state, chunk[: spec.T_a], spec)
    header = (
        f"obs[{spec.T_o}x{spec.D_o}] then action[{spec.T_p}x{spec.D_a}], row-major"
    )
    data = np.stack(rows)
    np.savetxt(path, data, delimiter=",", header=header)
    return len(rows)
