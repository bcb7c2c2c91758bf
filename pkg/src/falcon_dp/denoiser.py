"""Noise-prediction functions over observation-conditioned action chunks.

Two interchangeable denoisers live here.  The analytic one computes the
exact noise prediction implied by a known conditional Gaussian mixture over
action chunks, which lets every sampler and warm-start path be checked
against ground truth.  The micro-MLP is a deliberately tiny trainable
network covering the standard noise-regression training loss and gradient
correctness checks; it is not meant to be a good policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ObservationWindow:
    """Latest T_o observation rows plus the decision timestep they belong to."""

    values: np.ndarray  # (T_o, D_o)
    t: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("observation window must be a T_o x D_o matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation window contains non-finite entries")


@dataclass(frozen=True)
class ActionChunk:
    """A T_p x D_a action matrix tagged with its noise level k (0 = clean)."""

    values: np.ndarray
    noise_level: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("action chunk must be a T_p x D_a matrix")
        if self.noise_level < 0:
            raise ValueError("noise level must be >= 0")
        if not np.all(np.isfinite(v)):
            raise ValueError("action chunk contains non-finite entries")


@dataclass(frozen=True)
class ConditionalMixture:
    """Observation-conditioned isotropic Gaussian mixture over action chunks.

    ``means(O)`` returns an (m, T_p, D_a) stack of component means for the
    given observation window; weights are shared across observations and the
    per-component covariance is ``component_std**2 * I``.
    """

    weights: np.ndarray
    means: Callable[[ObservationWindow], np.ndarray]
    component_std: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty vector")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        if self.component_std < 0:
            raise ValueError("component_std must be nonnegative")


def _noised_mixture_epsilon(
    weights: np.ndarray, means: np.ndarray, s: float, abar: float, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact noise prediction for values drawn from the noised mixture marginal.

    Each component of the clean mixture becomes N(sqrt(abar)*mu_i,
    (abar*s^2 + 1 - abar) I) after forward corruption to level k; the noise
    prediction is -sqrt(1-abar) times the score of that marginal.  Returns
    (epsilon, responsibilities).
    """
    if abar >= 1.0:
        # No corruption: nothing to predict. Responsibilities follow the
        # nearest component but the prediction is identically zero.
        return np.zeros_like(values), np.full(weights.shape, np.nan)
    var = abar * s * s + (1.0 - abar)
    resid = values[None, :, :] - math.sqrt(abar) * means  # (m, R, D)
    sq = np.einsum("mrd,mrd->m", resid, resid)
    logits = np.log(weights) - sq / (2.0 * var)
    logits -= logits.max()
    resp = np.exp(logits)
    resp /= resp.sum()
    eps = (math.sqrt(1.0 - abar) / var) * np.einsum("m,mrd->rd", resp, resid)
    return eps, resp


def analytic_epsilon(
    mix: ConditionalMixture,
    schedule: NoiseSchedule,
    obs: ObservationWindow,
    a_k: ActionChunk,
) -> np.ndarray:
    """Exact noise prediction for a chunk under the known conditional mixture."""
    k = a_k.noise_level
    if k < 1:
        raise ValueError("cannot predict noise at level 0 (sample is clean)")
    means = np.asarray(mix.means(obs), dtype=np.float64)
    if means.ndim != 3 or means.shape[0] != mix.weights.size:
        raise ValueError("means(O) must return an (m, T_p, D_a) stack")
    if means.shape[1:] != a_k.values.shape:
        raise ValueError(
            f"mixture means shape {means.shape[1:]} does not match chunk {a_k.values.shape}"
        )
    eps, _ = _noised_mixture_epsilon(
        mix.weights, means, mix.component_std, schedule.alpha_bar(k), a_k.values
    )
    return eps


def mixture_responsibilities(
    mix: ConditionalMixture,
    schedule: NoiseSchedule,
    obs: ObservationWindow,
    a_k: ActionChunk,
) -> np.ndarray:
    """Posterior component probabilities of the noised mixture at the chunk."""
    means = np.asarray(mix.means(obs), dtype=np.float64)
    _, resp = _noised_mixture_epsilon(
        mix.weights, means, mix.component_std, schedule.alpha_bar(a_k.noise_level), a_k.values
    )
    return resp


class MixtureDenoiser:
    """Adapter exposing the analytic mixture as a sampler-facing denoiser.

    Calls are counted so chains can be audited for their exact number of
    function evaluations.
    """

    def __init__(self, mix: ConditionalMixture, schedule: NoiseSchedule):
        self.mix = mix
        self.schedule = schedule
        self.calls = 0

    def __call__(self, obs: ObservationWindow, values: np.ndarray, k: int) -> np.ndarray:
        self.calls += 1
        return analytic_epsilon(self.mix, self.schedule, obs, ActionChunk(values, k))


# ---------------------------------------------------------------------------
# Micro-MLP: a minimal trainable noise predictor.
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MicroMlp:
    """Fully connected noise predictor on flattened (O, A, k/K) inputs.

    ``weights[l]`` has shape (fan_out, fan_in); hidden layers apply the
    activation, the output layer is linear.  Mutable: training updates the
    arrays in place.
    """

    T_o: int
    D_o: int
    T_p: int
    D_a: int
    K: int
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.T_o * self.D_o + self.T_p * self.D_a + 1

    @property
    def out_dim(self) -> int:
        return self.T_p * self.D_a

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def to_json_obj(self) -> dict:
        return {
            "T_o": self.T_o, "D_o": self.D_o, "T_p": self.T_p, "D_a": self.D_a,
            "K": self.K, "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "MicroMlp":
        net = MicroMlp(
            T_o=obj["T_o"], D_o=obj["D_o"], T_p=obj["T_p"], D_a=obj["D_a"],
            K=obj["K"], activation=obj["activation"],
        )
        net.weights = [np.asarray(w, dtype=np.float64) for w in obj["weights"]]
        net.biases = [np.asarray(b, dtype=np.float64) for b in obj["biases"]]
        _check_layer_chain(net)
        return net


def _check_layer_chain(net: MicroMlp) -> None:
    if net.activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {net.activation!r}")
    if len(net.weights) != len(net.biases) or not net.weights:
        raise ValueError("weights/biases layer counts must match and be nonempty")
    fan_in = net.in_dim
    for w, b in zip(net.weights, net.biases):
        if w.shape[1] != fan_in or b.shape != (w.shape[0],):
            raise ValueError("inconsistent layer shapes")
        fan_in = w.shape[0]
    if fan_in != net.out_dim:
        raise ValueError("output dimension must equal T_p * D_a")


def init_micro_mlp(
    T_o: int, D_o: int, T_p: int, D_a: int, K: int,
    hidden=(32,), activation: str = "tanh", seed: int = 0, scale: float | None = None,
) -> MicroMlp:
    net = MicroMlp(T_o=T_o, D_o=D_o, T_p=T_p, D_a=D_a, K=K, activation=activation)
    rng = np.random.default_rng(seed)
    dims = [net.in_dim, *hidden, net.out_dim]
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        sd = scale if scale is not None else 1.0 / math.sqrt(fan_in)
        net.weights.append(rng.normal(0.0, sd, size=(fan_out, fan_in)))
        net.biases.append(np.zeros(fan_out))
    _check_layer_chain(net)
    return net


def _assemble_input(net: MicroMlp, obs: ObservationWindow, values: np.ndarray, k) -> np.ndarray:
    if obs.values.shape != (net.T_o, net.D_o):
        raise ValueError(f"observation shape {obs.values.shape} != ({net.T_o}, {net.D_o})")
    if values.shape != (net.T_p, net.D_a):
        raise ValueError(f"action shape {values.shape} != ({net.T_p}, {net.D_a})")
    k_feat = np.atleast_1d(np.asarray(k, dtype=np.float64) / net.K)
    return np.concatenate([obs.values.ravel(), values.ravel(), k_feat])


def _forward(net: MicroMlp, x: np.ndarray):
    """Forward pass on a batch (B, in_dim); returns output and layer caches."""
    z = x
    pre, post = [], [z]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = z @ w.T + b
        pre.append(a)
        z = a if l == last or net.activation == "identity" else np.tanh(a)
        post.append(z)
    return z, (pre, post)


def _backward(net: MicroMlp, cache, d_out: np.ndarray):
    """Gradients of a scalar loss wrt all parameters given d loss / d output."""
    pre, post = cache
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    delta = d_out
    for l in range(len(net.weights) - 1, -1, -1):
        gw[l] = delta.T @ post[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ net.weights[l]
            if net.activation == "tanh":
                delta = delta * (1.0 - np.tanh(pre[l - 1]) ** 2)
    return gw, gb


def mlp_epsilon(net: MicroMlp, obs: ObservationWindow, a_k: ActionChunk) -> np.ndarray:
    """Network noise prediction; a pure function of inputs and weights."""
    x = _assemble_input(net, obs, a_k.values, a_k.noise_level)
    y, _ = _forward(net, x[None, :])
    return y[0].reshape(net.T_p, net.D_a)


class MlpDenoiser:
    """Sampler-facing adapter for a micro-MLP, with call counting."""

    def __init__(self, net: MicroMlp):
        self.net = net
        self.calls = 0

    def __call__(self, obs: ObservationWindow, values: np.ndarray, k: int) -> np.ndarray:
        self.calls += 1
        return mlp_epsilon(self.net, obs, ActionChunk(values, k))


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0


def _batch_loss_and_grads(net: MicroMlp, X: np.ndarray, E: np.ndarray):
    """Mean over the batch of the squared noise-prediction error, plus grads."""
    y, cache = _forward(net, X)
    resid = y - E
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    d_out = 2.0 * resid / X.shape[0]
    gw, gb = _backward(net, cache, d_out)
    return loss, gw, gb


def train_micro_mlp(
    net: MicroMlp,
    dataset,
    schedule: NoiseSchedule,
    opt: TrainOptions = TrainOptions(),
):
    """Stochastic-gradient training of the noise-regression objective.

    Each step draws a uniform level k and fresh Gaussian noise per sample,
    corrupts the clean chunk to that level, and regresses the injected noise.
    Returns the (mutated) net and the per-epoch mean loss trace.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset must be nonempty")
    if opt.epochs < 1:
        raise ValueError("epochs must be >= 1")
    obs_flat = np.stack([o.values.ravel() for o, _ in pairs])
    clean = np.stack([np.asarray(a, dtype=np.float64).ravel() for _, a in pairs])
    n = len(pairs)
    rng = np.random.default_rng(opt.seed)
    abars = np.asarray([schedule.alpha_bar(k) for k in range(1, schedule.K + 1)])
    losses = []
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, opt.batch_size):
            idx = order[lo: lo + opt.batch_size]
            ks = rng.integers(1, schedule.K + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, net.out_dim))
            ab = abars[ks - 1][:, None]
            noisy = np.sqrt(ab) * clean[idx] + np.sqrt(1.0 - ab) * eps
            X = np.concatenate(
                [obs_flat[idx], noisy, (ks / net.K)[:, None]], axis=1
            )
            loss, gw, gb = _batch_loss_and_grads(net, X, eps)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch starting {lo}"
                )
            for w, g in zip(net.weights, gw):
                w -= opt.lr * g
            for b, g in zip(net.biases, gb):
                b -= opt.lr * g
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return net, losses


def gradcheck(net: MicroMlp, probe, schedule: NoiseSchedule, step: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference grads.

    ``probe`` is (obs, clean_chunk, k, eps); the checked scalar is the
    single-sample noise-regression loss with the chunk corrupted to level k
    using the probe's fixed noise.
    """
    obs, clean, k, eps = probe
    clean = np.asarray(clean, dtype=np.float64)
    target = np.asarray(eps, dtype=np.float64).ravel()[None, :]
    ab = schedule.alpha_bar(k)
    noisy = math.sqrt(ab) * clean + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)
    x = _assemble_input(net, obs, noisy, k)[None, :]
    h = step

    def loss_only():
        y, _ = _forward(net, x)
        return float(np.sum((y - target) ** 2))

    y, cache = _forward(net, x)
    d_out = 2.0 * (y - target)
    gw, gb = _backward(net, cache, d_out)

    worst = 0.0
    for arr, grad in [*zip(net.weights, gw), *zip(net.biases, gb)]:
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_only()
            flat[i] = orig - h
            dn = loss_only()
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            rel = abs(gflat[i] - fd) / (abs(gflat[i]) + 1e-8)
            worst = max(worst, rel)
    return worst
