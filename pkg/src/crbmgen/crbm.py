"""Convolutional Restricted Boltzmann Machine.

One-dimensional convolution over time with full-height filters, strided
hidden units, a per-pitch visible bias, and Persistent Contrastive
Divergence training with L2/L1/max-norm/sparsity regularization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, FormatError
from .pianoroll import roll_array

MODEL_MAGIC = b"CRBM1"
INIT_STD = 0.01


@dataclass(frozen=True)
class CrbmParams:
    """Filters (K, R, P), biases, and the temporal stride."""

    filters: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    stride: int

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_width(self) -> int:
        return self.filters.shape[1]

    @property
    def pitch_count(self) -> int:
        return self.filters.shape[2]

    @property
    def pad_left(self) -> int:
        # odd widths pad one extra step on the left
        return (self.filter_width + 1) // 2

    @property
    def pad_right(self) -> int:
        return self.filter_width // 2


@dataclass(frozen=True)
class HiddenState:
    values: np.ndarray  # (K, T/stride)
    is_binary: bool = False


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 15e-4
    particles: int = 10
    l1: float = 8e-4
    l2: float = 1e-2
    max_norm: float = 5.0
    sparsity_target: float = 0.05
    sparsity_strength: float = 0.1
    reset_threshold: float = 0.85
    epochs: int = 100
    batch_size: int = 1
    rng_seed: int = 0


@dataclass
class PcdState:
    """Persistent fantasy particles plus the generator that drives them."""

    fantasy: list[np.ndarray]
    rng: np.random.Generator


def init_params(n_filters: int, filter_width: int, pitch_count: int,
                stride: int, rng: np.random.Generator,
                init_std: float = INIT_STD) -> CrbmParams:
    filters = rng.normal(0.0, init_std, size=(n_filters, filter_width, pitch_count))
    return CrbmParams(
        filters=filters,
        visible_bias=np.zeros(pitch_count),
        hidden_bias=np.zeros(n_filters),
        stride=stride,
    )


def _check_roll(v: np.ndarray, params: CrbmParams) -> None:
    if v.ndim != 2 or v.shape[1] != params.pitch_count:
        raise DimensionError(f"roll shape {v.shape} does not match P={params.pitch_count}")
    if v.shape[0] % params.stride != 0:
        raise DimensionError(f"stride {params.stride} does not divide T={v.shape[0]}")


def _padded_windows(v: np.ndarray, params: CrbmParams) -> np.ndarray:
    """All strided filter-width windows of the zero-padded roll, (J, P, R)."""
    t = v.shape[0]
    padded = np.zeros((t + params.filter_width, params.pitch_count))
    padded[params.pad_left : params.pad_left + t] = v
    windows = sliding_window_view(padded, params.filter_width, axis=0)
    return windows[: t : params.stride]


def hidden_pre(v, params: CrbmParams) -> np.ndarray:
    """Pre-activations of the hidden layer, (K, T/stride).

    Entry (k, j) is the dot product of filter k with the padded roll
    window starting at j*stride, plus the hidden bias.
    """
    v = roll_array(v)
    _check_roll(v, params)
    windows = _padded_windows(v, params)
    pre = np.einsum("jpr,krp->kj", windows, params.filters)
    return pre + params.hidden_bias[:, None]


def hidden_probs(v, params: CrbmParams) -> HiddenState:
    """Activation probabilities of the hidden units given the visibles."""
    return HiddenState(expit(hidden_pre(v, params)), is_binary=False)


def sample_hidden(probs: HiddenState, rng: np.random.Generator) -> HiddenState:
    draws = rng.random(probs.values.shape)
    return HiddenState((draws < probs.values).astype(np.float64), is_binary=True)


def _hidden_values(h) -> np.ndarray:
    return h.values if isinstance(h, HiddenState) else np.asarray(h, dtype=np.float64)


def visible_pre(h, params: CrbmParams) -> np.ndarray:
    """Pre-activations of the visible layer, (T, P).

    Exact adjoint of v -> hidden_pre(v) - b, plus the visible bias: for all
    v, h the identity <hidden_pre(v) - b, h> == <v, visible_pre(h) - a> holds.
    """
    values = _hidden_values(h)
    if values.ndim != 2 or values.shape[0] != params.n_filters:
        raise DimensionError(f"hidden shape {values.shape} does not match K={params.n_filters}")
    n_hidden = values.shape[1]
    t = n_hidden * params.stride
    contrib = np.einsum("kj,krp->jrp", values, params.filters)
    out = np.zeros((t + params.filter_width, params.pitch_count))
    for j in range(n_hidden):
        start = j * params.stride
        out[start : start + params.filter_width] += contrib[j]
    return out[params.pad_left : params.pad_left + t] + params.visible_bias


def visible_probs(h, params: CrbmParams) -> np.ndarray:
    return expit(visible_pre(h, params))


def free_energy(v, params: CrbmParams) -> float:
    """Scalar free energy: lower means more probable under the model."""
    v = roll_array(v)
    pre = hidden_pre(v, params)
    bias_term = float(np.sum(v * params.visible_bias))
    return -bias_term - float(np.sum(np.logaddexp(0.0, pre)))


def gibbs_step(v, params: CrbmParams, rng: np.random.Generator) -> np.ndarray:
    """One block update: sample hiddens, return visible probabilities."""
    h = sample_hidden(hidden_probs(v, params), rng)
    return visible_probs(h, params)


def gibbs_chain(v0, params: CrbmParams, steps: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Run ``steps`` Gibbs updates; returns the final roll and the free
    energy recorded before the first and after every step."""
    v = roll_array(v0)
    trace = np.empty(steps + 1)
    trace[0] = free_energy(v, params)
    for i in range(steps):
        v = gibbs_step(v, params, rng)
        trace[i + 1] = free_energy(v, params)
    return v, trace


def _correlation(v: np.ndarray, h: np.ndarray, params: CrbmParams) -> np.ndarray:
    """Filter-position correlation sum_j window(v, j) (x) h_j, shape (K, R, P)."""
    windows = _padded_windows(v, params)
    return np.einsum("jpr,kj->krp", windows, h)


def max_norm_rescale(params: CrbmParams, max_norm: float) -> CrbmParams:
    """Scale any filter with Euclidean norm above ``max_norm`` back onto it."""
    norms = np.sqrt(np.sum(params.filters**2, axis=(1, 2)))
    scale = np.where(norms > max_norm, max_norm / np.maximum(norms, 1e-30), 1.0)
    if np.all(scale == 1.0):
        return params
    return replace(params, filters=params.filters * scale[:, None, None])


def sparsity_penalty_grad(hidden_probs_batch, target: float,
                          strength: float) -> np.ndarray:
    """Per-unit penalty gradient strength * (q_k - target), where q_k is
    unit k's mean activation; subtracted from the hidden-bias update.

    Accepts per-unit means (K,), one activation matrix (K, J), or a stack
    of them (..., K, J).
    """
    probs = np.asarray(hidden_probs_batch, dtype=np.float64)
    if probs.ndim == 1:
        q = probs
    else:
        axes = tuple(i for i in range(probs.ndim) if i != probs.ndim - 2)
        q = probs.mean(axis=axes)
    return strength * (q - target)


def pcd_update(params: CrbmParams, batch: list, state: PcdState,
               cfg: TrainConfig) -> tuple[CrbmParams, PcdState]:
    """One PCD step: data statistics against fantasy-particle statistics,
    gradient ascent, then L2 decay, L1 shrinkage, and max-norm rescaling."""
    if not batch:
        raise DimensionError("empty batch")
    k, r, p = params.filters.shape

    pos_w = np.zeros((k, r, p))
    pos_a = np.zeros(p)
    pos_b = np.zeros(k)
    q_sum = np.zeros(k)
    for roll in batch:
        v = roll_array(roll)
        h = hidden_probs(v, params).values
        pos_w += _correlation(v, h, params)
        pos_a += v.sum(axis=0)
        pos_b += h.sum(axis=1)
        q_sum += h.mean(axis=1)
    n = len(batch)
    pos_w /= n
    pos_a /= n
    pos_b /= n

    neg_w = np.zeros((k, r, p))
    neg_a = np.zeros(p)
    neg_b = np.zeros(k)
    for i, particle in enumerate(state.fantasy):
        advanced = gibbs_step(particle, params, state.rng)
        state.fantasy[i] = advanced
        h = hidden_probs(advanced, params).values
        neg_w += _correlation(advanced, h, params)
        neg_a += advanced.sum(axis=0)
        neg_b += h.sum(axis=1)
    m = len(state.fantasy)
    neg_w /= m
    neg_a /= m
    neg_b /= m

    lr = cfg.learning_rate
    grad_b = pos_b - neg_b
    if cfg.sparsity_strength > 0:
        grad_b = grad_b - sparsity_penalty_grad(q_sum / n, cfg.sparsity_target,
                                                cfg.sparsity_strength)

    filters = params.filters + lr * (pos_w - neg_w)
    filters = filters * (1.0 - lr * cfg.l2)
    if cfg.l1 > 0:
        filters = np.sign(filters) * np.maximum(np.abs(filters) - lr * cfg.l1, 0.0)
    new_params = CrbmParams(
        filters=filters,
        visible_bias=params.visible_bias + lr * (pos_a - neg_a),
        hidden_bias=params.hidden_bias + lr * grad_b,
        stride=params.stride,
    )
    if cfg.max_norm > 0:
        new_params = max_norm_rescale(new_params, cfg.max_norm)
    return new_params, state


def mean_hidden_activation(params: CrbmParams, rolls: list) -> np.ndarray:
    """Per-unit activation probability averaged over rolls and positions."""
    acts = [hidden_probs(roll, params).values.mean(axis=1) for roll in rolls]
    return np.mean(acts, axis=0)


def dead_unit_reset(params: CrbmParams, data_sample: list, threshold: float,
                    rng: np.random.Generator,
                    init_std: float = INIT_STD) -> tuple[CrbmParams, int]:
    """Redraw the filter and zero the bias of units whose mean activation
    over ``data_sample`` exceeds ``threshold``."""
    mean_act = mean_hidden_activation(params, data_sample)
    hot = np.flatnonzero(mean_act > threshold)
    if hot.size == 0:
        return params, 0
    filters = params.filters.copy()
    hidden_bias = params.hidden_bias.copy()
    for k in hot:
        filters[k] = rng.normal(0.0, init_std, size=filters[k].shape)
        hidden_bias[k] = 0.0
    return replace(params, filters=filters, hidden_bias=hidden_bias), int(hot.size)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_free_energy: float
    mean_hidden_activation: float
    units_reset: int


def train(rolls: list, n_filters: int, filter_width: int, stride: int,
          cfg: TrainConfig) -> tuple[CrbmParams, list[EpochStats]]:
    """Train from scratch on equally sized rolls; returns final parameters
    and one stats row per epoch."""
    arrays = [roll_array(r) for r in rolls]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"training rolls must share one shape, got {sorted(shapes)}")
    t, p = arrays[0].shape
    if t % stride != 0:
        raise DimensionError(f"stride {stride} does not divide T={t}")

    rng = np.random.default_rng(cfg.rng_seed)
    params = init_params(n_filters, filter_width, p, stride, rng)
    state = PcdState(fantasy=[rng.random((t, p)) for _ in range(cfg.particles)],
                     rng=rng)
    monitor = arrays[: min(64, len(arrays))]

    history = []
    for epoch in range(cfg.epochs):
        for start in range(0, len(arrays), cfg.batch_size):
            batch = arrays[start : start + cfg.batch_size]
            params, state = pcd_update(params, batch, state, cfg)
        params, n_reset = dead_unit_reset(params, monitor, cfg.reset_threshold, rng)
        mean_fe = float(np.mean([free_energy(a, params) for a in monitor]))
        mean_act = float(mean_hidden_activation(params, monitor).mean())
        history.append(EpochStats(epoch, mean_fe, mean_act, n_reset))
    return params, history


def save_model(path, params: CrbmParams) -> None:
    """CRBM1 format: magic, u32 K R P stride, f32 filters, f32 a, f32 b."""
    k, r, p = params.filters.shape
    blob = MODEL_MAGIC + struct.pack("<IIII", k, r, p, params.stride)
    blob += np.ascontiguousarray(params.filters, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(params.visible_bias, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(params.hidden_bias, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def load_model(path) -> CrbmParams:
    blob = Path(path).read_bytes()
    if len(blob) < 21 or blob[:5] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a CRBM1 file")
    k, r, p, stride = struct.unpack("<IIII", blob[5:21])
    if min(k, r, p, stride) == 0:
        raise DimensionError(f"{path}: zero dimension in header")
    expected = 21 + 4 * (k * r * p + p + k)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    floats = np.frombuffer(blob[21:], dtype="<f4").astype(np.float64)
    filters = floats[: k * r * p].reshape(k, r, p)
    visible_bias = floats[k * r * p : k * r * p + p]
    hidden_bias = floats[k * r * p + p :]
    return CrbmParams(filters, visible_bias, hidden_bias, stride)
