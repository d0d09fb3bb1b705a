"""Differentiable structural costs on piano rolls.

Three soft constraints compare a candidate roll against targets extracted
from a template piece: a repetition structure cost built on a tiled
self-similarity matrix, a tonal cost built on windowed key-profile
responses, and a metrical cost built on the standardized in-bar onset
profile. Each cost comes with its analytic gradient with respect to the
candidate roll so the sampler can descend on it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError
from .pianoroll import roll_array

# Temperley pitch-class strength profiles, index 0 = tonic.
MAJOR_PROFILE = np.array([5.0, 2.0, 3.5, 2.0, 4.5, 4.0, 2.0, 4.5, 2.0, 3.5, 1.5, 4.0])
MINOR_PROFILE = np.array([5.0, 2.0, 3.5, 4.5, 2.0, 4.0, 2.0, 4.5, 3.5, 2.0, 1.5, 4.0])

DEFAULT_WEIGHTS = (1.5, 5.0, 0.5)  # (selfsim, tonal, meter)
DEFAULT_TILE_WIDTH = 8
DEFAULT_KEY_WINDOW = 4
DEFAULT_BAR_LEN = 16

TEMPLATE_MAGIC = b"TMPL1"
_EPS = 1e-12


@dataclass(frozen=True)
class KeyProfiles:
    major: np.ndarray
    minor: np.ndarray


TEMPERLEY = KeyProfiles(MAJOR_PROFILE, MINOR_PROFILE)


@dataclass(frozen=True)
class CostBreakdown:
    """Weighted total plus the raw per-term values before weighting."""

    total: float
    selfsim: float
    tonal: float
    meter: float


@dataclass(frozen=True)
class TemplateConfig:
    tile_width: int = DEFAULT_TILE_WIDTH
    key_window: int = DEFAULT_KEY_WINDOW
    bar_len: int = DEFAULT_BAR_LEN
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS


@dataclass(frozen=True)
class StructureTemplate:
    """Targets extracted from a template piece, plus the window sizes and
    term weights used both at extraction and at evaluation time."""

    selfsim_target: np.ndarray   # (T, T/tile_width), from the squared roll
    key_target: np.ndarray       # (T - key_window + 1, 24), normalized
    onset_target: np.ndarray     # (bar_len,), standardized
    tile_width: int
    key_window: int
    bar_len: int
    octaves: int
    weights: tuple[float, float, float]
    t_steps: int
    pitch_count: int


# ---------------------------------------------------------------------------
# self-similarity

def _time_windows(z: np.ndarray, width: int) -> np.ndarray:
    """(T, width, P) windows of z zero-padded at the end of the time axis."""
    t, p = z.shape
    padded = np.zeros((t + width - 1, p))
    padded[:t] = z
    return sliding_window_view(padded, width, axis=0).transpose(0, 2, 1)


def self_similarity(z, tile_width: int) -> np.ndarray:
    """Inner products between every tile of the roll and every sliding
    window: entry (i, j) compares tile j (rows j*tile_width onward) with
    the window starting at row i. Shape (T, T/tile_width)."""
    z = roll_array(z)
    t, p = z.shape
    if t % tile_width != 0:
        raise DimensionError(f"tile width {tile_width} does not divide T={t}")
    tiles = z.reshape(t // tile_width, tile_width, p)
    windows = _time_windows(z, tile_width)
    return np.einsum("jlp,ilp->ij", tiles, windows)


def _selfsim_term(target: np.ndarray, v: np.ndarray,
                  tile_width: int) -> tuple[float, np.ndarray]:
    t, p = v.shape
    squared = v * v
    tiles = squared.reshape(t // tile_width, tile_width, p)
    windows = _time_windows(squared, tile_width)
    s = np.einsum("jlp,ilp->ij", tiles, windows)

    diff = s - target
    n_entries = s.size
    cost = float(np.sum(diff * diff) / n_entries)

    upstream = diff * (2.0 / n_entries)
    grad_sq = np.einsum("ij,ilp->jlp", upstream, windows).reshape(t, p)
    window_side = np.einsum("ij,jlp->ilp", upstream, tiles)
    acc = np.zeros((t + tile_width - 1, p))
    for lag in range(tile_width):
        acc[lag : lag + t] += window_side[:, lag, :]
    grad_sq += acc[:t]
    return cost, grad_sq * (2.0 * v)


def selfsim_cost_grad(x, v, tile_width: int) -> tuple[float, np.ndarray]:
    """MSE between the self-similarity matrices of the squared rolls, and
    its gradient with respect to v."""
    x = roll_array(x)
    v = roll_array(v)
    if x.shape != v.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {v.shape}")
    target = self_similarity(x * x, tile_width)
    return _selfsim_term(target, v, tile_width)


# ---------------------------------------------------------------------------
# tonality

def _rotation_matrix(profile: np.ndarray) -> np.ndarray:
    """(12, 12) matrix whose row s holds the profile rotated to tonic s."""
    return np.array([[profile[(i + shift) % 12] for i in range(12)]
                     for shift in range(12)])


def _octave_fold(z: np.ndarray, octaves: int) -> np.ndarray:
    """Sum pitch rows a full octave apart, padding P up to octaves*12."""
    t, p = z.shape
    padded = np.zeros((t, octaves * 12))
    padded[:, :p] = z
    return padded.reshape(t, octaves, 12).sum(axis=1)


def key_estimation(z, profiles: KeyProfiles = TEMPERLEY,
                   key_window: int = DEFAULT_KEY_WINDOW,
                   octaves: int | None = None) -> np.ndarray:
    """Raw key strength vectors, one 24-vector (12 major then 12 minor
    tonics) per valid window start. Tonic indices are relative to pitch
    row 0, so absolute key names depend on the roll's pitch_base."""
    z = roll_array(z)
    t, p = z.shape
    if key_window > t:
        raise DimensionError(f"key window {key_window} exceeds T={t}")
    octaves = octaves if octaves is not None else -(-p // 12)
    folded = _octave_fold(z, octaves)
    summed = sliding_window_view(folded, key_window, axis=0).sum(axis=2)
    b_maj = _rotation_matrix(profiles.major)
    b_min = _rotation_matrix(profiles.minor)
    return np.hstack([summed @ b_maj.T, summed @ b_min.T])


def normalize_key(k) -> np.ndarray:
    """Min-max normalize a key vector (or each row of a stack of them) to
    [0, 1]; a constant vector maps to all zeros."""
    k = np.asarray(k, dtype=np.float64)
    single = k.ndim == 1
    rows = k[None, :] if single else k
    lo = rows.min(axis=1, keepdims=True)
    hi = rows.max(axis=1, keepdims=True)
    span = hi - lo
    safe = np.where(span < _EPS, 1.0, span)
    out = np.where(span < _EPS, 0.0, (rows - lo) / safe)
    return out[0] if single else out


def _tonality_term(target: np.ndarray, v: np.ndarray, profiles: KeyProfiles,
                   key_window: int, octaves: int) -> tuple[float, np.ndarray]:
    t, p = v.shape
    raw = key_estimation(v, profiles, key_window, octaves)
    normed = normalize_key(raw)
    n_rows, width = raw.shape

    diff = normed - target
    cost = float(np.sum(diff * diff) / (width * n_rows))
    upstream = diff * (2.0 / (width * n_rows))

    # backprop through the min-max normalization, row by row (vectorized);
    # degenerate rows carry a zero subgradient
    lo = raw.min(axis=1)
    hi = raw.max(axis=1)
    span = hi - lo
    live = span >= _EPS
    inv = np.where(live, 1.0 / np.where(live, span, 1.0), 0.0)

    amin = raw.argmin(axis=1)
    amax = raw.argmax(axis=1)
    u_sum = upstream.sum(axis=1)
    u_dot = np.sum(upstream * normed, axis=1)

    grad_k = upstream * inv[:, None]
    rows_idx = np.arange(n_rows)
    np.add.at(grad_k, (rows_idx, amin), -(u_sum - u_dot) * inv)
    np.add.at(grad_k, (rows_idx, amax), -u_dot * inv)

    # linear key filter adjoint: rotation matrices, window sum, octave unfold
    b_maj = _rotation_matrix(profiles.major)
    b_min = _rotation_matrix(profiles.minor)
    grad_folded_win = grad_k[:, :12] @ b_maj + grad_k[:, 12:] @ b_min
    grad_folded = np.zeros((t, 12))
    for m in range(key_window):
        grad_folded[m : m + n_rows] += grad_folded_win
    grad = np.tile(grad_folded, (1, octaves))[:, :p]
    return cost, grad


def tonality_cost_grad(x, v, profiles: KeyProfiles = TEMPERLEY,
                       key_window: int = DEFAULT_KEY_WINDOW,
                       octaves: int | None = None) -> tuple[float, np.ndarray]:
    """MSE between normalized key vectors of x and v over all valid
    windows, with the analytic gradient with respect to v."""
    x = roll_array(x)
    v = roll_array(v)
    if x.shape != v.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {v.shape}")
    octaves = octaves if octaves is not None else -(-x.shape[1] // 12)
    target = normalize_key(key_estimation(x, profiles, key_window, octaves))
    return _tonality_term(target, v, profiles, key_window, octaves)


# ---------------------------------------------------------------------------
# meter

def onset_function(z) -> np.ndarray:
    """Rectified time difference summed over pitch: note onsets register,
    offsets do not. Row -1 is treated as silence."""
    z = roll_array(z)
    prev = np.vstack([np.zeros((1, z.shape[1])), z[:-1]])
    return np.maximum(z - prev, 0.0).sum(axis=1)


def onset_profile(z, bar_len: int = DEFAULT_BAR_LEN) -> np.ndarray:
    """Onsets accumulated per bar position, standardized to zero mean and
    unit variance; an onset-free roll maps to all zeros."""
    z = roll_array(z)
    t = z.shape[0]
    if t % bar_len != 0:
        raise DimensionError(f"bar length {bar_len} does not divide T={t}")
    per_bar = onset_function(z).reshape(t // bar_len, bar_len).sum(axis=0)
    std = per_bar.std()
    if std < _EPS:
        return np.zeros(bar_len)
    return (per_bar - per_bar.mean()) / std


def _meter_term(target: np.ndarray, v: np.ndarray,
                bar_len: int) -> tuple[float, np.ndarray]:
    t, p = v.shape
    omega = onset_function(v)
    per_bar = omega.reshape(t // bar_len, bar_len).sum(axis=0)
    mean = per_bar.mean()
    std = per_bar.std()

    if std < _EPS:
        profile = np.zeros(bar_len)
    else:
        profile = (per_bar - mean) / std
    diff = profile - target
    cost = float(np.sum(diff * diff) / bar_len)
    if std < _EPS:
        return cost, np.zeros_like(v)

    upstream = diff * (2.0 / bar_len)
    grad_rho = (upstream - upstream.mean()
                - profile * np.mean(upstream * profile)) / std

    grad_omega = np.tile(grad_rho, t // bar_len)
    prev = np.vstack([np.zeros((1, p)), v[:-1]])
    rising = (v - prev) > 0.0
    flow = grad_omega[:, None] * rising
    grad = flow.copy()
    grad[:-1] -= flow[1:]
    return cost, grad


def meter_cost_grad(x, v, bar_len: int = DEFAULT_BAR_LEN) -> tuple[float, np.ndarray]:
    """MSE between standardized onset profiles, with the analytic gradient
    with respect to v (zero subgradient at the rectifier kink)."""
    x = roll_array(x)
    v = roll_array(v)
    if x.shape != v.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {v.shape}")
    return _meter_term(onset_profile(x, bar_len), v, bar_len)


# ---------------------------------------------------------------------------
# combination, template extraction, descent step

def extract_template(x, config: TemplateConfig = TemplateConfig()) -> StructureTemplate:
    """Compute all constraint targets from a template piece."""
    x = roll_array(x)
    t, p = x.shape
    if t % config.tile_width != 0:
        raise DimensionError(f"tile width {config.tile_width} does not divide T={t}")
    if t % config.bar_len != 0:
        raise DimensionError(f"bar length {config.bar_len} does not divide T={t}")
    octaves = -(-p // 12)
    return StructureTemplate(
        selfsim_target=self_similarity(x * x, config.tile_width),
        key_target=normalize_key(key_estimation(x, TEMPERLEY, config.key_window, octaves)),
        onset_target=onset_profile(x, config.bar_len),
        tile_width=config.tile_width,
        key_window=config.key_window,
        bar_len=config.bar_len,
        octaves=octaves,
        weights=tuple(config.weights),
        t_steps=t,
        pitch_count=p,
    )


def total_cost_grad(template: StructureTemplate, v) -> tuple[CostBreakdown, np.ndarray]:
    """Weighted sum of the three constraint costs and its gradient.

    Terms with a zero weight are skipped entirely and reported as 0.
    """
    v = roll_array(v)
    if v.shape != (template.t_steps, template.pitch_count):
        raise DimensionError(
            f"roll shape {v.shape} does not match template "
            f"({template.t_steps}, {template.pitch_count})")
    w_ss, w_ton, w_met = template.weights
    grad = np.zeros_like(v)
    g_ss = g_ton = g_met = 0.0
    if w_ss != 0.0:
        g_ss, grad_ss = _selfsim_term(template.selfsim_target, v, template.tile_width)
        grad += w_ss * grad_ss
    if w_ton != 0.0:
        g_ton, grad_ton = _tonality_term(template.key_target, v, TEMPERLEY,
                                         template.key_window, template.octaves)
        grad += w_ton * grad_ton
    if w_met != 0.0:
        g_met, grad_met = _meter_term(template.onset_target, v, template.bar_len)
        grad += w_met * grad_met
    total = w_ss * g_ss + w_ton * g_ton + w_met * g_met
    return CostBreakdown(total, g_ss, g_ton, g_met), grad


def gd_step(v, template: StructureTemplate, learning_rate: float) -> np.ndarray:
    """One descent step on the total cost, clamped back into [0, 1]."""
    v = roll_array(v)
    _, grad = total_cost_grad(template, v)
    return np.clip(v - learning_rate * grad, 0.0, 1.0)


def finite_difference_grad(cost_fn, v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar cost; the independent check
    for every analytic gradient above."""
    grad = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        bumped = v.copy()
        bumped[idx] = v[idx] + eps
        hi = cost_fn(bumped)
        bumped[idx] = v[idx] - eps
        lo = cost_fn(bumped)
        grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# template file format

def save_template(path, template: StructureTemplate) -> None:
    """TMPL1 format: magic, u32 dims and window sizes, f32 weights, then
    the three target arrays as f32."""
    i_rows, j_cols = template.selfsim_target.shape
    key_rows = template.key_target.shape[0]
    blob = TEMPLATE_MAGIC
    blob += struct.pack("<6I", template.t_steps, template.pitch_count,
                        template.tile_width, template.key_window,
                        template.bar_len, template.octaves)
    blob += struct.pack("<3f", *template.weights)
    blob += struct.pack("<2I", i_rows, j_cols)
    blob += np.ascontiguousarray(template.selfsim_target, dtype="<f4").tobytes()
    blob += struct.pack("<I", key_rows)
    blob += np.ascontiguousarray(template.key_target, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(template.onset_target, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def load_template(path) -> StructureTemplate:
    blob = Path(path).read_bytes()
    if len(blob) < 49 or blob[:5] != TEMPLATE_MAGIC:
        raise FormatError(f"{path}: not a TMPL1 file")
    t, p, tile, key_window, bar_len, octaves = struct.unpack("<6I", blob[5:29])
    weights = struct.unpack("<3f", blob[29:41])
    i_rows, j_cols = struct.unpack("<2I", blob[41:49])
    pos = 49

    def take(count):
        nonlocal pos
        end = pos + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: truncated template file")
        out = np.frombuffer(blob[pos:end], dtype="<f4").astype(np.float64)
        pos = end
        return out

    selfsim = take(i_rows * j_cols).reshape(i_rows, j_cols)
    (key_rows,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    key_target = take(key_rows * 24).reshape(key_rows, 24)
    onset = take(bar_len)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return StructureTemplate(selfsim, key_target, onset, tile, key_window,
                             bar_len, octaves, weights, t, p)
