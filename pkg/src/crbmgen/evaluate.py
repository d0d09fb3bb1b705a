"""Structure evaluation: Information Rate, key finding, and keyscapes.

The Information Rate of a binarized roll treats each time slice as a
symbol and contrasts its running marginal entropy with a first-order
conditional entropy; it is high when slices recur often but are well
predicted by their predecessor, the signature of repetition structure.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .pianoroll import PianoRoll, roll_array

# Krumhansl-Kessler probe-tone profiles (major, minor), tonic first.
KK_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19,
                     2.39, 3.66, 2.29, 2.88])
KK_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75,
                     3.98, 2.69, 3.34, 3.17])

PITCH_CLASS_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
KEY_LABELS = PITCH_CLASS_NAMES + [name + "m" for name in PITCH_CLASS_NAMES]
NO_KEY = "none"


@dataclass(frozen=True)
class IrReport:
    average_ir: float
    n_slices: int
    vocab_size: int
    per_step_ir: np.ndarray | None = None


def _entropy_bits(counts: Counter) -> float:
    total = sum(counts.values())
    h = 0.0
    for c in counts.values():
        p = c / total
        h -= p * math.log2(p)
    return h


def information_rate(roll, threshold: float = 0.5,
                     keep_steps: bool = False) -> IrReport:
    """Average Information Rate of the binarized roll in bits.

    At step n the marginal entropy comes from symbol counts over slices
    0..n-1 and the conditional entropy from first-order transition counts
    given slice n-1. A never-seen context falls back to the marginal,
    contributing zero; negative steps are clipped to zero.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    data = roll_array(roll)
    if data.shape[0] < 2:
        raise ValueError("Information Rate is undefined for fewer than 2 slices")
    binary = data >= threshold
    symbols = [slice_.tobytes() for slice_ in np.packbits(binary, axis=1)]

    counts: Counter = Counter([symbols[0]])
    transitions: dict[bytes, Counter] = defaultdict(Counter)
    steps = np.empty(len(symbols) - 1)
    for n in range(1, len(symbols)):
        h_marginal = _entropy_bits(counts)
        context = symbols[n - 1]
        if transitions[context]:
            h_conditional = _entropy_bits(transitions[context])
        else:
            h_conditional = h_marginal
        steps[n - 1] = max(0.0, h_marginal - h_conditional)
        counts[symbols[n]] += 1
        transitions[context][symbols[n]] += 1

    return IrReport(
        average_ir=float(steps.mean()),
        n_slices=len(symbols),
        vocab_size=len(set(symbols)),
        per_step_ir=steps if keep_steps else None,
    )


def _pitch_class_histogram(window: np.ndarray, pitch_base: int) -> np.ndarray:
    totals = window.sum(axis=0)
    hist = np.zeros(12)
    for row, value in enumerate(totals):
        hist[(pitch_base + row) % 12] += value
    return hist


def ks_key_estimate(roll_window, pitch_base: int | None = None) -> str:
    """Krumhansl-Schmuckler key label for a window of a roll.

    The duration-weighted pitch-class histogram is Pearson-correlated
    against all 24 rotated Krumhansl-Kessler profiles; ties break toward
    the lowest key index. Windows with no tonal content map to "none".
    """
    if isinstance(roll_window, PianoRoll):
        base = roll_window.pitch_base
        window = roll_window.data
    else:
        base = pitch_base if pitch_base is not None else 0
        window = np.asarray(roll_window, dtype=np.float64)
    hist = _pitch_class_histogram(window, base)
    centered = hist - hist.mean()
    norm = np.linalg.norm(centered)
    if norm == 0.0:
        return NO_KEY

    best_label = NO_KEY
    best_corr = -np.inf
    for index, profile in enumerate([np.roll(KK_MAJOR, s) for s in range(12)]
                                    + [np.roll(KK_MINOR, s) for s in range(12)]):
        p_centered = profile - profile.mean()
        corr = float(centered @ p_centered / (norm * np.linalg.norm(p_centered)))
        if corr > best_corr:
            best_corr = corr
            best_label = KEY_LABELS[index]
    return best_label


@dataclass(frozen=True)
class Keyscape:
    """Rows of key labels, apex (whole piece) first, 2^level windows per row."""

    levels: list[list[str]]


def keyscape(roll, levels: int) -> Keyscape:
    """Multi-resolution key analysis: level L splits the roll into 2^L
    equal windows, each labeled by its estimated key."""
    if isinstance(roll, PianoRoll):
        data, base = roll.data, roll.pitch_base
    else:
        data, base = np.asarray(roll, dtype=np.float64), 0
    t = data.shape[0]
    if levels < 1:
        raise ValueError("need at least one level")
    if 2 ** (levels - 1) > t:
        raise ValueError(f"{levels} levels need at least {2 ** (levels - 1)} steps")

    rows = []
    for level in range(levels):
        n_windows = 2**level
        bounds = np.linspace(0, t, n_windows + 1).astype(int)
        rows.append([ks_key_estimate(data[a:b], base)
                     for a, b in zip(bounds[:-1], bounds[1:])])
    return Keyscape(rows)


@dataclass(frozen=True)
class GroupStats:
    name: str
    n: int
    mean_ir: float
    std_ir: float


@dataclass(frozen=True)
class PairStats:
    group_a: str
    group_b: str
    mean_diff: float
    welch_t: float


def welch_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided Welch t statistic for mean(a) - mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(a.mean() - b.mean())
    denom = 0.0
    if a.size > 1:
        denom += a.var(ddof=1) / a.size
    if b.size > 1:
        denom += b.var(ddof=1) / b.size
    if denom == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / math.sqrt(denom)


def compare_ir(groups: dict[str, list], threshold: float = 0.5,
               pairs: list[tuple[str, str]] | None = None,
               ) -> tuple[list[GroupStats], list[PairStats]]:
    """Per-group Information Rate statistics plus Welch statistics for the
    requested pairs (default: every pair, in listing order)."""
    values = {name: np.array([information_rate(r, threshold).average_ir
                              for r in rolls])
              for name, rolls in groups.items()}
    group_rows = [GroupStats(name, v.size, float(v.mean()),
                             float(v.std(ddof=1)) if v.size > 1 else 0.0)
                  for name, v in values.items()]
    if pairs is None:
        names = list(groups)
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]]
    pair_rows = [PairStats(a, b,
                           float(values[a].mean() - values[b].mean()),
                           welch_statistic(values[a], values[b]))
                 for a, b in pairs]
    return group_rows, pair_rows
