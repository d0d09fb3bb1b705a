"""Piano-roll representation and MIDI ingestion.

A roll is a T x P matrix with values in [0, 1]: rows are sixteenth-note
time steps, columns are pitches starting at ``pitch_base``. Ingested MIDI
is binary; sampling produces continuous values in between.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import smf
from .errors import DimensionError, EmptyPieceError, FormatError

log = logging.getLogger(__name__)

DEFAULT_PITCH_BASE = 28
DEFAULT_PITCH_COUNT = 64
DEFAULT_T_STEPS = 512

PRL_MAGIC = b"PRL1"


@dataclass(frozen=True)
class PianoRoll:
    """Time x pitch matrix; treat as immutable once constructed."""

    data: np.ndarray
    pitch_base: int = DEFAULT_PITCH_BASE

    @property
    def t_steps(self) -> int:
        return self.data.shape[0]

    @property
    def pitch_count(self) -> int:
        return self.data.shape[1]

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.data >= threshold


@dataclass(frozen=True)
class NoteEvent:
    onset_step: int
    duration_steps: int
    midi_pitch: int


@dataclass
class Corpus:
    """Parallel lists of rolls and identifiers; all rolls share P and pitch_base."""

    pieces: list[PianoRoll]
    names: list[str]

    def __post_init__(self):
        if len(self.pieces) != len(self.names):
            raise DimensionError("pieces and names differ in length")
        bases = {p.pitch_base for p in self.pieces}
        counts = {p.pitch_count for p in self.pieces}
        if len(bases) > 1 or len(counts) > 1:
            raise DimensionError("corpus pieces disagree on pitch range")


@dataclass(frozen=True)
class IngestConfig:
    pitch_base: int = DEFAULT_PITCH_BASE
    pitch_count: int = DEFAULT_PITCH_COUNT
    # fixed roll length; None keeps the natural quantized length
    t_steps: int | None = None


def roll_array(roll) -> np.ndarray:
    """Accept a PianoRoll or a bare T x P array and return float64 data."""
    data = roll.data if isinstance(roll, PianoRoll) else roll
    return np.asarray(data, dtype=np.float64)


def _quantize_step(tick: float, ticks_per_step: float) -> int:
    # ties between grid points round half-up to the later step
    return int(np.floor(tick / ticks_per_step + 0.5))


def notes_from_midi(midi_bytes: bytes, cfg: IngestConfig) -> list[NoteEvent]:
    """Quantize MIDI note events to the sixteenth grid and apply the
    repeated-note rule: a note immediately followed by another note of the
    same pitch is shortened by one step when longer than one step,
    otherwise the two merge."""
    raw, division = smf.read_notes(midi_bytes)
    ticks_per_step = division / 4.0

    dropped = 0
    by_pitch: dict[int, list[list[int]]] = {}
    for note in raw:
        pitch = note.pitch
        row = pitch - cfg.pitch_base
        if row < 0 or row >= cfg.pitch_count:
            dropped += 1
            continue
        onset = _quantize_step(note.onset_tick, ticks_per_step)
        offset = _quantize_step(note.off_tick, ticks_per_step)
        duration = max(1, offset - onset)
        by_pitch.setdefault(pitch, []).append([onset, duration])
    if dropped:
        log.warning("dropped %d notes outside pitch range [%d, %d)",
                    dropped, cfg.pitch_base, cfg.pitch_base + cfg.pitch_count)

    events = []
    for pitch, group in by_pitch.items():
        group.sort()
        for i in range(len(group) - 1):
            onset, duration = group[i]
            if onset + duration == group[i + 1][0] and duration > 1:
                group[i][1] = duration - 1
        events.extend(NoteEvent(on, dur, pitch) for on, dur in group)
    events.sort(key=lambda e: (e.onset_step, e.midi_pitch))
    return events


def midi_to_pianoroll(midi_bytes: bytes, cfg: IngestConfig | None = None) -> PianoRoll:
    """Ingest a Standard MIDI File into a binary piano roll.

    Notes fill cells from onset up to (exclusive) offset. Out-of-range
    pitches are dropped with a logged count. Raises EmptyPieceError when
    nothing remains.
    """
    cfg = cfg or IngestConfig()
    events = notes_from_midi(midi_bytes, cfg)
    if not events:
        raise EmptyPieceError("MIDI input produced no in-range notes")

    natural_len = max(e.onset_step + e.duration_steps for e in events)
    t_steps = cfg.t_steps if cfg.t_steps is not None else natural_len
    if t_steps <= 0:
        raise EmptyPieceError("configured roll length is zero")

    data = np.zeros((t_steps, cfg.pitch_count), dtype=np.float64)
    for e in events:
        row = e.midi_pitch - cfg.pitch_base
        start = e.onset_step
        stop = min(e.onset_step + e.duration_steps, t_steps)
        if start < t_steps:
            data[start:stop, row] = 1.0
    return PianoRoll(data, pitch_base=cfg.pitch_base)


def pianoroll_to_midi(roll: PianoRoll, threshold: float = 0.5) -> bytes:
    """Export a roll as MIDI: maximal runs of active steps become notes."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    active = roll.binarize(threshold)
    ticks_per_step = smf.WRITE_DIVISION // 4

    notes = []
    for row in range(roll.pitch_count):
        column = active[:, row]
        # run boundaries from the padded difference of the indicator
        padded = np.diff(np.concatenate(([0], column.astype(np.int8), [0])))
        starts = np.flatnonzero(padded == 1)
        stops = np.flatnonzero(padded == -1)
        pitch = roll.pitch_base + row
        for start, stop in zip(starts, stops):
            notes.append(smf.RawNote(int(start) * ticks_per_step,
                                     int(stop) * ticks_per_step, pitch))
    notes.sort()
    return smf.write_notes(notes)


def transpose(roll: PianoRoll, semitones: int) -> PianoRoll:
    """Shift pitch rows by ``semitones`` (+ is up); shifted-out cells drop."""
    p = roll.pitch_count
    if abs(semitones) >= p:
        raise DimensionError(f"|semitones| must be < pitch_count ({p})")
    out = np.zeros_like(roll.data)
    if semitones >= 0:
        out[:, semitones:] = roll.data[:, : p - semitones]
        dropped = np.count_nonzero(roll.data[:, p - semitones :])
    else:
        out[:, : p + semitones] = roll.data[:, -semitones:]
        dropped = np.count_nonzero(roll.data[:, : -semitones])
    if dropped:
        log.warning("transpose by %+d dropped %d active cells", semitones, dropped)
    return PianoRoll(out, pitch_base=roll.pitch_base)


def augment_all_keys(corpus: Corpus) -> Corpus:
    """Transpose every piece by 0..+11 semitones (12x the pieces)."""
    if not corpus.pieces:
        raise EmptyPieceError("cannot augment an empty corpus")
    pieces = []
    names = []
    for piece, name in zip(corpus.pieces, corpus.names):
        for shift in range(12):
            pieces.append(piece if shift == 0 else transpose(piece, shift))
            names.append(f"{name}+{shift}")
    return Corpus(pieces, names)


def fit_length(roll: PianoRoll, t_steps: int) -> PianoRoll:
    """Zero-pad or crop a roll to exactly ``t_steps`` rows."""
    if t_steps <= 0:
        raise DimensionError("t_steps must be positive")
    if roll.t_steps == t_steps:
        return roll
    data = np.zeros((t_steps, roll.pitch_count), dtype=np.float64)
    n = min(roll.t_steps, t_steps)
    data[:n] = roll.data[:n]
    return PianoRoll(data, pitch_base=roll.pitch_base)


def save_roll(path, roll: PianoRoll) -> None:
    """Write the PRL1 format: magic, u32 T, u32 P, i32 pitch_base, f32 cells."""
    header = PRL_MAGIC + struct.pack("<IIi", roll.t_steps, roll.pitch_count,
                                     roll.pitch_base)
    body = np.ascontiguousarray(roll.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_roll(path) -> PianoRoll:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != PRL_MAGIC:
        raise FormatError(f"{path}: not a PRL1 file")
    t_steps, pitch_count, pitch_base = struct.unpack("<IIi", blob[4:16])
    if t_steps == 0 or pitch_count == 0:
        raise DimensionError(f"{path}: zero dimension in header")
    expected = 16 + 4 * t_steps * pitch_count
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob[16:], dtype="<f4").astype(np.float64)
    return PianoRoll(data.reshape(t_steps, pitch_count), pitch_base=pitch_base)


def read_manifest(path) -> list[Path]:
    """One piece path per line, relative paths resolved against the manifest."""
    base = Path(path).parent
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines:
        line = line.strip()
        if line and not line.startswith("#"):
            candidate = Path(line)
            out.append(candidate if candidate.is_absolute() else base / candidate)
    return out


def load_piece(path, cfg: IngestConfig | None = None) -> PianoRoll:
    """Load a piece from disk, sniffing PRL1 versus MIDI by magic."""
    blob = Path(path).read_bytes()
    if blob[:4] == PRL_MAGIC:
        return load_roll(path)
    return midi_to_pianoroll(blob, cfg)


def load_corpus(manifest_path, cfg: IngestConfig | None = None) -> Corpus:
    paths = read_manifest(manifest_path)
    if not paths:
        raise EmptyPieceError(f"{manifest_path}: manifest lists no pieces")
    pieces = [load_piece(p, cfg) for p in paths]
    return Corpus(pieces, [p.stem for p in paths])
