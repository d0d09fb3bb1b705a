"""Minimal Standard MIDI File codec.

Reads note events from format 0/1 files with PPQ timing and writes
single-track format 0 files. Only note on/off messages are interpreted;
everything else (meta, sysex, controllers) is skipped.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

from .errors import MidiParseError

WRITE_DIVISION = 480          # ticks per quarter note on export
WRITE_TEMPO_US = 500_000      # 120 BPM


class RawNote(NamedTuple):
    onset_tick: int
    off_tick: int
    pitch: int


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity exceeds 4 bytes")


# data byte counts for channel message status nibbles 0x8..0xE
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _parse_track(data: bytes, notes: list[RawNote]) -> None:
    pos = 0
    tick = 0
    status = None
    open_notes: dict[tuple[int, int], list[int]] = {}

    def close(channel: int, pitch: int, at_tick: int) -> None:
        stack = open_notes.get((channel, pitch))
        if stack:
            onset = stack.pop(0)
            if at_tick > onset:
                notes.append(RawNote(onset, at_tick, pitch))

    while pos < len(data):
        delta, pos = _read_vlq(data, pos)
        tick += delta
        if pos >= len(data):
            raise MidiParseError("truncated track event")
        byte = data[pos]
        if byte >= 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise MidiParseError("data byte before any status byte")

        if status == 0xFF:
            if pos >= len(data):
                raise MidiParseError("truncated meta event")
            meta_type = data[pos]
            length, pos = _read_vlq(data, pos + 1)
            pos += length
            if meta_type == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            length, pos = _read_vlq(data, pos)
            pos += length
        elif status >= 0xF0:
            raise MidiParseError(f"unsupported system message 0x{status:02x}")
        else:
            kind = status >> 4
            channel = status & 0x0F
            n_data = _CHANNEL_DATA_LEN[kind]
            if pos + n_data > len(data):
                raise MidiParseError("truncated channel message")
            d1 = data[pos]
            d2 = data[pos + 1] if n_data == 2 else 0
            pos += n_data
            if kind == 0x9 and d2 > 0:
                open_notes.setdefault((channel, d1), []).append(tick)
            elif kind == 0x8 or (kind == 0x9 and d2 == 0):
                close(channel, d1, tick)

    # notes left hanging are closed at the last tick seen
    for (channel, pitch), stack in open_notes.items():
        for onset in stack:
            if tick > onset:
                notes.append(RawNote(onset, tick, pitch))


def read_notes(data: bytes) -> tuple[list[RawNote], int]:
    """Parse an SMF byte string into note events merged across tracks.

    Returns (notes, division) where division is ticks per quarter note.
    Raises MidiParseError for anything that is not a well-formed format 0/1
    file with PPQ timing.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header")
    header_len, fmt, n_tracks, division = struct.unpack(">IHHH", data[4:14])
    if header_len != 6:
        raise MidiParseError(f"unexpected MThd length {header_len}")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported")
    if division == 0:
        raise MidiParseError("zero time division")

    notes: list[RawNote] = []
    pos = 14
    tracks_seen = 0
    while tracks_seen < n_tracks and pos < len(data):
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header")
        chunk_id = data[pos : pos + 4]
        (chunk_len,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        pos += 8
        if pos + chunk_len > len(data):
            raise MidiParseError("truncated chunk body")
        if chunk_id == b"MTrk":
            _parse_track(data[pos : pos + chunk_len], notes)
            tracks_seen += 1
        pos += chunk_len
    if tracks_seen == 0:
        raise MidiParseError("no MTrk chunk found")

    notes.sort()
    return notes, division


def _write_vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def write_notes(notes: list[RawNote]) -> bytes:
    """Serialize note events as a single-track format 0 file.

    Fixed 120 BPM tempo at 480 PPQ; notes play on channel 0, velocity 64.
    """
    events = []  # (tick, order, message bytes)
    for note in notes:
        events.append((note.onset_tick, 1, bytes((0x90, note.pitch, 64))))
        events.append((note.off_tick, 0, bytes((0x80, note.pitch, 0))))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    track = bytearray()
    track += _write_vlq(0) + bytes((0xFF, 0x51, 0x03))
    track += WRITE_TEMPO_US.to_bytes(3, "big")
    tick = 0
    for event_tick, _, message in events:
        track += _write_vlq(event_tick - tick) + message
        tick = event_tick
    track += _write_vlq(0) + bytes((0xFF, 0x2F, 0x00))

    header = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, WRITE_DIVISION)
    return header + struct.pack(">4sI", b"MTrk", len(track)) + bytes(track)
