"""Minimal uncompressed AVI writer (BI_RGB 'DIB ' frames, no codecs).

Paired with a separate PCM WAV file this gives a playable, fully
self-describing output without any codec dependency. Layout: RIFF(AVI )
-> LIST(hdrl){avih, LIST(strl){strh, strf}} -> LIST(movi){00db...} -> idx1.
"""

from __future__ import annotations

import struct

import numpy as np


def _chunk(fourcc: bytes, payload: bytes) -> bytes:
    data = struct.pack("<4sI", fourcc, len(payload)) + payload
    if len(payload) % 2:
        data += b"\x00"
    return data


def _list(fourcc: bytes, payload: bytes) -> bytes:
    return _chunk(b"LIST", fourcc + payload)


def frames_to_dib(frames: np.ndarray) -> list:
    """float RGB [0,1] frames -> bottom-up BGR byte rows (DIB convention)."""
    out = []
    for frame in frames:
        u8 = np.clip(np.asarray(frame) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        out.append(u8[::-1, :, ::-1].tobytes())  # flip rows, RGB->BGR
    return out


def write_avi(path, frames: np.ndarray, fps: int) -> None:
    frames = np.asarray(frames)
    n, height, width = frames.shape[0], frames.shape[1], frames.shape[2]
    row_bytes = width * 3
    if row_bytes % 4:
        raise ValueError("frame width*3 must be 4-byte aligned for this writer")
    frame_bytes = row_bytes * height
    dib = frames_to_dib(frames)

    avih = struct.pack(
        "<IIIIIIIIIIIIII",
        1_000_000 // fps, frame_bytes * fps, 0, 0x10,  # us/frame, bytes/s, pad, HASINDEX
        n, 0, 1, frame_bytes, width, height, 0, 0, 0, 0,
    )
    strh = struct.pack(
        "<4s4sIHHIIIIIIIIhhhh",
        b"vids", b"DIB ", 0, 0, 0, 0,
        1, fps, 0, n, frame_bytes, 0, 0,
        0, 0, width, height,
    )
    strf = struct.pack(
        "<IiiHHIIiiII", 40, width, height, 1, 24, 0, frame_bytes, 0, 0, 0, 0
    )
    hdrl = _list(
        b"hdrl",
        _chunk(b"avih", avih) + _list(b"strl", _chunk(b"strh", strh) + _chunk(b"strf", strf)),
    )

    movi_payload = b""
    offsets = []
    for data in dib:
        offsets.append(len(movi_payload) + 4)  # relative to the 'movi' fourcc
        movi_payload += _chunk(b"00db", data)
    movi = _list(b"movi", movi_payload)

    idx = b""
    for off in offsets:
        idx += struct.pack("<4sIII", b"00db", 0x10, off, frame_bytes)
    idx1 = _chunk(b"idx1", idx)

    riff_payload = b"AVI " + hdrl + movi + idx1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", b"RIFF", len(riff_payload)) + riff_payload)
