"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kgt.errors import PGMError, PGMMagicError, PGMMaxvalError, PGMTruncatedError

_WS = b" \t\r\n\v\f"


@dataclass
class GrayImage:
    samples: np.ndarray  # uint8, height x width

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def to_array(self) -> np.ndarray:
        """``1 x H x W`` float32 in [0, 1]."""
        return (self.samples.astype(np.float32) / 255.0)[None]

    @classmethod
    def from_array(cls, arr) -> GrayImage:
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 3:
            a = a[0]
        return cls(np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8))


def _header_tokens(data: bytes, count: int):
    """Next ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns ``[(token, offset)]`` and the offset just past the last token.
    """
    pos, out = 0, []
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PGMTruncatedError("header ended early", pos)
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        out.append((data[start:pos], start))
    return out, pos


def parse_pgm(data: bytes) -> GrayImage:
    if data[:2] != b"P5":
        raise PGMMagicError(f"bad magic {data[:2]!r}, expected b'P5'", 0)
    if len(data) < 3 or data[2] not in _WS:
        raise PGMMagicError("magic must be followed by whitespace", 2)
    tokens, pos = _header_tokens(data, 4)
    fields = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise PGMError(f"expected a decimal number, got {tok!r}", off)
        fields.append((int(tok), off))
    (width, _), (height, _), (maxval, max_off) = fields
    if maxval != 255:
        raise PGMMaxvalError(f"maxval must be 255, got {maxval}", max_off)
    if width < 1 or height < 1:
        raise PGMError(f"bad extents {width}x{height}", tokens[1][1])
    if pos >= len(data) or data[pos] not in _WS:
        raise PGMTruncatedError("missing whitespace after maxval", pos)
    start = pos + 1
    need = width * height
    have = len(data) - start
    if have < need:
        raise PGMTruncatedError(f"payload has {have} of {need} bytes", len(data))
    samples = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return GrayImage(samples.reshape(height, width).copy())


def read_pgm(path) -> GrayImage:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img: GrayImage) -> bytes:
    s = np.ascontiguousarray(img.samples, dtype=np.uint8)
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + s.tobytes()


def write_pgm(img: GrayImage, path):
    Path(path).write_bytes(encode_pgm(img))
