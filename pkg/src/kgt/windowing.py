"""Feature map <-> window node batches.

A map ``C x H x W`` (or ``N x C x H x W``) is reflect-padded at the bottom
and right up to multiples of ``win`` and cut into non-overlapping tiles.
Windows are ordered row-major over the tile grid (image-major when
batched) and the nodes inside each window row-major, so window ``b`` node
``r * win + c`` is padded pixel ``(ty * win + r, tx * win + c)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kgt.errors import ConfigurationError, IntegrityError
from kgt.numerics import Tensor, permute, reshape, take


@dataclass
class WindowBatch:
    nodes: Tensor  # B x hw x c
    win: int
    padded_h: int
    padded_w: int
    orig_h: int
    orig_w: int
    n_images: int = 1
    batched: bool = False  # input carried a leading image axis

    @property
    def hw(self) -> int:
        return self.win * self.win

    @property
    def channels(self) -> int:
        return self.nodes.shape[-1]

    def with_nodes(self, nodes: Tensor) -> WindowBatch:
        return WindowBatch(nodes, self.win, self.padded_h, self.padded_w,
                           self.orig_h, self.orig_w, self.n_images, self.batched)

    def check(self):
        win = self.win
        if win < 2:
            raise IntegrityError(f"window side {win} < 2")
        if self.padded_h % win or self.padded_w % win:
            raise IntegrityError(
                f"padded extents {self.padded_h}x{self.padded_w} not divisible by {win}")
        if not (0 < self.orig_h <= self.padded_h and 0 < self.orig_w <= self.padded_w):
            raise IntegrityError(
                f"original extents {self.orig_h}x{self.orig_w} exceed padded "
                f"{self.padded_h}x{self.padded_w}")
        if self.padded_h - self.orig_h >= win or self.padded_w - self.orig_w >= win:
            raise IntegrityError("padding larger than one window")
        expected = self.n_images * (self.padded_h // win) * (self.padded_w // win)
        if self.nodes.ndim != 3 or self.nodes.shape[:2] != (expected, win * win):
            raise IntegrityError(
                f"nodes shape {self.nodes.shape} inconsistent with {expected} windows "
                f"of {win * win} nodes")


def reflect_indices(n: int, total: int) -> np.ndarray:
    """Indices into an axis of length ``n`` extended to ``total`` by reflection."""
    i = np.arange(total)
    if n == 1:
        return np.zeros(total, dtype=np.int64)
    period = 2 * (n - 1)
    i = i % period
    return np.where(i >= n, period - i, i).astype(np.int64)


def partition(f: Tensor, win: int) -> WindowBatch:
    if win < 2:
        raise ConfigurationError(f"window side must be >= 2, got {win}")
    batched = f.ndim == 4
    x = f if batched else reshape(f, (1,) + f.shape)
    n, c, h, w = x.shape
    ph, pw = -(-h // win) * win, -(-w // win) * win
    if ph != h:
        x = take(x, reflect_indices(h, ph), axis=2)
    if pw != w:
        x = take(x, reflect_indices(w, pw), axis=3)
    gh, gw = ph // win, pw // win
    x = reshape(x, (n, c, gh, win, gw, win))
    x = permute(x, (0, 2, 4, 3, 5, 1))
    nodes = reshape(x, (n * gh * gw, win * win, c))
    return WindowBatch(nodes, win, ph, pw, h, w, n, batched)


def merge(wb: WindowBatch) -> Tensor:
    wb.check()
    win, n, c = wb.win, wb.n_images, wb.channels
    gh, gw = wb.padded_h // win, wb.padded_w // win
    x = reshape(wb.nodes, (n, gh, gw, win, win, c))
    x = permute(x, (0, 5, 1, 3, 2, 4))
    x = reshape(x, (n, c, wb.padded_h, wb.padded_w))
    if wb.orig_h != wb.padded_h:
        x = take(x, np.arange(wb.orig_h), axis=2)
    if wb.orig_w != wb.padded_w:
        x = take(x, np.arange(wb.orig_w), axis=3)
    return x if wb.batched else reshape(x, x.shape[1:])
