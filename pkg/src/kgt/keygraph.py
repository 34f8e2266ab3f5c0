"""Sparse top-k self-similarity graph over the nodes of each window."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from kgt.errors import ConfigurationError, IntegrityError
from kgt.numerics import Tensor, no_grad

_calls = {"similarity": 0}


def similarity_calls() -> int:
    return _calls["similarity"]


def reset_counters():
    _calls["similarity"] = 0


@dataclass
class KeyGraph:
    """Per-window neighbor table: ``neighbors[b, i]`` lists node i's k neighbors, ascending."""

    neighbors: np.ndarray  # int64, B x hw x k
    k: int
    win_nodes: int

    @property
    def n_windows(self) -> int:
        return self.neighbors.shape[0]

    def validate(self):
        nb = self.neighbors
        if nb.ndim != 3 or nb.shape[1:] != (self.win_nodes, self.k):
            raise IntegrityError(f"neighbor table {nb.shape} vs hw={self.win_nodes}, k={self.k}")
        if not 1 <= self.k <= self.win_nodes - 1:
            raise IntegrityError(f"k={self.k} outside [1, {self.win_nodes - 1}]")
        if nb.min() < 0 or nb.max() >= self.win_nodes:
            raise IntegrityError("neighbor index out of range")
        rows = np.arange(self.win_nodes)[None, :, None]
        if (nb == rows).any():
            raise IntegrityError("self loop in neighbor table")
        if self.k > 1 and (np.diff(nb, axis=-1) <= 0).any():
            raise IntegrityError("neighbor lists must be strictly ascending")

    @functools.cached_property
    def _membership(self) -> np.ndarray:
        b, hw, _ = self.neighbors.shape
        m = np.zeros((b, hw, hw), dtype=bool)
        np.put_along_axis(m, self.neighbors, True, axis=-1)
        m.flags.writeable = False
        return m

    def membership(self) -> np.ndarray:
        """Dense boolean adjacency, B x hw x hw (cached; read-only)."""
        return self._membership

    def relabel(self, perm) -> KeyGraph:
        """Graph of the permuted node set where new node i is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        nb = np.sort(inv[self.neighbors[:, perm, :]], axis=-1)
        return KeyGraph(nb, self.k, self.win_nodes)


def similarity(v) -> Tensor:
    """Raw dot-product similarity ``A[i, j] = v_i . v_j`` (batched over leading axes)."""
    _calls["similarity"] += 1
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    with no_grad():
        return Tensor(vd @ np.swapaxes(vd, -1, -2), dtype=vd.dtype)


def select_topk(a, k: int) -> KeyGraph:
    """Indices of the k largest off-diagonal entries per row.

    Ties go to the lower column index; each neighbor list is returned in
    ascending index order. ``a`` is ``hw x hw`` or ``B x hw x hw``.
    """
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    single = ad.ndim == 2
    if single:
        ad = ad[None]
    hw = ad.shape[-1]
    if ad.shape[-2] != hw:
        raise ConfigurationError(f"similarity matrix must be square, got {ad.shape}")
    if not 1 <= k <= hw - 1:
        raise ConfigurationError(f"k={k} outside [1, {hw - 1}] for {hw}-node windows")
    vals = ad.astype(np.float64)
    diag = np.arange(hw)
    vals[:, diag, diag] = -np.inf
    # k-th largest value per row, then: everything strictly above it, plus
    # the lowest-index entries equal to it until k are taken (tie rule)
    kth = -np.partition(-vals, k - 1, axis=-1)[..., k - 1:k]
    above = vals > kth
    tied = vals == kth
    room = k - above.sum(axis=-1, keepdims=True)
    chosen = above | (tied & (np.cumsum(tied, axis=-1) <= room))
    cols = np.nonzero(chosen)[-1]
    return KeyGraph(cols.reshape(ad.shape[0], hw, k).astype(np.int64), k, hw)


def build(v, k: int) -> KeyGraph:
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    if vd.ndim == 2:
        vd = vd[None]
    return select_topk(similarity(vd), k)
