"""Dense and key-graph attention.

Key-graph attention has three interchangeable realizations:

* gather    -- index-gathers the k neighbor keys/values per query
               (``hw x k x d`` auxiliary tensors, ``hw x k`` logits);
* mask      -- computes the full ``hw x hw`` logit matrix and overwrites
               off-graph entries with the negative sentinel;
* streaming -- walks key blocks with an online softmax (running max and
               rescaled running sum), skipping non-neighbors with a
               per-block membership mask; only ``hw x block_size`` logits
               are ever live.

Each backend is a single differentiable operator with its own backward.
An optional :class:`Instrument` records multiply-accumulate FLOPs and peak
auxiliary bytes of the real-valued buffers each backend allocates.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from kgt.errors import ConfigurationError, DimensionError, IntegrityError
from kgt.keygraph import KeyGraph
from kgt.numerics import (
    Tensor,
    make_result,
    matmul,
    neg_sentinel,
    permute,
    reshape,
    softmax_kernel,
    softmax_rows,
    transpose_last,
)
from kgt.numerics import mul as _mul


class Instrument:
    """Counts core FLOPs (2 per multiply-accumulate) and auxiliary bytes."""

    def __init__(self):
        self.flops = 0
        self.live_bytes = 0
        self.peak_bytes = 0

    def add_flops(self, n: int):
        self.flops += int(n)

    def alloc(self, arr: np.ndarray) -> np.ndarray:
        self.live_bytes += arr.nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return arr

    def free(self, *arrs: np.ndarray):
        for a in arrs:
            self.live_bytes -= a.nbytes


_active: Instrument | None = None


@contextlib.contextmanager
def instrument():
    global _active
    prev, _active = _active, Instrument()
    try:
        yield _active
    finally:
        _active = prev


def _flops(n):
    if _active is not None:
        _active.add_flops(n)


def _alloc(arr):
    if _active is not None:
        _active.alloc(arr)
    return arr


def _free(*arrs):
    if _active is not None:
        _active.free(*arrs)


@dataclass(frozen=True)
class Backend:
    kind: str  # "gather" | "mask" | "streaming" | "dense"
    block_size: int = 16

    KINDS = ("gather", "mask", "streaming", "dense")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown backend {self.kind!r}; expected one of {self.KINDS}")
        if self.block_size < 1:
            raise ConfigurationError(f"streaming block_size must be >= 1, got {self.block_size}")

    @classmethod
    def parse(cls, text: str | Backend) -> Backend:
        """``gather``, ``mask``, ``streaming`` or ``streaming:<block_size>``."""
        if isinstance(text, Backend):
            return text
        name, _, arg = str(text).strip().lower().partition(":")
        if arg:
            if name != "streaming":
                raise ConfigurationError(f"only the streaming backend takes a block size: {text!r}")
            try:
                return cls(name, int(arg))
            except ValueError:
                raise ConfigurationError(f"bad block size in {text!r}") from None
        return cls(name)

    def __str__(self):
        return f"streaming:{self.block_size}" if self.kind == "streaming" else self.kind


GATHER = Backend("gather")
MASK = Backend("mask")
STREAMING = Backend("streaming")


@dataclass
class AttentionParams:
    w_qry: Tensor
    w_key: Tensor
    w_val: Tensor
    w_out: Tensor
    heads: int = 2

    def __post_init__(self):
        c = self.w_qry.shape[0]
        for name in ("w_qry", "w_key", "w_val", "w_out"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")
        if self.heads < 1 or c % self.heads:
            raise ConfigurationError(f"channels {c} not divisible by heads {self.heads}")

    @property
    def channels(self) -> int:
        return self.w_qry.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, hw, c = x.shape
    return permute(reshape(x, (b, hw, heads, c // heads)), (0, 2, 1, 3))


def project(v: Tensor, p: AttentionParams):
    """Linear maps to queries, keys and values, each ``B x heads x hw x d``."""
    if v.ndim != 3 or v.shape[-1] != p.channels:
        raise DimensionError(f"project: nodes {v.shape} vs {p.channels} channels")
    return tuple(_split_heads(matmul(v, w), p.heads) for w in (p.w_qry, p.w_key, p.w_val))


def merge_heads(x: Tensor, w_out: Tensor) -> Tensor:
    b, h, hw, d = x.shape
    return matmul(reshape(permute(x, (0, 2, 1, 3)), (b, hw, h * d)), w_out)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor):
    if q.ndim != 4 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")


def dense_attention(q: Tensor, k: Tensor, v: Tensor, mask_diagonal: bool = False) -> Tensor:
    """Full softmax(q k^T / sqrt(d)) v per window and head.

    With ``mask_diagonal`` each query is barred from attending to itself,
    which is the k = hw - 1 limit of key-graph attention.
    """
    _check_qkv(q, k, v)
    b, h, hw, d = q.shape
    logits = _mul(matmul(q, transpose_last(k)), 1.0 / math.sqrt(d))
    _flops(4 * b * h * hw * hw * d)
    _alloc(logits.data)
    mask = None
    if mask_diagonal:
        mask = np.zeros(logits.shape, dtype=logits.dtype)
        idx = np.arange(hw)
        mask[..., idx, idx] = neg_sentinel(logits.dtype)
    out = matmul(softmax_rows(logits, mask), v)
    _free(logits.data)
    return out


def keygraph_attention(q: Tensor, k: Tensor, v: Tensor, g: KeyGraph,
                       backend: Backend | str = GATHER) -> Tensor:
    """Attention restricted per query to its key-graph neighbors.

    One graph is shared by every head. Softmax runs over exactly the k
    neighbor logits scaled by 1/sqrt(d); every other key gets weight 0.
    """
    _check_qkv(q, k, v)
    backend = Backend.parse(backend)
    b, h, hw, d = q.shape
    if g.win_nodes != hw:
        raise IntegrityError(f"graph built for {g.win_nodes}-node windows, attention has {hw}")
    if g.n_windows != b:
        raise IntegrityError(f"graph has {g.n_windows} windows, attention has {b}")
    if not 1 <= g.k <= hw - 1:
        raise IntegrityError(f"graph k={g.k} outside [1, {hw - 1}]")
    if backend.kind == "gather":
        return _gather_attention(q, k, v, g.neighbors)
    if backend.kind == "mask":
        return _mask_attention(q, k, v, g.membership())
    if backend.kind == "streaming":
        return _streaming_attention(q, k, v, g.neighbors, backend.block_size)
    return dense_attention(q, k, v, mask_diagonal=True)


def _gather_attention(q: Tensor, k: Tensor, v: Tensor, nbr: np.ndarray) -> Tensor:
    qd, kd, vd = q.data, k.data, v.data
    b, h, hw, d = qd.shape
    kk = nbr.shape[-1]
    scale = qd.dtype.type(1.0 / math.sqrt(d))
    # row indices into the (B*h*hw) x d flattening, B x h x hw x k
    rows = (np.arange(b * h).reshape(b, h, 1, 1) * hw + nbr[:, None]).astype(np.intp)

    def gather(x):
        return np.take(x.reshape(-1, d), rows, axis=0)

    k_hat = _alloc(gather(kd))  # B x h x hw x k x d
    v_hat = _alloc(gather(vd))
    s = _alloc((k_hat @ qd[..., None])[..., 0])  # B x h x hw x k
    s *= scale
    softmax_kernel(s, out=s)
    out = (s[..., None, :] @ v_hat)[..., 0, :]
    _flops(4 * b * h * hw * kk * d)
    _free(k_hat, v_hat, s)
    p = s

    def backward(go):
        kh = gather(kd)
        dp = (gather(vd) @ go[..., None])[..., 0]
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        gq = (ds[..., None, :] @ kh)[..., 0, :] * scale
        # neighbor lists have no duplicates, so scattering into a dense
        # hw x hw matrix is an assignment
        cols = np.broadcast_to(nbr[:, None], ds.shape)
        dense_ds = np.zeros((b, h, hw, hw), dtype=go.dtype)
        np.put_along_axis(dense_ds, cols, ds, axis=-1)
        dense_p = np.zeros_like(dense_ds)
        np.put_along_axis(dense_p, cols, p, axis=-1)
        gk = np.swapaxes(dense_ds, -1, -2) @ qd * scale
        gv = np.swapaxes(dense_p, -1, -2) @ go
        return gq, gk, gv

    return make_result(out, (q, k, v), backward)


def _mask_attention(q: Tensor, k: Tensor, v: Tensor, member: np.ndarray) -> Tensor:
    qd, kd, vd = q.data, k.data, v.data
    b, h, hw, d = qd.shape
    scale = qd.dtype.type(1.0 / math.sqrt(d))
    blocked = ~member[:, None]

    s = _alloc(qd @ np.swapaxes(kd, -1, -2))  # B x h x hw x hw, reused in place
    s *= scale
    np.copyto(s, neg_sentinel(s.dtype), where=blocked)
    softmax_kernel(s, out=s)
    out = s @ vd
    _flops(4 * b * h * hw * hw * d)
    _free(s)
    p = s

    def backward(go):
        dp = go @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        gq = ds @ kd * scale
        gk = np.swapaxes(ds, -1, -2) @ qd * scale
        gv = np.swapaxes(p, -1, -2) @ go
        return gq, gk, gv

    return make_result(out, (q, k, v), backward)


class _BlockMembers:
    """Per-block membership masks built from the neighbor table.

    Neighbor entries are bucketed by key block once (O(B*hw*k)); each
    block's mask is then filled from its own bucket. Masks are key-major,
    ``B x 1 x width x hw``, matching the transposed score tiles below.
    """

    def __init__(self, nbr: np.ndarray, block: int):
        nb, hw, kk = nbr.shape
        flat = nbr.ravel()
        blk = flat // block
        order = np.argsort(blk, kind="stable")
        self.bounds = np.searchsorted(blk[order], np.arange(-(-hw // block) + 1))
        self.win = order // (hw * kk)
        self.row = (order // kk) % hw
        self.col = flat[order] % block
        self.shape = (nb, hw)
        self.block = block

    def __call__(self, start: int, stop: int) -> np.ndarray:
        t = start // self.block
        lo, hi = self.bounds[t], self.bounds[t + 1]
        m = np.zeros((self.shape[0], stop - start, self.shape[1]), dtype=bool)
        m[self.win[lo:hi], self.col[lo:hi], self.row[lo:hi]] = True
        return m[:, None]


def _streaming_attention(q: Tensor, k: Tensor, v: Tensor, nbr: np.ndarray,
                         block: int) -> Tensor:
    qd, kd, vd = q.data, k.data, v.data
    b, h, hw, d = qd.shape
    dt = qd.dtype
    scale = dt.type(1.0 / math.sqrt(d))
    sentinel = neg_sentinel(dt)
    q_t = np.swapaxes(qd, -1, -2)
    members = _BlockMembers(nbr, block)

    # score tiles are key-major (width x hw) so the per-query max and sum
    # reduce over an outer axis
    m = _alloc(np.full((b, h, hw), sentinel, dtype=dt))  # running max
    l = _alloc(np.zeros((b, h, hw), dtype=dt))  # running sum
    acc = np.zeros((b, h, hw, d), dtype=dt)
    for start in range(0, hw, block):
        stop = min(start + block, hw)
        member = members(start, stop)
        s = _alloc(kd[..., start:stop, :] @ q_t)
        s *= scale
        np.copyto(s, sentinel, where=~member)
        m_blk = s.max(axis=-2)
        m_new = np.maximum(m, m_blk)
        s -= m_blk[..., None, :]
        np.exp(s, out=s)
        s *= member  # queries with no neighbor in this block contribute nothing
        l_blk = s.sum(axis=-2)
        old_scale = np.exp(m - m_new)
        blk_scale = np.exp(m_blk - m_new)
        l *= old_scale
        l += l_blk * blk_scale
        acc *= old_scale[..., None]
        acc += (np.swapaxes(s, -1, -2) @ vd[..., start:stop, :]) * blk_scale[..., None]
        m[...] = m_new
        _free(s)
        _flops(4 * b * h * hw * (stop - start) * d)
    out = acc / l[..., None]
    lse = m + np.log(l)
    _free(m, l)

    def backward(go):
        delta = (go * out).sum(axis=-1)
        go_t = np.swapaxes(go, -1, -2)
        gq = np.zeros_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        for start in range(0, hw, block):
            stop = min(start + block, hw)
            member = members(start, stop)
            kb, vb = kd[..., start:stop, :], vd[..., start:stop, :]
            s = kb @ q_t * scale
            np.copyto(s, sentinel, where=~member)
            s -= lse[..., None, :]
            p = np.exp(s, out=s)
            p *= member
            gv[..., start:stop, :] = p @ go
            ds = p * (vb @ go_t - delta[..., None, :])
            gq += np.swapaxes(ds, -1, -2) @ kb * scale
            gk[..., start:stop, :] = ds @ qd * scale
        return gq, gk, gv

    return make_result(out, (q, k, v), backward)
