"""Key-graph transformer layer and stage.

A stage builds one key-graph from its input nodes, runs every layer
against that same graph, merges the windows back and closes with a
residual 3x3 convolution.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

from kgt import keygraph
from kgt.attention import (
    GATHER,
    AttentionParams,
    Backend,
    keygraph_attention,
    merge_heads,
    project,
)
from kgt.errors import ConfigurationError, DimensionError
from kgt.keygraph import KeyGraph
from kgt.numerics import Tensor, add, conv2d_3x3, gelu, layer_norm, matmul
from kgt.windowing import merge, partition

log = logging.getLogger(__name__)

LN_EPS = 1e-5


class KClampWarning(UserWarning):
    pass


@dataclass
class KGTLayerParams:
    attn: AttentionParams
    ffn_w1: Tensor  # c x r*c
    ffn_w2: Tensor  # r*c x c
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor

    def __post_init__(self):
        c = self.attn.channels
        hidden = self.ffn_w1.shape[1]
        if self.ffn_w1.shape[0] != c or self.ffn_w2.shape != (hidden, c):
            raise DimensionError(
                f"ffn weights {self.ffn_w1.shape} / {self.ffn_w2.shape} inconsistent with c={c}")
        if hidden % c:
            raise DimensionError(f"ffn hidden width {hidden} is not a multiple of c={c}")

    @property
    def ratio(self) -> int:
        return self.ffn_w1.shape[1] // self.attn.channels


@dataclass
class KGTStageParams:
    layers: list[KGTLayerParams]
    tail_w: Tensor  # C x C x 3 x 3
    tail_b: Tensor
    k_build: int = 16

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ConfigurationError("a stage needs at least one layer")


def ffn_branch(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w1)), w2)


def ffn(v_hat: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """v_hat + gelu(v_hat W1) W2."""
    return add(v_hat, ffn_branch(v_hat, w1, w2))


def kgt_layer_forward(v: Tensor, g: KeyGraph, p: KGTLayerParams,
                      backend: Backend | str = GATHER) -> Tensor:
    """Pre-norm layer: attention residual then FFN residual."""
    h = layer_norm(v, p.norm1_gamma, p.norm1_beta, LN_EPS)
    q, k, vv = project(h, p.attn)
    u = add(v, merge_heads(keygraph_attention(q, k, vv, g, backend), p.attn.w_out))
    return add(u, ffn_branch(layer_norm(u, p.norm2_gamma, p.norm2_beta, LN_EPS),
                             p.ffn_w1, p.ffn_w2))


def clamp_k(k: int, win: int) -> int:
    limit = win * win - 1
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if k > limit:
        msg = f"k={k} exceeds {limit} non-self nodes in a {win}x{win} window; clamped to {limit}"
        warnings.warn(msg, KClampWarning, stacklevel=3)
        log.warning(msg)
        return limit
    return k


def kgt_stage_forward(f_in: Tensor, p: KGTStageParams, k: int | None = None, win: int = 8,
                      backend: Backend | str = GATHER) -> Tensor:
    """Graph once at entry, all layers on that graph, merge, residual tail conv."""
    k = clamp_k(p.k_build if k is None else k, win)
    wb = partition(f_in, win)
    graph = keygraph.build(wb.nodes, k)
    z = wb.nodes
    for layer in p.layers:
        z = kgt_layer_forward(z, graph, layer, backend)
    merged = merge(wb.with_nodes(z))
    return add(f_in, conv2d_3x3(merged, p.tail_w, p.tail_b))
