"""64-bit gradient checks for every operator and the end-to-end layer and stage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kgt import numerics as nx
from kgt.attention import AttentionParams, dense_attention, keygraph_attention
from kgt.keygraph import build
from kgt.kgtblock import KGTLayerParams, KGTStageParams, kgt_layer_forward, kgt_stage_forward
from kgt.numerics import Tensor, float64_mode, grad_check
from kgt.training import l1_loss
from kgt.windowing import partition

OP_TOL = 1e-6
COMPOSITE_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights>, so every output coordinate influences the check."""
    return nx.sum(nx.mul(out, Tensor(weights)))


def _op_checks(rng) -> list[tuple[str, float, Callable[[], float]]]:
    r = rng.standard_normal
    a, b = r((3, 4)), r((4, 5))
    wa = r((3, 5))
    xs = r((2, 5))
    mask = np.zeros((2, 5))
    mask[0, 1] = mask[1, 3] = nx.neg_sentinel(np.float64)
    ws = r((2, 5))
    img, ker, bias = r((2, 5, 6)), r((3, 2, 3, 3)), r(3)
    wc = r((3, 5, 6))
    ln_x, gam, bet = r((3, 6)), r(6), r(6)
    wl = r((3, 6))
    bat, wb = r((2, 3, 4)), r((2, 3, 5))
    tk_x, tk_w = r((2, 4)), r((2, 6))
    pr_x, pr_w = r((4, 3, 2)), r((3, 8))

    T = Tensor
    return [
        ("matmul/a", OP_TOL, lambda: grad_check(lambda t: _probe(nx.matmul(t, T(b)), wa), a, STEP)),
        ("matmul/b", OP_TOL, lambda: grad_check(lambda t: _probe(nx.matmul(T(a), t), wa), b, STEP)),
        ("matmul/batched-shared", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.matmul(T(bat), t), wb), b, STEP)),
        ("softmax_rows", OP_TOL, lambda: grad_check(lambda t: _probe(nx.softmax_rows(t), ws), xs, STEP)),
        ("softmax_rows/masked", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.softmax_rows(t, mask), ws), xs, STEP)),
        ("gelu", OP_TOL, lambda: grad_check(lambda t: _probe(nx.gelu(t), ws), xs, STEP)),
        ("layer_norm/x", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.layer_norm(t, T(gam), T(bet)), wl), ln_x, STEP)),
        ("layer_norm/gamma", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.layer_norm(T(ln_x), t, T(bet)), wl), gam, STEP)),
        ("layer_norm/beta", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.layer_norm(T(ln_x), T(gam), t), wl), bet, STEP)),
        ("conv2d_3x3/x", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.conv2d_3x3(t, T(ker), T(bias)), wc), img, STEP)),
        ("conv2d_3x3/w", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.conv2d_3x3(T(img), t, T(bias)), wc), ker, STEP)),
        ("conv2d_3x3/b", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.conv2d_3x3(T(img), T(ker), t), wc), bias, STEP)),
        ("add_bias", OP_TOL, lambda: grad_check(lambda t: _probe(nx.add_bias(T(ln_x), t), wl), gam, STEP)),
        ("take/reflect", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.take(t, [0, 1, 2, 3, 2, 1], 1), tk_w),
                            tk_x, STEP)),
        ("permute+reshape", OP_TOL,
         lambda: grad_check(lambda t: _probe(nx.reshape(nx.permute(t, (1, 0, 2)), (3, 8)),
                                             pr_w), pr_x, STEP)),
        ("abs", OP_TOL, lambda: grad_check(lambda t: _probe(nx.abs(t), ws), xs, STEP)),
    ]


def _attention_checks(rng) -> list[tuple[str, float, Callable[[], float]]]:
    r = rng.standard_normal
    b, h, hw, d = 2, 2, 16, 4
    q0, k0, v0 = r((b, h, hw, d)), r((b, h, hw, d)), r((b, h, hw, d))
    target = r((b, h, hw, d))
    graph = build(r((b, hw, 8)), 5)
    checks = []
    for backend in ("gather", "mask", "streaming:3"):
        for which in ("q", "k", "v"):
            def fn(backend=backend, which=which):
                def f(t):
                    args = {"q": Tensor(q0), "k": Tensor(k0), "v": Tensor(v0)}
                    args[which] = t
                    out = keygraph_attention(args["q"], args["k"], args["v"], graph, backend)
                    return l1_loss(out, target)
                return grad_check(f, {"q": q0, "k": k0, "v": v0}[which], STEP)
            checks.append((f"keygraph_attention[{backend}]/{which}", COMPOSITE_TOL, fn))
    checks.append(("dense_attention/q", COMPOSITE_TOL, lambda: grad_check(
        lambda t: l1_loss(dense_attention(t, Tensor(k0), Tensor(v0)), target), q0, STEP)))
    return checks


def random_layer(rng, c: int, heads: int, ratio: int = 2, scale: float = 0.5) -> KGTLayerParams:
    """Layer with every weight random (no zero-initialized branches)."""
    r = lambda *s: Tensor(scale * rng.standard_normal(s))  # noqa: E731
    attn = AttentionParams(r(c, c), r(c, c), r(c, c), r(c, c), heads)
    return KGTLayerParams(attn, r(c, ratio * c), r(ratio * c, c),
                          Tensor(1 + 0.1 * rng.standard_normal(c)), r(c),
                          Tensor(1 + 0.1 * rng.standard_normal(c)), r(c))


def _block_checks(rng) -> list[tuple[str, float, Callable[[], float]]]:
    c, heads, win = 4, 2, 4
    layers = [random_layer(rng, c, heads) for _ in range(2)]
    tail_w = 0.3 * rng.standard_normal((c, c, 3, 3))
    tail_b = 0.1 * rng.standard_normal(c)
    f_in = rng.standard_normal((c, 8, 8))
    target = rng.standard_normal((c, 8, 8))
    wb = partition(Tensor(f_in), win)
    nodes = wb.nodes.data
    graph = build(nodes, 6)
    node_target = rng.standard_normal(nodes.shape)
    w1 = layers[0].ffn_w1.data

    def stage(t, w_tail=None, backend="gather"):
        p = KGTStageParams(layers, Tensor(tail_w) if w_tail is None else w_tail, Tensor(tail_b), 6)
        return l1_loss(kgt_stage_forward(t, p, 6, win, backend), target)

    def layer_w1(t):
        base = layers[0]
        p = KGTLayerParams(base.attn, t, base.ffn_w2, base.norm1_gamma, base.norm1_beta,
                           base.norm2_gamma, base.norm2_beta)
        return l1_loss(kgt_layer_forward(Tensor(nodes), graph, p), node_target)

    def layer_wq(t):
        base = layers[0]
        attn = AttentionParams(t, base.attn.w_key, base.attn.w_val, base.attn.w_out, heads)
        p = KGTLayerParams(attn, base.ffn_w1, base.ffn_w2, base.norm1_gamma, base.norm1_beta,
                           base.norm2_gamma, base.norm2_beta)
        return l1_loss(kgt_layer_forward(Tensor(nodes), graph, p, "streaming:5"), node_target)

    return [
        ("kgt_layer/nodes", COMPOSITE_TOL, lambda: grad_check(
            lambda t: l1_loss(kgt_layer_forward(t, graph, layers[0]), node_target), nodes, STEP)),
        ("kgt_layer/ffn_w1", COMPOSITE_TOL, lambda: grad_check(layer_w1, w1, STEP)),
        ("kgt_layer/w_qry[streaming]", COMPOSITE_TOL,
         lambda: grad_check(layer_wq, layers[0].attn.w_qry.data, STEP)),
        ("kgt_stage/input", COMPOSITE_TOL, lambda: grad_check(stage, f_in, STEP)),
        ("kgt_stage/input[mask]", COMPOSITE_TOL,
         lambda: grad_check(lambda t: stage(t, backend="mask"), f_in, STEP)),
        ("kgt_stage/tail_w", COMPOSITE_TOL,
         lambda: grad_check(lambda t: stage(Tensor(f_in), w_tail=t), tail_w, STEP)),
    ]


def gather_mask_grad_gap(seed: int = 0) -> float:
    """Max abs difference of q/k/v gradients between the gather and mask backends."""
    rng = np.random.default_rng(seed)
    shape = (2, 2, 16, 4)
    with float64_mode():
        base = [rng.standard_normal(shape) for _ in range(3)]
        target = rng.standard_normal(shape)
        graph = build(rng.standard_normal((2, 16, 8)), 5)
        grads = []
        for backend in ("gather", "mask"):
            ts = [Tensor(x, requires_grad=True) for x in base]
            l1_loss(keygraph_attention(*ts, graph, backend), target).backward()
            grads.append([t.grad for t in ts])
    return max(float(np.abs(a - b).max()) for a, b in zip(*grads))


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with float64_mode():
        checks = _op_checks(rng) + _attention_checks(rng) + _block_checks(rng)
        for name, tol, fn in checks:
            results.append(CheckResult(name, fn(), tol))
    results.append(CheckResult("gather-vs-mask gradients", gather_mask_grad_gap(seed), 1e-8))
    return results
