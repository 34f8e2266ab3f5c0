import math

import numpy as np
import pytest

from _oracles import attention_case, naive_keygraph_attention, random_configs
from kgt.attention import (
    AttentionParams,
    Backend,
    dense_attention,
    instrument,
    keygraph_attention,
    merge_heads,
    project,
)
from kgt.bench import attention_flops, attention_peak_bytes
from kgt.errors import ConfigurationError, DimensionError, IntegrityError
from kgt.keygraph import build
from kgt.numerics import Tensor, float64_mode

BACKENDS = ["gather", "mask", "streaming", "streaming:3"]


def _params(c, heads, w=None, w_out=None):
    eye = Tensor(np.eye(c))
    return AttentionParams(w or eye, w or eye, w or eye, w_out or eye, heads)


class TestProject:
    def test_identity_single_head(self, rng):
        v = rng.standard_normal((2, 5, 4)).astype(np.float32)
        for t in project(Tensor(v), _params(4, 1)):
            assert np.array_equal(t.data[:, 0], v)

    def test_zero_query_gives_uniform_attention(self, rng):
        c = 4
        p = AttentionParams(Tensor(np.zeros((c, c))), Tensor(rng.standard_normal((c, c))),
                            Tensor(np.eye(c)), Tensor(np.eye(c)), 1)
        v = rng.standard_normal((1, 6, c))
        q, k, vv = project(Tensor(v), p)
        assert not q.data.any()
        out = dense_attention(q, k, vv).data
        np.testing.assert_allclose(out[0, 0], np.tile(vv.data[0, 0].mean(0), (6, 1)), atol=1e-6)

    def test_matmul_oracle(self, rng):
        c, heads = 6, 2
        ws = [rng.standard_normal((c, c)) for _ in range(3)]
        p = AttentionParams(*(Tensor(w) for w in ws), Tensor(np.eye(c)), heads)
        v = rng.standard_normal((3, 5, c))
        for w, t in zip(ws, project(Tensor(v), p)):
            full = v @ w
            for hd in range(heads):
                np.testing.assert_allclose(t.data[:, hd], full[..., hd * 3:(hd + 1) * 3], atol=1e-5)

    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            _params(6, 4)

    def test_wrong_channels(self, rng):
        with pytest.raises(DimensionError):
            project(Tensor(rng.standard_normal((1, 4, 3))), _params(4, 1))


class TestMergeHeads:
    def test_identity_single_head(self, rng):
        x = rng.standard_normal((2, 1, 5, 4)).astype(np.float32)
        assert np.array_equal(merge_heads(Tensor(x), Tensor(np.eye(4))).data, x[:, 0])

    def test_zero_out(self, rng):
        out = merge_heads(Tensor(rng.standard_normal((1, 2, 3, 2))), Tensor(np.zeros((4, 4))))
        assert not out.data.any()

    def test_concat_oracle(self, rng):
        x, w = rng.standard_normal((2, 3, 5, 2)), rng.standard_normal((6, 6))
        cat = np.concatenate([x[:, i] for i in range(3)], axis=-1)
        np.testing.assert_allclose(merge_heads(Tensor(x), Tensor(w)).data, cat @ w, atol=1e-5)


class TestDense:
    def test_equal_keys_average_values(self, rng):
        q = rng.standard_normal((1, 1, 4, 3))
        k = np.tile(rng.standard_normal(3), (1, 1, 4, 1))
        v = rng.standard_normal((1, 1, 4, 3))
        out = dense_attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out[0, 0], np.tile(v[0, 0].mean(0), (4, 1)), atol=1e-6)

    def test_closed_form_weights(self):
        # d = 2, so logits are q.k / sqrt(2)
        a = math.sqrt(2) * math.log(3)
        q = np.array([[[[1.0, 0], [0, 0]]]])
        k = np.array([[[[0, 0], [a, 0]]]])
        out = dense_attention(Tensor(q), Tensor(k), Tensor(np.eye(2)[None, None])).data
        np.testing.assert_allclose(out[0, 0], [[0.25, 0.75], [0.5, 0.5]], atol=1e-6)

    def test_shift_invariance(self, rng):
        # an extra coordinate, 1 on every query and s on every key, adds s/sqrt(d) to all logits
        q, k, v = (rng.standard_normal((1, 1, 5, 3)) for _ in range(3))
        q[..., 2] = 1.0
        k[..., 2] = 0.0
        base = dense_attention(Tensor(q), Tensor(k), Tensor(v)).data
        k[..., 2] = 4.0
        np.testing.assert_allclose(dense_attention(Tensor(q), Tensor(k), Tensor(v)).data, base, atol=1e-6)


class TestKeyGraphAttention:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_single_neighbor_copies_value(self, rng, backend):
        q, k, v, g = attention_case(rng, 16, 1, 4, 2)
        out = keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, backend).data
        expected = np.take_along_axis(v, g.neighbors[:, None, :, :1].repeat(4, -1).repeat(2, 1), 2)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_full_graph_is_masked_dense(self, rng, backend):
        q, k, v, g = attention_case(rng, 16, 15, 8, 2)
        out = keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, backend).data
        ref = dense_attention(Tensor(q), Tensor(k), Tensor(v), mask_diagonal=True).data
        assert np.abs(out - ref).max() <= 1e-5

    @pytest.mark.parametrize("backend", BACKENDS + ["dense"])
    def test_loop_oracle(self, rng, backend):
        q, k, v, g = attention_case(rng, 16, 5, 4, 2, dtype=np.float64)
        if backend == "dense":  # dense ignores the graph, so compare against the full one
            g = build(rng.standard_normal((2, 16, 2)), 15)
        with float64_mode():
            out = keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, backend).data
        np.testing.assert_allclose(out, naive_keygraph_attention(q, k, v, g.neighbors), atol=1e-12)

    @pytest.mark.parametrize("cfg", random_configs(30, 5))
    def test_cross_backend_32bit(self, cfg):
        hw, kk, d, heads = cfg
        q, k, v, g = attention_case(np.random.default_rng(hw * kk + d), hw, kk, d, heads)
        outs = [keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, b).data for b in BACKENDS]
        for o in outs[1:]:
            assert np.abs(o - outs[0]).max() <= 1e-5

    @pytest.mark.parametrize("cfg", random_configs(10, 6))
    def test_cross_backend_64bit(self, cfg):
        hw, kk, d, heads = cfg
        q, k, v, g = attention_case(np.random.default_rng(kk), hw, kk, d, heads, dtype=np.float64)
        with float64_mode():
            outs = [keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, b).data for b in BACKENDS]
        for o in outs[1:]:
            assert np.abs(o - outs[0]).max() <= 1e-10

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_implied_weights_are_stochastic_and_sparse(self, rng, backend):
        hw = 16
        q, k, _, g = attention_case(rng, hw, 6, 16, 1)
        v = np.broadcast_to(np.eye(hw, dtype=np.float32), (2, 1, hw, hw)).copy()
        wts = keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, backend).data[:, 0]
        np.testing.assert_allclose(wts.sum(-1), 1, atol=1e-6)
        off = wts[~g.membership()]
        limit = 1e-12 if backend == "mask" else 0.0
        assert np.abs(off).max() <= limit

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_permutation_equivariance(self, rng, backend):
        hw = 16
        q, k, v, _ = attention_case(rng, hw, 4, 8, 2, windows=1)
        g = build(rng.standard_normal((1, hw, 4)), 4)
        perm = rng.permutation(hw)
        base = keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, backend).data
        moved = keygraph_attention(Tensor(q[:, :, perm]), Tensor(k[:, :, perm]), Tensor(v[:, :, perm]),
                                   g.relabel(perm), backend).data
        assert np.abs(moved - base[:, :, perm]).max() <= 1e-6

    def test_streaming_block_size_independent(self, rng):
        hw = 16
        q, k, v, g = attention_case(rng, hw, 7, 4, 2)
        outs = [keygraph_attention(Tensor(q), Tensor(k), Tensor(v), g, Backend("streaming", bs)).data
                for bs in (1, 3, hw)]
        assert max(np.abs(o - outs[0]).max() for o in outs) <= 1e-6

    def test_graph_size_mismatch(self, rng):
        q, k, v, _ = attention_case(rng, 16, 3, 4, 1)
        with pytest.raises(IntegrityError):
            keygraph_attention(Tensor(q), Tensor(k), Tensor(v), build(rng.standard_normal((2, 9, 2)), 3))
        with pytest.raises(IntegrityError):
            keygraph_attention(Tensor(q), Tensor(k), Tensor(v), build(rng.standard_normal((3, 16, 2)), 3))


class TestBackend:
    def test_parse(self):
        assert Backend.parse("streaming:7") == Backend("streaming", 7)
        assert str(Backend.parse("MASK")) == "mask"

    @pytest.mark.parametrize("text", ["sparse", "gather:4", "streaming:0", "streaming:x"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            Backend.parse(text)


@pytest.mark.parametrize("backend", ["gather", "mask", "streaming", "streaming:5", "dense"])
@pytest.mark.parametrize("hw,k,d,heads", [(16, 3, 4, 1), (64, 16, 8, 2), (64, 63, 4, 2)])
def test_instrument_matches_cost_model(backend, hw, k, d, heads):
    q, kk, v, g = attention_case(np.random.default_rng(0), hw, k, d, heads, windows=3)
    b = Backend.parse(backend)
    with instrument() as ins:
        keygraph_attention(Tensor(q), Tensor(kk), Tensor(v), g, b)
    assert ins.flops == attention_flops(hw, k, d, heads, b.kind, windows=3)
    assert ins.peak_bytes == attention_peak_bytes(hw, k, d, heads, b.kind, block_size=b.block_size,
                                                  windows=3)
    assert ins.live_bytes == 0
