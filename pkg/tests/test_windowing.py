import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgt import numerics as nx
from kgt.errors import ConfigurationError, IntegrityError
from kgt.numerics import Tensor, float64_mode, grad_check
from kgt.windowing import WindowBatch, merge, partition, reflect_indices


def test_block_count():
    wb = partition(Tensor(np.zeros((1, 8, 8))), 4)
    assert wb.nodes.shape == (4, 16, 1) and wb.hw == 16


def test_padding_arithmetic():
    wb = partition(Tensor(np.zeros((2, 10, 10))), 4)
    assert (wb.padded_h, wb.padded_w) == (12, 12)
    assert wb.nodes.shape == (9, 16, 2)
    wb.check()


def test_constant_image_constant_nodes():
    wb = partition(Tensor(np.full((3, 9, 7), 0.5)), 4)
    assert np.all(wb.nodes.data == 0.5)


@pytest.mark.parametrize("h", [7, 8, 10])
@pytest.mark.parametrize("w", [7, 8, 10])
def test_round_trip(rng, h, w):
    f = rng.standard_normal((2, h, w)).astype(np.float32)
    assert np.array_equal(merge(partition(Tensor(f), 4)).data, f)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
def test_round_trip_property(h, w, win, seed):
    f = np.random.default_rng(seed).standard_normal((2, h, w)).astype(np.float32)
    wb = partition(Tensor(f), win)
    wb.check()
    assert wb.nodes.shape[0] == (wb.padded_h // win) * (wb.padded_w // win)
    assert np.array_equal(merge(wb).data, f)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 32), st.integers(2, 32), st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
def test_reflect_padding_adds_no_extremes(h, w, win, seed):
    f = np.random.default_rng(seed).standard_normal((1, h, w)).astype(np.float32)
    nodes = partition(Tensor(f), win).nodes.data
    assert nodes.min() == f.min() and nodes.max() == f.max()


def test_reflect_indices():
    assert reflect_indices(3, 7).tolist() == [0, 1, 2, 1, 0, 1, 2]
    assert reflect_indices(1, 3).tolist() == [0, 0, 0]


def test_single_window_is_reshape(rng):
    f = rng.standard_normal((3, 4, 4)).astype(np.float32)
    wb = partition(Tensor(f), 4)
    assert np.array_equal(wb.nodes.data[0], f.reshape(3, 16).T)
    assert np.array_equal(merge(wb).data, f)


def test_node_relocation_index_map(rng):
    """Swapping two nodes of a window moves exactly their two pixels."""
    h, w, win = 8, 12, 4
    f = rng.standard_normal((2, h, w)).astype(np.float32)
    wb = partition(Tensor(f), win)
    nodes = wb.nodes.data.copy()
    gw = w // win
    b, i, j = 4, 1, 14
    nodes[b, [i, j]] = nodes[b, [j, i]]
    out = merge(wb.with_nodes(Tensor(nodes))).data

    def pixel(b, n):
        ty, tx = divmod(b, gw)
        r, c = divmod(n, win)
        return ty * win + r, tx * win + c

    expected = f.copy()
    (yi, xi), (yj, xj) = pixel(b, i), pixel(b, j)
    expected[:, yi, xi], expected[:, yj, xj] = f[:, yj, xj], f[:, yi, xi]
    assert np.array_equal(out, expected)


def test_batched_round_trip(rng):
    f = rng.standard_normal((3, 2, 9, 6)).astype(np.float32)
    wb = partition(Tensor(f), 4)
    assert wb.nodes.shape[0] == 3 * 3 * 2
    assert np.array_equal(merge(wb).data, f)


def test_window_too_small():
    with pytest.raises(ConfigurationError):
        partition(Tensor(np.zeros((1, 4, 4))), 1)


def test_inconsistent_bookkeeping():
    wb = partition(Tensor(np.zeros((1, 8, 8))), 4)
    bad = WindowBatch(wb.nodes, 4, 8, 8, 8, 8, n_images=2)
    with pytest.raises(IntegrityError):
        merge(bad)
    with pytest.raises(IntegrityError):
        merge(WindowBatch(wb.nodes, 4, 8, 8, 3, 8))


def test_gradient_through_padding(rng):
    w = rng.standard_normal((9, 16, 2))
    with float64_mode():
        err = grad_check(lambda t: nx.sum(nx.mul(partition(t, 4).nodes, Tensor(w))),
                         rng.standard_normal((2, 10, 9)))
    assert err <= 1e-6
