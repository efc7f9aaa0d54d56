import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import Counter, naive_conv, naive_depthwise, naive_dsep
from progsr.convkit import (
    ConvGeometry,
    bench_conv,
    conv2d,
    cost_breakdown,
    depthwise_conv2d,
    dsep_conv2d,
    format_cost_table,
    mult_count,
    speedup_ratio,
)
from progsr.numerics import Tensor, grad_check


def same_geometries(draw_m=st.integers(1, 5), draw_n=st.integers(1, 5)):
    return st.builds(
        lambda m, n, k, f: ConvGeometry.same(m, n, k, max(f, k)),
        draw_m, draw_n, st.sampled_from([1, 3, 5]), st.integers(1, 7),
    )


# -- geometry ------------------------------------------------------------


def test_geometry_derives_output_extent():
    assert ConvGeometry(d_f=8, d_k=3, m=1, n=1, stride=2, padding=1).d_g == 4
    assert ConvGeometry.same(4, 4, 3, 16).d_g == 16


@pytest.mark.parametrize("kw", [dict(d_f=0, d_k=1, m=1, n=1), dict(d_f=2, d_k=5, m=1, n=1),
                                dict(d_f=4, d_k=3, m=1, n=1, padding=-1), dict(d_f=4, d_k=3, m=1, n=1, d_g=4)])
def test_geometry_rejects_invalid(kw):
    with pytest.raises(ValueError):
        ConvGeometry(**kw)


# -- convolution values --------------------------------------------------


def test_identity_kernel():
    out = conv2d(np.array([[[[5.0]]]]), np.array([[[[1.0]]]]))
    assert out.data.tolist() == [[[[5.0]]]]


def test_ones_kernel_on_ones_image():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(rng, stride, padding):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, w, stride=stride, padding=padding).data,
                               naive_conv(x, w, stride, padding), atol=1e-12)


def test_conv_accepts_geometry(rng):
    g = ConvGeometry(d_f=6, d_k=3, m=2, n=3, stride=1, padding=1)
    x, w = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    assert conv2d(x, w, g).shape == (1, 3, 6, 6)
    with pytest.raises(ValueError):
        conv2d(rng.standard_normal((1, 3, 6, 6)), w, g)


def test_conv_channel_mismatch_is_an_error(rng):
    with pytest.raises(ValueError):
        conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))


def test_dsep_delta_identity(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    dw = np.zeros((4, 1, 3, 3))
    dw[:, 0, 1, 1] = 1.0
    pw = np.eye(4).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(dsep_conv2d(x, dw, pw, padding=1).data, x)


def test_dsep_single_channel_collapses_to_dense(rng):
    x = rng.standard_normal((1, 1, 7, 7))
    dw = rng.standard_normal((1, 1, 3, 3))
    pw = np.array([[[[1.7]]]])
    np.testing.assert_allclose(dsep_conv2d(x, dw, pw).data, conv2d(x, 1.7 * dw).data, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_dsep_matches_two_stage_oracle(rng, stride, padding):
    x = rng.standard_normal((1, 3, 6, 6))
    dw = rng.standard_normal((3, 1, 3, 3))
    pw = rng.standard_normal((5, 3, 1, 1))
    got = dsep_conv2d(x, dw, pw, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_dsep(x, dw, pw, stride, padding), atol=1e-12)
    np.testing.assert_allclose(got, conv2d(depthwise_conv2d(x, dw, stride=stride, padding=padding), pw).data,
                               atol=1e-12)


def test_depthwise_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((3, 1, 3, 3))
    np.testing.assert_allclose(depthwise_conv2d(x, k, padding=1).data, naive_depthwise(x, k, 1, 1), atol=1e-12)


# -- gradients -----------------------------------------------------------


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv_gradients(rng, stride, padding):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    c = Tensor(rng.standard_normal(conv2d(x, w, stride=stride, padding=padding).shape))
    f_x = lambda t: (conv2d(t, Tensor(w), stride=stride, padding=padding) * c).sum()
    f_w = lambda t: (conv2d(Tensor(x), t, stride=stride, padding=padding) * c).sum()
    assert grad_check(f_x, x).max_rel_error < 1e-6
    assert grad_check(f_w, w).max_rel_error < 1e-6


def test_dsep_gradients(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    dw = rng.standard_normal((3, 1, 3, 3))
    pw = rng.standard_normal((4, 3, 1, 1))
    c = Tensor(rng.standard_normal((2, 4, 5, 5)))
    f = lambda a, b, p: (dsep_conv2d(a, b, p, padding=1) * c).sum()
    assert grad_check(lambda t: f(t, Tensor(dw), Tensor(pw)), x).max_rel_error < 1e-6
    assert grad_check(lambda t: f(Tensor(x), t, Tensor(pw)), dw).max_rel_error < 1e-6
    assert grad_check(lambda t: f(Tensor(x), Tensor(dw), t), pw).max_rel_error < 1e-6


def test_conv_second_order_gradients(rng):
    # inner gradient w.r.t. a weight leaf, outer w.r.t. the input: the same
    # shape of computation as a gradient penalty
    from progsr import numerics as nx

    w0 = rng.standard_normal((2, 2, 3, 3))

    def f(t):
        w = Tensor(w0, requires_grad=True)
        y = conv2d(t, w, padding=1)
        (g,) = nx.grad((y * y).sum(), [w], create_graph=True)
        return (g * g).sum()

    x = rng.standard_normal((1, 2, 4, 4))
    assert grad_check(f, x).max_rel_error < 1e-6


# -- cost model ----------------------------------------------------------


def counted(geometry, mode):
    g = geometry
    x = np.ones((1, g.m, g.d_f, g.d_f))
    c = Counter()
    if mode == "vanilla":
        naive_conv(x, np.ones((g.n, g.m, g.d_k, g.d_k)), g.stride, g.padding, c)
    else:
        naive_dsep(x, np.ones((g.m, 1, g.d_k, g.d_k)), np.ones((g.n, g.m, 1, 1)), g.stride, g.padding, c)
    return c.mults


@pytest.mark.parametrize("geo,vanilla,dsep", [
    (ConvGeometry.same(3, 8, 3, 4), 3456, 816),
    (ConvGeometry.same(1, 1, 1, 1), 1, 2),
    (ConvGeometry.same(16, 32, 3, 8), 294912, 41984),
])
def test_mult_count_spot_values(geo, vanilla, dsep):
    assert mult_count(geo, "vanilla") == vanilla
    assert mult_count(geo, "dsep") == dsep


def test_mult_count_matches_counter_small_case():
    geo = ConvGeometry.same(3, 8, 3, 4)
    assert counted(geo, "vanilla") == 3456
    assert counted(geo, "dsep") == 816


@given(same_geometries())
def test_mult_count_equals_instrumented_loops(geo):
    assert mult_count(geo, "vanilla") == counted(geo, "vanilla")
    assert mult_count(geo, "dsep") == counted(geo, "dsep")


def test_corrected_count_for_strided_geometry():
    geo = ConvGeometry(d_f=8, d_k=3, m=2, n=3, stride=2, padding=1)
    assert mult_count(geo, "vanilla", corrected=True) == counted(geo, "vanilla")
    assert mult_count(geo, "vanilla") == 3 * 9 * 64 * 2  # input extent, as the formula is written
    assert mult_count(geo, "dsep") == counted(geo, "dsep")


def test_mult_count_rejects_unknown_mode():
    with pytest.raises(ValueError):
        mult_count(ConvGeometry.same(1, 1, 1, 1), "winograd")


@given(same_geometries(st.integers(1, 64), st.integers(1, 64)))
def test_ratio_equals_count_ratio(geo):
    assert speedup_ratio(geo) == pytest.approx(mult_count(geo, "dsep") / mult_count(geo, "vanilla"), abs=1e-12)


def test_ratio_spot_values():
    assert speedup_ratio(ConvGeometry.same(4, 8, 3, 8)) == pytest.approx(17 / 72, abs=1e-15)
    assert speedup_ratio(ConvGeometry.same(1, 1, 1, 1)) == 2.0
    assert speedup_ratio(ConvGeometry.same(4, 10**6, 3, 8)) == pytest.approx(1 / 9, abs=1e-5)


def test_ratio_requires_same_padding():
    with pytest.raises(ValueError, match="same-padded"):
        speedup_ratio(ConvGeometry(d_f=8, d_k=3, m=1, n=1))


def test_cost_breakdown_and_table():
    geo = ConvGeometry.same(3, 8, 3, 4)
    cb = cost_breakdown(geo)
    assert cb.ratio == cb.dsep_mults / cb.vanilla_mults
    lines = format_cost_table(geo).splitlines()
    assert lines[0].split() == ["quantity", "formula", "value"]
    assert "3456" in lines[1] and "816" in lines[2]


# -- benchmark -----------------------------------------------------------


def test_bench_conv_report_shape():
    geo = ConvGeometry.same(4, 4, 3, 8)
    b = bench_conv(geo, repeats=10)
    assert b.geometry == geo and b.repeats == 10
    assert b.vanilla_median > 0 and b.dsep_median > 0


def test_bench_conv_needs_three_repeats():
    with pytest.raises(ValueError):
        bench_conv(ConvGeometry.same(1, 1, 1, 4), repeats=2)


@pytest.mark.slow
def test_bench_conv_dsep_faster_on_wide_layer():
    b = bench_conv(ConvGeometry.same(64, 64, 3, 32), repeats=7)
    assert b.dsep_median < b.vanilla_median
