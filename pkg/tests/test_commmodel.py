import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from hybridpar import commmodel
from hybridpar.commmodel import (IndivisibleShape, LayerShape, layer_volume, ring_allreduce_volume,
                                 transformer_closed_form, transformer_volume, unet_volume,
                                 weak_scaling_curves)
from hybridpar.core import ModelKind, ParallelConfig
from hybridpar.planner import divisors

DIMS = [1, 2, 4, 8]


def cfg(gd, gr, gc):
    return ParallelConfig(gd * gr * gc, gd, gr, gc)


def test_ring_examples():
    assert ring_allreduce_volume(12, 4) == 18
    assert ring_allreduce_volume(12345, 1) == 0
    assert ring_allreduce_volume(7, 2) == 7


def test_layer_volume_examples():
    v = layer_volume(LayerShape(2, 2), cfg(1, 2, 2), 1)
    assert (v.v_fp, v.v_bp, v.v_total) == (1, 1, 2)
    assert layer_volume(LayerShape(6, 10), cfg(4, 1, 1), 8).v_total == 0
    with pytest.raises(IndivisibleShape):
        layer_volume(LayerShape(3, 4), cfg(1, 2, 2), 4)


@st.composite
def layer_cases(draw):
    gd, gr, gc = (draw(st.sampled_from(DIMS)) for _ in range(3))
    k = draw(st.integers(1, 6)) * gr * gc
    n = draw(st.integers(1, 6)) * gr * gc
    B = draw(st.integers(1, 6)) * gd
    return LayerShape(k, n, draw(st.booleans())), cfg(gd, gr, gc), B


@given(layer_cases())
def test_layer_matches_closed_form(case):
    shape, c, B = case
    v = layer_volume(shape, c, B)
    assert v.v_total == v.v_fp + v.v_bp
    assert v.v_total == commmodel.layer_volume_closed_form(shape, c, B)


@given(st.sampled_from([1, 2, 3, 4, 6, 8, 12, 16]), st.integers(1, 8), st.sampled_from(DIMS),
       st.sampled_from(DIMS), st.sampled_from(DIMS))
def test_transformer_aggregate_is_sum_of_layers(hmul, bmul, gd, gr, gc):
    H = hmul * gr * gc
    B = bmul * gd
    c = cfg(gd, gr, gc)
    pred = transformer_volume(H, B, c)
    layers = sum((layer_volume(s, c, B).v_total for s in commmodel.transformer_layers(H)), Fraction(0))
    assert pred.v_total == layers == transformer_closed_form(H, B, c)
    assert len(pred.per_layer) == 4


def test_transformer_zero_without_tensor_parallelism():
    assert transformer_volume(64, 32, cfg(4, 1, 1)).v_total == 0


def test_transformer_real_optimum_at_three_rows():
    # minimize gc - 1 + 3 (Gt/gc - 1) over real gc by golden-section search
    for Gt in (2, 8, 24, 100):
        f = lambda gc: gc - 1 + 3 * (Gt / gc - 1)
        lo, hi = 1e-3, 10.0 * Gt
        for _ in range(200):
            a, b = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            lo, hi = (lo, b) if f(a) < f(b) else (a, hi)
        gc = (lo + hi) / 2
        assert gc == pytest.approx(3 * (Gt / gc), rel=1e-6)


def test_transposed_layer_swaps_roles():
    c = cfg(1, 2, 4)
    plain = layer_volume(LayerShape(8, 16), c, 4)
    swapped = layer_volume(LayerShape(8, 16, True), ParallelConfig(8, 1, 4, 2), 4)
    assert (plain.v_fp, plain.v_bp) == (swapped.v_fp, swapped.v_bp)


def test_megatron_equivalence():
    # G_c = G_tensor, G_r = 1 leaves only the backward all-reduce of k-wide activations
    for Gt in (2, 4, 8):
        v = layer_volume(LayerShape(32, 64), cfg(2, 1, Gt), 16)
        assert v.v_fp == 0
        assert v.v_bp == 2 * Fraction(Gt - 1, Gt) * 8 * 32


@pytest.mark.parametrize("G", [1, 2, 4, 8, 16, 32, 64, 128, 256])
def test_am_gm_bound_exhaustive(G):
    n, k, B = 48, 20, 64
    for gd in divisors(G):
        for gr in divisors(G // gd):
            c = cfg(gd, gr, G // (gd * gr))
            shape = LayerShape(k, n)
            v = layer_volume(shape, c, B, strict=False).v_total
            assert commmodel.satisfies_lower_bound(shape, c, B)
            assert float(v) >= commmodel.layer_volume_lower_bound(shape, c, B) - 1e-6


def test_unet_examples():
    assert unet_volume(2048, 2048, cfg(4, 1, 1)).v_total == 0
    v = unet_volume(2048, 2048, ParallelConfig(32, 4, 2, 4))
    oracle = Fraction(10625, 1000) * 2048 * 2048 / 32 * (Fraction(2012, 1000) * 3 + Fraction(1011, 1000))
    assert v.v_total == oracle


def test_unet_real_optimum():
    for Gt in (4, 8, 32):
        a, b = 2.012, 1.011
        gc = math.sqrt(b * Gt / a)
        assert gc == pytest.approx(math.sqrt(Gt / 1.99), rel=1e-3)
        assert gc == pytest.approx(math.sqrt(Gt / 1.98), rel=3e-3)


def test_weak_scaling_coefficients_and_samples():
    B, H0, G0, gd = 1024 * 2048, 4096, 32, 8
    ladder = [32, 64, 128, 256]
    curve = weak_scaling_curves(ModelKind.TRANSFORMER, B, H0, G0, gd, ladder)
    K = 8 * B * H0 / math.sqrt(G0)
    assert curve.alpha0 == pytest.approx(K * 2 * math.sqrt(3 / gd))
    assert curve.alpha0 > 0 and curve.beta0 > 0
    for G, ours, meg in curve.samples:
        assert ours == pytest.approx(curve.ours(G), rel=1e-12)
        assert meg == pytest.approx(curve.megatron(G), rel=1e-12)
    ours = [s[1] for s in curve.samples]
    meg = [s[2] for s in curve.samples]
    assert all(a < b for a, b in zip(ours, ours[1:])) and all(o < curve.alpha0 for o in ours)
    # dominated by the Megatron limit across the ladder
    assert all(o < m for o, m in zip(ours, meg))
    far = weak_scaling_curves(ModelKind.TRANSFORMER, B, H0, G0, gd, [2 ** 20, 2 ** 22])
    assert far.samples[1][2] / far.samples[0][2] == pytest.approx(2, rel=1e-3)
    assert far.samples[1][1] / far.alpha0 == pytest.approx(1, rel=1e-2)


def test_curves_csv_header():
    curve = weak_scaling_curves(ModelKind.UNET, 2048, 2048, 32, 8, [32, 64])
    lines = curve.to_csv().splitlines()
    assert lines[0] == "G,ours_elements,megatron_elements"
    assert len(lines) == 3


def test_weak_scaling_without_data_parallelism():
    # the ladder with G_data = 1 flattens as G grows; with G_data = 8 it does not
    ladder = [32, 64, 128, 256]
    by_g = lambda gd: {G: (o, m) for G, o, m in
                       weak_scaling_curves(ModelKind.TRANSFORMER, 1024 * 2048, 4096, 32, gd, ladder).samples}
    one, eight = by_g(1), by_g(8)
    assert one[256][0] / one[64][0] - 1 < 0.15
    assert one[256][1] / one[64][1] == pytest.approx(2, rel=0.05)
    assert eight[256][0] / eight[64][0] - 1 > 0.15
