"""Acceptance gate: one marked test (or group) per criterion."""

import itertools
import math
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cli_cases import subcommand_cases
from hybridpar import commmodel, memmodel, planner, tiledopt
from hybridpar.commmodel import LayerShape
from hybridpar.core import ModelKind, ParallelConfig, RankGrid
from hybridpar.fixtures import load_fixture
from hybridpar.moesim import (ActivationStash, MoELayerPlan, MoELayerSim, dtd_allgather, dtd_drop,
                              moe_layer_pass, Tokens)
from hybridpar.simnet import (TENSOR_PARALLEL_KINDS, CollectiveKind, CostModel, Step, VolumeReport,
                              schedule_overdecomposed, serialize_schedule, split_work)
from hybridpar.tpsim import (LayerState, ShardedMatrix, allreduce_data_gradients, chain_layers,
                             fc_backward, fc_forward)

criterion = pytest.mark.criterion


def grid(gr, gc, gd=1):
    return RankGrid(ParallelConfig(gd * gr * gc, gd, gr, gc))


def run_fc(X, W, dY, g, transposed, report):
    layer = LayerState.from_dense(W, g, transposed)
    Y = fc_forward(layer, ShardedMatrix.shard(X, g, layer.input_partition), g, report)
    grads = fc_backward(layer, ShardedMatrix.shard(dY, g, layer.output_partition), g, report)
    dW = allreduce_data_gradients(grads.dW, g, report)
    return Y.assemble(), grads.dX.assemble(), dW.assemble()


@criterion(1, "tpsim bit-identical to serial matmul on all {1,2,4}^2 grids")
def test_c01_tpsim_oracle_exhaustive():
    rng = np.random.default_rng(2024)
    cases = 0
    for gr, gc in itertools.product((1, 2, 4), repeat=2):
        g = grid(gr, gc)
        step = math.lcm(gr, gc)
        dims = range(step, 17, step)
        for k, n, transposed in itertools.product(dims, dims, (False, True)):
            for m in (1, 3, 16):
                X = rng.integers(-9, 10, (m, k)).astype(float)
                W = rng.integers(-9, 10, (k, n)).astype(float)
                dY = rng.integers(-9, 10, (m, n)).astype(float)
                Y, dX, dW = run_fc(X, W, dY, g, transposed, VolumeReport())
                assert np.array_equal(Y, X @ W)
                assert np.array_equal(dX, dY @ W.T)
                assert np.array_equal(dW, X.T @ dY)
                cases += 1
    assert cases > 1000


@criterion(2, "simnet per-rank bytes equal commmodel predictions (500 cases)")
@settings(max_examples=500, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 3]),
       st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.booleans(),
       st.sampled_from([1, 2, 4]), st.integers(0, 2 ** 20))
def test_c02_volume_crosscheck(gr, gc, gd, kk, nk, mk, transposed, eb, seed):
    g = grid(gr, gc, gd)
    rng = np.random.default_rng(seed)
    k, n, m = kk * gr * gc, nk * gr * gc, mk * gd
    layer = LayerState.from_dense(rng.integers(-3, 4, (k, n)).astype(float), g, transposed, eb)
    rep = VolumeReport()
    X = ShardedMatrix.shard(rng.integers(-3, 4, (m, k)).astype(float), g, layer.input_partition)
    Y = fc_forward(layer, X, g, rep)
    grads = fc_backward(layer, ShardedMatrix.shard(np.ones(Y.shape), g, layer.output_partition), g, rep)
    allreduce_data_gradients(grads.dW, g, rep, eb)
    pred = commmodel.layer_volume(LayerShape(k, n, transposed), g.config, m)
    for r in g.ranks():
        assert rep.bytes(r, TENSOR_PARALLEL_KINDS) == pred.v_total * eb
        assert rep.bytes(r, [CollectiveKind.ALL_REDUCE_DATA]) == pred.v_dp * eb


@criterion(3, "planner picks (2,2,4) on 16 GPUs and gc_star = 4.899")
def test_c03_planner_heuristic():
    entry = load_fixture("heuristic-16gpu")[0]
    req = planner.PlanRequest(entry.model, **entry.request)
    assert req.G == 16 and req.min_tensor_degree == 8
    c = planner.choose_plan(req).config
    assert (c.data_degree, c.tensor_rows, c.tensor_cols) == (2, 2, 4)
    opt = planner.closed_form_optimum(ModelKind.TRANSFORMER, 8)
    assert abs(opt.gc_star - 4.899) <= 0.001
    assert opt.gc_feasible == 4


def _exhaustive_gc(kind, Gt):
    def vol(gc):
        cfg = ParallelConfig(Gt, 1, Gt // gc, gc)
        if kind is ModelKind.UNET:
            return commmodel.unet_volume(64, 64, cfg).v_total
        return commmodel.transformer_volume(64, 64, cfg, strict=False).v_total
    return min(planner.divisors(Gt), key=lambda gc: (vol(gc), -gc))


@criterion(4, "closed-form optimum equals exhaustive search for G_tensor <= 64")
@pytest.mark.parametrize("kind", [ModelKind.TRANSFORMER, ModelKind.UNET])
def test_c04_closed_form_vs_exhaustive(kind):
    for Gt in range(1, 65):
        assert planner.closed_form_optimum(kind, Gt).gc_feasible == _exhaustive_gc(kind, Gt), Gt


@criterion(5, "weak scaling: ours < 15% growth 64->256, Megatron x2 within 5%")
def test_c05_weak_scaling():
    ladder = load_fixture("gpt-ladder")
    gd = ladder[0].parallel.data_degree
    B = ladder[0].model.batch_size * ladder[0].model.seq_len
    gpus = [e.parallel.total_gpus for e in ladder]
    curve = commmodel.weak_scaling_curves(ModelKind.TRANSFORMER, B, ladder[0].model.hidden_size,
                                          gpus[0], gd, gpus)
    by_g = {G: (ours, meg) for G, ours, meg in curve.samples}
    ours_change = abs(by_g[256][0] / by_g[64][0] - 1)
    meg_ratio = by_g[256][1] / by_g[64][1]
    print(f"G_data={gd}: ours change {ours_change:.3f}, megatron ratio {meg_ratio:.3f}")
    assert ours_change < 0.15
    assert abs(meg_ratio / 2 - 1) <= 0.05


@criterion(6, "memory identities: p_e + p_ne and the 8x base-model ratio")
@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 10 ** 13), st.integers(1, 256), st.integers(1, 10 ** 12))
def test_c06_memory_identities(p_base, E, mem):
    split = memmodel.split_params(p_base, E)
    assert split.p_e + split.p_ne == Fraction(E + 2, 3) * p_base
    assert memmodel.max_base_model(mem, 8) / memmodel.max_base_model(mem, 1) == 8


@criterion(7, "tiled optimizer bit-identical, transient = 4 min(ts, len)")
@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10 ** 5), st.integers(1, 2 * 10 ** 5), st.integers(0, 2 ** 20))
def test_c07_tiled_optimizer(n, ts, seed):
    group = tiledopt.ParamGroup.random(n, seed)
    ref, _ = tiledopt.step_untiled(group)
    tiled, trace = tiledopt.step_tiled(group, tiledopt.make_tile_plan(n, ts))
    assert tiled.bit_identical(ref)
    assert trace.peak_transient_bytes == 4 * min(ts, n)


@criterion(7, "tiled optimizer bit-identical, transient = 4 min(ts, len)")
def test_c07_transient_independent_of_group_size():
    ts = 1_800_000
    small = tiledopt.plan_transient_bytes(10 ** 7, ts)
    large = tiledopt.plan_transient_bytes(10 ** 8, ts)
    assert small == large == 7_200_000


@criterion(8, "DTD shrinks all-to-all bytes by G_tensor; drop/gather is identity")
@pytest.mark.parametrize("dims", [(1, 2), (2, 2), (2, 4)])
def test_c08_dtd(dims):
    gr, gc = dims
    Gt = gr * gc
    cfg = ParallelConfig(4 * Gt, 1, gr, gc, 4)
    measured = {}
    for dtd in (False, True):
        rep = VolumeReport()
        moe_layer_pass(MoELayerPlan(8 * Gt, 8, cfg, dtd_enabled=dtd), rep)
        measured[dtd] = [rep.bytes(r, [CollectiveKind.ALL_TO_ALL_EXPERT]) for r in range(cfg.total_gpus)]
    for off, on in zip(measured[False], measured[True]):
        assert off > 0 and on * Gt == off
    rng = np.random.default_rng(Gt)
    group = list(range(Gt))
    full = Tokens(tuple(f"t{i}" for i in range(3 * Gt)), rng.integers(-5, 6, (3 * Gt, 4)).astype(float))
    back = dtd_allgather(dtd_drop({r: full for r in group}, group), group, VolumeReport())
    assert all(back[r].same_as(full) for r in group)


@criterion(9, "CAC: 12 -> 8 calls, replay bytes 0, replay bit-identical")
def test_c09_cac():
    cfg = ParallelConfig(8, 1, 2, 1, 4)
    off = moe_layer_pass(MoELayerPlan(16, 8, cfg, checkpointing=True), VolumeReport())
    on = moe_layer_pass(MoELayerPlan(16, 8, cfg, checkpointing=True, cac_enabled=True), VolumeReport())
    assert (off.calls(), on.calls()) == (12, 8)
    assert Fraction(off.calls() - on.calls(), off.calls()) == Fraction(1, 3)
    assert on.total_bytes(passes=["replay"]) == 0
    p = MoELayerPlan(16, 8, ParallelConfig(8, 1, 2, 2, 2), dtd_enabled=True, cac_enabled=True,
                     checkpointing=True)
    sim = MoELayerSim(p, seed=11)
    stash = ActivationStash()
    rep = VolumeReport()
    sim.forward(rep, stash=stash)
    logged = rep.bytes(0)
    replay = sim.forward(rep, stash=stash, replay=True, pass_name="replay")
    assert rep.bytes(0) == logged
    recompute = sim.forward(VolumeReport())
    for r in recompute:
        assert replay[r].ids == recompute[r].ids
        assert replay[r].values.tobytes() == recompute[r].values.tobytes()


costs = st.fractions(min_value=0, max_value=50, max_denominator=8)


@criterion(10, "overdecomposition never slower, strictly faster when all costs > 0")
@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(costs, costs), min_size=1, max_size=8),
       st.fractions(min_value=Fraction(1, 4), max_value=8, max_denominator=4),
       st.fractions(min_value=Fraction(1, 4), max_value=8, max_denominator=4),
       st.one_of(st.none(), costs))
def test_c10_overlap(layers, rate, bw, dp):
    cost = CostModel(rate, bw)
    work = [Step(c, b or None, f"l{i}") for i, (c, b) in enumerate(layers)]
    serial = serialize_schedule(work, cost, dp).makespan()
    over = schedule_overdecomposed(split_work(work), cost, dp).makespan()
    assert over <= serial
    if len(work) >= 2 and all(s.compute > 0 and s.comm_bytes for s in work):
        assert over < serial


@criterion(11, "6 alternating layers on 2x2: 6 forward all-reduces, no redistribution")
def test_c11_transpose_elimination():
    g = grid(2, 2)
    rng = np.random.default_rng(6)
    layers = [LayerState.from_dense(rng.integers(-3, 4, (8, 8)).astype(float), g, i % 2 == 1,
                                    name=f"fc{i}") for i in range(6)]
    X = rng.integers(-3, 4, (4, 8)).astype(float)
    rep = VolumeReport()
    Y = chain_layers(layers, ShardedMatrix.shard(X, g, layers[0].input_partition), g, rep)
    ref = X
    for layer in layers:
        ref = ref @ layer.weights.assemble()
    assert np.array_equal(Y.assemble(), ref)
    mine = [e for e in rep.events if 0 in e.group]
    assert len(mine) == 6
    assert [e.tag for e in mine] == [f"fc{i}:forward" for i in range(6)]
    assert all(e.kind in TENSOR_PARALLEL_KINDS for e in rep.events)
    assert {e.kind for e in rep.events} <= {CollectiveKind.ALL_REDUCE_COL, CollectiveKind.ALL_REDUCE_ROW}


def _run_cli(argv):
    proc = subprocess.run([sys.executable, "-m", "hybridpar", *argv], capture_output=True)
    return proc.returncode, proc.stdout


@criterion(12, "every CLI subcommand is byte-identical across runs")
@pytest.mark.parametrize("case", ["plan", "simulate-tp", "simulate-moe", "memory", "maxmodel",
                                  "volume", "curves", "curves-json", "moe", "tiledopt-bench"])
def test_c12_cli_determinism(case, tmp_path):
    argv = subcommand_cases(tmp_path)[case]
    first = _run_cli(argv)
    second = _run_cli(argv)
    assert first[0] == 0
    assert first == second
    assert first[1]
