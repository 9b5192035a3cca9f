"""Command-line front end.

JSON goes to stdout (or ``--output``), diagnostics to stderr. Exit codes:
0 ok, 1 usage, 2 infeasible, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

import numpy as np

from . import __version__, commmodel, memmodel, moesim, planner, tiledopt, tpsim
from .core import ConfigError, ModelKind, ModelSpec, ParallelConfig, RankGrid, validate_config
from .serialize import to_jsonable
from .simnet import TENSOR_PARALLEL_KINDS, CollectiveKind, VolumeReport

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config_digest: str
    version: str
    seed: int

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "config_digest": self.config_digest,
                "version": self.version, "seed": self.seed}


def _digest(inputs: dict) -> str:
    canon = json.dumps(to_jsonable(inputs), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _count(text: str) -> int:
    """Positive integer that may be written as ``40e9`` or ``1.8e6``."""
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if value.denominator != 1:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    return int(value)


def _int_list(text: str) -> list[int]:
    try:
        return [_count(t) for t in text.split(",") if t]
    except argparse.ArgumentTypeError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return data


def _pick(args, name: str, config: dict, key: str | None = None, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(key or name, default)


# -- subcommands --------------------------------------------------------------

def _parallel_from(args, config: dict) -> ParallelConfig:
    base = config.get("parallel", config if "total_gpus" in config else {})
    d = {
        "total_gpus": _pick(args, "gpus", base, "total_gpus"),
        "data_degree": _pick(args, "data", base, "data_degree", 1),
        "tensor_rows": _pick(args, "tensor_rows", base, "tensor_rows", 1),
        "tensor_cols": _pick(args, "tensor_cols", base, "tensor_cols", 1),
        "expert_degree": _pick(args, "expert_degree", base, "expert_degree", 1),
        "gpus_per_node": _pick(args, "gpus_per_node", base, "gpus_per_node", 4),
    }
    if d["total_gpus"] is None:
        d["total_gpus"] = d["data_degree"] * d["tensor_rows"] * d["tensor_cols"] * d["expert_degree"]
    cfg = ParallelConfig.from_dict(d)
    validate_config(cfg)
    return cfg


def _model_from(args, config: dict) -> ModelSpec:
    if "model" in config and args.model is None:
        return ModelSpec.from_dict(config["model"])
    kind = {"transformer": ModelKind.TRANSFORMER, "unet": ModelKind.UNET,
            "moe": ModelKind.MOE}[args.model or "transformer"]
    fields = {"kind": kind, "batch_size": args.batch}
    if kind is ModelKind.TRANSFORMER:
        fields.update(hidden_size=args.hidden, layers=args.layers, seq_len=args.seq_len,
                      params=args.params)
    elif kind is ModelKind.UNET:
        fields.update(channels=args.channels, params=args.params)
    else:
        fields.update(base_params=args.base_params, experts=args.experts,
                      hidden_size=args.hidden, layers=args.layers, seq_len=args.seq_len)
    return ModelSpec(**fields)


def cmd_plan(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    req_cfg = dict(config.get("request", {}))
    req_cfg.update({k: v for k, v in config.items() if k not in ("model", "parallel", "request",
                                                                   "expected", "label")})
    model = _model_from(args, config)
    G = _pick(args, "gpus", req_cfg, "G")
    if G is None:
        raise UsageError("plan needs --gpus")
    req = planner.PlanRequest(
        model=model, G=G,
        mem_per_gpu=_pick(args, "mem", req_cfg, "mem_per_gpu", 40_000_000_000),
        gpus_per_node=_pick(args, "gpus_per_node", req_cfg, "gpus_per_node", 4),
        max_tensor_degree=_pick(args, "max_tensor", req_cfg, "max_tensor_degree"),
        min_tensor_degree=_pick(args, "min_tensor", req_cfg, "min_tensor_degree", 1),
    )
    plans = planner.enumerate_plans(req)
    chosen = next((p for p in plans if p.feasible), None)
    shown = plans if args.top is None else plans[:args.top]
    inputs = {"model": model.as_dict(), "G": req.G, "mem_per_gpu": req.mem_per_gpu,
              "gpus_per_node": req.gpus_per_node, "max_tensor_degree": req.max_tensor_degree,
              "min_tensor_degree": req.min_tensor_degree, "top": args.top}
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "data_degree", "tensor_rows", "tensor_cols", "expert_degree",
                    "predicted_volume", "predicted_memory", "feasible"])
        for p in shown:
            c = p.config
            w.writerow([p.rank, c.data_degree, c.tensor_rows, c.tensor_cols, c.expert_degree,
                        to_jsonable(p.predicted_volume), p.predicted_memory, str(p.feasible).lower()])
        out = buf.getvalue()
    else:
        out = {"request": inputs, "chosen": chosen, "plans": shown}
    if chosen is None:
        print(f"infeasible: no decomposition of {req.G} GPUs fits in {req.mem_per_gpu} bytes",
              file=sys.stderr)
        return (out, inputs), EXIT_INFEASIBLE
    return (out, inputs), EXIT_OK


def cmd_memory(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    cfg = _parallel_from(args, config)
    base = _pick(args, "base_params", config, "base_params")
    if base is None:
        raise UsageError("memory needs --base-params")
    experts = _pick(args, "experts", config, "experts", cfg.expert_degree)
    tile = _pick(args, "tile_size", config, "tile_size")
    split = memmodel.split_params(base, experts)
    report = memmodel.memory_report(cfg, split, tile)
    inputs = {"parallel": cfg.as_dict(), "base_params": base, "experts": experts, "tile_size": tile}
    out = {"inputs": inputs, "memory": report}
    if args.mem is not None:
        out["fits"] = report.phases["optimizer"] <= args.mem
        inputs["mem_per_gpu"] = args.mem
    return (out, inputs), EXIT_OK


def cmd_maxmodel(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    mem = _pick(args, "mem", config, "mem_per_gpu")
    gt = _pick(args, "tensor", config, "tensor_degree")
    if mem is None or gt is None:
        raise UsageError("maxmodel needs --mem and --tensor")
    inputs = {"mem_per_gpu": mem, "tensor_degree": gt}
    return ({"inputs": inputs, "max_base_params": memmodel.max_base_model(mem, gt)}, inputs), EXIT_OK


def cmd_volume(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    cfg = _parallel_from(args, config)
    kind = _pick(args, "model", config, "kind", "fc")
    B = _pick(args, "batch", config, "batch_rows")
    if B is None:
        raise UsageError("volume needs --batch")
    inputs: dict[str, Any] = {"parallel": cfg.as_dict(), "kind": kind, "batch_rows": B}
    if kind == "fc":
        k, n = _pick(args, "k", config), _pick(args, "n", config)
        if k is None or n is None:
            raise UsageError("fc volume needs --k and --n")
        shape = commmodel.LayerShape(k, n, bool(args.transposed or config.get("transposed", False)))
        pred = commmodel.layer_volume(shape, cfg, B)
        inputs["shape"] = shape.to_dict()
        total = pred.v_total
    elif kind == "transformer":
        H = _pick(args, "hidden", config, "hidden_size")
        layers = _pick(args, "layers", config, "layers", 1)
        if H is None:
            raise UsageError("transformer volume needs --hidden")
        pred = commmodel.transformer_volume(H, B, cfg, strict=False)
        inputs.update(hidden_size=H, layers=layers)
        total = layers * pred.v_total
    elif kind == "unet":
        C = _pick(args, "channels", config, "channels")
        if C is None:
            raise UsageError("unet volume needs --channels")
        pred = commmodel.unet_volume(C, B, cfg)
        inputs["channels"] = C
        total = pred.v_total
    else:
        raise UsageError(f"unknown volume model {kind!r}")
    out = {"inputs": inputs, "prediction": pred, "model_total_elements": total,
           "model_total_bytes": total * args.element_bytes}
    inputs["element_bytes"] = args.element_bytes
    return (out, inputs), EXIT_OK


def cmd_curves(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    kind = _pick(args, "model", config, "kind", "transformer")
    if kind not in ("transformer", "unet"):
        raise UsageError("curves model must be transformer or unet")
    unet = kind == "unet"
    defaults = ({"batch": 2048, "base_size": 2048, "base_gpus": 32, "data": 8} if unet else
                {"batch": 1024 * 2048, "base_size": 4096, "base_gpus": 32, "data": 8})
    B = _pick(args, "batch", config, "batch", defaults["batch"])
    base_size = _pick(args, "base_size", config, "base_size", defaults["base_size"])
    base_gpus = _pick(args, "base_gpus", config, "base_gpus", defaults["base_gpus"])
    gd = _pick(args, "data", config, "data_degree", defaults["data"])
    gpus = _pick(args, "gpus_list", config, "gpus", [32, 64, 128, 256])
    curve = commmodel.weak_scaling_curves(ModelKind.UNET if unet else ModelKind.TRANSFORMER,
                                          B, base_size, base_gpus, gd, list(gpus))
    inputs = {"kind": kind, "batch": B, "base_size": base_size, "base_gpus": base_gpus,
              "data_degree": gd, "gpus": list(gpus)}
    if args.format == "json":
        return ({"inputs": inputs, "curves": curve}, inputs), EXIT_OK
    return (curve.to_csv(), inputs), EXIT_OK


def cmd_moe(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    E = _pick(args, "experts", config, "experts", 1)
    gd = _pick(args, "data", config, "data_degree", 1)
    gr = _pick(args, "tensor_rows", config, "tensor_rows", 1)
    gc = _pick(args, "tensor_cols", config, "tensor_cols", 1)
    cfg = ParallelConfig(E * gd * gr * gc, gd, gr, gc, E, _pick(args, "gpus_per_node", config,
                                                                  "gpus_per_node", 4))
    validate_config(cfg)
    T = _pick(args, "tokens", config, "tokens_per_group")
    H = _pick(args, "hidden", config, "hidden")
    if T is None or H is None:
        raise UsageError("moe needs --tokens and --hidden")
    plan = moesim.MoELayerPlan(T, H, cfg, bool(args.dtd or config.get("dtd_enabled")),
                               bool(args.cac or config.get("cac_enabled")),
                               bool(args.checkpointing or config.get("checkpointing")),
                               args.element_bytes)
    tally = moesim.moe_layer_pass(plan, VolumeReport())
    out = {"plan": plan.to_dict(), "tally": tally,
           "calls_total": tally.calls(),
           "bytes_total": tally.total_bytes(),
           "all_to_all_bytes": tally.total_bytes(["all_to_all_expert"]),
           "all_gather_bytes": tally.total_bytes(["all_gather_dtd"])}
    return (out, plan.to_dict()), EXIT_OK


def cmd_tiledopt_bench(args) -> tuple[Any, int]:
    config = _read_config(args.config)
    n = _pick(args, "params", config, "params")
    if n is None:
        raise UsageError("tiledopt-bench needs --params")
    ts = _pick(args, "tile_size", config, "tile_size", tiledopt.DEFAULT_TILE_SIZE)
    result = tiledopt.bench(n, ts, args.seed)
    inputs = {"params": n, "tile_size": ts}
    return (result, inputs), EXIT_OK if result["bit_identical"] else EXIT_VERIFY


# -- simulate -------------------------------------------------------------------

_SIM_KEYS = {"mode", "parallel", "layers", "batch_rows", "element_bytes", "seed",
             "data_parallel_grads", "expected", "moe", "input"}


def _check(name: str, passed: bool, detail: Any = None) -> dict:
    out = {"name": name, "passed": bool(passed)}
    if detail is not None:
        out["detail"] = detail
    return out


def _simulate_tp(cfg: ParallelConfig, spec: dict, seed: int, verify: bool):
    layers_spec = spec.get("layers")
    if not layers_spec:
        raise UsageError("simulate needs a non-empty \"layers\" list")
    B = spec.get("batch_rows")
    if not isinstance(B, int) or B < 1:
        raise UsageError("simulate needs a positive integer \"batch_rows\"")
    eb = spec.get("element_bytes", 2)
    grid = RankGrid(cfg)
    rng = np.random.default_rng(seed)
    shapes, dense = [], []
    for idx, ls in enumerate(layers_spec):
        extra = set(ls) - {"k", "n", "transposed", "weights"}
        if extra:
            raise UsageError(f"layer {idx}: unknown fields {sorted(extra)}")
        if "weights" in ls:
            W = tpsim.load_matrix(ls["weights"])
            shape = commmodel.LayerShape(W.shape[0], W.shape[1], bool(ls.get("transposed", False)))
        else:
            shape = commmodel.LayerShape(ls["k"], ls["n"], bool(ls.get("transposed", False)))
            W = rng.integers(-3, 4, size=(shape.k, shape.n)).astype(np.float64)
        shapes.append(shape)
        dense.append(W)
    if "input" in spec:
        X = tpsim.load_matrix(spec["input"])
        if X.shape[0] != B:
            raise UsageError("input rows must equal batch_rows")
    else:
        X = rng.integers(-3, 4, size=(B, shapes[0].k)).astype(np.float64)
    layers = [tpsim.LayerState.from_dense(W, grid, s.transposed, eb, f"fc{i}")
              for i, (W, s) in enumerate(zip(dense, shapes))]
    report = VolumeReport()
    Y = tpsim.chain_layers(layers, tpsim.ShardedMatrix.shard(X, grid, layers[0].input_partition),
                           grid, report)
    dY_dense = rng.integers(-2, 3, size=Y.shape).astype(np.float64)
    dX, dWs = tpsim.chain_backward(layers, tpsim.ShardedMatrix.shard(dY_dense, grid, Y.partition),
                                   grid, report)
    if spec.get("data_parallel_grads"):
        dWs = [tpsim.allreduce_data_gradients(dW, grid, report, eb, f"fc{i}:dp")
               for i, dW in enumerate(dWs)]

    checks = []
    if verify:
        acts = [X]
        for W in dense:
            acts.append(acts[-1] @ W)
        checks.append(_check("forward_matches_serial", np.array_equal(Y.assemble(), acts[-1])))
        g = dY_dense
        ref_dW = []
        for W, a in zip(reversed(dense), reversed(acts[:-1])):
            ref_dW.append(a.T @ g)
            g = g @ W.T
        ref_dW.reverse()
        checks.append(_check("backward_dX_matches_serial", np.array_equal(dX.assemble(), g)))
        if spec.get("data_parallel_grads") or cfg.data_degree == 1:
            ok = all(np.array_equal(dW.assemble(), r) for dW, r in zip(dWs, ref_dW))
            checks.append(_check("backward_dW_matches_serial", ok))
        preds = [commmodel.layer_volume(s, cfg, B) for s in shapes]
        predicted = sum((p.v_total for p in preds), Fraction(0)) * eb
        worst = [r for r in grid.ranks() if report.bytes(r, TENSOR_PARALLEL_KINDS) != predicted]
        checks.append(_check("tensor_bytes_match_prediction", not worst,
                             {"predicted_bytes_per_rank": predicted,
                              "measured_rank0": report.bytes(0, TENSOR_PARALLEL_KINDS)}))
        if spec.get("data_parallel_grads"):
            dp_pred = sum((p.v_dp for p in preds), Fraction(0)) * eb
            measured = report.bytes(0, [CollectiveKind.ALL_REDUCE_DATA])
            checks.append(_check("data_bytes_match_prediction", measured == dp_pred,
                                 {"predicted_bytes_per_rank": dp_pred, "measured_rank0": measured}))
        expected = spec.get("expected", {})
        if "tensor_bytes_per_rank" in expected:
            want = Fraction(str(expected["tensor_bytes_per_rank"]))
            got = report.bytes(0, TENSOR_PARALLEL_KINDS)
            checks.append(_check("expected_tensor_bytes", got == want,
                                 {"expected": want, "measured": got}))
        if "forward_all_reduces" in expected:
            got = sum(1 for e in report.events if e.tag.endswith(":forward") and 0 in e.group)
            checks.append(_check("expected_forward_all_reduces",
                                 got == expected["forward_all_reduces"],
                                 {"expected": expected["forward_all_reduces"], "measured": got}))
    return report, checks


def _simulate_moe(cfg: ParallelConfig, spec: dict, seed: int, verify: bool):
    moe = spec.get("moe") or {}
    unknown = set(moe) - {"tokens_per_group", "hidden", "dtd_enabled", "cac_enabled",
                          "checkpointing", "routing"}
    if unknown:
        raise UsageError(f"unknown moe fields: {sorted(unknown)}")
    plan = moesim.MoELayerPlan(moe["tokens_per_group"], moe["hidden"], cfg,
                               bool(moe.get("dtd_enabled")), bool(moe.get("cac_enabled")),
                               bool(moe.get("checkpointing")), spec.get("element_bytes", 2))
    sim = moesim.MoELayerSim(plan, seed, moe.get("routing", "round_robin"))
    report = VolumeReport()
    tally = moesim.CommTally()
    stash = moesim.ActivationStash() if plan.cac_enabled and plan.checkpointing else None
    out = sim.forward(report, stash=stash, tally=tally)
    if stash is not None:
        tally.stash_bytes, tally.stash_entries = stash.nbytes, stash.pushed
    checks = []
    if plan.checkpointing:
        if stash is not None:
            again = sim.forward(report, stash=stash, replay=True, pass_name="replay", tally=tally)
        else:
            again = sim.forward(report, pass_name="replay", tally=tally)
        if verify:
            same = all(again[r].same_as(out[r]) for r in out)
            checks.append(_check("replay_matches_forward", same))
    if verify:
        ref = sim.serial_reference()
        ok = all(np.array_equal(out[r].values, ref[sim._group_key(r)]) for r in out)
        checks.append(_check("forward_matches_serial", ok))
        expected = moesim.CommTally()
        grid = RankGrid(cfg)
        for op in moesim.collective_schedule(plan, "forward"):
            moesim._issue(plan, grid, op, "forward", VolumeReport(), expected)
        checks.append(_check("forward_tally_matches_schedule",
                             tally.counts["forward"] == expected.counts["forward"]
                             and tally.bytes["forward"] == expected.bytes["forward"]))
        if plan.checkpointing:
            want = moesim.CommTally().counts["replay"] if stash is not None else expected.counts["forward"]
            checks.append(_check("replay_tally_matches_schedule", tally.counts["replay"] == want))
    return report, checks, tally


def cmd_simulate(args) -> tuple[Any, int]:
    if args.config is None:
        raise UsageError("simulate needs --config FILE")
    spec = _read_config(args.config)
    unknown = set(spec) - _SIM_KEYS
    if unknown:
        raise UsageError(f"unknown simulate fields: {sorted(unknown)}")
    if "parallel" not in spec:
        raise UsageError("simulate config needs a \"parallel\" block")
    cfg = ParallelConfig.from_dict(spec["parallel"])
    validate_config(cfg)
    seed = spec.get("seed", args.seed)
    mode = spec.get("mode", "tp")
    extra: dict[str, Any] = {}
    if mode == "tp":
        if cfg.expert_degree != 1:
            raise UsageError("tensor-parallel simulation needs expert_degree = 1")
        report, checks = _simulate_tp(cfg, spec, seed, args.verify)
    elif mode == "moe":
        report, checks, tally = _simulate_moe(cfg, spec, seed, args.verify)
        extra["tally"] = tally
    else:
        raise UsageError(f"unknown simulate mode {mode!r}")
    verdict = "skipped" if not args.verify else ("pass" if all(c["passed"] for c in checks) else "fail")
    out = {"inputs": spec, "report": report, "checks": checks, "verdict": verdict, **extra}
    for c in checks:
        if not c["passed"]:
            print(f"verification failed: {c['name']}", file=sys.stderr)
    code = EXIT_VERIFY if verdict == "fail" else EXIT_OK
    return (out, dict(spec, seed=seed, verify=args.verify)), code


# -- parser ----------------------------------------------------------------------

COMMANDS = {
    "plan": cmd_plan, "simulate": cmd_simulate, "memory": cmd_memory, "maxmodel": cmd_maxmodel,
    "volume": cmd_volume, "curves": cmd_curves, "moe": cmd_moe, "tiledopt-bench": cmd_tiledopt_bench,
}
_CSV_OK = {"plan", "curves"}


def _add_parallel(p):
    p.add_argument("--gpus", type=_count)
    p.add_argument("--data", type=_count, help="data-parallel degree")
    p.add_argument("--tensor-rows", type=_count)
    p.add_argument("--tensor-cols", type=_count)
    p.add_argument("--expert-degree", type=_count)
    p.add_argument("--gpus-per-node", type=_count)


def _add_model(p):
    p.add_argument("--model", choices=["transformer", "unet", "moe"])
    p.add_argument("--hidden", type=_count, default=None)
    p.add_argument("--layers", type=_count, default=None)
    p.add_argument("--batch", type=_count, default=None)
    p.add_argument("--seq-len", type=_count, default=None)
    p.add_argument("--channels", type=_count)
    p.add_argument("--params", type=_count)
    p.add_argument("--base-params", type=_count)
    p.add_argument("--experts", type=_count)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output", metavar="FILE")
    common.add_argument("--format", choices=["json", "csv"])

    parser = _Parser(prog="hybridpar", description="Plan and simulate hybrid tensor/expert/data parallelism.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("plan", parents=[common], help="rank GPU decompositions")
    _add_model(p)
    p.add_argument("--gpus", type=_count)
    p.add_argument("--mem", type=_count, help="bytes per GPU")
    p.add_argument("--gpus-per-node", type=_count)
    p.add_argument("--max-tensor", type=_count)
    p.add_argument("--min-tensor", type=_count)
    p.add_argument("--top", type=_count, help="list only the best N plans")

    p = sub.add_parser("simulate", parents=[common], help="run a desk-scale simulation")
    p.add_argument("--verify", action="store_true")

    p = sub.add_parser("memory", parents=[common], help="per-GPU memory report")
    _add_parallel(p)
    p.add_argument("--base-params", type=_count)
    p.add_argument("--experts", type=_count, help="number of experts (defaults to the expert degree)")
    p.add_argument("--tile-size", type=_count)
    p.add_argument("--mem", type=_count)

    p = sub.add_parser("maxmodel", parents=[common], help="largest base model that fits")
    p.add_argument("--mem", type=_count)
    p.add_argument("--tensor", type=_count)

    p = sub.add_parser("volume", parents=[common], help="predicted communication volume")
    _add_parallel(p)
    p.add_argument("--model", choices=["fc", "transformer", "unet"])
    p.add_argument("--batch", type=_count, help="activation rows (tokens or samples)")
    p.add_argument("--k", type=_count)
    p.add_argument("--n", type=_count)
    p.add_argument("--transposed", action="store_true")
    p.add_argument("--hidden", type=_count)
    p.add_argument("--layers", type=_count)
    p.add_argument("--channels", type=_count)
    p.add_argument("--element-bytes", type=_count, default=2)

    p = sub.add_parser("curves", parents=[common], help="weak-scaling volume curves")
    p.add_argument("--model", choices=["transformer", "unet"])
    p.add_argument("--batch", type=_count)
    p.add_argument("--base-size", type=_count)
    p.add_argument("--base-gpus", type=_count)
    p.add_argument("--data", type=_count)
    p.add_argument("--gpus", dest="gpus_list", type=_int_list)

    p = sub.add_parser("moe", parents=[common], help="MoE layer communication tally")
    p.add_argument("--experts", type=_count)
    p.add_argument("--data", type=_count)
    p.add_argument("--tensor-rows", type=_count)
    p.add_argument("--tensor-cols", type=_count)
    p.add_argument("--gpus-per-node", type=_count)
    p.add_argument("--tokens", type=_count)
    p.add_argument("--hidden", type=_count)
    p.add_argument("--dtd", action="store_true")
    p.add_argument("--cac", action="store_true")
    p.add_argument("--checkpointing", action="store_true")
    p.add_argument("--element-bytes", type=_count, default=2)

    p = sub.add_parser("tiledopt-bench", parents=[common], help="tiled optimizer benchmark")
    p.add_argument("--params", type=_count)
    p.add_argument("--tile-size", type=_count)
    return parser


def _plan_defaults(args) -> None:
    # a small transformer when no model is described at all
    if args.command == "plan" and args.config is None and args.model in (None, "transformer"):
        args.hidden = args.hidden or 1024
        args.layers = args.layers or 24
        args.batch = args.batch or 8
        args.seq_len = args.seq_len or 2048


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.format == "csv" and args.command not in _CSV_OK:
        print(f"{args.command}: csv output is not supported", file=sys.stderr)
        return EXIT_USAGE
    if args.format is None:
        args.format = "csv" if args.command == "curves" else "json"
    _plan_defaults(args)
    try:
        (payload, inputs), code = COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except planner.Infeasible as exc:
        print(f"{args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    manifest = RunManifest(args.command, _digest(inputs), __version__, args.seed)
    if isinstance(payload, str):
        text = payload
    else:
        doc = {"manifest": manifest, **payload}
        text = json.dumps(to_jsonable(doc), sort_keys=True, indent=2) + "\n"
    _emit(text, args.output)
    return code


if __name__ == "__main__":
    sys.exit(main())
