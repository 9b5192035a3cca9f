"""Optimizer memory with and without tiling for the MoE fixtures."""

import argparse

from hybridpar import memmodel
from hybridpar.fixtures import fixture_names, load_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tile-size", type=int, default=1_800_000)
    args = ap.parse_args()
    print(f"{'fixture':<22} {'bound':>12} {'spike':>12} {'tiled spike':>12} {'peak':>12} {'peak tiled':>12}")
    for name in fixture_names():
        if not name.startswith("moe-"):
            continue
        fx = load_fixture(name)
        split = memmodel.split_params(fx.model.base_params, fx.model.experts)
        spike = memmodel.optimizer_spike(fx.parallel, split, args.tile_size)
        plain = memmodel.memory_report(fx.parallel, split)
        tiled = memmodel.memory_report(fx.parallel, split, args.tile_size)
        bound = memmodel.zero1_lower_bound(fx.parallel, split)
        print(f"{name:<22} {bound:>12.4e} {spike['spike_untiled']:>12.4e} {spike['spike_tiled']:>12.4e}"
              f" {plain.phases['optimizer']:>12.4e} {tiled.phases['optimizer']:>12.4e}")


if __name__ == "__main__":
    main()
