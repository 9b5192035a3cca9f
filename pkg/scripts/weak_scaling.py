"""Predicted per-layer volume under weak scaling for the GPT and U-Net ladders."""

import argparse

from hybridpar import commmodel
from hybridpar.core import ModelKind
from hybridpar.fixtures import load_fixture


def ladder_table(name, kind):
    rows = []
    for e in load_fixture(name):
        m, c = e.model, e.parallel
        size = m.hidden_size if kind is ModelKind.TRANSFORMER else m.channels
        B = m.batch_size * (m.seq_len or 1)
        ours = commmodel.model_volume(kind, size, B, c)
        meg_cfg = c.__class__(c.total_gpus, c.data_degree, 1, c.tensor_degree, 1, c.gpus_per_node)
        meg = commmodel.model_volume(kind, size, B, meg_cfg)
        rows.append((c.total_gpus, size, c.tensor_rows, c.tensor_cols, float(ours), float(meg)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=int, default=None, help="override G_data for the continuous curve")
    args = ap.parse_args()
    for name, kind in (("gpt-ladder", ModelKind.TRANSFORMER), ("unet-ladder", ModelKind.UNET)):
        print(f"# {name} (integer grids)")
        print(f"{'G':>5} {'size':>6} {'Gr':>3} {'Gc':>3} {'ours':>14} {'megatron':>14}")
        for G, size, gr, gc, ours, meg in ladder_table(name, kind):
            print(f"{G:>5} {size:>6} {gr:>3} {gc:>3} {ours:>14.4e} {meg:>14.4e}")
        fx = load_fixture(name)
        m0, c0 = fx.model, fx.parallel
        gd = args.data or c0.data_degree
        size0 = m0.hidden_size if kind is ModelKind.TRANSFORMER else m0.channels
        gpus = [e.parallel.total_gpus for e in fx]
        curve = commmodel.weak_scaling_curves(kind, m0.batch_size * (m0.seq_len or 1), size0,
                                              c0.total_gpus, gd, gpus)
        print(f"# continuous curve, G_data={gd}: alpha0={curve.alpha0:.4e} alpha1={curve.alpha1:.4e}"
              f" beta0={curve.beta0:.4e} beta1={curve.beta1:.4e}")
        print(curve.to_csv())


if __name__ == "__main__":
    main()
