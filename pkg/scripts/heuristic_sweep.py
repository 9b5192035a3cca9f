"""Rank every decomposition of a GPU count and compare with the closed-form column degree."""

import argparse

from hybridpar import planner
from hybridpar.core import ModelKind
from hybridpar.fixtures import load_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--top", type=int, default=10)
    ap.add_argument("--max-gt", type=int, default=64)
    args = ap.parse_args()
    entry = load_fixture("heuristic-16gpu")[0]
    req = planner.PlanRequest(entry.model, **entry.request)
    print(f"# {req.G} GPUs, {req.mem_per_gpu:.3g} B/GPU, tensor degree {req.min_tensor_degree}..{req.max_tensor_degree}")
    print(f"{'rank':>4} {'Gd':>3} {'Gr':>3} {'Gc':>3} {'volume':>14} {'memory':>12} feasible")
    for p in planner.enumerate_plans(req)[:args.top]:
        c = p.config
        print(f"{p.rank:>4} {c.data_degree:>3} {c.tensor_rows:>3} {c.tensor_cols:>3}"
              f" {float(p.predicted_volume):>14.4e} {p.predicted_memory:>12.4e} {p.feasible}")
    print("\n# closed-form column degree")
    print(f"{'Gt':>4} {'transformer gc*':>16} {'Gc':>4} {'unet gc*':>10} {'Gc':>4}")
    Gt = 1
    while Gt <= args.max_gt:
        t = planner.closed_form_optimum(ModelKind.TRANSFORMER, Gt)
        u = planner.closed_form_optimum(ModelKind.UNET, Gt)
        print(f"{Gt:>4} {t.gc_star:>16.3f} {t.gc_feasible:>4} {u.gc_star:>10.3f} {u.gc_feasible:>4}")
        Gt *= 2


if __name__ == "__main__":
    main()
