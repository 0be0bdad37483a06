#!/usr/bin/env python3
"""Run the warm-up timing tasks across seeds and summarize convergence.

Task I trains the full default network to fire at a fixed target step on a
fixed random cell; task II redraws the cell every iteration and corrupts the
supervised target 15% of the time. A seed counts as converged when the first
spike lands on the true target for 10 consecutive iterations.
"""
import argparse
import json
import statistics
from pathlib import Path

from evslicer.feedback import DivergenceError, build_arena_net, train_arena
from evslicer.presets import arena_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", choices=("arena-i", "arena-ii"), default="arena-i")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-iters", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None,
                    help="write per-seed results as JSON")
    args = ap.parse_args()

    overrides = {}
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    rows = []
    for seed in args.seeds:
        cfg = arena_preset(args.task, seed=seed, **overrides)
        try:
            res = train_arena(build_arena_net(cfg), cfg)
        except DivergenceError as exc:
            print(f"seed {seed}: DIVERGED ({exc})")
            rows.append({"seed": seed, "diverged": True})
            continue
        rows.append({
            "seed": seed, "diverged": False, "n_star": res.n_star,
            "converged_at": res.converged_at, "iterations": res.iterations,
            "alpha_final": res.alpha_final, "elapsed_s": round(res.elapsed_s, 2),
        })
        status = (f"converged at iter {res.converged_at}"
                  if res.converged else "did not converge")
        print(f"seed {seed}: n*={res.n_star:3d}  {status}  "
              f"({res.iterations} iters, {res.elapsed_s:.1f}s, "
              f"alpha={res.alpha_final:.2f})")

    converged = [r["converged_at"] for r in rows
                 if not r.get("diverged") and r["converged_at"] is not None]
    print(f"\n{args.task}: {len(converged)}/{len(args.seeds)} seeds converged", end="")
    if converged:
        print(f", median convergence iteration {statistics.median(converged):.0f}")
    else:
        print()
    if args.out:
        args.out.write_text(json.dumps({"task": args.task, "runs": rows}, indent=2))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
