"""Choose the launch (x0, xdot0, z0) that minimises the expected squared miss."""
import argparse
import csv
import sys
import time

from koopman_uq.optuu import ball_opt_problem, optimize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--xtol-rel", type=float, default=1e-3)
    ap.add_argument("--trace", help="write the iterate trace as CSV")
    args = ap.parse_args()

    p = ball_opt_problem()
    t0 = time.perf_counter()
    rep = optimize(p, xtol_rel=args.xtol_rel, callback=lambda u, f: print(f"  {u.round(4)}  {f:.6g}"))
    wall = time.perf_counter() - t0
    print("u* = " + ", ".join(f"{n}={v:.5f}" for n, v in zip(p.names, rep.u_star)))
    print(f"E[(z - z*)^2] = {rep.objective_value:.5g}  ({rep.message}, {len(rep.trace) - 1} iterations, "
          f"{rep.n_objective_evals} objective and {rep.n_gradient_evals} gradient evaluations, {wall:.1f} s)")
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *p.names, "objective"])
            for i, (u, f, _) in enumerate(rep.trace):
                w.writerow([i, *u.tolist(), f])
    return 0 if rep.converged else 2


if __name__ == "__main__":
    sys.exit(main())
