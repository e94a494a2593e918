"""Central moments 2..5 of the squared miss at the optimised launch, Koopman against Monte Carlo."""
import argparse
import time

from koopman_uq.koopman import central_moments
from koopman_uq.mc import mc_central_moments
from koopman_uq.scenarios import get_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=1_000_000, help="Monte Carlo samples (0 skips)")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--rtol", type=float, default=1e-2)
    args = ap.parse_args()

    prob, g = get_scenario("bouncing_ball_optimized").problem()
    t0 = time.perf_counter()
    km = central_moments(prob, g, 5, args.rtol, args.rtol)
    wall = time.perf_counter() - t0
    print(f"Koopman: {km.expectation.evals} simulations, {wall:.3f} s")
    if args.n:
        est, se = mc_central_moments(prob, g, 5, args.n, args.seed)
    print(f"{'order':<7}{'Koopman':>14}{'MC':>14}{'MC SE':>12}")
    for i, k in enumerate(km.orders):
        mc = f"{est[i]:>14.5g}{se[i]:>12.3g}" if args.n else ""
        print(f"{k:<7d}{km.values[i]:>14.5g}{mc}")


if __name__ == "__main__":
    main()
