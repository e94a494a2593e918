"""Expected squared miss of the bouncing ball: analytic, Koopman and Monte Carlo."""
import argparse

from koopman_uq.mc import compare
from koopman_uq.scenarios import get_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--rtol", type=float, default=1e-2)
    args = ap.parse_args()

    sc = get_scenario("bouncing_ball")
    prob, g = sc.problem()
    ref = sc.oracle()
    c = compare(prob, g, args.rtol, args.rtol, args.n, args.seed, ref)
    k, m = c.koopman, c.mc
    print(f"{'method':<12}{'value':>14}{'abs error':>12}{'sims':>10}{'time [s]':>11}")
    print(f"{'analytic':<12}{ref:>14.6f}{'':>12}{'':>10}{'':>11}")
    print(f"{'Koopman':<12}{k.value[0]:>14.6f}{abs(k.value[0] - ref):>12.2e}{k.evals:>10d}{k.wall_time:>11.4f}")
    print(f"{'Monte Carlo':<12}{m.estimate[0]:>14.6f}{abs(m.estimate[0] - ref):>12.2e}{m.n:>10d}{m.wall_time:>11.4f}")
    print(f"speed-up {c.speedup:.0f}x")


if __name__ == "__main__":
    main()
