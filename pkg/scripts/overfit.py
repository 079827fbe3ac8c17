"""Overfit the desk network on synthetic groups and report the loss reduction."""
import argparse

from gwcosal.experiments import overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--groups", type=int, default=8)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log-every", type=int, default=100)
    args = ap.parse_args()

    def log(line):
        if int(line.split()[1]) % args.log_every == 0:
            print(line, flush=True)

    res = overfit_run(args.groups, args.iters, args.lr, args.seed, log=log)
    print(f"initial loss {res.initial_loss:.6f}")
    print(f"final loss   {res.final_loss:.6f}  ({100 * res.ratio:.2f}% of initial)")
    print(f"training mF  {res.train_mf:.4f}")


if __name__ == "__main__":
    main()
