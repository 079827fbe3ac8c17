"""Write a synthetic co-saliency corpus as PNG files, ready for the CLI.

    python scripts/make_corpus.py OUT
    gwcosal train --config OUT/run.json --groups OUT/groups.json --out OUT/w.gwcs --log OUT/loss.txt
"""
import argparse

from gwcosal.experiments import write_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--groups", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-iters", type=int, default=2000)
    args = ap.parse_args()
    write_corpus(args.out, args.groups, args.seed, max_iters=args.max_iters)
    print(f"wrote {args.groups} groups under {args.out}")


if __name__ == "__main__":
    main()
