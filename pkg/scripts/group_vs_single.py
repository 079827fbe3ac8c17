"""Compare the group model with the single-image ablation on held-out synthetic groups."""
import argparse

from gwcosal.experiments import group_vs_single_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-groups", type=int, default=40)
    ap.add_argument("--eval-groups", type=int, default=20)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = group_vs_single_run(args.train_groups, args.eval_groups, args.iters, seed=args.seed)
    print("group   common/distractor  single  common/distractor  pass")
    for i in range(len(res.passed)):
        print(
            f"{i:5d}   {res.group.common[i]:.3f} / {res.group.distractor[i]:.3f}"
            f"         {res.single.common[i]:.3f} / {res.single.distractor[i]:.3f}        {bool(res.passed[i])}"
        )
    print(f"means: group {res.group.common.mean():.3f} / {res.group.distractor.mean():.3f}, "
          f"single {res.single.common.mean():.3f} / {res.single.distractor.mean():.3f}")
    print(f"pass rate {res.pass_rate:.2f}")


if __name__ == "__main__":
    main()
