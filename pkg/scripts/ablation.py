"""Switch one mechanism off (rope, pre_ln or kv_cache) and print the metric table."""
import argparse

from sundial.experiments import ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("toggle", choices=["rope", "pre_ln", "kv_cache"])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--horizon", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for variant, metric, value in ablation(args.toggle, steps=args.steps, horizon=args.horizon, seed=args.seed):
        print(f"{variant:>14}  {metric:>16}  {value:.6g}")


if __name__ == "__main__":
    main()
