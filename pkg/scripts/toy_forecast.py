"""Train the toy model on synthetic series and score held-out tails against persistence."""
import argparse
import time

from sundial import checkpoint
from sundial.experiments import evaluate_toy, toy_corpora, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=int, default=32)
    ap.add_argument("--save", help="optional checkpoint path")
    args = ap.parse_args()

    train, test = toy_corpora(args.seed)
    t0 = time.perf_counter()
    model, history = train_toy("toy", args.steps, train, seed=args.seed)
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f}s, last loss {history[-1][1]:.4f}")
    if args.save:
        checkpoint.save(model, args.save)
    res = evaluate_toy(model, test, args.horizon)
    gain = 1 - res["mse"] / res["persistence_mse"]
    for k, v in res.items():
        print(f"{k:>16}: {v:.4f}")
    print(f"{'gain':>16}: {gain:.1%}")


if __name__ == "__main__":
    main()
