"""Train two model sizes on the same corpus and compare smoothed final losses."""
import argparse
import time

from sundial import data
from sundial.experiments import smoothed_final_loss, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--configs", default="toy,toy-large")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    corpus = data.synth_corpus(7, 500, 1024)
    for name in args.configs.split(","):
        t0 = time.perf_counter()
        model, history = train_toy(name, args.steps, corpus, seed=args.seed)
        print(f"{name:>10}  params {model.num_parameters():>8}  smoothed loss "
              f"{smoothed_final_loss(history):.4f}  {time.perf_counter() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
