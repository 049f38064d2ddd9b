"""Pre-train on KernelSynth, then adapt to square/sawtooth waves.

Prints held-out MSE for the zero-shot model, the fine-tuned copy and a
model trained from scratch on the same small shifted corpus.
"""
import argparse

from sundial import checkpoint, training
from sundial.experiments import evaluate_toy, toy_train_config, train_toy, waveform_corpus
from sundial.model import SundialModel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", help="pre-trained toy checkpoint; trained here when absent")
    ap.add_argument("--pretrain-steps", type=int, default=3000)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--seeds", default="1,2,3")
    args = ap.parse_args()

    pre = checkpoint.load(args.checkpoint) if args.checkpoint else train_toy("toy", args.pretrain_steps)[0]
    for seed in map(int, args.seeds.split(",")):
        train, test = waveform_corpus(10 * seed + 1, 10), waveform_corpus(10 * seed + 2, 30)
        tcfg = toy_train_config(args.steps, seed)
        tuned = training.fine_tune(pre, train, tcfg, expected=pre.cfg)
        scratch = SundialModel(pre.cfg.replace(seed=seed))
        training.train(scratch, train, tcfg)
        row = [evaluate_toy(m, test, 32)["mse"] for m in (pre, tuned, scratch)]
        print(f"seed {seed}: zero-shot {row[0]:.3f}  fine-tuned {row[1]:.3f}  scratch {row[2]:.3f}", flush=True)


if __name__ == "__main__":
    main()
