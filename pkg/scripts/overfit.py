"""Overfit a quarter-scale PROM-Net on two short sequences and log the loss curve."""
import argparse
import csv
import dataclasses
import time

from promnet.experiments import OverfitConfig, overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=OverfitConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="overfit_loss.csv")
    args = ap.parse_args()
    cfg = dataclasses.replace(OverfitConfig(), epochs=args.epochs, seed=args.seed)
    t0 = time.perf_counter()
    losses = overfit_run(cfg)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mse"])
        w.writerows((i + 1, f"{v:.8f}") for i, v in enumerate(losses))
    print(f"epoch 1 {losses[0]:.6f} -> epoch {len(losses)} {losses[-1]:.6f} "
          f"(ratio {losses[-1] / losses[0]:.4f}) in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
