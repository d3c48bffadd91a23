"""Fit one sample, then sample it back and report the mean absolute error.

    python3 scripts/overfit_demo.py [--steps 500] [--out runs/overfit]
"""

import argparse
from pathlib import Path

import numpy as np

from garment_compose.dataset import DatasetConfig, generate_dataset
from garment_compose.networks import NetConfig
from garment_compose.tensor_core import write_tensor
from garment_compose.toy_world import write_pgm
from garment_compose.training import ComposerModel, OptimConfig, prepare, sample, train, write_loss_csv

CANVAS = (32, 24)


def overfit(steps: int = 500, seed: int = 0, lr: float = 3e-3, batch: int = 16):
    """Returns (target sample, generated image, loss curve)."""
    s = generate_dataset(DatasetConfig(n=1, height=CANVAS[0], width=CANVAS[1]), seed)[0]
    model = ComposerModel.create(NetConfig(latent_hw=(CANVAS[0] // 2, CANVAS[1] // 2)), seed)
    losses = train(model, prepare(model, [s]), OptimConfig(lr=lr, batch_size=batch), steps, seed)
    img = sample(model, s.composition, s.prompt, s.uv, seed=1)
    return s, img, losses


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()
    s, img, losses = overfit(args.steps, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "target.pgm", s.image)
    write_pgm(out / "sample.pgm", img)
    write_tensor(out / "sample.tensor", img)
    write_loss_csv(out / "loss.csv", losses)
    mae = float(np.abs(img.astype(np.float64) - s.image).mean())
    print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; mean abs error {mae:.4f}")


if __name__ == "__main__":
    main()
