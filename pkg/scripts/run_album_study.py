"""Compare album consistency modes on a trained generation model.

    python3 scripts/run_album_study.py [--seeds 0 1 2 3 4] [--out runs/album]

Trains one model, then for each seed renders a 4-pose album under
independent / cfa / caa / lca and writes album_study.csv with the face-region
distance and garment error per mode, followed by the medians.
"""

import argparse
from pathlib import Path

import numpy as np

from garment_compose.album import album_figures, compare_consistency
from garment_compose.ablation import build_data, train_model
from garment_compose.config import RunConfig

STUDY = RunConfig(height=32, width=24, n=500, n_eval=5, steps=1500, batch_size=8, album_size=4)
MODES = ("independent", "cfa", "caa", "lca")


def study(cfg: RunConfig = STUDY, seeds=(0, 1, 2, 3, 4), model=None):
    """Rows for every (seed, mode); trains a model unless one is given."""
    train_set, eval_set = build_data(cfg.replace(n_eval=max(len(seeds), 1)))
    if model is None:
        model, _ = train_model(cfg, "bind123", cfg.seed, train_set)
    rows = []
    for i, seed in enumerate(seeds):
        s = eval_set[i]
        figures = album_figures(cfg.canvas, cfg.album_size, seed)
        rows += compare_consistency(model, s.composition, s.prompt, s.assets, figures, seed,
                                    cfg.sample_steps)
    return rows


def medians(rows) -> dict[str, tuple[float, float]]:
    return {m: (float(np.median([r.face_distance for r in rows if r.mode == m])),
                float(np.median([r.garment_error for r in rows if r.mode == m])))
            for m in MODES}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/album")
    args = ap.parse_args()
    rows = study(STUDY, args.seeds)
    lines = ["seed,mode,face_distance,garment_error"]
    lines += [f"{r.seed},{r.mode},{r.face_distance:.9g},{r.garment_error:.9g}" for r in rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "album_study.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    for m, (fd, ge) in medians(rows).items():
        print(f"median {m:<11} face {fd:.4f}  garment {ge:.4f}")


if __name__ == "__main__":
    main()
