"""Binding ablation at the acceptance scale: 4 variants x 5 seeds, 2000 steps each.

    python3 scripts/run_ablation.py --out runs/ablation [--steps 2000] [--batch 8]

Writes ablation.csv and prints how often each variant beats `none`.
Set COMPOSER_THREADS to run cells in parallel processes.
"""

import argparse
import time
from pathlib import Path

from garment_compose.ablation import ablation_csv, run_ablation, wins
from garment_compose.config import RunConfig

ACCEPTANCE = RunConfig(height=32, width=24, n=2000, n_eval=32, steps=2000, batch_size=8)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--steps", type=int, default=ACCEPTANCE.steps)
    ap.add_argument("--batch", type=int, default=ACCEPTANCE.batch_size)
    ap.add_argument("--n", type=int, default=ACCEPTANCE.n)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ACCEPTANCE.seeds))
    args = ap.parse_args()
    cfg = ACCEPTANCE.replace(steps=args.steps, batch_size=args.batch, n=args.n, seeds=args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    rows = run_ablation(cfg)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    cfg.replace(out=".").save(out / "run_config.json")
    print(ablation_csv(rows), end="")
    for v in cfg.variants:
        if v != "none":
            w, n = wins(rows, v)
            print(f"{v} beats none in {w}/{n} seeds")
    print(f"elapsed {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
