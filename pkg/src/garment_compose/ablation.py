"""Binding ablation: train and score each (variant, seed) cell on one dataset."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .dataset import Dataset, DatasetConfig, generate_dataset
from .metrics import region_fidelity
from .networks import NetConfig
from .training import ComposerModel, OptimConfig, prepare, sample_many, train

EVAL_SEED_OFFSET = 1_000_003  # eval figures come from a disjoint seed stream


@dataclass(frozen=True)
class CellResult:
    variant: str
    seed: int
    region_error: float
    pattern_corr: float

    def csv_row(self) -> str:
        return f"{self.variant},{self.seed},{self.region_error:.9g},{self.pattern_corr:.9g}"


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    dc = DatasetConfig(n=cfg.n, height=cfg.height, width=cfg.width)
    train_set = generate_dataset(dc, cfg.seed)
    eval_set = generate_dataset(DatasetConfig(n=cfg.n_eval, height=cfg.height, width=cfg.width),
                                cfg.seed + EVAL_SEED_OFFSET)
    return train_set, eval_set


def net_config(cfg: RunConfig, binding: str) -> NetConfig:
    mode = "tryon" if cfg.mode == "tryon" else "generation"
    return NetConfig(mode=mode, latent_hw=cfg.latent_hw, dims=cfg.dims,
                     text_dim=cfg.text_dim, binding=binding)


def train_model(cfg: RunConfig, binding: str, seed: int, data: Dataset,
                log=None) -> tuple[ComposerModel, list[float]]:
    model = ComposerModel.create(net_config(cfg, binding), seed, cfg.T)
    opt = OptimConfig(lr=cfg.lr, batch_size=cfg.batch_size)
    losses = train(model, prepare(model, data), opt, cfg.steps, seed, log)
    return model, losses


def evaluate(model: ComposerModel, eval_set: Dataset, seed: int,
             steps: int | None = None) -> tuple[float, float]:
    seeds = [seed * 10_000 + i for i in range(len(eval_set))]
    images = sample_many(model, eval_set.samples, seeds, steps)
    reports = [region_fidelity(img, s) for img, s in zip(images, eval_set.samples)]
    return (float(np.mean([r.mean_error for r in reports])),
            float(np.mean([r.mean_corr for r in reports])))


def run_cell(cfg: RunConfig, variant: str, seed: int) -> CellResult:
    _limit_blas()
    train_set, eval_set = build_data(cfg)
    model, _ = train_model(cfg, variant, seed, train_set)
    err, corr = evaluate(model, eval_set, seed, cfg.sample_steps)
    return CellResult(variant, seed, err, corr)


def _limit_blas() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


def worker_count() -> int:
    raw = os.environ.get("COMPOSER_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def run_ablation(cfg: RunConfig, workers: int | None = None) -> list[CellResult]:
    """Every (variant, seed) cell; rows come back in grid order whatever the scheduling."""
    cells = [(v, s) for s in cfg.seeds for v in cfg.variants]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(cells) == 1:
        return [run_cell(cfg, v, s) for v, s in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        futures = [pool.submit(run_cell, cfg, v, s) for v, s in cells]
        return [f.result() for f in futures]


def ablation_csv(rows: list[CellResult]) -> str:
    return "\n".join(["variant,seed,region_error,pattern_corr"] + [r.csv_row() for r in rows]) + "\n"


def wins(rows: list[CellResult], variant: str, baseline: str = "none") -> tuple[int, int]:
    """(seeds where `variant` has strictly lower region error than `baseline`, seeds compared)."""
    err = {(r.variant, r.seed): r.region_error for r in rows}
    seeds = sorted({s for v, s in err if v == variant} & {s for v, s in err if v == baseline})
    return sum(err[variant, s] < err[baseline, s] for s in seeds), len(seeds)
