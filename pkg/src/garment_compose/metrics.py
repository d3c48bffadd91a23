"""Pixel-space fidelity over the body regions each asset dresses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .toy_world import PART_CATEGORY, UVMap


@dataclass
class FidelityReport:
    categories: list[str]
    region_error: list[float]  # mean |generated - expected| per asset, in [0, 1]
    pattern_corr: list[float]  # Pearson per asset, in [-1, 1]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.region_error)) if self.region_error else 0.0

    @property
    def mean_corr(self) -> float:
        return float(np.mean(self.pattern_corr)) if self.pattern_corr else 0.0

    def to_dict(self) -> dict:
        return {"categories": self.categories, "region_error": self.region_error,
                "pattern_corr": self.pattern_corr, "mean_error": self.mean_error,
                "mean_corr": self.mean_corr}


def category_region(uv: UVMap, category: str) -> np.ndarray:
    parts = [p for p, c in PART_CATEGORY.items() if c == category]
    return np.isin(uv.part_id, parts)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation with the constant cases pinned: two equal constants give 1,
    anything else involving a constant side gives 0."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.size == 0:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    va, vb = float((da * da).sum()), float((db * db).sum())
    if va == 0.0 or vb == 0.0:
        return 1.0 if va == vb == 0.0 and np.array_equal(a, b) else 0.0
    r = float((da * db).sum() / np.sqrt(va * vb))
    return min(1.0, max(-1.0, r))


def region_fidelity(generated: np.ndarray, sample) -> FidelityReport:
    """Compare `generated` [H, W(, 1)] with the sample's dressed render, asset by asset."""
    expected = np.asarray(sample.image)[..., 0]
    gen = np.asarray(generated)
    if gen.ndim == 3:
        gen = gen[..., 0]
    if gen.shape != expected.shape:
        raise DimensionError(f"generated {gen.shape} vs expected {expected.shape}")
    cats, errs, corrs = [], [], []
    for asset in sample.assets:
        region = category_region(sample.uv, asset.category)
        g, e = gen[region], expected[region]
        cats.append(asset.category)
        errs.append(float(np.abs(g.astype(np.float64) - e).mean()) if region.any() else 0.0)
        corrs.append(pearson(g, e))
    return FidelityReport(cats, errs, corrs)
