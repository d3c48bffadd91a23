"""Asset-library canvas construction and per-block token selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DimensionError
from .tensor_core import DTYPE
from .toy_world import AssetImage, TextPrompt

MAX_TRIES = 200


@dataclass(frozen=True)
class Placement:
    asset: int
    top: int
    left: int
    height: int
    width: int

    def as_list(self) -> list[int]:
        return [self.asset, self.top, self.left, self.height, self.width]


@dataclass
class AssetComposition:
    canvas: np.ndarray  # [H, W, 1]
    placements: list[Placement]
    masks: list[np.ndarray]  # bool [H, W], one per asset
    categories: list[str] = field(default_factory=list)
    phrase_links: dict[int, int] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.canvas.shape[:2]

    def category_masks(self, order) -> np.ndarray:
        """[len(order), H, W] float masks, one channel per category name."""
        out = np.zeros((len(order), *self.shape), dtype=DTYPE)
        for cat, m in zip(self.categories, self.masks):
            out[order.index(cat)] += m
        return out


def rects_overlap(a: Placement, b: Placement) -> bool:
    return (a.top < b.top + b.height and b.top < a.top + a.height
            and a.left < b.left + b.width and b.left < a.left + a.width)


def verify_no_overlap(placements: list[Placement]) -> bool:
    return not any(rects_overlap(a, b)
                   for i, a in enumerate(placements) for b in placements[i + 1:])


def _shelf_pack(sizes, H, W) -> list[tuple[int, int]] | None:
    out = []
    row = col = shelf = 0
    for h, w in sizes:
        if col + w > W:
            row, col, shelf = row + shelf, 0, 0
        if w > W or row + h > H:
            return None
        out.append((row, col))
        col += w
        shelf = max(shelf, h)
    return out


def _render(assets, placements, H, W) -> AssetComposition:
    canvas = np.ones((H, W, 1), dtype=DTYPE)
    masks = []
    for a, p in zip(assets, placements):
        m = np.zeros((H, W), dtype=bool)
        m[p.top:p.top + p.height, p.left:p.left + p.width] = a.mask
        sl = (slice(p.top, p.top + p.height), slice(p.left, p.left + p.width))
        canvas[sl][a.mask] = a.pixels[a.mask]
        masks.append(m)
    return AssetComposition(canvas, list(placements), masks, [a.category for a in assets])


def compose_assets(assets: list[AssetImage], height: int, width: int,
                   seed: int = 0) -> AssetComposition:
    """Place assets without overlap on a white canvas.

    Rejection-samples top-left corners; if any asset fails, the whole set
    falls back to row-major shelf packing.
    """
    sizes = [a.size for a in assets]
    for h, w in sizes:
        if h > height or w > width:
            raise CapacityError(f"asset {h}x{w} larger than canvas {height}x{width}")
    rng = np.random.default_rng(seed)
    placed: list[Placement] = []
    for i, (h, w) in enumerate(sizes):
        for _ in range(MAX_TRIES):
            cand = Placement(i, int(rng.integers(0, height - h + 1)),
                             int(rng.integers(0, width - w + 1)), h, w)
            if not any(rects_overlap(cand, p) for p in placed):
                placed.append(cand)
                break
        else:
            break
    if len(placed) != len(assets):
        corners = _shelf_pack(sizes, height, width)
        if corners is None:
            raise CapacityError(f"{len(assets)} assets do not fit a {height}x{width} canvas")
        placed = [Placement(i, r, c, h, w) for i, ((r, c), (h, w)) in enumerate(zip(corners, sizes))]
    return _render(assets, placed, height, width)


def composition_from_placements(assets: list[AssetImage], placements: list[list[int]],
                                height: int, width: int) -> AssetComposition:
    return _render(assets, [Placement(*p) for p in placements], height, width)


def link_phrases(comp: AssetComposition, prompt: TextPrompt) -> AssetComposition:
    comp.phrase_links = {a: k for k, (a, _, _) in enumerate(prompt.spans)}
    return comp


# ---------------------------------------------------------------------------
# Token geometry


@dataclass
class TokenSelection:
    block_id: int
    dims: tuple[int, int]
    indices: dict[int, np.ndarray]  # asset -> sorted flat indices

    def assets(self) -> list[int]:
        return sorted(self.indices)


def downsample_mask(mask: np.ndarray, h: int, w: int, threshold: float = 0.5) -> np.ndarray:
    """Majority-coverage downsampling; a cell at exactly `threshold` is selected."""
    mask = np.asarray(mask)
    H, W = mask.shape
    if h < 1 or w < 1 or H % h or W % w:
        raise DimensionError(f"cannot downsample {H}x{W} mask to {h}x{w}")
    fh, fw = H // h, W // w
    counts = mask.astype(np.int64).reshape(h, fh, w, fw).sum(axis=(1, 3))
    return counts >= threshold * (fh * fw)


def token_selection(comp: AssetComposition, block_dims: list[tuple[int, int]],
                    threshold: float = 0.5) -> list[TokenSelection]:
    """Per block, the row-major flat token indices covered by each asset."""
    out = []
    for b, (h, w) in enumerate(block_dims, start=1):
        idx, taken = {}, np.zeros(h * w, dtype=bool)
        for a, m in enumerate(comp.masks):
            # two disjoint masks can both sit at exactly half of one cell;
            # the earlier asset keeps such a cell so selections stay disjoint
            cells = downsample_mask(m, h, w, threshold).ravel() & ~taken
            taken |= cells
            idx[a] = np.flatnonzero(cells)
        out.append(TokenSelection(b, (h, w), idx))
    return out
