"""Procedural stand-ins for body models, garment photos and captions.

Figures are built from axis-aligned texel grids. Limbs are rotated about
their pivot with three integer shears, which is a bijection of the pixel
lattice, so a limb's set of (part, u, v) texels is identical in every pose.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .tensor_core import DTYPE


class Part(IntEnum):
    BACKGROUND = 0
    HEAD = 1
    TORSO = 2
    LEFT_ARM = 3
    RIGHT_ARM = 4
    LEFT_LEG = 5
    RIGHT_LEG = 6
    LEFT_FOOT = 7
    RIGHT_FOOT = 8


CATEGORIES = ("upper", "lower", "shoes", "face")
PATTERNS = ("solid", "stripes", "checker", "dots")

PART_CATEGORY = {
    Part.TORSO: "upper",
    Part.LEFT_LEG: "lower",
    Part.RIGHT_LEG: "lower",
    Part.LEFT_FOOT: "shoes",
    Part.RIGHT_FOOT: "shoes",
    Part.HEAD: "face",
}

# fill for body parts without an assigned asset
UNDRESSED = {
    Part.HEAD: 0.7,
    Part.LEFT_ARM: 0.7,
    Part.RIGHT_ARM: 0.7,
    Part.TORSO: 0.5,
    Part.LEFT_LEG: 0.5,
    Part.RIGHT_LEG: 0.5,
    Part.LEFT_FOOT: 0.25,
    Part.RIGHT_FOOT: 0.25,
}

SENTINEL = -1.0


# ---------------------------------------------------------------------------
# Figures


@dataclass(frozen=True)
class FigureParams:
    """Geometry of one stick figure; all lengths in pixels.

    `anchor` is the (row, col) of the torso's top edge centre. Limb angles
    are outward rotations in radians; zero means hanging straight down.
    """

    torso_height: int = 16
    torso_width: int = 12
    arm_angles: tuple[float, float] = (0.3, 0.3)
    leg_angles: tuple[float, float] = (0.1, 0.1)
    head_radius: int = 5
    anchor: tuple[int, int] = (13, 24)
    canvas: tuple[int, int] = (64, 48)

    @property
    def arm_length(self) -> int:
        return max(1, (3 * self.torso_height) // 4)

    @property
    def arm_width(self) -> int:
        return 3

    @property
    def leg_length(self) -> int:
        return self.torso_height

    @property
    def leg_width(self) -> int:
        return max(1, self.torso_width // 2 - 1)

    @property
    def foot_length(self) -> int:
        return 3

    def with_angles(self, arms=None, legs=None) -> "FigureParams":
        d = asdict(self)
        if arms is not None:
            d["arm_angles"] = tuple(arms)
        if legs is not None:
            d["leg_angles"] = tuple(legs)
        return FigureParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FigureParams":
        d = dict(d)
        for k in ("arm_angles", "leg_angles", "anchor", "canvas"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class UVMap:
    u: np.ndarray
    v: np.ndarray
    part_id: np.ndarray

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def foreground(self) -> np.ndarray:
        return self.part_id > 0

    def as_tensor(self) -> np.ndarray:
        """[H, W, 3] float array of (u, v, part_id)."""
        return np.stack([self.u, self.v, self.part_id.astype(DTYPE)], axis=-1).astype(DTYPE)

    @classmethod
    def from_tensor(cls, t: np.ndarray) -> "UVMap":
        return cls(t[..., 0].astype(DTYPE).copy(), t[..., 1].astype(DTYPE).copy(),
                   t[..., 2].astype(np.int64))

    def triples(self, mask: np.ndarray | None = None) -> set[tuple[int, float, float]]:
        sel = self.foreground() if mask is None else mask & self.foreground()
        return set(zip(self.part_id[sel].tolist(), self.u[sel].tolist(), self.v[sel].tolist()))

    def densepose(self) -> np.ndarray:
        """The 2-channel (u, v) conditioning map, [2, H, W]."""
        return np.stack([self.u, self.v]).astype(DTYPE)

    def resample(self, h: int, w: int) -> "UVMap":
        """Nearest-neighbour pick of each cell's centre pixel (sentinels stay sentinels)."""
        H, W = self.part_id.shape
        if H % h or W % w:
            raise ParameterError(f"UV grid {H}x{W} does not divide into {h}x{w}")
        fr, fc = H // h, W // w
        rows = np.arange(h) * fr + fr // 2
        cols = np.arange(w) * fc + fc // 2
        ix = np.ix_(rows, cols)
        return UVMap(self.u[ix].copy(), self.v[ix].copy(), self.part_id[ix].copy())


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def shear_rotate(dy: np.ndarray, dx: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate integer offsets by `angle` via three lattice shears.

    Positive angles swing a downward offset (dy > 0) towards negative dx.
    """
    if not -math.pi / 2 <= angle <= math.pi / 2:
        raise ParameterError(f"limb angle {angle} outside [-pi/2, pi/2]")
    t = math.tan(angle / 2)
    s = math.sin(angle)
    x, y = dx.astype(np.int64), dy.astype(np.int64)
    x = x - _round(t * y)
    y = y + _round(s * x)
    x = x - _round(t * y)
    return y, x


def _limb_texels(length: int, width: int, foot: int = 0):
    i, j = np.meshgrid(np.arange(length + foot), np.arange(width), indexing="ij")
    return i.ravel(), j.ravel()


def _rasterize(params: FigureParams):
    """Yield (part, rows, cols, u, v) per part, without validation."""
    H, W = params.canvas
    ar, ac = params.anchor
    th, tw = params.torso_height, params.torso_width
    left = ac - tw // 2

    r = params.head_radius
    if r > 0:
        dr, dc = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        inside = dr * dr + dc * dc <= r * r
        dr, dc = dr[inside], dc[inside]
        cr, cc = ar - 1 - r, ac
        n = 2 * r + 1
        yield (Part.HEAD, cr + dr, cc + dc, (dc + r + 0.5) / n, (dr + r + 0.5) / n)

    rr, cc = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    yield (Part.TORSO, ar + rr, left + cc, (cc + 0.5) / tw, (rr + 0.5) / th)

    al, aw = params.arm_length, params.arm_width
    i, j = _limb_texels(al, aw)
    pivots = ((ar + 1, left - 2 - aw // 2), (ar + 1, left + tw + 1 + aw // 2))
    for side, (part, (pr, pc)) in enumerate(zip((Part.LEFT_ARM, Part.RIGHT_ARM), pivots)):
        ang = params.arm_angles[side] * (1 if side == 0 else -1)
        dy, dx = shear_rotate(i, j - aw // 2, ang)
        # mirror the texel layout so u runs outward -> inward on both sides
        jj = j if side == 0 else aw - 1 - j
        yield (part, pr + dy, pc + dx, (jj + 0.5) / aw, (i + 0.5) / al)

    ll, lw, fl = params.leg_length, params.leg_width, params.foot_length
    i, j = _limb_texels(ll, lw, fl)
    pivots = ((ar + th + 2, ac - 1 - lw + lw // 2), (ar + th + 2, ac + 1 + lw // 2))
    legs = zip((Part.LEFT_LEG, Part.RIGHT_LEG), (Part.LEFT_FOOT, Part.RIGHT_FOOT), pivots)
    for side, (leg, foot, (pr, pc)) in enumerate(legs):
        ang = params.leg_angles[side] * (1 if side == 0 else -1)
        dy, dx = shear_rotate(i, j - lw // 2, ang)
        jj = j if side == 0 else lw - 1 - j
        on_leg = i < ll
        yield (leg, pr + dy[on_leg], pc + dx[on_leg],
               (jj[on_leg] + 0.5) / lw, (i[on_leg] + 0.5) / ll)
        yield (foot, pr + dy[~on_leg], pc + dx[~on_leg],
               (jj[~on_leg] + 0.5) / lw, (i[~on_leg] - ll + 0.5) / fl)


def validate_figure(params: FigureParams) -> None:
    H, W = params.canvas
    if params.torso_height < 2 or params.torso_width < 4 or params.head_radius < 0:
        raise ParameterError(f"degenerate figure dimensions: {params}")
    taken = np.zeros((H, W), dtype=bool)
    for part, rows, cols, _, _ in _rasterize(params):
        if rows.size == 0:
            continue
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= H or cols.max() >= W:
            raise ParameterError(f"figure part {part.name} leaves the {H}x{W} canvas")
        if taken[rows, cols].any() or len(set(zip(rows.tolist(), cols.tolist()))) != rows.size:
            raise ParameterError(f"figure part {part.name} overlaps another part")
        taken[rows, cols] = True


def generate_figure(params: FigureParams) -> tuple[np.ndarray, UVMap]:
    """Rasterise a figure into a silhouette (1 on the body) and its UV map."""
    validate_figure(params)
    H, W = params.canvas
    u = np.full((H, W), SENTINEL, dtype=DTYPE)
    v = np.full((H, W), SENTINEL, dtype=DTYPE)
    pid = np.zeros((H, W), dtype=np.int64)
    for part, rows, cols, pu, pv in _rasterize(params):
        u[rows, cols] = pu
        v[rows, cols] = pv
        pid[rows, cols] = int(part)
    return (pid > 0).astype(DTYPE), UVMap(u, v, pid)


def default_figure(canvas: tuple[int, int] = (64, 48)) -> FigureParams:
    """A centred figure scaled to the canvas (reference canvas 64x48)."""
    H, W = canvas
    s = H / 64
    th = max(4, round(16 * s))
    tw = max(4, 2 * round(6 * W / 48))
    hr = max(1, round(5 * s))
    total = 2 * hr + 2 + th + 2 + th + 3
    top = max(0, (H - total) // 2)
    return FigureParams(torso_height=th, torso_width=tw, head_radius=hr,
                        anchor=(top + 2 * hr + 2, W // 2), canvas=canvas)


def random_figure(rng: np.random.Generator, canvas: tuple[int, int] = (64, 48)) -> FigureParams:
    """Draw a valid figure: jittered anchor and limb angles around the default."""
    base = default_figure(canvas)
    for _ in range(1000):
        ar, ac = base.anchor
        p = FigureParams(
            torso_height=base.torso_height,
            torso_width=base.torso_width,
            arm_angles=(float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0))),
            leg_angles=(float(rng.uniform(0.0, 0.35)), float(rng.uniform(0.0, 0.35))),
            head_radius=base.head_radius,
            anchor=(ar + int(rng.integers(-1, 2)), ac + int(rng.integers(-2, 3))),
            canvas=canvas,
        )
        try:
            validate_figure(p)
        except ParameterError:
            continue
        return p
    raise ParameterError(f"could not draw a valid figure for canvas {canvas}")


# ---------------------------------------------------------------------------
# Assets


@dataclass
class AssetImage:
    category: str
    pattern: str
    base: float
    pixels: np.ndarray  # [h, w, 1]
    mask: np.ndarray  # [h, w] bool

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    def spec(self) -> dict:
        h, w = self.size
        return {"category": self.category, "pattern": self.pattern,
                "base": self.base, "size": [h, w]}


def render_pattern(pattern: str, base: float, h: int, w: int) -> np.ndarray:
    """Grayscale pattern of shape [h, w]; second tone is 1 - base."""
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if pattern == "solid":
        alt = np.zeros((h, w), dtype=bool)
    elif pattern == "stripes":
        alt = (r // 2) % 2 == 1
    elif pattern == "checker":
        alt = (r // 2 + c // 2) % 2 == 1
    elif pattern == "dots":
        alt = (r % 4 < 2) & (c % 4 < 2)
    else:
        raise ParameterError(f"unknown pattern {pattern!r}")
    base = DTYPE(base)
    return np.where(alt, DTYPE(1) - base, base).astype(DTYPE)


def default_asset_size(category: str, canvas: tuple[int, int] = (64, 48)) -> tuple[int, int]:
    """Category-specific garment aspect, scaled to the canvas."""
    H, W = canvas
    frac = {"upper": (3 / 8, 5 / 12), "lower": (3 / 8, 1 / 3),
            "shoes": (1 / 8, 1 / 3), "face": (3 / 16, 1 / 4)}[category]
    return max(4, round(H * frac[0])), max(4, round(W * frac[1]))


def generate_asset(category: str, pattern: str, base: float | None = None,
                   size: tuple[int, int] | None = None, seed: int = 0) -> AssetImage:
    """Render a garment card. `seed` only matters when `base` is None."""
    if category not in CATEGORIES:
        raise ParameterError(f"unknown category {category!r}")
    if pattern not in PATTERNS:
        raise ParameterError(f"unknown pattern {pattern!r}")
    h, w = size if size is not None else default_asset_size(category)
    if h < 4 or w < 4:
        raise ParameterError(f"asset size {h}x{w} below 4x4")
    if base is None:
        base = float(np.random.default_rng(seed).uniform(0.05, 0.95))
    if not 0.0 <= base <= 1.0:
        raise ParameterError(f"base value {base} outside [0, 1]")
    mask = np.ones((h, w), dtype=bool)
    pixels = np.where(mask, render_pattern(pattern, base, h, w), DTYPE(1.0))
    return AssetImage(category, pattern, float(base), pixels[..., None].astype(DTYPE), mask)


def asset_from_spec(spec: dict) -> AssetImage:
    return generate_asset(spec["category"], spec["pattern"], spec["base"], tuple(spec["size"]))


# ---------------------------------------------------------------------------
# Captions


@lru_cache(maxsize=1)
def vocabulary() -> tuple[str, ...]:
    text = resources.files(__package__).joinpath("vocab.txt").read_text()
    words = tuple(w for w in text.split("\n") if w)
    assert len(words) == 64
    return words


def word_id(word: str) -> int:
    return vocabulary().index(word)


PATTERN_WORD = {"solid": "plain", "stripes": "striped", "checker": "checked", "dots": "dotted"}


def value_word(base: float) -> str:
    if base < 1 / 3:
        return "dark"
    if base > 2 / 3:
        return "light"
    return "mid"


@dataclass
class TextPrompt:
    tokens: list[int] = field(default_factory=list)
    spans: list[tuple[int, int, int]] = field(default_factory=list)  # (asset, start, end)

    def words(self) -> list[str]:
        vocab = vocabulary()
        return [vocab[t] for t in self.tokens]

    def span_for(self, asset: int) -> tuple[int, int]:
        for a, s, e in self.spans:
            if a == asset:
                return s, e
        raise KeyError(asset)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "spans": [list(s) for s in self.spans],
                "text": " ".join(self.words())}

    @classmethod
    def from_dict(cls, d: dict) -> "TextPrompt":
        return cls(list(d["tokens"]), [tuple(s) for s in d["spans"]])


def caption_sample(assets: list[AssetImage]) -> TextPrompt:
    """Template caption with one phrase span per asset, in category order."""
    if len(assets) > 4:
        raise ParameterError("at most four assets per caption")
    cats = [a.category for a in assets]
    if len(set(cats)) != len(cats):
        raise ParameterError(f"duplicate category in {cats}")
    order = sorted(range(len(assets)), key=lambda i: CATEGORIES.index(assets[i].category))
    tokens: list[int] = []
    spans: list[tuple[int, int, int]] = []
    for k, i in enumerate(order):
        if k:
            tokens.append(word_id(","))
        a = assets[i]
        start = len(tokens)
        tokens += [word_id(w) for w in
                   ("a", PATTERN_WORD[a.pattern], value_word(a.base), a.category)]
        spans.append((i, start, len(tokens)))
    return TextPrompt(tokens, spans)


# ---------------------------------------------------------------------------
# Rendering


def dress(uv: UVMap, assets: list[AssetImage]) -> np.ndarray:
    """Render the figure wearing `assets`: [H, W, 1], white background.

    Each dressed part samples its asset's pattern at the part's (u, v).
    """
    by_cat = {a.category: a for a in assets}
    img = np.ones(uv.part_id.shape, dtype=DTYPE)
    for part in Part:
        if part == Part.BACKGROUND:
            continue
        sel = uv.part_id == int(part)
        if not sel.any():
            continue
        asset = by_cat.get(PART_CATEGORY.get(part))
        if asset is None:
            img[sel] = DTYPE(UNDRESSED[part])
            continue
        h, w = asset.size
        rows = np.minimum((uv.v[sel] * h).astype(np.int64), h - 1)
        cols = np.minimum((uv.u[sel] * w).astype(np.int64), w - 1)
        img[sel] = asset.pixels[rows, cols, 0]
    return img[..., None]


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    h, w = a.shape
    data = np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(blob[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return (data.astype(DTYPE) / DTYPE(maxval))
