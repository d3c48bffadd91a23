"""Multi-pose albums with shared appearance, and face-region latent stitching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .asset_composer import AssetComposition, downsample_mask
from .attention_lab import KVPair, correspondence_substitute, cross_frame_substitute
from .diffusion import decode_latent
from .errors import DimensionError, ModeError, ParameterError
from .metrics import FidelityReport, region_fidelity
from .tensor_core import read_tensor, write_tensor
from .toy_world import (
    AssetImage, FigureParams, Part, TextPrompt, UVMap, default_figure, dress, generate_figure,
    validate_figure, write_pgm,
)
from .training import ComposerModel, build_conditioning, run_chain, tokens_to_image

ALBUM_MODES = ("independent", "cross_frame", "correspondence")
CONSISTENCY = {"independent": "independent", "cfa": "cross_frame", "caa": "correspondence"}


@dataclass
class LatentAlbum:
    latents: np.ndarray  # [N, 4, h, w] codec latents
    uvs: list[UVMap]
    face_masks: np.ndarray  # [N, h, w] bool
    mode: str
    seeds: list[int] = field(default_factory=list)
    figures: list[FigureParams] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.latents)
        if len(self.uvs) != n or len(self.face_masks) != n:
            raise DimensionError(f"{n} latents, {len(self.uvs)} UV maps, {len(self.face_masks)} masks")
        if self.face_masks.shape[1:] != self.latents.shape[2:]:
            raise DimensionError(f"masks {self.face_masks.shape} vs latents {self.latents.shape}")

    def __len__(self) -> int:
        return len(self.latents)

    def images(self) -> list[np.ndarray]:
        return [np.clip(decode_latent(z), 0.0, 1.0) for z in self.latents]


def album_figures(canvas: tuple[int, int], n: int, seed: int = 0) -> list[FigureParams]:
    """`n` poses of one figure: limbs vary, head and torso stay put."""
    base = default_figure(canvas)
    rng = np.random.default_rng([seed, 0xA1B])
    out = []
    while len(out) < n:
        for _ in range(1000):
            f = base.with_angles((float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0))),
                                 (float(rng.uniform(0.0, 0.35)), float(rng.uniform(0.0, 0.35))))
            try:
                validate_figure(f)
            except ParameterError:
                continue
            out.append(f)
            break
        else:
            raise ParameterError(f"no valid pose found on canvas {canvas}")
    return out


def face_mask_from_uv(uv: UVMap, dims: tuple[int, int]) -> np.ndarray:
    return downsample_mask(uv.part_id == Part.HEAD, dims[0], dims[1], 0.5)


# ---------------------------------------------------------------------------
# Substitution hook


def _stack(frames: list[KVPair], block_id: int) -> KVPair:
    keys = np.stack([tc.const(f.keys).value for f in frames])
    values = np.stack([tc.const(f.values).value for f in frames])
    return KVPair(tc.const(keys), tc.const(values), block_id)


def substitution_hook(mode: str, uvs: list[UVMap], dims: list[tuple[int, int]],
                      first: int = 0, quant: int = 16):
    """kv_hook that makes frame `first` the anchor of a batched album.

    Works on the denoiser's own self-attention K/V, so it applies at every
    level and every step the chain calls it.
    """
    if mode == "independent":
        return None
    if mode not in ALBUM_MODES:
        raise ModeError(f"unknown album mode {mode!r}")
    n = len(uvs)
    order = [first] + [i for i in range(n) if i != first]
    level_uvs = {l: [uvs[i].resample(*d) for i in order] for l, d in enumerate(dims, start=1)}

    def hook(level: int, kv: KVPair) -> KVPair:
        keys, values = tc.const(kv.keys).value, tc.const(kv.values).value
        if len(keys) != n:
            raise DimensionError(f"album of {n} frames, batch of {len(keys)}")
        frames = [KVPair(keys[i], values[i], level) for i in order]
        if mode == "cross_frame":
            out = cross_frame_substitute(frames)
        else:
            out = correspondence_substitute(frames, level_uvs[level], quant)
        back = [None] * n
        for pos, i in enumerate(order):
            back[i] = out[pos]
        return _stack(back, level)

    return hook


# ---------------------------------------------------------------------------
# Generation


def generate_album(model: ComposerModel, composition: AssetComposition, prompt: TextPrompt,
                   figures: list[FigureParams], mode: str = "independent", seed: int = 0,
                   seeds: list[int] | None = None, first: int = 0, steps: int | None = None,
                   quant: int = 16) -> tuple[LatentAlbum, list[np.ndarray]]:
    """Denoise all frames as one batch; frame i uses seed + i unless `seeds` is given."""
    if not figures:
        raise DimensionError("album needs at least one figure")
    if mode not in ALBUM_MODES:
        raise ModeError(f"unknown album mode {mode!r}")
    if not 0 <= first < len(figures):
        raise DimensionError(f"first frame {first} outside album of {len(figures)}")
    seeds = [seed + i for i in range(len(figures))] if seeds is None else list(seeds)
    if len(seeds) != len(figures):
        raise DimensionError(f"{len(seeds)} seeds for {len(figures)} figures")
    uvs = [generate_figure(f)[1] for f in figures]
    conds = [build_conditioning(model, uv, composition, prompt) for uv in uvs]
    hook = substitution_hook(mode, uvs, model.cfg.block_dims(), first, quant)
    z = run_chain(model, conds, seeds, steps, hook_factory=None if hook is None else (lambda t: hook))
    latents, images = zip(*(tokens_to_image(model, zi) for zi in z))
    masks = np.stack([face_mask_from_uv(uv, model.cfg.latent_hw) for uv in uvs])
    album = LatentAlbum(np.stack(latents), uvs, masks, mode, seeds, list(figures))
    return album, list(images)


def latent_code_alignment(cfa: LatentAlbum, caa: LatentAlbum) -> LatentAlbum:
    """CAA latents with each frame's face cells taken from the CFA album."""
    if cfa.latents.shape != caa.latents.shape:
        raise DimensionError(f"latents {cfa.latents.shape} vs {caa.latents.shape}")
    if not np.array_equal(cfa.face_masks, caa.face_masks):
        raise DimensionError("albums disagree on face masks")
    m = caa.face_masks[:, None, :, :]
    out = np.where(m, cfa.latents, caa.latents)
    return LatentAlbum(out, caa.uvs, caa.face_masks.copy(), "aligned", caa.seeds, caa.figures)


def consistency_album(model: ComposerModel, composition: AssetComposition, prompt: TextPrompt,
                      figures: list[FigureParams], consistency: str, seed: int = 0,
                      **kw) -> tuple[LatentAlbum, list[np.ndarray]]:
    """Album under one of independent / cfa / caa / lca."""
    if consistency == "lca":
        cfa, _ = generate_album(model, composition, prompt, figures, "cross_frame", seed, **kw)
        caa, _ = generate_album(model, composition, prompt, figures, "correspondence", seed, **kw)
        album = latent_code_alignment(cfa, caa)
        return album, album.images()
    if consistency not in CONSISTENCY:
        raise ModeError(f"unknown consistency {consistency!r}")
    return generate_album(model, composition, prompt, figures, CONSISTENCY[consistency], seed, **kw)


# ---------------------------------------------------------------------------
# Measurements


def pixel_mask(latent_mask: np.ndarray) -> np.ndarray:
    """Latent cell mask -> the 2x2 pixel blocks it covers."""
    return np.repeat(np.repeat(latent_mask, 2, axis=0), 2, axis=1)


def face_distance(album: LatentAlbum, images: list[np.ndarray] | None = None) -> float:
    """Mean over frame pairs of mean |a - b| on the union of their face regions."""
    images = album.images() if images is None else images
    pairs = list(combinations(range(len(album)), 2))
    if not pairs:
        return 0.0
    out = []
    for i, j in pairs:
        m = pixel_mask(album.face_masks[i] | album.face_masks[j])
        if not m.any():
            continue
        d = np.abs(images[i][..., 0].astype(np.float64) - images[j][..., 0])
        out.append(float(d[m].mean()))
    return float(np.mean(out)) if out else 0.0


@dataclass
class RenderTarget:
    """What a frame should look like: the figure dressed with the assets."""

    uv: UVMap
    assets: list[AssetImage]
    image: np.ndarray


def album_fidelity(album: LatentAlbum, assets: list[AssetImage],
                   images: list[np.ndarray] | None = None) -> list[FidelityReport]:
    images = album.images() if images is None else images
    return [region_fidelity(img, RenderTarget(uv, assets, dress(uv, assets)))
            for img, uv in zip(images, album.uvs)]


# ---------------------------------------------------------------------------
# Persistence


def write_album(out_dir, album: LatentAlbum, images: list[np.ndarray] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = album.images() if images is None else images
    frames = []
    for i, (z, img) in enumerate(zip(album.latents, images)):
        stem = f"frame_{i:03d}"
        write_pgm(out / f"{stem}.pgm", img)
        write_tensor(out / f"{stem}_latent.tensor", z)
        frames.append({"image": f"{stem}.pgm", "latent": f"{stem}_latent.tensor"})
    manifest = {"mode": album.mode, "seeds": album.seeds,
                "figures": [f.to_dict() for f in album.figures], "frames": frames}
    (out / "album.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def read_album(path) -> LatentAlbum:
    root = Path(path)
    m = json.loads((root / "album.json").read_text())
    figures = [FigureParams.from_dict(f) for f in m["figures"]]
    latents = np.stack([read_tensor(root / f["latent"]) for f in m["frames"]])
    uvs = [generate_figure(f)[1] for f in figures]
    dims = latents.shape[2:]
    masks = np.stack([face_mask_from_uv(uv, dims) for uv in uvs])
    return LatentAlbum(latents, uvs, masks, m["mode"], m["seeds"], figures)


# ---------------------------------------------------------------------------
# Mode comparison


@dataclass(frozen=True)
class ConsistencyRow:
    seed: int
    mode: str  # independent / cfa / caa / lca
    face_distance: float
    garment_error: float


def compare_consistency(model: ComposerModel, composition: AssetComposition, prompt: TextPrompt,
                        assets: list[AssetImage], figures: list[FigureParams], seed: int,
                        steps: int | None = None) -> list[ConsistencyRow]:
    """Face distance and garment error of one album under each consistency mode.

    The aligned album is stitched from the cross-frame and correspondence
    runs made here, so each chain is sampled once.
    """
    runs = {name: generate_album(model, composition, prompt, figures, CONSISTENCY[name], seed,
                                 steps=steps)[0]
            for name in ("independent", "cfa", "caa")}
    runs["lca"] = latent_code_alignment(runs["cfa"], runs["caa"])
    rows = []
    for name in ("independent", "cfa", "caa", "lca"):
        album = runs[name]
        images = album.images()
        err = float(np.mean([r.mean_error for r in album_fidelity(album, assets, images)]))
        rows.append(ConsistencyRow(seed, name, face_distance(album, images), err))
    return rows
