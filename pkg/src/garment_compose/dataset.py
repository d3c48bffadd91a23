"""Synthetic dressed-figure dataset: generation, persistence, reload."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .asset_composer import AssetComposition, compose_assets, composition_from_placements, link_phrases
from .errors import ParameterError
from .tensor_core import read_tensor, write_tensor
from .toy_world import (
    AssetImage, FigureParams, TextPrompt, UVMap, asset_from_spec, caption_sample,
    default_asset_size, dress, generate_asset, generate_figure, random_figure, write_pgm,
    PATTERNS,
)


@dataclass
class DatasetConfig:
    n: int = 100
    height: int = 64
    width: int = 48
    categories: tuple[str, ...] = ("upper", "lower")

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.n < 0:
            raise ParameterError("n must be non-negative")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ParameterError(f"canvas {self.height}x{self.width} must be multiples of 8")
        if len(set(self.categories)) != len(self.categories) or len(self.categories) > 4:
            raise ParameterError(f"bad categories {self.categories}")

    @property
    def canvas(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass
class DatasetSample:
    id: int
    seed: int
    figure: FigureParams
    uv: UVMap
    assets: list[AssetImage]
    composition: AssetComposition
    prompt: TextPrompt
    image: np.ndarray  # [H, W, 1]

    def manifest_entry(self) -> dict:
        stem = f"{self.id:05d}"
        return {
            "id": self.id,
            "seed": self.seed,
            "image": {"pgm": f"{stem}_image.pgm", "tensor": f"{stem}_image.tensor"},
            "uvmap": f"{stem}_uv.tensor",
            "composition": {
                "canvas": f"{stem}_assets.pgm",
                "assets": [a.spec() for a in self.assets],
                "placements": [p.as_list() for p in self.composition.placements],
                "phrase_links": {str(k): v for k, v in self.composition.phrase_links.items()},
            },
            "prompt": self.prompt.to_dict(),
            "figure": self.figure.to_dict(),
        }


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def draw_base(rng: np.random.Generator) -> float:
    """Dark or light tone, never mid-grey, so two-tone patterns keep contrast."""
    b = float(rng.uniform(0.05, 0.35))
    return b if rng.random() < 0.5 else 1.0 - b


def make_sample(index: int, seed: int, cfg: DatasetConfig) -> DatasetSample:
    rng = np.random.default_rng(seed)
    fig = random_figure(rng, cfg.canvas)
    _, uv = generate_figure(fig)
    assets = []
    for cat in cfg.categories:
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        assets.append(generate_asset(cat, pattern, round(draw_base(rng), 4),
                                     default_asset_size(cat, cfg.canvas)))
    comp = compose_assets(assets, cfg.height, cfg.width, seed=int(rng.integers(2**63)))
    prompt = caption_sample(assets)
    link_phrases(comp, prompt)
    return DatasetSample(index, seed, fig, uv, assets, comp, prompt, dress(uv, assets))


@dataclass
class Dataset:
    config: DatasetConfig
    seed: int
    samples: list[DatasetSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> DatasetSample:
        return self.samples[i]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in self.samples:
            e = s.manifest_entry()
            write_pgm(out / e["image"]["pgm"], s.image)
            write_tensor(out / e["image"]["tensor"], s.image)
            write_tensor(out / e["uvmap"], s.uv.as_tensor())
            write_pgm(out / e["composition"]["canvas"], s.composition.canvas)
            entries.append(e)
        manifest = {"config": asdict(self.config), "seed": self.seed, "count": len(entries),
                    "samples": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return out


def generate_dataset(cfg: DatasetConfig, seed: int = 0, out_dir=None) -> Dataset:
    ds = Dataset(cfg, seed, [make_sample(i, sample_seed(seed, i), cfg) for i in range(cfg.n)])
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def load_dataset(path) -> Dataset:
    """Rebuild samples from the manifest; images and UV maps come from the files."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = DatasetConfig(**manifest["config"])
    samples = []
    for e in manifest["samples"]:
        assets = [asset_from_spec(a) for a in e["composition"]["assets"]]
        comp = composition_from_placements(assets, e["composition"]["placements"],
                                           cfg.height, cfg.width)
        comp.phrase_links = {int(k): v for k, v in e["composition"]["phrase_links"].items()}
        samples.append(DatasetSample(
            e["id"], e["seed"], FigureParams.from_dict(e["figure"]),
            UVMap.from_tensor(read_tensor(root / e["uvmap"])), assets, comp,
            TextPrompt.from_dict(e["prompt"]), read_tensor(root / e["image"]["tensor"])))
    return Dataset(cfg, manifest["seed"], samples)
