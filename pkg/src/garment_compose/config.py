"""Run configuration shared by the CLI and the scripts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ParameterError

MODES = ("generation", "tryon", "album")
BINDING_NAMES = {"none": "none", "bind1": "bind1", "bind123": "bind123",
                 "convin": "convin", "convin_mask": "convin"}
CONSISTENCY_NAMES = ("independent", "cfa", "caa", "lca")


@dataclass
class RunConfig:
    mode: str = "generation"
    height: int = 64
    width: int = 48
    T: int = 100
    steps: int = 500  # training steps
    sample_steps: int | None = None  # reverse-chain length; None means T
    seed: int = 0
    binding: str = "bind123"
    consistency: str = "independent"
    n: int = 100  # dataset size
    n_eval: int = 8
    dims: tuple[int, ...] = (16, 24, 32)
    text_dim: int = 16
    lr: float = 3e-3
    batch_size: int = 16
    album_size: int = 4
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)  # ablation seeds
    variants: tuple[str, ...] = ("none", "bind1", "bind123", "convin")
    dataset: str | None = None
    checkpoint: str | None = None
    out: str = "out"

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.binding not in BINDING_NAMES:
            raise ParameterError(f"unknown binding {self.binding!r}")
        self.binding = BINDING_NAMES[self.binding]
        bad = [v for v in self.variants if v not in BINDING_NAMES]
        if bad:
            raise ParameterError(f"unknown ablation variants {bad}")
        self.variants = tuple(BINDING_NAMES[v] for v in self.variants)
        if self.consistency not in CONSISTENCY_NAMES:
            raise ParameterError(f"unknown consistency {self.consistency!r}")
        if self.height % 8 or self.width % 8:
            raise ParameterError(f"canvas {self.height}x{self.width} must be multiples of 8")
        for name in ("T", "batch_size", "album_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        for name in ("steps", "n", "n_eval", "seed"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.sample_steps is not None and not 0 <= self.sample_steps <= self.T:
            raise ParameterError(f"sample_steps {self.sample_steps} outside [0, {self.T}]")
        if self.mode == "album" and self.album_size < 1:
            raise ParameterError("album mode needs album_size >= 1")

    @property
    def canvas(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dims", "seeds", "variants"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ParameterError(f"unknown config keys {extra}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ParameterError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ParameterError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)
