"""Multi-resolution denoiser and reference network on the tape.

Tokens are channels-last, [B, h*w, C], flattened row-major. Level 1 is the
full latent grid; each further level halves both sides. Parameters live in
one flat dict of arrays so they can be cast, saved and perturbed freely.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .attention_lab import KVPair, bind_with_assignment, feature_injection_attention
from .errors import ModeError, ParameterError
from .tensor_core import Var

CONV_IN = {"generation": 6, "tryon": 9}
BINDINGS = ("none", "bind1", "bind123", "convin")


@dataclass
class NetConfig:
    mode: str = "generation"
    latent_hw: tuple[int, int] = (32, 24)
    dims: tuple[int, ...] = (16, 24, 32)
    text_dim: int = 16
    time_dim: int = 32
    pos_dim: int = 8
    ff_mult: int = 2
    binding: str = "bind123"
    mask_channels: int = 4  # category masks fed to the reference conv-in for "convin"
    norm_eps: float = 1e-5  # the gradient check raises this to smooth 4-wide layer norms

    def __post_init__(self):
        self.latent_hw = tuple(self.latent_hw)
        self.dims = tuple(self.dims)
        if self.mode not in CONV_IN:
            raise ModeError(f"unknown mode {self.mode!r}")
        if self.binding not in BINDINGS:
            raise ParameterError(f"unknown binding {self.binding!r}")
        h, w = self.latent_hw
        f = 2 ** (self.levels - 1)
        if h % f or w % f:
            raise ParameterError(f"latent {h}x{w} does not halve {self.levels - 1} times")

    @property
    def levels(self) -> int:
        return len(self.dims)

    @property
    def in_channels(self) -> int:
        return CONV_IN[self.mode]

    @property
    def ref_in_channels(self) -> int:
        return 4 + (self.mask_channels if self.binding == "convin" else 0)

    def grid(self, level: int) -> tuple[int, int]:
        h, w = self.latent_hw
        f = 2 ** (level - 1)
        return h // f, w // f

    def block_dims(self) -> list[tuple[int, int]]:
        return [self.grid(l) for l in range(1, self.levels + 1)]

    def bound_levels(self) -> tuple[int, ...]:
        """Levels whose reference K/V get subject binding; the last is the smallest grid."""
        if self.binding == "bind123":
            return tuple(range(1, self.levels + 1))
        if self.binding == "bind1":
            return (self.levels,)
        return ()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameters


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    d, c, L = cfg.dims, cfg.text_dim, cfg.levels
    shapes: dict[str, tuple[int, ...]] = {
        "time.w1": (cfg.time_dim, cfg.time_dim), "time.b1": (cfg.time_dim,),
        "den.conv_in.w": (9 * cfg.in_channels, d[0]), "den.conv_in.b": (d[0],),
        "den.pos.w": (cfg.pos_dim, d[0]),
        "den.conv_out.w": (9 * (d[0] + cfg.in_channels), 4), "den.conv_out.b": (4,),
        "den.head.film.w": (cfg.time_dim, 2 * d[0]), "den.head.film.b": (2 * d[0],),
        "ref.conv_in.w": (9 * cfg.ref_in_channels, d[0]), "ref.conv_in.b": (d[0],),
    }
    for net in ("den", "ref"):
        for l in range(1, L + 1):
            p, dl = f"{net}.L{l}", d[l - 1]
            if l > 1:
                shapes[f"{p}.down.w"] = (d[l - 2], dl)
                shapes[f"{p}.down.b"] = (dl,)
            if net == "den":
                shapes[f"{p}.time.w"] = (cfg.time_dim, dl)
                shapes[f"{p}.time.b"] = (dl,)
                shapes[f"{p}.film.w"] = (cfg.time_dim, 2 * dl)
                shapes[f"{p}.film.b"] = (2 * dl,)
            for k in ("q", "k", "v", "o"):
                shapes[f"{p}.sa.{k}"] = (dl, dl)
            if net == "ref" and l == L:
                continue  # only the K/V taps of the last reference level are used
            shapes[f"{p}.ca.q"] = (dl, dl)
            shapes[f"{p}.ca.k"] = (c, dl)
            shapes[f"{p}.ca.v"] = (c, dl)
            shapes[f"{p}.ca.o"] = (dl, dl)
            shapes[f"{p}.ff.w1"] = (dl, cfg.ff_mult * dl)
            shapes[f"{p}.ff.b1"] = (cfg.ff_mult * dl,)
            shapes[f"{p}.ff.w2"] = (cfg.ff_mult * dl, dl)
            shapes[f"{p}.ff.b2"] = (dl,)
    # ref only needs sa.q/sa.o where its attention output feeds a later level
    shapes.pop(f"ref.L{L}.sa.q")
    shapes.pop(f"ref.L{L}.sa.o")
    for l in range(1, L):
        shapes[f"den.up{l}.w"] = (d[l] + d[l - 1], d[l - 1])
        shapes[f"den.up{l}.b"] = (d[l - 1],)
    for l in cfg.bound_levels():
        dl = d[l - 1]
        shapes[f"bind.L{l}.w1"] = (c, dl)
        shapes[f"bind.L{l}.b1"] = (dl,)
        shapes[f"bind.L{l}.w2"] = (dl, dl)
        shapes[f"bind.L{l}.b2"] = (dl,)
    return shapes


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Each tensor draws from its own (seed, name) stream, so adding or
    removing parameter groups leaves the others untouched."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        leafname = name.rsplit(".", 1)[1]
        if len(shape) == 1 or name.startswith("bind.") and leafname in ("w2", "b2"):
            out[name] = np.zeros(shape, dtype=tc.DTYPE)
            continue
        gain = 1.0
        if name.startswith("den.conv_out"):
            gain = 0.1
        elif name.endswith("film.w"):
            gain = 0.1
        elif leafname in ("o", "w2") or name.endswith("time.w"):
            gain = 0.5
        w = _param_rng(seed, name).standard_normal(shape) * (gain / math.sqrt(shape[0]))
        out[name] = w.astype(tc.DTYPE)
    return out


# ---------------------------------------------------------------------------
# Fixed spatial operators


@lru_cache(maxsize=None)
def _conv_index(h: int, w: int) -> np.ndarray:
    """[h*w, 9] source token per 3x3 tap; h*w points at a zero pad row."""
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cols = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = r + dr, c + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            cols.append(np.where(ok, rr * w + cc, h * w).ravel())
    return np.stack(cols, axis=1)


@lru_cache(maxsize=None)
def _pool_matrix(h: int, w: int, dtype) -> np.ndarray:
    """[(h/2)(w/2), h*w] 2x2 average pooling."""
    m = np.zeros((h // 2 * (w // 2), h * w), dtype=dtype)
    for r in range(h):
        for c in range(w):
            m[(r // 2) * (w // 2) + c // 2, r * w + c] = 0.25
    return m


@lru_cache(maxsize=None)
def _upsample_matrix(h: int, w: int, dtype) -> np.ndarray:
    """[h*w, (h/2)(w/2)] nearest upsampling back to an h x w grid."""
    return np.ascontiguousarray((_pool_matrix(h, w, dtype) * 4).T)


@lru_cache(maxsize=None)
def positional_encoding(h: int, w: int, dim: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    feats = []
    for k in range(dim // 4):
        f = math.pi * 2 ** k
        feats += [np.sin(f * r), np.cos(f * r), np.sin(f * c), np.cos(f * c)]
    return np.stack(feats, axis=-1).reshape(h * w, -1)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    a = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(a), np.cos(a)], axis=1)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class Batch:
    """Numpy inputs for one forward pass; B is the leading axis everywhere.

    `ref_x` is None when the reference network is skipped.
    """

    x: np.ndarray  # [B, n1, in_channels]
    t: np.ndarray  # [B]
    text: np.ndarray  # [B, s + 1, c]; row 0 is the null token
    text_bias: np.ndarray  # [B, 1, s + 1]; -inf-like on padding
    ref_x: np.ndarray | None = None  # [B, n1, ref_in_channels]
    assign: dict[int, np.ndarray] = field(default_factory=dict)  # level -> [B, n_l, A]
    phrases: np.ndarray | None = None  # [B, A, c]

    def astype(self, dtype) -> "Batch":
        cast = lambda a: None if a is None else a.astype(dtype)
        return Batch(cast(self.x), self.t, cast(self.text), cast(self.text_bias),
                     cast(self.ref_x), {k: cast(v) for k, v in self.assign.items()},
                     cast(self.phrases))


KVHook = Callable[[int, KVPair], KVPair]


class Forward:
    """One tape-building pass over a parameter dict."""

    def __init__(self, cfg: NetConfig, params: dict[str, np.ndarray], grad: bool = False):
        self.cfg = cfg
        self.raw = params
        self.vars = {k: (tc.leaf(v) if grad else tc.const(v)) for k, v in params.items()}
        self.dtype = next(iter(params.values())).dtype

    def p(self, name: str) -> Var:
        return self.vars[name]

    def linear(self, x: Var, w: str, b: str | None = None) -> Var:
        y = tc.mm(x, self.p(w))
        return tc.add(y, self.p(b)) if b else y

    def conv3x3(self, x: Var, level_hw: tuple[int, int], prefix: str) -> Var:
        h, w = level_hw
        B, n, C = x.value.shape
        pad = tc.concat([x, tc.const(np.zeros((B, 1, C), dtype=x.value.dtype))], axis=1)
        cols = tc.take(pad, _conv_index(h, w), axis=1)  # [B, n, 9, C]
        return self.linear(tc.reshape(cols, (B, n, 9 * C)), f"{prefix}.w", f"{prefix}.b")

    def norm(self, h: Var) -> Var:
        return tc.layer_norm(h, self.cfg.norm_eps)

    def cross_attention(self, h: Var, prefix: str, text: Var, bias: np.ndarray) -> Var:
        x = self.norm(h)
        q = self.linear(x, f"{prefix}.ca.q")
        k = self.linear(text, f"{prefix}.ca.k")
        v = self.linear(text, f"{prefix}.ca.v")
        d = q.value.shape[-1]
        s = tc.add(tc.scale(tc.mm(q, tc.transpose(k)), 1.0 / math.sqrt(d)), tc.const(bias))
        return tc.add(h, self.linear(tc.mm(tc.softmax(s), v), f"{prefix}.ca.o"))

    def film(self, x: Var, temb: Var, prefix: str) -> Var:
        """x * (1 + scale(t)) + shift(t), per channel."""
        ss = self.linear(temb, f"{prefix}.w", f"{prefix}.b")
        B, two_d = ss.value.shape
        d = two_d // 2
        ss = tc.reshape(ss, (B, 1, two_d))
        scale = tc.take(ss, np.arange(d), axis=2)
        shift = tc.take(ss, np.arange(d, two_d), axis=2)
        return tc.add(tc.add(x, tc.mul(x, scale)), shift)

    def feed_forward(self, h: Var, prefix: str, temb: Var | None = None) -> Var:
        x = self.norm(h)
        if temb is not None:
            x = self.film(x, temb, f"{prefix}.film")
        y = tc.gelu(self.linear(x, f"{prefix}.ff.w1", f"{prefix}.ff.b1"))
        return tc.add(h, self.linear(y, f"{prefix}.ff.w2", f"{prefix}.ff.b2"))

    def self_kv(self, h: Var, prefix: str, level: int) -> tuple[Var, KVPair]:
        x = self.norm(h)
        kv = KVPair(self.linear(x, f"{prefix}.sa.k"), self.linear(x, f"{prefix}.sa.v"), level)
        return x, kv

    # -- reference network -------------------------------------------------

    def reference(self, batch: Batch) -> dict[int, KVPair]:
        """Per-level (bound) self-attention K/V of the reference network at t = 0."""
        cfg = self.cfg
        text = tc.const(batch.text)
        h = self.conv3x3(tc.const(batch.ref_x), cfg.grid(1), "ref.conv_in")
        taps: dict[int, KVPair] = {}
        bound = cfg.bound_levels()
        for l in range(1, cfg.levels + 1):
            p = f"ref.L{l}"
            if l > 1:
                gh, gw = cfg.grid(l - 1)
                h = tc.mm(tc.const(_pool_matrix(gh, gw, self.dtype)), h)
                h = self.linear(h, f"{p}.down.w", f"{p}.down.b")
            x, kv = self.self_kv(h, p, l)
            if l in bound:
                g = self.binding_mlp(l, tc.const(batch.phrases))
                kv = bind_with_assignment(kv, tc.const(batch.assign[l]), g)
            taps[l] = kv
            if l == cfg.levels:
                break
            q = self.linear(x, f"{p}.sa.q")
            h = tc.add(h, self.linear(tc.attention(q, kv.keys, kv.values), f"{p}.sa.o"))
            h = self.cross_attention(h, p, text, batch.text_bias)
            h = self.feed_forward(h, p)
        return taps

    def binding_mlp(self, level: int, phrases: Var) -> Var:
        p = f"bind.L{level}"
        hid = tc.gelu(self.linear(phrases, f"{p}.w1", f"{p}.b1"))
        return self.linear(hid, f"{p}.w2", f"{p}.b2")

    # -- denoiser ----------------------------------------------------------

    def denoise(self, batch: Batch, ref: dict[int, KVPair] | None,
                kv_hook: KVHook | None = None) -> Var:
        """Predicted noise, [B, n1, 4]."""
        cfg = self.cfg
        if batch.x.shape[-1] != cfg.in_channels:
            raise ModeError(f"{cfg.mode} denoiser expects {cfg.in_channels} input channels, "
                            f"got {batch.x.shape[-1]}")
        text = tc.const(batch.text)
        temb = tc.const(timestep_embedding(batch.t, cfg.time_dim).astype(self.dtype))
        temb = tc.gelu(self.linear(temb, "time.w1", "time.b1"))
        h1, w1 = cfg.grid(1)
        h = self.conv3x3(tc.const(batch.x), (h1, w1), "den.conv_in")
        pos = positional_encoding(h1, w1, cfg.pos_dim).astype(self.dtype)
        h = tc.add(h, tc.mm(tc.const(pos), self.p("den.pos.w")))
        skips = []
        for l in range(1, cfg.levels + 1):
            p = f"den.L{l}"
            if l > 1:
                gh, gw = cfg.grid(l - 1)
                h = tc.mm(tc.const(_pool_matrix(gh, gw, self.dtype)), h)
                h = self.linear(h, f"{p}.down.w", f"{p}.down.b")
            tproj = self.linear(temb, f"{p}.time.w", f"{p}.time.b")
            B, dl = tproj.value.shape
            h = tc.add(h, tc.reshape(tproj, (B, 1, dl)))
            x, kv = self.self_kv(h, p, l)
            if kv_hook is not None:
                kv = kv_hook(l, kv)
            q = self.linear(x, f"{p}.sa.q")
            a = feature_injection_attention(q, kv, None if ref is None else ref.get(l))
            h = tc.add(h, self.linear(a, f"{p}.sa.o"))
            h = self.cross_attention(h, p, text, batch.text_bias)
            h = self.feed_forward(h, p, temb)
            skips.append(h)
        for l in range(cfg.levels - 1, 0, -1):
            gh, gw = cfg.grid(l)
            up = tc.mm(tc.const(_upsample_matrix(gh, gw, self.dtype)), h)
            h = tc.gelu(self.linear(tc.concat([up, skips[l - 1]], axis=-1),
                                    f"den.up{l}.w", f"den.up{l}.b"))
        h = tc.gelu(self.film(self.norm(h), temb, "den.head.film"))
        h = tc.concat([h, tc.const(batch.x)], axis=-1)
        return self.conv3x3(h, (h1, w1), "den.conv_out")

    def predict(self, batch: Batch, kv_hook: KVHook | None = None) -> Var:
        ref = self.reference(batch) if batch.ref_x is not None else None
        return self.denoise(batch, ref, kv_hook)
