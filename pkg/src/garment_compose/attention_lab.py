"""Attention variants over single-head key/value token sets.

Every kernel accepts plain arrays or tape `Var`s. With arrays in, arrays
come out; with any `Var` in, the result stays on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .asset_composer import TokenSelection
from .errors import BindingError, DimensionError
from .tensor_core import Var
from .toy_world import UVMap


def _var(x) -> Var:
    return x if isinstance(x, Var) else tc.const(np.asarray(x))


def _out(result: Var, *inputs):
    return result if any(isinstance(x, Var) for x in inputs) else result.value


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


@dataclass
class KVPair:
    keys: object  # ndarray or Var, [..., n, d]
    values: object
    block_id: int = 0

    def __post_init__(self):
        ks, vs = _val(self.keys).shape, _val(self.values).shape
        if ks[-2] != vs[-2]:
            raise DimensionError(f"keys {ks} and values {vs} differ in token count")

    @property
    def tokens(self) -> int:
        return _val(self.keys).shape[-2]

    @property
    def dim(self) -> int:
        return _val(self.keys).shape[-1]


@dataclass
class PhraseEmbedding:
    asset: int
    vector: object  # [c] or [..., c]


@dataclass
class BlockBindingMLP:
    """Two-layer perceptron c -> d -> d with a zero-initialised output layer."""

    block_id: int
    w1: object
    b1: object
    w2: object
    b2: object

    @classmethod
    def init(cls, block_id: int, c: int, d: int, rng: np.random.Generator,
             dtype=tc.DTYPE) -> "BlockBindingMLP":
        w1 = (rng.standard_normal((c, d)) / np.sqrt(c)).astype(dtype)
        return cls(block_id, w1, np.zeros(d, dtype), np.zeros((d, d), dtype), np.zeros(d, dtype))

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, p):
        h = tc.gelu(tc.add(tc.mm(_var(p), _var(self.w1)), _var(self.b1)))
        out = tc.add(tc.mm(h, _var(self.w2)), _var(self.b2))
        return _out(out, p, self.w1, self.b1, self.w2, self.b2)


# ---------------------------------------------------------------------------
# Feature injection


def feature_injection_attention(q_den, den: KVPair, ref: KVPair | None):
    """softmax(q [k_den, k_ref]ᵀ / √d) [v_den, v_ref]; plain self-attention if ref is None."""
    if ref is None:
        k, v = _var(den.keys), _var(den.values)
    else:
        if ref.block_id != den.block_id:
            raise DimensionError(f"reference block {ref.block_id} vs denoiser block {den.block_id}")
        if ref.dim != den.dim:
            raise DimensionError(f"reference token dim {ref.dim} vs denoiser {den.dim}")
        k = tc.concat([_var(den.keys), _var(ref.keys)], axis=-2)
        v = tc.concat([_var(den.values), _var(ref.values)], axis=-2)
    if _val(q_den).shape[-1] != den.dim:
        raise DimensionError(f"query dim {_val(q_den).shape[-1]} vs key dim {den.dim}")
    out = tc.attention(_var(q_den), k, v)
    extra = () if ref is None else (ref.keys, ref.values)
    return _out(out, q_den, den.keys, den.values, *extra)


# ---------------------------------------------------------------------------
# Subject binding


def assignment_matrix(selection: TokenSelection, assets: list[int], tokens: int,
                      dtype=tc.DTYPE) -> np.ndarray:
    """[tokens, len(assets)] one-hot map from token to the asset that owns it."""
    m = np.zeros((tokens, len(assets)), dtype=dtype)
    for col, a in enumerate(assets):
        m[selection.indices[a], col] = 1
    return m


def bind_with_assignment(kv: KVPair, assign, bias) -> KVPair:
    """k' = k + A·g and v' = v + A·g, where A maps tokens to assets."""
    shift = tc.mm(_var(assign), _var(bias))
    keys = tc.add(_var(kv.keys), shift)
    values = tc.add(_var(kv.values), shift)
    inputs = (kv.keys, kv.values, assign, bias)
    return KVPair(_out(keys, *inputs), _out(values, *inputs), kv.block_id)


def bind_tokens(kv: KVPair, selection: TokenSelection, phrases: list[PhraseEmbedding],
                mlp: BlockBindingMLP) -> KVPair:
    """Add MLP(phrase) to the key and value rows owned by each asset."""
    if not (selection.block_id == kv.block_id == mlp.block_id):
        raise DimensionError(
            f"block ids differ: selection {selection.block_id}, kv {kv.block_id}, mlp {mlp.block_id}")
    if selection.dims[0] * selection.dims[1] != kv.tokens:
        raise DimensionError(f"selection grid {selection.dims} vs {kv.tokens} tokens")
    by_asset = {p.asset: p for p in phrases}
    assets = selection.assets()
    missing = [a for a in assets if a not in by_asset]
    if missing:
        raise BindingError(f"no phrase for selected assets {missing}")
    if not assets:
        return kv
    pooled = [_var(by_asset[a].vector) for a in assets]
    stacked = tc.concat([tc.reshape(p, (1, -1)) for p in pooled], axis=0)
    bias = mlp(stacked if any(isinstance(by_asset[a].vector, Var) for a in assets) else stacked.value)
    assign = assignment_matrix(selection, assets, kv.tokens, _val(kv.keys).dtype)
    return bind_with_assignment(kv, assign, bias)


# ---------------------------------------------------------------------------
# Album substitution


def _check_album(album: list[KVPair]) -> None:
    if not album:
        raise DimensionError("album must hold at least one frame")
    first = album[0]
    for kv in album[1:]:
        if _val(kv.keys).shape != _val(first.keys).shape or kv.block_id != first.block_id:
            raise DimensionError(
                f"frame kv {_val(kv.keys).shape}@{kv.block_id} vs "
                f"{_val(first.keys).shape}@{first.block_id}")


def cross_frame_substitute(album: list[KVPair]) -> list[KVPair]:
    """Frames 2..N take frame 1's keys and values wholesale."""
    _check_album(album)
    first = album[0]
    return [first] + [KVPair(first.keys, first.values, kv.block_id) for kv in album[1:]]


def quantized_triples(uv: UVMap, quant: int) -> np.ndarray:
    """[n, 3] int (part, floor(u*q), floor(v*q)) per token; part 0 marks background."""
    pid = uv.part_id.ravel().astype(np.int64)
    qu = np.floor(uv.u.ravel().astype(np.float64) * quant).astype(np.int64)
    qv = np.floor(uv.v.ravel().astype(np.float64) * quant).astype(np.int64)
    return np.stack([pid, qu, qv], axis=1)


def correspondence_matches(first: UVMap, other: UVMap, quant: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of `other` with a matching frame-1 token, and that token's index.

    Collisions inside frame 1 resolve to the first token in row-major order.
    """
    if quant < 1:
        raise ValueError("quant must be >= 1")
    lookup: dict[tuple[int, int, int], int] = {}
    for i, t in enumerate(map(tuple, quantized_triples(first, quant).tolist())):
        if t[0] > 0 and t not in lookup:
            lookup[t] = i
    rows, src = [], []
    for j, t in enumerate(map(tuple, quantized_triples(other, quant).tolist())):
        if t[0] > 0 and t in lookup:
            rows.append(j)
            src.append(lookup[t])
    return np.asarray(rows, dtype=np.int64), np.asarray(src, dtype=np.int64)


def correspondence_substitute(album: list[KVPair], uvmaps: list[UVMap],
                              quant: int = 16) -> list[KVPair]:
    """Frames 2..N take frame 1's K/V rows only where quantized (part, u, v) match."""
    _check_album(album)
    if len(uvmaps) != len(album):
        raise DimensionError(f"{len(uvmaps)} UV grids for {len(album)} frames")
    for uv in uvmaps:
        if uv.part_id.size != album[0].tokens:
            raise DimensionError(f"UV grid {uv.part_id.shape} vs {album[0].tokens} tokens")
    first = album[0]
    out = [first]
    for kv, uv in zip(album[1:], uvmaps[1:]):
        rows, src = correspondence_matches(uvmaps[0], uv, quant)
        if rows.size == 0:
            out.append(kv)
            continue
        keys = tc.replace_rows(_var(kv.keys), rows, _var(first.keys), src)
        values = tc.replace_rows(_var(kv.values), rows, _var(first.values), src)
        inputs = (kv.keys, kv.values, first.keys, first.values)
        out.append(KVPair(_out(keys, *inputs), _out(values, *inputs), kv.block_id))
    return out
