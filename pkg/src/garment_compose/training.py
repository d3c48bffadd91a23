"""Training-set tensors, AdamW, the denoising loss, sampling and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .asset_composer import AssetComposition, downsample_mask, token_selection
from .attention_lab import KVPair
from .dataset import Dataset, DatasetSample
from .diffusion import (
    NoiseSchedule, TextEmbedder, assemble_conditioning, ddpm_step, decode_latent,
    encode_latent, forward_diffuse, from_model_space, make_schedule, to_model_space,
)
from .errors import DimensionError, ModeError, NumericError, ParameterError
from .networks import Batch, Forward, KVHook, NetConfig, init_params
from .toy_world import CATEGORIES, PART_CATEGORY, TextPrompt, UVMap

PAD_BIAS = -1e9


# ---------------------------------------------------------------------------
# Model container


@dataclass
class ComposerModel:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    T: int = 100
    text_seed: int = 0
    embedder: TextEmbedder = field(init=False)
    schedule: NoiseSchedule = field(init=False)

    def __post_init__(self):
        self.embedder = TextEmbedder(self.cfg.text_dim, self.text_seed)
        self.schedule = make_schedule(self.T)

    @classmethod
    def create(cls, cfg: NetConfig, seed: int = 0, T: int = 100) -> "ComposerModel":
        return cls(cfg, init_params(cfg, seed), T)

    def copy(self) -> "ComposerModel":
        return ComposerModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                             self.T, self.text_seed)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for name in sorted(self.params):
            fname = f"{name}.tensor"
            tc.write_tensor(out / fname, self.params[name])
            manifest[name] = {"file": fname, "shape": list(self.params[name].shape)}
        (out / "params.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        meta = {"net": self.cfg.to_dict(), "T": self.T, "text_seed": self.text_seed}
        (out / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "ComposerModel":
        root = Path(path)
        meta = json.loads((root / "model.json").read_text())
        manifest = json.loads((root / "params.json").read_text())
        params = {}
        for name, e in manifest.items():
            arr = tc.read_tensor(root / e["file"])
            if list(arr.shape) != e["shape"]:
                raise DimensionError(f"{name}: file shape {arr.shape} vs manifest {e['shape']}")
            params[name] = arr
        return cls(NetConfig.from_dict(meta["net"]), params, meta["T"], meta["text_seed"])


# ---------------------------------------------------------------------------
# Per-sample conditioning tensors


def tokens(x: np.ndarray) -> np.ndarray:
    """[C, h, w] -> [h*w, C]."""
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def garment_region(uv: UVMap, categories) -> np.ndarray:
    parts = [int(p) for p, c in PART_CATEGORY.items() if c in categories]
    return np.isin(uv.part_id, parts)


def tryon_aux(image: np.ndarray, uv: UVMap, categories) -> np.ndarray:
    """Cloth-agnostic latent (4 ch, model space) and its binary mask (1 ch)."""
    removed = garment_region(uv, categories)
    agnostic = image[..., 0].copy()
    agnostic[removed] = 0.5
    latent = to_model_space(encode_latent(agnostic))
    h, w = latent.shape[1:]
    mask = downsample_mask(removed, h, w, 0.5).astype(tc.DTYPE)[None]
    return np.concatenate([latent, mask], axis=0)


def generation_aux(uv: UVMap) -> np.ndarray:
    H, W = uv.part_id.shape
    return uv.resample(H // 2, W // 2).densepose()


@dataclass
class Conditioning:
    """Everything one sample contributes to a batch, as token arrays."""

    cond: np.ndarray  # [n1, aux]
    ref_x: np.ndarray  # [n1, ref_in]
    text: np.ndarray  # [s, c]
    phrases: np.ndarray  # [A, c]
    assign: dict[int, np.ndarray]  # level -> [n_l, A]


def build_conditioning(model: ComposerModel, uv: UVMap, composition: AssetComposition,
                       prompt: TextPrompt, aux: np.ndarray | None = None,
                       tryon_categories=("upper",), image=None) -> Conditioning:
    cfg = model.cfg
    if aux is None:
        if cfg.mode == "generation":
            aux = generation_aux(uv)
        else:
            if image is None:
                raise ModeError("try-on conditioning needs the person image")
            aux = tryon_aux(image, uv, tryon_categories)
    comp_latent = to_model_space(encode_latent(composition.canvas))
    zeros = np.zeros_like(comp_latent)
    cond = assemble_conditioning(cfg.mode, zeros, aux)[4:]
    ref_x = comp_latent
    if cfg.binding == "convin":
        h, w = cfg.latent_hw
        masks = composition.category_masks(CATEGORIES)
        cat = np.stack([downsample_mask(m > 0, h, w, 0.5) for m in masks]).astype(tc.DTYPE)
        ref_x = np.concatenate([ref_x, cat], axis=0)
    emb = model.embedder
    text = emb.embed(prompt)
    n_assets = len(composition.masks)
    phrases = np.zeros((n_assets, cfg.text_dim), dtype=tc.DTYPE)
    for a in range(n_assets):
        phrases[a] = emb.phrase(prompt, a)
    assign = {}
    sels = token_selection(composition, cfg.block_dims())
    for sel in sels:
        gh, gw = sel.dims
        m = np.zeros((gh * gw, n_assets), dtype=tc.DTYPE)
        for a, idx in sel.indices.items():
            m[idx, a] = 1
        assign[sel.block_id] = m
    return Conditioning(tokens(cond), tokens(ref_x), text, phrases, assign)


def collate(model: ComposerModel, conds: list[Conditioning], z_t: np.ndarray,
            t: np.ndarray, use_ref: bool = True) -> Batch:
    """Stack per-sample conditioning with noisy latent tokens [B, n1, 4]."""
    cfg = model.cfg
    B = len(conds)
    s = max(c.text.shape[0] for c in conds)
    A = max(c.phrases.shape[0] for c in conds)
    text = np.zeros((B, s + 1, cfg.text_dim), dtype=tc.DTYPE)
    bias = np.zeros((B, 1, s + 1), dtype=tc.DTYPE)
    phrases = np.zeros((B, max(A, 1), cfg.text_dim), dtype=tc.DTYPE)
    assign = {l: np.zeros((B, gh * gw, max(A, 1)), dtype=tc.DTYPE)
              for l, (gh, gw) in enumerate(cfg.block_dims(), start=1)}
    for i, c in enumerate(conds):
        k = c.text.shape[0]
        text[i, 1:k + 1] = c.text
        bias[i, 0, k + 1:] = PAD_BIAS
        a = c.phrases.shape[0]
        phrases[i, :a] = c.phrases
        for l in assign:
            assign[l][i, :, :a] = c.assign[l]
    x = np.concatenate([z_t, np.stack([c.cond for c in conds])], axis=-1)
    ref_x = np.stack([c.ref_x for c in conds]) if use_ref else None
    return Batch(x.astype(tc.DTYPE), np.asarray(t), text, bias, ref_x, assign, phrases)


@dataclass
class TrainingSet:
    z0: np.ndarray  # [N, n1, 4] model-space latents
    conds: list[Conditioning]

    def __len__(self) -> int:
        return len(self.conds)


def prepare(model: ComposerModel, data: Dataset | list[DatasetSample],
            tryon_categories=("upper",)) -> TrainingSet:
    samples = data.samples if isinstance(data, Dataset) else list(data)
    z0 = np.stack([tokens(to_model_space(encode_latent(s.image))) for s in samples])
    conds = [build_conditioning(model, s.uv, s.composition, s.prompt,
                                tryon_categories=tryon_categories, image=s.image)
             for s in samples]
    return TrainingSet(z0, conds)


# ---------------------------------------------------------------------------
# Loss and optimiser


def training_loss(model: ComposerModel, z0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  conds: list[Conditioning], grad: bool = True,
                  dtype=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error between eps and the prediction at z_t, plus gradients."""
    params = model.params
    if dtype is not None:
        params = {k: v.astype(dtype) for k, v in params.items()}
    ab = model.schedule.alpha_bars[np.asarray(t) - 1][:, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    batch = collate(model, conds, z_t.astype(z0.dtype), t)
    if dtype is not None:
        batch = batch.astype(dtype)
        eps = eps.astype(dtype)
    fwd = Forward(model.cfg, params, grad=grad)
    loss = tc.mse(fwd.predict(batch), eps)
    if not grad:
        return float(loss.value), {}
    loss.backward()
    return float(loss.value), {k: fwd.vars[k].grad for k in params}


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 1


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: dict[str, np.ndarray], cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1 - c.beta1 ** self.step_count
        bc2 = 1 - c.beta2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p -= (c.lr * (update + c.weight_decay * p)).astype(p.dtype)


def train(model: ComposerModel, data: TrainingSet, opt: OptimConfig, steps: int,
          seed: int = 0, log: Callable[[int, float], None] | None = None) -> list[float]:
    """Optimise `model.params` in place; returns the loss at every step."""
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    rng = np.random.default_rng([seed, 0x7A1])
    adam = AdamW(model.params, opt)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(data), size=opt.batch_size)
        t = rng.integers(1, model.T + 1, size=opt.batch_size)
        z0 = data.z0[idx]
        eps = rng.standard_normal(z0.shape).astype(tc.DTYPE)
        loss, grads = training_loss(model, z0, t, eps, [data.conds[i] for i in idx])
        if not math.isfinite(loss):
            bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
            raise NumericError(f"non-finite loss {loss} at step {step}; bad grads: {bad[:5]}")
        adam.step(model.params, grads)
        losses.append(loss)
        if log is not None:
            log(step, loss)
    return losses


# ---------------------------------------------------------------------------
# Sampling


def reference_taps(model: ComposerModel, conds: list[Conditioning]) -> dict[int, KVPair]:
    """Run the reference network once on the clean compositions."""
    n1 = conds[0].cond.shape[0]
    dummy = np.zeros((len(conds), n1, 4), dtype=tc.DTYPE)
    batch = collate(model, conds, dummy, np.zeros(len(conds), dtype=np.int64))
    return Forward(model.cfg, model.params).reference(batch)


def denoise_step(model: ComposerModel, z_t: np.ndarray, t: int, conds: list[Conditioning],
                 ref: dict[int, KVPair] | None, noise: np.ndarray | None,
                 kv_hook: KVHook | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predict eps at z_t [B, n1, 4] and take one ancestral step."""
    batch = collate(model, conds, z_t, np.full(len(conds), t), use_ref=False)
    eps_hat = Forward(model.cfg, model.params).denoise(batch, ref, kv_hook).value
    return eps_hat, ddpm_step(z_t, eps_hat, t, model.schedule, noise)


def latent_grid(z_tokens: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """[n1, 4] tokens -> [4, h, w]."""
    return np.ascontiguousarray(z_tokens.T.reshape(4, *hw))


def run_chain(model: ComposerModel, conds: list[Conditioning], seeds: list[int],
              steps: int | None = None, use_reference: bool = True,
              hook_factory: Callable[[int], KVHook | None] | None = None) -> np.ndarray:
    """Reverse chain from t = steps down to 1; returns final model-space tokens [B, n1, 4].

    Each batch row draws its initial noise and per-step noise from its own seed.
    """
    steps = model.T if steps is None else steps
    if not 0 <= steps <= model.T:
        raise ParameterError(f"steps {steps} outside [0, {model.T}]")
    n1 = conds[0].cond.shape[0]
    rngs = [np.random.default_rng([s, 0x5A3]) for s in seeds]
    z = np.stack([r.standard_normal((n1, 4)).astype(tc.DTYPE) for r in rngs])
    ref = reference_taps(model, conds) if use_reference else None
    for t in range(steps, 0, -1):
        noise = (np.stack([r.standard_normal((n1, 4)).astype(tc.DTYPE) for r in rngs])
                 if t > 1 else None)
        hook = hook_factory(t) if hook_factory is not None else None
        _, z = denoise_step(model, z, t, conds, ref, noise, hook)
    return z


def tokens_to_image(model: ComposerModel, z_tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Final model-space tokens -> (codec latent [4,h,w], clipped image [H,W,1])."""
    latent = from_model_space(latent_grid(z_tokens, model.cfg.latent_hw))
    return latent, np.clip(decode_latent(latent), 0.0, 1.0)


def sample(model: ComposerModel, composition: AssetComposition, prompt: TextPrompt,
           uv: UVMap, seed: int = 0, steps: int | None = None,
           image_for_tryon: np.ndarray | None = None) -> np.ndarray:
    """Generate one image [H, W, 1] dressed with `composition` on the figure `uv`."""
    cond = build_conditioning(model, uv, composition, prompt, image=image_for_tryon)
    z = run_chain(model, [cond], [seed], steps)
    return tokens_to_image(model, z[0])[1]


def sample_many(model: ComposerModel, samples: list[DatasetSample], seeds: list[int],
                steps: int | None = None) -> list[np.ndarray]:
    conds = [build_conditioning(model, s.uv, s.composition, s.prompt, image=s.image)
             for s in samples]
    z = run_chain(model, conds, seeds, steps)
    return [tokens_to_image(model, zi)[1] for zi in z]


def write_loss_csv(path, losses: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{l:.9g}" for i, l in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Gradient check of the full loss


GRADCHECK_SIZES = {
    # canvas, latent dims per level, text dim
    "small": ((16, 16), (4, 4), 4),
    "medium": ((16, 16), (8, 8), 8),
}


def loss_gradcheck(size: str = "small", seed: int = 0, binding: str = "bind123",
                   eps: float = 1e-3, tol: float = 1e-4, probes: int = 2) -> tc.GradReport:
    """Central differences on the training loss through the reference net,
    binding, injected self-attention and text cross-attention, in float64.

    Layer norm gets a wide epsilon here: over 4-wide tokens the default one
    makes the loss curved enough that eps = 1e-3 differences carry ~1e-4
    truncation error regardless of the backward rules.
    """
    if size not in GRADCHECK_SIZES:
        raise ParameterError(f"unknown gradcheck size {size!r}")
    (H, W), dims, c = GRADCHECK_SIZES[size]
    cfg = NetConfig(latent_hw=(H // 2, W // 2), dims=dims, text_dim=c, time_dim=4,
                    pos_dim=4, binding=binding, norm_eps=0.1)
    from .dataset import DatasetConfig, generate_dataset

    model = ComposerModel.create(cfg, seed)
    rng = np.random.default_rng([seed, 0x6C])
    params = {}
    for k in sorted(model.params):
        v = model.params[k].astype(np.float64)
        if not v.any():  # zero-initialised groups would have degenerate gradients
            v = v + 0.1 * rng.standard_normal(v.shape)
        params[k] = v
    model.params = params
    data = prepare(model, generate_dataset(DatasetConfig(n=2, height=H, width=W), seed))
    t = np.array([3, 7])
    noise = rng.standard_normal(data.z0.shape)
    _, grads = training_loss(model, data.z0, t, noise, data.conds, dtype=np.float64)
    f = lambda: training_loss(model, data.z0, t, noise, data.conds, grad=False, dtype=np.float64)[0]
    return tc.finite_diff_gradcheck(f, model.params, grads, eps=eps, tol=tol, probes=probes,
                                    select="largest")
