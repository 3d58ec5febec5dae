"""Desk-scale DDPM: procedural edge->shape dataset, trainer, and sampler.

The dataset pairs a binary edge map (the condition) with the filled shape it
outlines (the target, valued in [-1, 1]). Training optimizes the standard
noise-prediction MSE. Which parameters move depends on the model: everything
for base pretraining, only the modal copies + adapter + identity projections
for the dual model, only the branch for the zero-convolution baseline -- the
trainer simply updates whatever is marked trainable, and the tape never emits
gradients for frozen tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import baseline_controlnet as bc
from . import nn_layers as nn
from . import unet
from .tensor_core import ContractError, ShapeError, Tensor
from .unet import ModelGraph, UNetConfig


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    image_size: int = 16
    channels: int = 1
    cond_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ContractError(f"timesteps must be >= 1, got {self.timesteps}")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ContractError(f"need 0 < beta_start < beta_end < 1, got "
                                f"[{self.beta_start}, {self.beta_end}]")


def betas(cfg: DiffusionConfig) -> np.ndarray:
    """Linear schedule beta_1..beta_T, strictly increasing in (0, 1)."""
    return np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps, dtype=np.float64)


def alpha_bars(cfg: DiffusionConfig) -> np.ndarray:
    """Cumulative products of (1 - beta_t); strictly decreasing in (0, 1)."""
    return np.cumprod(1.0 - betas(cfg))


# ---------------------------------------------------------------------------
# Synthetic conditioned dataset

SHAPE_KINDS = ("circle", "rectangle", "triangle")


@dataclass
class SyntheticSample:
    condition: Tensor            # [1,H,W] binary edge map
    target: Tensor               # [1,H,W] filled shape in [-1, 1]
    kind: str
    caption_id: int
    identity_id: int


def erode4(mask: np.ndarray) -> np.ndarray:
    """4-neighborhood binary erosion with a zero border."""
    p = np.pad(mask, 1)
    return mask & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~erode4(mask)


def rasterize_circle(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rasterize_rectangle(size: int, cy: float, cx: float, hy: float, hx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def rasterize_triangle(size: int, verts: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    signs = []
    for i in range(3):
        (y0, x0), (y1, x1) = verts[i], verts[(i + 1) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        signs.append(cross)
    area = (verts[1, 1] - verts[0, 1]) * (verts[2, 0] - verts[0, 0]) \
        - (verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1])
    orient = 1.0 if area >= 0 else -1.0
    for cross in signs:
        inside &= orient * cross >= 0
    return inside


def make_synthetic_pair(seed: int, size: int = 16) -> SyntheticSample:
    """Deterministic (seed -> sample) conditioned pair.

    The shape lies fully inside the frame and the condition is exactly the
    4-neighborhood boundary of the target's support.
    """
    if size < 8:
        raise ContractError(f"image size must be >= 8, got {size}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([9100, int(seed)])))
    kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
    rmax = size * 0.28
    if kind == "circle":
        r = rng.uniform(2.5, rmax)
        cy = rng.uniform(r + 1.5, size - 2.5 - r)
        cx = rng.uniform(r + 1.5, size - 2.5 - r)
        mask = rasterize_circle(size, cy, cx, r)
    elif kind == "rectangle":
        hy = rng.uniform(2.0, rmax)
        hx = rng.uniform(2.0, rmax)
        cy = rng.uniform(hy + 1.5, size - 2.5 - hy)
        cx = rng.uniform(hx + 1.5, size - 2.5 - hx)
        mask = rasterize_rectangle(size, cy, cx, hy, hx)
    else:
        while True:
            verts = rng.uniform(1.5, size - 2.5, size=(3, 2))
            area = 0.5 * abs(
                (verts[1, 1] - verts[0, 1]) * (verts[2, 0] - verts[0, 0])
                - (verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1]))
            sides = [np.linalg.norm(verts[i] - verts[(i + 1) % 3]) for i in range(3)]
            if area >= 0.05 * size * size and min(2 * area / s for s in sides) >= 2.5:
                break
        mask = rasterize_triangle(size, verts)
    edge = boundary(mask)
    target = np.where(mask, 1.0, -1.0)[None].astype(np.float32)
    condition = edge[None].astype(np.float32)
    cap = SHAPE_KINDS.index(kind) + 1  # caption 0 is reserved for "no caption"
    return SyntheticSample(condition=Tensor(condition), target=Tensor(target),
                           kind=kind, caption_id=cap, identity_id=cap)


def make_dataset(n: int, size: int, seed: int) -> list[SyntheticSample]:
    spawn = np.random.SeedSequence(int(seed)).generate_state(n)
    return [make_synthetic_pair(int(s), size) for s in spawn]


# ---------------------------------------------------------------------------
# Forward (noising) process


def ddpm_forward_noise(x0: Tensor, t: int, noise: Tensor, cfg: DiffusionConfig) -> Tensor:
    """q(x_t | x_0) sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not 1 <= t <= cfg.timesteps:
        raise ContractError(f"timestep {t} outside [1, {cfg.timesteps}]")
    if x0.shape != noise.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = alpha_bars(cfg)[t - 1]
    dt = x0.data.dtype
    out = np.asarray(np.sqrt(ab), dt) * x0.data + np.asarray(np.sqrt(1 - ab), dt) * noise.data
    return Tensor(out, dtype=x0.dtype)


def _noise_batch(x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                 abars: np.ndarray) -> np.ndarray:
    ab = abars[t - 1][:, None, None, None]
    dt = x0.dtype
    return np.sqrt(ab).astype(dt) * x0 + np.sqrt(1.0 - ab).astype(dt) * noise


# ---------------------------------------------------------------------------
# Optimizer and training loop


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor],
              grads: dict[str, Tensor]) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        gd = g.data
        m *= b1
        m += (1 - b1) * gd
        v *= b2
        v += (1 - b2) * gd * gd
        update = (state.lr * (m / bias1)) / (np.sqrt(v / bias2) + state.eps)
        p.data -= update.astype(p.data.dtype)


@dataclass
class TrainState:
    model: object                  # ModelGraph or ControlNetModel
    diffusion: DiffusionConfig
    adam: AdamState
    rng: np.random.Generator
    step: int = 0


def make_train_state(model, diffusion: DiffusionConfig, lr: float = 1e-3,
                     seed: int = 0) -> TrainState:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([551, seed])))
    return TrainState(model=model, diffusion=diffusion, adam=AdamState(lr=lr), rng=rng)


def _batch_arrays(batch, caption_override: int | None = None):
    x0 = np.stack([s.target.data for s in batch])
    cond = np.stack([s.condition.data for s in batch])
    caps = np.array([s.caption_id if caption_override is None else caption_override
                     for s in batch], dtype=np.int64)
    ids = np.array([s.identity_id if caption_override is None else caption_override
                    for s in batch], dtype=np.int64)
    return x0, cond, caps, ids


def predict_noise(model, x_t: Tensor, t, caption_ids, identity_ids,
                  condition: Tensor | None) -> Tensor:
    """Variant dispatch: conditioned dual/fused models route the condition
    through their adapter; the baseline routes it through its branch; a plain
    base model ignores it."""
    if isinstance(model, bc.ControlNetModel):
        if condition is None:
            raise ContractError("the zero-convolution baseline requires a condition")
        return bc.controlnet_forward(model, x_t, condition, t, caption_ids)
    cond = condition if model.adapter is not None else None
    return unet.model_forward(model, x_t, t, caption_ids, identity_ids, condition=cond)


def train_step(state: TrainState, batch, caption_override: int | None = None):
    """One noise-prediction MSE step over a batch of synthetic samples.

    Returns (state, loss). Only trainable parameters move; a non-finite loss
    aborts with a diagnostic rather than silently poisoning the run.
    """
    from . import tensor_core as tc

    x0, cond, caps, ids = _batch_arrays(batch, caption_override)
    cfg = state.diffusion
    dtype = x0.dtype
    t = state.rng.integers(1, cfg.timesteps + 1, size=len(batch))
    noise = state.rng.standard_normal(x0.shape).astype(dtype)
    x_t = _noise_batch(x0, t, noise, alpha_bars(cfg))
    with tc.GradTape() as tape:
        pred = predict_noise(state.model, Tensor(x_t), t, caps, ids, Tensor(cond))
        loss = tc.mse(pred, Tensor(noise))
    val = loss.item()
    if not np.isfinite(val):
        raise FloatingPointError(
            f"non-finite loss {val} at step {state.step} (t range "
            f"[{t.min()},{t.max()}]); check learning rate and initialization")
    grads = tc.backward(loss, tape)
    adam_step(state.adam, unet.trainable_params(state.model), grads)
    state.step += 1
    return state, val


def run_training(state: TrainState, dataset, steps: int, batch_size: int = 8,
                 caption_override: int | None = None,
                 log_every: int = 0) -> list[float]:
    losses = []
    n = len(dataset)
    for _ in range(steps):
        idx = state.rng.integers(0, n, size=batch_size)
        batch = [dataset[i] for i in idx]
        state, loss = train_step(state, batch, caption_override)
        losses.append(loss)
        if log_every and state.step % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"  step {state.step}: loss {recent:.4f}")
    return losses


def pretrain_base(unet_cfg: UNetConfig, diffusion: DiffusionConfig, steps: int,
                  data_n: int = 256, batch_size: int = 8, lr: float = 1e-3,
                  seed: int = 0, log_every: int = 0) -> ModelGraph:
    """Train the single-branch base unconditionally (targets only, null
    caption), then freeze it. 0 steps returns the frozen random init."""
    model = unet.build_base_model(unet_cfg, seed=seed)
    if steps > 0:
        dataset = make_dataset(data_n, unet_cfg.image_size, seed)
        state = make_train_state(model, diffusion, lr=lr, seed=seed)
        run_training(state, dataset, steps, batch_size, caption_override=0,
                     log_every=log_every)
    unet.set_model_trainable(model, False)
    return model


# ---------------------------------------------------------------------------
# Sampling


def _timestep_path(timesteps: int, steps: int) -> list[int]:
    ts = np.unique(np.round(np.linspace(timesteps, 1, steps)).astype(int))
    return list(ts[::-1])


def sample(model, condition: Tensor | None, steps: int, seed: int,
           diffusion: DiffusionConfig, n: int | None = None, caption_ids=None,
           identity_ids=None, clip_denoised: bool = True) -> Tensor:
    """Ancestral DDPM sampling (strided when steps < timesteps), deterministic
    given the seed; the final output is clamped to [-1, 1]."""
    if steps < 1:
        raise ContractError(f"sampling needs at least 1 step, got {steps}")
    cfg = diffusion
    if condition is not None:
        b = condition.shape[0]
    else:
        b = n if n is not None else 1
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([8800, seed])))
    abar = alpha_bars(cfg)
    x = rng.standard_normal((b, cfg.channels, cfg.image_size, cfg.image_size))
    path = _timestep_path(cfg.timesteps, steps)
    dtype = "float32"
    if isinstance(model, bc.ControlNetModel):
        dtype = model.base.config.dtype
    else:
        dtype = model.config.dtype
    for i, t in enumerate(path):
        s = path[i + 1] if i + 1 < len(path) else 0
        eps = predict_noise(model, Tensor(x, dtype=dtype), t, caption_ids,
                            identity_ids, condition).data.astype(np.float64)
        ab_t = abar[t - 1]
        ab_s = abar[s - 1] if s >= 1 else 1.0
        x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        if clip_denoised:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        if s == 0:
            x = x0_hat
        else:
            var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
            coef = np.sqrt(max(1.0 - ab_s - var, 0.0))
            z = rng.standard_normal(x.shape)
            x = np.sqrt(ab_s) * x0_hat + coef * eps + np.sqrt(var) * z
    return Tensor(np.clip(x, -1.0, 1.0), dtype=dtype)


# ---------------------------------------------------------------------------
# Evaluation helpers


def support_mask(img, thresh: float = 0.0) -> np.ndarray:
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    return data[0] > thresh if data.ndim == 3 else data > thresh


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def noise_prediction_mse(model, samples, diffusion: DiffusionConfig, seed: int,
                         repeats: int = 4) -> float:
    """Validation noise-prediction MSE on conditioned batches with frozen
    (t, noise) draws, comparable across models."""
    from . import tensor_core as tc

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([7023, seed])))
    x0, cond, caps, ids = _batch_arrays(samples)
    abars = alpha_bars(diffusion)
    total = 0.0
    for _ in range(repeats):
        t = rng.integers(1, diffusion.timesteps + 1, size=len(samples))
        noise = rng.standard_normal(x0.shape).astype(x0.dtype)
        x_t = _noise_batch(x0, t, noise, abars)
        pred = predict_noise(model, Tensor(x_t), t, caps, ids, Tensor(cond))
        total += tc.mse(pred, Tensor(noise)).item()
    return total / repeats
