"""The toy denoising U-Net: a named registry of layers plus its forward pass.

Two resolutions (image_size -> image_size/2), channels C and 2C, one middle
stack with self-attention and dual-context cross-attention, skip connections
from every encoder tap consumed by concatenation in the decoder. Small enough
for minute-scale CPU runs while exercising every layer kind the modal-copy
mechanism has to handle.

Variants share this structure:
  base  - single-branch, trainable while pretraining, then frozen;
  dual  - every conv/linear replaced by a frozen original + trainable modal
          copy, plus a condition adapter and identity-context projections;
  fused - single-branch again after weight fusion, adapter and identity
          projections carried over.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from . import nn_layers as nn
from . import tensor_core as tc
from .nn_layers import (AdapterParams, Conv2dParams, CrossAttentionParams,
                        DualBranchLayer, LinearParams, NormParams,
                        SelfAttentionParams)
from .tensor_core import ContractError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 16
    in_channels: int = 1
    cond_channels: int = 1
    base_channels: int = 16
    norm_groups: int = 8
    heads: int = 4
    ctx_dim: int = 32
    ctx_tokens: int = 4
    id_tokens: int = 4
    num_captions: int = 4
    time_dim: int = 32
    adapter_hidden: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 2:
            raise ContractError(f"image_size must be even and >= 8, got {self.image_size}")
        for c in (self.base_channels, 2 * self.base_channels):
            if c % self.norm_groups:
                raise ContractError(f"norm_groups {self.norm_groups} must divide {c}")
        if (2 * self.base_channels) % self.heads or self.time_dim % 2:
            raise ContractError("heads must divide 2*base_channels and time_dim must be even")

    @property
    def temb_dim(self) -> int:
        return 2 * self.time_dim


@dataclass
class ResBlock:
    norm1: NormParams
    conv1: "Conv2dParams | DualBranchLayer"
    time_proj: "LinearParams | DualBranchLayer"
    norm2: NormParams
    conv2: "Conv2dParams | DualBranchLayer"
    skip: "Conv2dParams | DualBranchLayer | None" = None


@dataclass
class ModelGraph:
    """Named registry of the U-Net's layers. Field order is the registry
    order; parameter names are the dataclass paths (e.g. enc1.conv1.kernel,
    or enc1.conv1.modal.kernel once dualized)."""
    config: UNetConfig
    variant: str                    # "base" | "dual" | "fused"
    time_in: "LinearParams | DualBranchLayer"
    time_out: "LinearParams | DualBranchLayer"
    captions: Tensor                # [num_captions, ctx_tokens, ctx_dim]
    conv_in: "Conv2dParams | DualBranchLayer"
    enc1: ResBlock
    down: "Conv2dParams | DualBranchLayer"
    enc2: ResBlock
    mid1: ResBlock
    mid_attn: SelfAttentionParams
    mid_cross: CrossAttentionParams
    mid2: ResBlock
    dec1: ResBlock
    dec2: ResBlock
    up: "Conv2dParams | DualBranchLayer"
    dec3: ResBlock
    dec4: ResBlock
    norm_out: NormParams
    conv_out: "Conv2dParams | DualBranchLayer"
    adapter: AdapterParams | None = None

    @property
    def has_identity_path(self) -> bool:
        return self.mid_cross.k_id is not None


# ---------------------------------------------------------------------------
# Construction


def _make_resblock(rng, cin: int, cout: int, cfg: UNetConfig) -> ResBlock:
    dt = cfg.dtype
    return ResBlock(
        norm1=nn.make_norm(cin, cfg.norm_groups, dtype=dt),
        conv1=nn.make_conv(rng, cin, cout, 3, padding=1, dtype=dt),
        time_proj=nn.make_linear(rng, cfg.temb_dim, cout, dtype=dt),
        norm2=nn.make_norm(cout, cfg.norm_groups, dtype=dt),
        conv2=nn.make_conv(rng, cout, cout, 3, padding=1, dtype=dt),
        skip=None if cin == cout else nn.make_conv(rng, cin, cout, 1, dtype=dt))


def build_base_model(cfg: UNetConfig, seed: int = 0, zero_out: bool = True) -> ModelGraph:
    """Randomly initialized single-branch model, everything trainable.

    zero_out zero-initializes the final conv (helps training start); random
    test models pass zero_out=False so outputs are non-degenerate at init.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([20260, seed])))
    dt = cfg.dtype
    c1, c2 = cfg.base_channels, 2 * cfg.base_channels
    conv_out = nn.make_conv(rng, c1, cfg.in_channels, 3, padding=1, dtype=dt)
    if zero_out:
        conv_out.kernel.data[:] = 0.0
    model = ModelGraph(
        config=cfg,
        variant="base",
        time_in=nn.make_linear(rng, cfg.time_dim, cfg.temb_dim, dtype=dt),
        time_out=nn.make_linear(rng, cfg.temb_dim, cfg.temb_dim, dtype=dt),
        captions=tc.normal(rng, (cfg.num_captions, cfg.ctx_tokens, cfg.ctx_dim),
                           dtype=dt, trainable=True),
        conv_in=nn.make_conv(rng, cfg.in_channels, c1, 3, padding=1, dtype=dt),
        enc1=_make_resblock(rng, c1, c1, cfg),
        down=nn.make_conv(rng, c1, c2, 3, stride=2, padding=1, dtype=dt),
        enc2=_make_resblock(rng, c2, c2, cfg),
        mid1=_make_resblock(rng, c2, c2, cfg),
        mid_attn=nn.make_self_attention(rng, c2, cfg.heads, cfg.norm_groups, dtype=dt),
        mid_cross=nn.make_cross_attention(rng, c2, cfg.ctx_dim, cfg.heads,
                                          cfg.norm_groups, dtype=dt),
        mid2=_make_resblock(rng, c2, c2, cfg),
        dec1=_make_resblock(rng, 2 * c2, c2, cfg),
        dec2=_make_resblock(rng, 2 * c2, c2, cfg),
        up=nn.make_conv(rng, c2, c1, 3, padding=1, dtype=dt),
        dec3=_make_resblock(rng, 2 * c1, c1, cfg),
        dec4=_make_resblock(rng, 2 * c1, c1, cfg),
        norm_out=nn.make_norm(c1, cfg.norm_groups, dtype=dt),
        conv_out=conv_out)
    label_tensors(model)
    return model


# ---------------------------------------------------------------------------
# Registry walkers


_LAYER_TYPES = (LinearParams, Conv2dParams, DualBranchLayer)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Depth-first walk of a model structure yielding (path, tensor)."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_tensors(v, f"{prefix}.{i}")
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is None or isinstance(v, (int, float, str, bool)):
                continue
            yield from named_tensors(v, f"{prefix}.{f.name}" if prefix else f.name)


def label_tensors(model) -> None:
    """Assign each tensor its registry path as its name (gradients and
    checkpoints are keyed by these)."""
    for name, t in named_tensors(model):
        t.name = name


def named_params(model) -> list[tuple[str, Tensor]]:
    return list(named_tensors(model))


def trainable_params(model) -> dict[str, Tensor]:
    return {name: t for name, t in named_tensors(model) if t.trainable}


def set_model_trainable(model, flag: bool) -> None:
    for _, t in named_tensors(model):
        t.trainable = flag


def snapshot(model) -> dict[str, np.ndarray]:
    """Bitwise copy of every parameter buffer, for freeze-contract checks."""
    return {name: t.data.copy() for name, t in named_tensors(model)}


def map_layers(obj, layer_fn: Callable, tensor_fn: Callable[[Tensor], Tensor],
               prefix: str = ""):
    """Rebuild a model structure, applying layer_fn(layer, path) to each
    conv/linear (or dual pair) and tensor_fn to every loose tensor."""
    if isinstance(obj, _LAYER_TYPES):
        return layer_fn(obj, prefix)
    if isinstance(obj, Tensor):
        return tensor_fn(obj)
    if isinstance(obj, list):
        return [map_layers(v, layer_fn, tensor_fn, f"{prefix}.{i}")
                for i, v in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_layers(v, layer_fn, tensor_fn, f"{prefix}.{i}")
                     for i, v in enumerate(obj))
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if isinstance(obj, UNetConfig):
            return obj
        kw = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is None or isinstance(v, (int, float, str, bool)):
                kw[f.name] = v
            else:
                kw[f.name] = map_layers(v, layer_fn, tensor_fn,
                                        f"{prefix}.{f.name}" if prefix else f.name)
        return replace(obj, **kw)
    return obj


def copy_model(model):
    """Deep copy (fresh buffers, same values and flags)."""
    out = map_layers(model, lambda l, _name: _copy_layer(l), lambda t: t.copy())
    label_tensors(out)
    return out


def _copy_layer(layer):
    if isinstance(layer, DualBranchLayer):
        return DualBranchLayer(_copy_layer(layer.original), _copy_layer(layer.modal))
    if isinstance(layer, LinearParams):
        return LinearParams(layer.weight.copy(),
                            None if layer.bias is None else layer.bias.copy())
    return Conv2dParams(layer.kernel.copy(),
                        None if layer.bias is None else layer.bias.copy(),
                        stride=layer.stride, padding=layer.padding)


def _frozen_copy_layer(layer):
    out = _copy_layer(layer)
    out.set_trainable(False)
    return out


def _frozen_copy_tensor(t: Tensor) -> Tensor:
    out = t.copy()
    out.trainable = False
    return out


def count_dual_layers(model) -> int:
    seen = {name.rsplit(".modal.", 1)[0]
            for name, _ in named_tensors(model) if ".modal." in name}
    return len(seen)


def make_dual_model(base: ModelGraph, w: float, scale_bias: bool = True,
                    seed: int = 0) -> ModelGraph:
    """Training-time model: every conv/linear of the (frozen) base paired with
    a trainable modal copy initialized at w times the original, plus a fresh
    condition adapter and identity-context attention projections."""
    if base.variant != "base":
        raise ContractError(f"can only dualize a base model, got variant {base.variant!r}")

    def dualize(layer, name):
        if isinstance(layer, DualBranchLayer):
            raise ContractError(f"layer {name} already has a modal branch")
        return nn.make_dual(_copy_layer(layer), w, scale_bias)

    model: ModelGraph = map_layers(base, dualize, _frozen_copy_tensor)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([31337, seed])))
    cfg = base.config
    model.adapter = nn.make_adapter(rng, cfg.cond_channels, cfg.adapter_hidden,
                                    cfg.in_channels, dtype=cfg.dtype)
    nn.add_identity_path(model.mid_cross, rng, cfg.ctx_dim, dtype=cfg.dtype)
    model.variant = "dual"
    label_tensors(model)
    return model


# ---------------------------------------------------------------------------
# Forward


def sinusoidal_embedding(t, dim: int, dtype: str) -> Tensor:
    """Standard sin/cos timestep features, [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(args), np.cos(args)], axis=1), dtype=dtype)


def _resblock_forward(rb: ResBlock, x: Tensor, temb: Tensor) -> Tensor:
    h = nn.apply_conv(rb.conv1, tc.silu(nn.norm_forward(rb.norm1, x)))
    tp = nn.apply_linear(rb.time_proj, temb)
    h = tc.add(h, tc.reshape(tp, (tp.shape[0], tp.shape[1], 1, 1)))
    h = nn.apply_conv(rb.conv2, tc.silu(nn.norm_forward(rb.norm2, h)))
    sk = x if rb.skip is None else nn.apply_conv(rb.skip, x)
    return tc.add(sk, h)


def _as_id_array(v, batch: int, what: str) -> np.ndarray:
    if v is None:
        return np.zeros(batch, dtype=np.int64)
    arr = np.atleast_1d(np.asarray(v, dtype=np.int64))
    if arr.shape == (1,) and batch > 1:
        arr = np.repeat(arr, batch)
    if arr.shape != (batch,):
        raise ContractError(f"{what} must have one entry per batch item, "
                            f"got {arr.shape} for batch {batch}")
    return arr


def time_embedding(model: ModelGraph, t, batch: int) -> Tensor:
    t_arr = _as_id_array(t, batch, "timesteps")
    emb = sinusoidal_embedding(t_arr, model.config.time_dim, model.config.dtype)
    return nn.apply_linear(model.time_out, tc.silu(nn.apply_linear(model.time_in, emb)))


def _add_residual(x: Tensor, control: dict | None, key: str) -> Tensor:
    if control is None or key not in control:
        return x
    return tc.add(x, control[key])


def model_forward(model: ModelGraph, x: Tensor, t, caption_ids=None,
                  identity_ids=None, condition: Tensor | None = None,
                  control: dict | None = None) -> Tensor:
    """Noise prediction for a batch of latents x [B,C,H,W] at timesteps t.

    condition: optional condition image routed through the adapter and added
    to the tensor entering the first convolution (the only injection site).
    control: optional per-tap residuals (keys h0..h3, mid) added onto the
    skip/mid features, used by the zero-convolution baseline branch.
    """
    b = x.shape[0]
    if condition is not None:
        if model.adapter is None:
            raise ContractError("condition image given but model has no adapter")
        x = tc.add(x, nn.adapter_forward(model.adapter, condition))
    temb = time_embedding(model, t, b)
    cap = _as_id_array(caption_ids, b, "caption_ids")
    f_text = tc.index_rows(model.captions, cap)
    f_id = None
    if model.has_identity_path:
        ids = _as_id_array(identity_ids, b, "identity_ids")
        f_id = nn.identity_tokens(ids, model.config.id_tokens, model.config.ctx_dim,
                                  dtype=model.config.dtype)

    h0 = nn.apply_conv(model.conv_in, x)
    h1 = _resblock_forward(model.enc1, h0, temb)
    h2 = nn.apply_conv(model.down, h1)
    h3 = _resblock_forward(model.enc2, h2, temb)

    m = _resblock_forward(model.mid1, h3, temb)
    m = nn.self_attention_block(model.mid_attn, m)
    m = nn.cross_attention_block(model.mid_cross, m, f_text, f_id)
    m = _resblock_forward(model.mid2, m, temb)
    m = _add_residual(m, control, "mid")

    d = _resblock_forward(model.dec1, tc.concat([m, _add_residual(h3, control, "h3")], 1), temb)
    d = _resblock_forward(model.dec2, tc.concat([d, _add_residual(h2, control, "h2")], 1), temb)
    d = nn.apply_conv(model.up, tc.upsample_nearest2x(d))
    d = _resblock_forward(model.dec3, tc.concat([d, _add_residual(h1, control, "h1")], 1), temb)
    d = _resblock_forward(model.dec4, tc.concat([d, _add_residual(h0, control, "h0")], 1), temb)
    return nn.apply_conv(model.conv_out, tc.silu(nn.norm_forward(model.norm_out, d)))
