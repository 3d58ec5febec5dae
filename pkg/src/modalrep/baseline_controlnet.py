"""Zero-convolution baseline branch on the same toy U-Net.

A trainable copy of the base encoder + middle blocks processes the input plus
a zero-convolved condition; per-tap zero convolutions project the branch
features back onto the base's skip/mid features:

    y_c = F(x; base) + Z(F(x + Z(c); branch_copy); Z_out per tap)

All zero convolutions start at exactly zero, so before training the
conditioned output is bitwise the base output for any condition. This branch
exists as the comparison baseline for cost accounting and fidelity, and is
never fused.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_layers as nn
from . import tensor_core as tc
from . import unet
from .nn_layers import Conv2dParams, CrossAttentionParams, SelfAttentionParams
from .tensor_core import ContractError, Tensor
from .unet import ModelGraph, ResBlock


@dataclass
class ControlBranch:
    z_in: Conv2dParams           # 1x1 zero conv, condition -> input channels
    conv_in: Conv2dParams
    enc1: ResBlock
    down: Conv2dParams
    enc2: ResBlock
    mid1: ResBlock
    mid_attn: SelfAttentionParams
    mid_cross: CrossAttentionParams
    mid2: ResBlock
    z_h0: Conv2dParams           # per-tap output zero convs
    z_h1: Conv2dParams
    z_h2: Conv2dParams
    z_h3: Conv2dParams
    z_mid: Conv2dParams


@dataclass
class ControlNetModel:
    base: ModelGraph             # frozen
    branch: ControlBranch        # trainable

    variant = "controlnet"

    @property
    def config(self):
        return self.base.config


def make_controlnet(base: ModelGraph) -> ControlNetModel:
    """Clone the base encoder + middle blocks as the trainable branch and
    attach zero-initialized 1x1 convolutions at the input and every tap."""
    if base.variant != "base":
        raise ContractError(f"the baseline branch copies a base model, "
                            f"got variant {base.variant!r}")
    cfg = base.config
    c1, c2 = cfg.base_channels, 2 * cfg.base_channels
    dt = cfg.dtype

    def trainable_copy(block):
        out = unet.map_layers(block, lambda l, _n: unet._copy_layer(l),
                              lambda t: t.copy())
        for _, t in unet.named_tensors(out, "x"):
            t.trainable = True
        return out

    frozen_base = unet.copy_model(base)
    unet.set_model_trainable(frozen_base, False)
    branch = ControlBranch(
        z_in=nn.make_zero_conv(cfg.cond_channels, cfg.in_channels, dtype=dt),
        conv_in=trainable_copy(base.conv_in),
        enc1=trainable_copy(base.enc1),
        down=trainable_copy(base.down),
        enc2=trainable_copy(base.enc2),
        mid1=trainable_copy(base.mid1),
        mid_attn=trainable_copy(base.mid_attn),
        mid_cross=trainable_copy(base.mid_cross),
        mid2=trainable_copy(base.mid2),
        z_h0=nn.make_zero_conv(c1, c1, dtype=dt),
        z_h1=nn.make_zero_conv(c1, c1, dtype=dt),
        z_h2=nn.make_zero_conv(c2, c2, dtype=dt),
        z_h3=nn.make_zero_conv(c2, c2, dtype=dt),
        z_mid=nn.make_zero_conv(c2, c2, dtype=dt))
    model = ControlNetModel(base=frozen_base, branch=branch)
    unet.label_tensors(model)
    return model


def branch_residuals(model: ControlNetModel, x: Tensor, condition: Tensor,
                     temb: Tensor, f_text: Tensor) -> dict[str, Tensor]:
    br = model.branch
    xc = tc.add(x, nn.zero_conv_forward(br.z_in, condition))
    b0 = nn.apply_conv(br.conv_in, xc)
    b1 = unet._resblock_forward(br.enc1, b0, temb)
    b2 = nn.apply_conv(br.down, b1)
    b3 = unet._resblock_forward(br.enc2, b2, temb)
    m = unet._resblock_forward(br.mid1, b3, temb)
    m = nn.self_attention_block(br.mid_attn, m)
    m = nn.cross_attention_block(br.mid_cross, m, f_text, None)
    m = unet._resblock_forward(br.mid2, m, temb)
    return {"h0": nn.zero_conv_forward(br.z_h0, b0),
            "h1": nn.zero_conv_forward(br.z_h1, b1),
            "h2": nn.zero_conv_forward(br.z_h2, b2),
            "h3": nn.zero_conv_forward(br.z_h3, b3),
            "mid": nn.zero_conv_forward(br.z_mid, m)}


def controlnet_forward(model: ControlNetModel, x: Tensor, condition: Tensor,
                       t, caption_ids=None) -> Tensor:
    """Base forward plus zero-convolved branch residuals on every tap."""
    if condition is None:
        raise ContractError("controlnet_forward requires a condition image")
    b = x.shape[0]
    temb = unet.time_embedding(model.base, t, b)
    caps = unet._as_id_array(caption_ids, b, "caption_ids")
    f_text = tc.index_rows(model.base.captions, caps)
    control = branch_residuals(model, x, condition, temb, f_text)
    return unet.model_forward(model.base, x, t, caption_ids, control=control)


def train_controlnet(state, batch):
    """One training step; only branch parameters are trainable, the base is
    frozen and must stay bitwise unchanged."""
    from . import toy_diffusion

    if not isinstance(state.model, ControlNetModel):
        raise ContractError("train_controlnet expects a ControlNetModel state")
    return toy_diffusion.train_step(state, batch)
