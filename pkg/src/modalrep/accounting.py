"""Exact parameter counts and analytic FLOPs/MACs for every model variant.

Counts are derived from shapes, not measured. Convention (also carried on
every report): conv and linear layers cost Cout*Cin*Kh*Kw*Hout*Wout*B MACs and
in*out*tokens MACs respectively, with FLOPs = 2*MACs; the attention score and
attend matmuls are counted the same way; elementwise work is counted
explicitly (add/scale 1, silu 4, softmax 5, group-norm 8 FLOPs per element)
so that "fused is almost as cheap as base" is an honest statement rather than
an artifact of ignoring the non-duplicated ops. Embedding lookups, nearest
upsampling, concatenation and the sinusoidal timestep features are free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from . import unet
from .baseline_controlnet import ControlNetModel
from .nn_layers import (AdapterParams, Conv2dParams, CrossAttentionParams,
                        DualBranchLayer, LinearParams, NormParams,
                        SelfAttentionParams)
from .tensor_core import ShapeError
from .unet import ModelGraph, ResBlock

CONVENTION = ("MACs: conv=Cout*Cin*Kh*Kw*Hout*Wout*B, linear=in*out*tokens, "
              "attention matmuls likewise; FLOPs=2*MACs for those rows. "
              "Elementwise FLOPs per element: add/scale 1, silu 4, softmax 5, "
              "group_norm 8. Lookups, upsampling, concat: free.")

_SILU = 4
_ADD = 1
_NORM = 8
_SOFTMAX = 5
_SCALE = 1


@dataclass
class CostRow:
    name: str
    kind: str
    params: int = 0
    flops: int = 0
    macs: int = 0


@dataclass
class CostReport:
    variant: str
    rows: list[CostRow] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def table(self) -> str:
        lines = [f"{'layer':<40} {'kind':<10} {'params':>10} {'MACs':>14} {'FLOPs':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<40} {r.kind:<10} {r.params:>10} {r.macs:>14} {r.flops:>14}")
        lines.append(f"{'TOTAL (' + self.variant + ')':<40} {'':<10} "
                     f"{self.total_params:>10} {self.total_macs:>14} {self.total_flops:>14}")
        return "\n".join(lines)


def count_params(model) -> int:
    """Exact scalar count over every parameter tensor, frozen and trainable."""
    return sum(t.size for _, t in unet.named_tensors(model))


def write_csv(report: CostReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "kind", "params", "flops", "macs"])
        for r in report.rows:
            w.writerow([r.name, r.kind, r.params, r.flops, r.macs])
        w.writerow(["total", report.variant, report.total_params,
                    report.total_flops, report.total_macs])


# ---------------------------------------------------------------------------
# Walker


def _tensor_count(*tensors) -> int:
    return sum(t.size for t in tensors if t is not None)


def _layer_params(layer) -> int:
    if isinstance(layer, LinearParams):
        return _tensor_count(layer.weight, layer.bias)
    return _tensor_count(layer.kernel, layer.bias)


class _Walk:
    def __init__(self, report: CostReport, batch: int):
        self.report = report
        self.b = batch

    def row(self, name, kind, params=0, flops=0, macs=0):
        self.report.rows.append(CostRow(name, kind, int(params), int(flops), int(macs)))

    def elemwise(self, name, elems, per_elem):
        self.row(name, "elemwise", flops=self.b * elems * per_elem)

    def _single_conv(self, name, p: Conv2dParams, h, w):
        ho = (h + 2 * p.padding - p.kernel.shape[2]) // p.stride + 1
        wo = (w + 2 * p.padding - p.kernel.shape[3]) // p.stride + 1
        macs = self.b * p.out_channels * p.in_channels \
            * p.kernel.shape[2] * p.kernel.shape[3] * ho * wo
        self.row(name, "conv", params=_layer_params(p), flops=2 * macs, macs=macs)
        return p.out_channels, ho, wo

    def conv(self, name, layer, h, w):
        if isinstance(layer, DualBranchLayer):
            out = self._single_conv(f"{name}.original", layer.original, h, w)
            self._single_conv(f"{name}.modal", layer.modal, h, w)
            c, ho, wo = out
            self.elemwise(f"{name}.combine", c * ho * wo, _ADD)
            return out
        return self._single_conv(name, layer, h, w)

    def _single_linear(self, name, p: LinearParams, tokens, with_params=True):
        macs = tokens * p.in_features * p.out_features
        self.row(name, "linear", params=_layer_params(p) if with_params else 0,
                 flops=2 * macs, macs=macs)
        return p.out_features

    def linear(self, name, layer, tokens, with_params=True):
        if isinstance(layer, DualBranchLayer):
            out = self._single_linear(f"{name}.original", layer.original, tokens,
                                      with_params)
            self._single_linear(f"{name}.modal", layer.modal, tokens, with_params)
            self.elemwise(f"{name}.combine", tokens * out // self.b, _ADD)
            return out
        return self._single_linear(name, layer, tokens, with_params)

    def norm(self, name, p: NormParams, c, h, w):
        self.row(name, "norm", params=_tensor_count(p.weight, p.bias),
                 flops=self.b * c * h * w * _NORM)

    def resblock(self, name, rb: ResBlock, c, h, w):
        self.norm(f"{name}.norm1", rb.norm1, c, h, w)
        self.elemwise(f"{name}.silu1", c * h * w, _SILU)
        cout, ho, wo = self.conv(f"{name}.conv1", rb.conv1, h, w)
        self.linear(f"{name}.time_proj", rb.time_proj, self.b)
        self.elemwise(f"{name}.time_add", cout * ho * wo, _ADD)
        self.norm(f"{name}.norm2", rb.norm2, cout, ho, wo)
        self.elemwise(f"{name}.silu2", cout * ho * wo, _SILU)
        self.conv(f"{name}.conv2", rb.conv2, ho, wo)
        if rb.skip is not None:
            self.conv(f"{name}.skip", rb.skip, h, w)
        self.elemwise(f"{name}.residual", cout * ho * wo, _ADD)
        return cout, ho, wo

    def attention_core(self, name, heads, tq, tk, width):
        dh = width // heads
        macs = self.b * heads * tq * tk * dh
        self.row(f"{name}.scores", "matmul", flops=2 * macs, macs=macs)
        self.elemwise(f"{name}.scale", heads * tq * tk, _SCALE)
        self.elemwise(f"{name}.softmax", heads * tq * tk, _SOFTMAX)
        self.row(f"{name}.attend", "matmul", flops=2 * macs, macs=macs)

    def self_attention(self, name, p: SelfAttentionParams, c, h, w):
        t = h * w
        self.norm(f"{name}.norm", p.norm, c, h, w)
        self.linear(f"{name}.q", p.q, self.b * t)
        self.linear(f"{name}.k", p.k, self.b * t)
        self.linear(f"{name}.v", p.v, self.b * t)
        self.attention_core(name, p.heads, t, t, c)
        self.linear(f"{name}.out", p.out, self.b * t)
        self.elemwise(f"{name}.residual", c * h * w, _ADD)

    def cross_attention(self, name, p: CrossAttentionParams, c, h, w,
                        ctx_tokens, id_tokens):
        t = h * w
        self.norm(f"{name}.norm", p.norm, c, h, w)
        self.linear(f"{name}.q", p.q, self.b * t)
        self.linear(f"{name}.k_text", p.k_text, self.b * ctx_tokens)
        self.linear(f"{name}.v_text", p.v_text, self.b * ctx_tokens)
        self.attention_core(f"{name}.text", p.heads, t, ctx_tokens, c)
        self.linear(f"{name}.out", p.out, self.b * t)
        if p.k_id is not None:
            self.linear(f"{name}.k_id", p.k_id, self.b * id_tokens)
            self.linear(f"{name}.v_id", p.v_id, self.b * id_tokens)
            self.attention_core(f"{name}.id", p.heads, t, id_tokens, c)
            # shared projection applied a second time: flops yes, params no
            self.linear(f"{name}.out_id", p.out, self.b * t, with_params=False)
            self.elemwise(f"{name}.sum_contexts", t * c, _ADD)
        self.elemwise(f"{name}.residual", c * h * w, _ADD)

    def adapter(self, name, a: AdapterParams, h, w):
        last = len(a.convs) - 1
        for i, conv in enumerate(a.convs):
            c, h, w = self.conv(f"{name}.conv{i}", conv, h, w)
            if i != last:
                self.elemwise(f"{name}.silu{i}", c * h * w, _SILU)
        self.elemwise(f"{name}.inject", c * h * w, _ADD)

    def unet_body(self, model: ModelGraph, prefix: str = ""):
        cfg = model.config
        p = lambda s: f"{prefix}{s}"
        size = cfg.image_size
        if model.adapter is not None:
            self.adapter(p("adapter"), model.adapter, size, size)
        self.linear(p("time_in"), model.time_in, self.b)
        self.elemwise(p("time_silu"), cfg.temb_dim, _SILU)
        self.linear(p("time_out"), model.time_out, self.b)
        self.row(p("captions"), "embedding", params=model.captions.size)

        c0, h, w = self.conv(p("conv_in"), model.conv_in, size, size)
        c1, h1, w1 = self.resblock(p("enc1"), model.enc1, c0, h, w)
        c2, h2, w2 = self.conv(p("down"), model.down, h1, w1)
        c3, h3, w3 = self.resblock(p("enc2"), model.enc2, c2, h2, w2)

        cm, hm, wm = self.resblock(p("mid1"), model.mid1, c3, h3, w3)
        self.self_attention(p("mid_attn"), model.mid_attn, cm, hm, wm)
        self.cross_attention(p("mid_cross"), model.mid_cross, cm, hm, wm,
                             cfg.ctx_tokens, cfg.id_tokens)
        self.resblock(p("mid2"), model.mid2, cm, hm, wm)

        cd, hd, wd = self.resblock(p("dec1"), model.dec1, cm + c3, hm, wm)
        cd, hd, wd = self.resblock(p("dec2"), model.dec2, cd + c2, hd, wd)
        cu, hu, wu = self.conv(p("up"), model.up, 2 * hd, 2 * wd)
        cd, hd, wd = self.resblock(p("dec3"), model.dec3, cu + c1, hu, wu)
        cd, hd, wd = self.resblock(p("dec4"), model.dec4, cd + c0, hd, wd)
        self.norm(p("norm_out"), model.norm_out, cd, hd, wd)
        self.elemwise(p("out_silu"), cd * hd * wd, _SILU)
        self.conv(p("conv_out"), model.conv_out, hd, wd)

    def controlnet(self, model: ControlNetModel):
        cfg = model.config
        size = cfg.image_size
        br = model.branch
        self.conv("branch.z_in", br.z_in, size, size)
        self.elemwise("branch.inject", cfg.in_channels * size * size, _ADD)
        c0, h, w = self.conv("branch.conv_in", br.conv_in, size, size)
        c1, h1, w1 = self.resblock("branch.enc1", br.enc1, c0, h, w)
        c2, h2, w2 = self.conv("branch.down", br.down, h1, w1)
        c3, h3, w3 = self.resblock("branch.enc2", br.enc2, c2, h2, w2)
        cm, hm, wm = self.resblock("branch.mid1", br.mid1, c3, h3, w3)
        self.self_attention("branch.mid_attn", br.mid_attn, cm, hm, wm)
        self.cross_attention("branch.mid_cross", br.mid_cross, cm, hm, wm,
                             cfg.ctx_tokens, cfg.id_tokens)
        self.resblock("branch.mid2", br.mid2, cm, hm, wm)
        for tap, (c, hh, ww) in (("h0", (c0, h, w)), ("h1", (c1, h1, w1)),
                                 ("h2", (c2, h2, w2)), ("h3", (c3, h3, w3)),
                                 ("mid", (cm, hm, wm))):
            self.conv(f"branch.z_{tap}", getattr(br, f"z_{tap}"), hh, ww)
            self.elemwise(f"branch.add_{tap}", c * hh * ww, _ADD)
        self.unet_body(model.base, prefix="base.")


def count_flops(model, input_shape) -> CostReport:
    """Analytic cost report for a forward pass on the given input shape."""
    cfg = model.config
    b, c, h, w = input_shape
    if (c, h, w) != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"input shape {tuple(input_shape)} does not match the "
                         f"model ({cfg.in_channels},{cfg.image_size},{cfg.image_size})")
    variant = model.variant
    report = CostReport(variant=variant)
    walk = _Walk(report, b)
    if isinstance(model, ControlNetModel):
        walk.controlnet(model)
    else:
        walk.unet_body(model)
    return report
