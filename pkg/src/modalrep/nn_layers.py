"""Layers of the toy denoising U-Net.

The interesting pieces are the dual-branch conv/linear layers (a frozen
original plus a trainable modal copy whose outputs are summed), the modal
initialization from the original weights, the condition adapter that is added
to the first layer's input, zero-initialized 1x1 convolutions, and
cross-attention that sums a text-context and an identity-context attention
sharing one query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import ContractError, ShapeError, Tensor


@dataclass
class LinearParams:
    weight: Tensor               # [out, in]
    bias: Tensor | None = None

    kind = "linear"

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def trainable(self) -> bool:
        return self.weight.trainable

    def set_trainable(self, flag: bool) -> None:
        self.weight.trainable = flag
        if self.bias is not None:
            self.bias.trainable = flag


@dataclass
class Conv2dParams:
    kernel: Tensor               # [Cout, Cin, Kh, Kw]
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    kind = "conv"

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def trainable(self) -> bool:
        return self.kernel.trainable

    def set_trainable(self, flag: bool) -> None:
        self.kernel.trainable = flag
        if self.bias is not None:
            self.bias.trainable = flag


@dataclass
class NormParams:
    """Group-norm affine parameters. Norms are neither conv nor linear, so
    they never get a modal copy and never participate in fusion."""
    weight: Tensor               # [C]
    bias: Tensor                 # [C]
    groups: int
    eps: float = 1e-5

    kind = "norm"

    @property
    def trainable(self) -> bool:
        return self.weight.trainable

    def set_trainable(self, flag: bool) -> None:
        self.weight.trainable = flag
        self.bias.trainable = flag


@dataclass
class DualBranchLayer:
    """Frozen original paired with a same-shape trainable modal copy."""
    original: "LinearParams | Conv2dParams"
    modal: "LinearParams | Conv2dParams"

    def __post_init__(self):
        o, m = self.original, self.modal
        if type(o) is not type(m):
            raise ContractError(f"dual branch mixes {type(o).__name__} and {type(m).__name__}")
        ow = o.weight if isinstance(o, LinearParams) else o.kernel
        mw = m.weight if isinstance(m, LinearParams) else m.kernel
        if ow.shape != mw.shape:
            raise ShapeError(f"dual branch weight shapes differ: {ow.shape} vs {mw.shape}")
        if (o.bias is None) != (m.bias is None):
            raise ContractError("dual branch bias presence differs between branches")
        if isinstance(o, Conv2dParams) and (o.stride, o.padding) != (m.stride, m.padding):
            raise ContractError("dual branch conv hyperparameters differ")

    @property
    def kind(self) -> str:
        return self.original.kind


# ---------------------------------------------------------------------------
# Initialization


def make_linear(rng: np.random.Generator, in_features: int, out_features: int,
                dtype: str = "float32", bias: bool = True, std: float | None = None,
                trainable: bool = True) -> LinearParams:
    if std is None:
        std = (1.0 / in_features) ** 0.5
    w = tc.normal(rng, (out_features, in_features), std=std, dtype=dtype,
                  trainable=trainable)
    b = tc.zeros((out_features,), dtype=dtype, trainable=trainable) if bias else None
    return LinearParams(w, b)


def make_conv(rng: np.random.Generator, in_channels: int, out_channels: int,
              k: int, stride: int = 1, padding: int = 0, dtype: str = "float32",
              std: float | None = None, trainable: bool = True) -> Conv2dParams:
    if std is None:
        std = (2.0 / (in_channels * k * k)) ** 0.5
    w = tc.normal(rng, (out_channels, in_channels, k, k), std=std, dtype=dtype,
                  trainable=trainable)
    b = tc.zeros((out_channels,), dtype=dtype, trainable=trainable)
    return Conv2dParams(w, b, stride=stride, padding=padding)


def make_zero_conv(in_channels: int, out_channels: int, dtype: str = "float32",
                   trainable: bool = True) -> Conv2dParams:
    """1x1 convolution with zero kernel and bias: an exact no-op until trained."""
    w = tc.zeros((out_channels, in_channels, 1, 1), dtype=dtype, trainable=trainable)
    b = tc.zeros((out_channels,), dtype=dtype, trainable=trainable)
    return Conv2dParams(w, b, stride=1, padding=0)


def make_norm(channels: int, groups: int, dtype: str = "float32",
              eps: float = 1e-5, trainable: bool = True) -> NormParams:
    if channels % groups != 0:
        raise ContractError(f"norm groups {groups} must divide channels {channels}")
    return NormParams(tc.ones((channels,), dtype=dtype, trainable=trainable),
                      tc.zeros((channels,), dtype=dtype, trainable=trainable),
                      groups=groups, eps=eps)


def init_modal_copy(original: "LinearParams | Conv2dParams", w: float,
                    scale_bias: bool = True) -> "LinearParams | Conv2dParams":
    """Trainable copy of a layer with weights (and by default biases) scaled by w.

    With scale_bias the w=0 copy is exactly inert: its output is the zero
    tensor for any input, so the dual-branch forward collapses to the frozen
    branch alone.
    """
    if not np.isfinite(w):
        raise ContractError(f"modal init ratio must be finite, got {w}")

    def scaled(t: Tensor, s: float) -> Tensor:
        return Tensor(t.data * np.asarray(s, dtype=t.data.dtype), dtype=t.dtype,
                      trainable=True)

    bias_scale = w if scale_bias else 1.0
    if isinstance(original, LinearParams):
        return LinearParams(
            scaled(original.weight, w),
            None if original.bias is None else scaled(original.bias, bias_scale))
    if isinstance(original, Conv2dParams):
        return Conv2dParams(
            scaled(original.kernel, w),
            None if original.bias is None else scaled(original.bias, bias_scale),
            stride=original.stride, padding=original.padding)
    raise ContractError(f"no modal copy for layer of type {type(original).__name__}")


def make_dual(original: "LinearParams | Conv2dParams", w: float,
              scale_bias: bool = True) -> DualBranchLayer:
    """Freeze the original and pair it with a fresh modal copy."""
    original.set_trainable(False)
    return DualBranchLayer(original, init_modal_copy(original, w, scale_bias))


# ---------------------------------------------------------------------------
# Forward passes


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    return tc.linear(x, p.weight, p.bias)


def conv2d_forward(p: Conv2dParams, x: Tensor) -> Tensor:
    return tc.conv2d(x, p.kernel, p.bias, stride=p.stride, padding=p.padding)


def norm_forward(p: NormParams, x: Tensor) -> Tensor:
    return tc.group_norm(x, p.weight, p.bias, p.groups, p.eps)


def zero_conv_forward(p: Conv2dParams, x: Tensor) -> Tensor:
    if p.kernel.shape[2:] != (1, 1):
        raise ContractError(f"zero conv must be 1x1, got kernel {p.kernel.shape}")
    return conv2d_forward(p, x)


def _branch_forward(p: "LinearParams | Conv2dParams", x: Tensor) -> Tensor:
    if isinstance(p, LinearParams):
        return linear_forward(p, x)
    return conv2d_forward(p, x)


def dual_branch_forward(layer: DualBranchLayer, x: Tensor) -> Tensor:
    """Sum of the frozen-original and trainable-modal branch outputs."""
    return tc.add(_branch_forward(layer.original, x),
                  _branch_forward(layer.modal, x))


def apply_linear(layer: "LinearParams | DualBranchLayer", x: Tensor) -> Tensor:
    if isinstance(layer, DualBranchLayer):
        return dual_branch_forward(layer, x)
    return linear_forward(layer, x)


def apply_conv(layer: "Conv2dParams | DualBranchLayer", x: Tensor) -> Tensor:
    if isinstance(layer, DualBranchLayer):
        return dual_branch_forward(layer, x)
    return conv2d_forward(layer, x)


# ---------------------------------------------------------------------------
# Condition adapter


@dataclass
class AdapterParams:
    """Small conv stack mapping a condition image to the first layer's input
    shape; the final conv is zero-initialized so conditioning starts as a
    no-op and the injection (a single elementwise add) is initially inert."""
    convs: list[Conv2dParams] = field(default_factory=list)


def make_adapter(rng: np.random.Generator, cond_channels: int, hidden: int,
                 out_channels: int, dtype: str = "float32") -> AdapterParams:
    c1 = make_conv(rng, cond_channels, hidden, 3, padding=1, dtype=dtype)
    c2 = make_conv(rng, hidden, hidden, 3, padding=1, dtype=dtype)
    c3 = Conv2dParams(tc.zeros((out_channels, hidden, 3, 3), dtype=dtype, trainable=True),
                      tc.zeros((out_channels,), dtype=dtype, trainable=True),
                      stride=1, padding=1)
    return AdapterParams([c1, c2, c3])


def adapter_forward(params: AdapterParams, condition: Tensor) -> Tensor:
    h = condition
    last = len(params.convs) - 1
    for i, conv in enumerate(params.convs):
        h = conv2d_forward(conv, h)
        if i != last:
            h = tc.silu(h)
    return h


# ---------------------------------------------------------------------------
# Attention


@dataclass
class SelfAttentionParams:
    norm: NormParams
    q: "LinearParams | DualBranchLayer"
    k: "LinearParams | DualBranchLayer"
    v: "LinearParams | DualBranchLayer"
    out: "LinearParams | DualBranchLayer"
    heads: int


@dataclass
class CrossAttentionParams:
    """Shared query over spatial tokens; separate key/value projections per
    context. The identity-context projections (k_id, v_id) are extra layers
    with no frozen original: they stay single-branch and unfused. All
    projections are bias-free so that summing the per-context attention
    outputs is exact and zeroing one context's value projection recovers the
    other context's attention bitwise."""
    norm: NormParams
    q: "LinearParams | DualBranchLayer"
    k_text: "LinearParams | DualBranchLayer"
    v_text: "LinearParams | DualBranchLayer"
    out: "LinearParams | DualBranchLayer"
    heads: int
    k_id: LinearParams | None = None
    v_id: LinearParams | None = None


def make_self_attention(rng: np.random.Generator, channels: int, heads: int,
                        groups: int, dtype: str = "float32") -> SelfAttentionParams:
    if channels % heads != 0:
        raise ContractError(f"attention: heads {heads} must divide width {channels}")
    proj = lambda: make_linear(rng, channels, channels, dtype=dtype, bias=False)
    return SelfAttentionParams(make_norm(channels, groups, dtype=dtype),
                               proj(), proj(), proj(), proj(), heads)


def make_cross_attention(rng: np.random.Generator, channels: int, ctx_dim: int,
                         heads: int, groups: int, dtype: str = "float32",
                         with_identity: bool = False) -> CrossAttentionParams:
    if channels % heads != 0:
        raise ContractError(f"attention: heads {heads} must divide width {channels}")
    p = CrossAttentionParams(
        norm=make_norm(channels, groups, dtype=dtype),
        q=make_linear(rng, channels, channels, dtype=dtype, bias=False),
        k_text=make_linear(rng, ctx_dim, channels, dtype=dtype, bias=False),
        v_text=make_linear(rng, ctx_dim, channels, dtype=dtype, bias=False),
        out=make_linear(rng, channels, channels, dtype=dtype, bias=False),
        heads=heads)
    if with_identity:
        add_identity_path(p, rng, ctx_dim, dtype)
    return p


def add_identity_path(p: CrossAttentionParams, rng: np.random.Generator,
                      ctx_dim: int, dtype: str = "float32") -> None:
    """Attach trainable identity-context projections. The value projection
    starts at zero so the identity path begins as an exact no-op."""
    channels = p.q.original.out_features if isinstance(p.q, DualBranchLayer) \
        else p.q.out_features
    p.k_id = make_linear(rng, ctx_dim, channels, dtype=dtype, bias=False)
    p.v_id = LinearParams(tc.zeros((channels, ctx_dim), dtype=dtype, trainable=True))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return tc.transpose(tc.reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return tc.reshape(tc.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def _project_tokens(layer, x: Tensor) -> Tensor:
    b, t, c = x.shape
    flat = apply_linear(layer, tc.reshape(x, (b * t, c)))
    return tc.reshape(flat, (b, t, flat.shape[1]))


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over [B,T,C] token tensors."""
    dh = q.shape[-1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = tc.mul_scalar(tc.matmul(qh, tc.transpose(kh, (0, 1, 3, 2))),
                           1.0 / (dh ** 0.5))
    return _merge_heads(tc.matmul(tc.softmax(scores, axis=-1), vh))


def self_attention_block(p: SelfAttentionParams, x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    tokens = tc.transpose(tc.reshape(norm_forward(p.norm, x), (b, c, h * w)), (0, 2, 1))
    att = attention_core(_project_tokens(p.q, tokens), _project_tokens(p.k, tokens),
                         _project_tokens(p.v, tokens), p.heads)
    out = tc.reshape(tc.transpose(_project_tokens(p.out, att), (0, 2, 1)), (b, c, h, w))
    return tc.add(x, out)


def cross_attention_identity(params: CrossAttentionParams, q_input: Tensor,
                             f_text: Tensor, f_id: Tensor | None) -> Tensor:
    """Sum of a text-context and an identity-context attention sharing one
    query projection: each context gets its own key/value projections and the
    (bias-free) output projection is applied per context before summing."""
    if f_text.shape[-1] != _ctx_width(params.k_text):
        raise ShapeError(f"text context width {f_text.shape[-1]} does not match "
                         f"key/value projections ({_ctx_width(params.k_text)})")
    q = _project_tokens(params.q, q_input)
    text_att = attention_core(q, _project_tokens(params.k_text, f_text),
                              _project_tokens(params.v_text, f_text), params.heads)
    out = _project_tokens(params.out, text_att)
    if f_id is None:
        return out
    if params.k_id is None or params.v_id is None:
        raise ContractError("identity tokens given but no identity projections exist")
    if f_id.shape[-1] != params.k_id.in_features:
        raise ShapeError(f"identity context width {f_id.shape[-1]} does not match "
                         f"key/value projections ({params.k_id.in_features})")
    id_att = attention_core(q, _project_tokens(params.k_id, f_id),
                            _project_tokens(params.v_id, f_id), params.heads)
    return tc.add(out, _project_tokens(params.out, id_att))


def _ctx_width(layer) -> int:
    p = layer.original if isinstance(layer, DualBranchLayer) else layer
    return p.in_features


def cross_attention_block(p: CrossAttentionParams, x: Tensor, f_text: Tensor,
                          f_id: Tensor | None) -> Tensor:
    b, c, h, w = x.shape
    tokens = tc.transpose(tc.reshape(norm_forward(p.norm, x), (b, c, h * w)), (0, 2, 1))
    att = cross_attention_identity(p, tokens, f_text, f_id)
    return tc.add(x, tc.reshape(tc.transpose(att, (0, 2, 1)), (b, c, h, w)))


def identity_tokens(ids, n_tokens: int, dim: int, dtype: str = "float32") -> Tensor:
    """Fixed pseudo-random token matrix per identity id, [B, n_tokens, dim].

    Stands in for an external face/identity encoder: each id deterministically
    maps to the same token block, and the tokens are not parameters.
    """
    ids = np.asarray(ids, dtype=np.int64)
    rows = []
    for i in ids:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([77001, int(i)])))
        rows.append(rng.standard_normal((n_tokens, dim)))
    return Tensor(np.stack(rows), dtype=dtype)
