"""Branch fusion: collapse frozen+modal layer pairs into single layers.

Because conv and linear maps are affine, alpha * F(x; W, b) + beta * F(x; Wm, bm)
equals a single layer with weights alpha*W + beta*Wm and bias alpha*b + beta*bm,
for every input. At (alpha, beta) = (1, 1) the fused single-branch model
therefore reproduces the training-time dual-branch forward exactly (up to
float rounding), through arbitrary nonlinearities, since each fused layer is
equivalent pre-activation. The adapter and the identity-context attention
projections have no frozen counterpart and are carried over unfused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_layers as nn
from . import unet
from .nn_layers import Conv2dParams, DualBranchLayer, LinearParams
from .tensor_core import ContractError, ShapeError, Tensor
from .unet import ModelGraph


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ContractError(f"fusion ratios must be finite, got "
                                f"alpha={self.alpha}, beta={self.beta}")


@dataclass
class EquivalenceReport:
    """Per-sample forward diffs between a dual-branch model and its fusion.

    rel diffs are max|a - b| normalized by the reference output's max
    magnitude (the error of fusion scales with activation range, not with an
    individual element's size)."""
    per_sample_max_abs: list[float] = field(default_factory=list)
    per_sample_rel: list[float] = field(default_factory=list)
    tol: float = 0.0
    passed: bool = False

    @property
    def n_samples(self) -> int:
        return len(self.per_sample_max_abs)

    @property
    def max_abs_diff(self) -> float:
        return max(self.per_sample_max_abs, default=0.0)

    @property
    def max_rel_diff(self) -> float:
        return max(self.per_sample_rel, default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.n_samples} samples, max abs diff "
                f"{self.max_abs_diff:.3e}, max rel diff {self.max_rel_diff:.3e}, "
                f"tol {self.tol:.1e}")


def _combine(a: Tensor, b: Tensor, alpha: float, beta: float) -> Tensor:
    dt = a.data.dtype
    out = np.asarray(alpha, dt) * a.data + np.asarray(beta, dt) * b.data
    return Tensor(out, dtype=a.dtype, trainable=False)


def fuse_layer(original, modal, cfg: FusionConfig):
    """Single frozen layer with weight alpha*W + beta*Wm (biases likewise)."""
    if type(original) is not type(modal):
        raise ContractError(f"cannot fuse {type(original).__name__} with "
                            f"{type(modal).__name__}")
    if isinstance(original, LinearParams):
        if original.weight.shape != modal.weight.shape:
            raise ShapeError(f"fuse_layer: weight shapes differ "
                             f"{original.weight.shape} vs {modal.weight.shape}")
        bias = None if original.bias is None else \
            _combine(original.bias, modal.bias, cfg.alpha, cfg.beta)
        return LinearParams(_combine(original.weight, modal.weight, cfg.alpha, cfg.beta),
                            bias)
    if isinstance(original, Conv2dParams):
        if original.kernel.shape != modal.kernel.shape:
            raise ShapeError(f"fuse_layer: kernel shapes differ "
                             f"{original.kernel.shape} vs {modal.kernel.shape}")
        if (original.stride, original.padding) != (modal.stride, modal.padding):
            raise ContractError("fuse_layer: conv hyperparameters differ")
        bias = None if original.bias is None else \
            _combine(original.bias, modal.bias, cfg.alpha, cfg.beta)
        return Conv2dParams(_combine(original.kernel, modal.kernel, cfg.alpha, cfg.beta),
                            bias, stride=original.stride, padding=original.padding)
    raise ContractError(f"fuse_layer: unsupported layer type {type(original).__name__}")


def fuse_model(model: ModelGraph, cfg: FusionConfig) -> ModelGraph:
    """Collapse every dual-branch layer of a dual model into a single branch.

    The adapter, the identity-context projections, and all non-conv/linear
    parameters (norm affines, caption table) are carried over verbatim; the
    result is a frozen inference model with no dual-branch layers left.
    Fusing a model without dual-branch layers is rejected (it indicates a
    pipeline bug such as double fusion).
    """
    if unet.count_dual_layers(model) == 0:
        raise ContractError(f"nothing to fuse: model (variant {model.variant!r}) "
                            "has no dual-branch layers")

    def fuse(layer, name):
        if isinstance(layer, DualBranchLayer):
            try:
                return fuse_layer(layer.original, layer.modal, cfg)
            except (ShapeError, ContractError) as e:
                raise ContractError(f"malformed dual layer {name}: {e}") from e
        out = unet._copy_layer(layer)
        out.set_trainable(False)
        return out

    fused: ModelGraph = unet.map_layers(model, fuse, unet._frozen_copy_tensor)
    fused.variant = "fused"
    unet.label_tensors(fused)
    return fused


def _compatible(dual: ModelGraph, fused: ModelGraph) -> bool:
    if dual.config != fused.config:
        return False
    if (dual.adapter is None) != (fused.adapter is None):
        return False
    return dual.has_identity_path == fused.has_identity_path


def verify_equivalence(dual: ModelGraph, fused: ModelGraph, n_samples: int,
                       tol: float, seed: int, timesteps: int = 200) -> EquivalenceReport:
    """Forward both models on random (latent, condition, timestep, context)
    samples and report worst-case diffs. Deterministic given seed."""
    if not _compatible(dual, fused):
        raise ContractError("architecture mismatch between the two models")
    cfg = dual.config
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([4242, seed])))
    report = EquivalenceReport(tol=tol)
    tiny = np.finfo(np.float64).tiny
    for _ in range(n_samples):
        x = Tensor(rng.standard_normal((1, cfg.in_channels, cfg.image_size, cfg.image_size)),
                   dtype=cfg.dtype)
        cond = None
        if dual.adapter is not None:
            cond = Tensor(rng.standard_normal(
                (1, cfg.cond_channels, cfg.image_size, cfg.image_size)), dtype=cfg.dtype)
        t = int(rng.integers(1, timesteps + 1))
        cap = int(rng.integers(0, cfg.num_captions))
        idt = int(rng.integers(0, cfg.num_captions))
        a = unet.model_forward(dual, x, t, cap, idt, condition=cond).data
        b = unet.model_forward(fused, x, t, cap, idt, condition=cond).data
        max_abs = float(np.max(np.abs(a - b)))
        scale = max(float(np.max(np.abs(a))), tiny)
        report.per_sample_max_abs.append(max_abs)
        report.per_sample_rel.append(max_abs / scale)
    report.passed = all(r <= tol for r in report.per_sample_rel)
    return report
