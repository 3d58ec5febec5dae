"""Command-line pipeline: data generation, pretraining, dual-branch and
baseline training, fusion, equivalence verification, sampling, cost reports.

Every subcommand is deterministic given its flags (seeds are flags), exits
nonzero on failure, and the ``verify`` exit code is the CI gate for fusion
acceptance.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import accounting, baseline_controlnet as bc, pgm, reparam, toy_diffusion as td
from . import checkpoint as ckpt
from . import unet
from .tensor_core import ContractError, ShapeError, Tensor
from .toy_diffusion import DiffusionConfig
from .unet import UNetConfig


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Training/fusion knobs serialized into every checkpoint header."""
    seed: int = 0
    steps: int = 0
    lr: float = 1e-3
    w: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    data_n: int = 256
    batch_size: int = 8
    image_size: int = 16
    timesteps: int = 200


def _diffusion_from(args_or_header) -> DiffusionConfig:
    if isinstance(args_or_header, dict):
        d = args_or_header.get("diffusion") or {}
        return DiffusionConfig(**d) if d else DiffusionConfig()
    return DiffusionConfig(timesteps=args_or_header.timesteps,
                           image_size=args_or_header.size)


def cmd_gen_data(args) -> int:
    out = args.out
    import os
    os.makedirs(out, exist_ok=True)
    dataset = td.make_dataset(args.n, args.size, args.seed)
    for i, s in enumerate(dataset):
        pgm.write_pgm(f"{out}/cond_{i:04d}.pgm", pgm.condition_to_gray(s.condition.data[0]))
        pgm.write_pgm(f"{out}/target_{i:04d}.pgm", pgm.to_gray(s.target.data[0]))
    print(f"wrote {args.n} condition/target PGM pairs to {out}")
    return 0


def cmd_pretrain(args) -> int:
    ucfg = UNetConfig(image_size=args.size)
    dcfg = _diffusion_from(args)
    rc = RunConfig(seed=args.seed, steps=args.steps, lr=args.lr, data_n=args.data_n,
                   batch_size=args.batch, image_size=args.size, timesteps=args.timesteps)
    print(f"pretraining base: {args.steps} steps, {args.data_n} samples, seed {args.seed}")
    model = td.pretrain_base(ucfg, dcfg, args.steps, data_n=args.data_n,
                             batch_size=args.batch, lr=args.lr, seed=args.seed,
                             log_every=args.log_every)
    ckpt.save_checkpoint(args.out, model, dataclasses.asdict(rc),
                         dataclasses.asdict(dcfg))
    print(f"saved frozen base ({accounting.count_params(model)} params) to {args.out}")
    return 0


def _train(model, dcfg, args, caption_override=None) -> list[float]:
    dataset = td.make_dataset(args.data_n, dcfg.image_size, args.seed)
    state = td.make_train_state(model, dcfg, lr=args.lr, seed=args.seed)
    return td.run_training(state, dataset, args.steps, args.batch,
                           caption_override=caption_override,
                           log_every=args.log_every)


def cmd_train_rep(args) -> int:
    base, header = ckpt.load_checkpoint(args.base)
    if header["variant"] != "base":
        raise ContractError(f"--base must be a base checkpoint, got {header['variant']!r}")
    dcfg = _diffusion_from(header)
    dual = unet.make_dual_model(base, w=args.w, scale_bias=not args.no_scale_bias,
                                seed=args.seed)
    print(f"training modal copy: {args.steps} steps, w={args.w}, seed {args.seed}")
    losses = _train(dual, dcfg, args)
    rc = RunConfig(seed=args.seed, steps=args.steps, lr=args.lr, w=args.w,
                   data_n=args.data_n, batch_size=args.batch,
                   image_size=dcfg.image_size, timesteps=dcfg.timesteps)
    ckpt.save_checkpoint(args.out, dual, dataclasses.asdict(rc), dataclasses.asdict(dcfg))
    if losses:
        print(f"final loss {np.mean(losses[-50:]):.4f}")
    print(f"saved dual-branch checkpoint to {args.out}")
    return 0


def cmd_train_controlnet(args) -> int:
    base, header = ckpt.load_checkpoint(args.base)
    if header["variant"] != "base":
        raise ContractError(f"--base must be a base checkpoint, got {header['variant']!r}")
    dcfg = _diffusion_from(header)
    model = bc.make_controlnet(base)
    print(f"training zero-conv baseline branch: {args.steps} steps, seed {args.seed}")
    losses = _train(model, dcfg, args)
    rc = RunConfig(seed=args.seed, steps=args.steps, lr=args.lr, data_n=args.data_n,
                   batch_size=args.batch, image_size=dcfg.image_size,
                   timesteps=dcfg.timesteps)
    ckpt.save_checkpoint(args.out, model, dataclasses.asdict(rc), dataclasses.asdict(dcfg))
    if losses:
        print(f"final loss {np.mean(losses[-50:]):.4f}")
    print(f"saved baseline checkpoint to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    dual, header = ckpt.load_checkpoint(getattr(args, "in"))
    if header["variant"] != "dual":
        raise ContractError(f"fuse expects a dual checkpoint, got {header['variant']!r}")
    fused = reparam.fuse_model(dual, reparam.FusionConfig(args.alpha, args.beta))
    rc = dict(header.get("run_config") or {})
    rc.update(alpha=args.alpha, beta=args.beta)
    ckpt.save_checkpoint(args.out, fused, rc, header.get("diffusion"))
    print(f"fused with alpha={args.alpha}, beta={args.beta} -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    dual, dheader = ckpt.load_checkpoint(args.dual)
    fused, _ = ckpt.load_checkpoint(args.fused)
    if dheader["variant"] != "dual":
        raise ContractError(f"--dual must be a dual checkpoint, got {dheader['variant']!r}")
    timesteps = (dheader.get("diffusion") or {}).get("timesteps", 200)
    report = reparam.verify_equivalence(dual, fused, args.samples, args.tol,
                                        args.seed, timesteps=timesteps)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_sample(args) -> int:
    model, header = ckpt.load_checkpoint(args.model)
    dcfg = _diffusion_from(header)
    condition = None
    if args.condition:
        cond = pgm.gray_to_condition(pgm.read_pgm(args.condition))
        if cond.shape != (dcfg.image_size, dcfg.image_size):
            raise ShapeError(f"condition image is {cond.shape}, model wants "
                             f"({dcfg.image_size},{dcfg.image_size})")
        dtype = model.config.dtype
        condition = Tensor(cond[None, None], dtype=dtype)
    steps = args.steps or dcfg.timesteps
    img = td.sample(model, condition, steps, args.seed, dcfg,
                    caption_ids=args.caption, identity_ids=args.identity)
    pgm.write_pgm(args.out, pgm.to_gray(img.data[0, 0]))
    print(f"sampled {steps} steps (seed {args.seed}) -> {args.out}")
    return 0


def cmd_count(args) -> int:
    model, header = ckpt.load_checkpoint(args.model)
    report = accounting.count_flops(model, (args.batch, model.config.in_channels,
                                            model.config.image_size,
                                            model.config.image_size))
    print(f"# {report.convention}")
    print(report.table())
    total = accounting.count_params(model)
    assert total == report.total_params
    if args.csv:
        accounting.write_csv(report, args.csv)
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modalrep",
                                description="dual-branch conditional diffusion at desk "
                                            "scale, with zero-overhead fused inference")
    sub = p.add_subparsers(dest="command", required=True)
    rc = RunConfig()

    def common_train(sp, steps):
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--lr", type=float, default=rc.lr)
        sp.add_argument("--seed", type=int, default=rc.seed)
        sp.add_argument("--batch", type=int, default=rc.batch_size)
        sp.add_argument("--data-n", type=int, default=rc.data_n)
        sp.add_argument("--log-every", type=int, default=0)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="write condition/target PGM pairs")
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--size", type=int, default=rc.image_size)
    sp.add_argument("--seed", type=int, default=rc.seed)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train and freeze the base model")
    sp.add_argument("--size", type=int, default=rc.image_size)
    sp.add_argument("--timesteps", type=int, default=rc.timesteps)
    common_train(sp, steps=2000)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train-rep", help="train the modal copy + adapter on a frozen base")
    sp.add_argument("--base", required=True)
    sp.add_argument("--w", type=float, default=rc.w,
                    help="modal init ratio (modal = w * original)")
    sp.add_argument("--no-scale-bias", action="store_true",
                    help="copy biases unscaled instead of scaling them by w")
    common_train(sp, steps=3000)
    sp.set_defaults(fn=cmd_train_rep)

    sp = sub.add_parser("train-controlnet", help="train the zero-conv baseline branch")
    sp.add_argument("--base", required=True)
    common_train(sp, steps=3000)
    sp.set_defaults(fn=cmd_train_controlnet)

    sp = sub.add_parser("fuse", help="collapse a dual checkpoint into a single branch")
    sp.add_argument("--in", required=True)
    sp.add_argument("--alpha", type=float, default=rc.alpha)
    sp.add_argument("--beta", type=float, default=rc.beta)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_fuse)

    sp = sub.add_parser("verify", help="check dual vs fused forward equivalence")
    sp.add_argument("--dual", required=True)
    sp.add_argument("--fused", required=True)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("sample", help="ancestral sampling to a PGM image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--condition", default=None, help="condition PGM (omit for unconditional)")
    sp.add_argument("--seed", type=int, default=rc.seed)
    sp.add_argument("--steps", type=int, default=0, help="0 = full timestep count")
    sp.add_argument("--caption", type=int, default=0)
    sp.add_argument("--identity", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("count", help="parameter/FLOPs/MACs report")
    sp.add_argument("--model", required=True)
    sp.add_argument("--csv", default=None)
    sp.add_argument("--batch", type=int, default=1)
    sp.set_defaults(fn=cmd_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, ShapeError, ckpt.CheckpointError, pgm.PgmError,
            FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
