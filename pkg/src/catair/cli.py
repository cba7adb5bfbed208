"""``catair`` command line: synth, train, extend, eval, flops, infer.

Exit status is 0 on success, 1 on usage or configuration errors and 2 when a
command fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import costmodel
from ._validation import ConfigError
from .backbone import load_checkpoint
from .config import ConfigFileError, RunConfig, load_config
from .degrade import build_dataset, read_png, write_png

log = logging.getLogger("catair")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration value; may repeat")


def build_parser():
    parser = _Parser(prog="catair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesise a paired dataset")
    _common(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--counts", help="task:count list, e.g. denoise:4,derain:4")
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("data_dir", type=Path)
    p.add_argument("out_ckpt", type=Path)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("extend", help="extend a trained model to new tasks")
    _common(p)
    p.add_argument("base_ckpt", type=Path)
    p.add_argument("data_dir", type=Path)
    p.add_argument("out_ckpt", type=Path)
    p.add_argument("--new-tasks", help="comma-separated task names")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="evaluate PSNR/SSIM per task")
    _common(p)
    p.add_argument("ckpt", type=Path)
    p.add_argument("data_dir", type=Path)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", type=Path, help="also write the JSON result here")

    p = sub.add_parser("flops", help="report analytical and counted FLOPs")
    _common(p)
    p.add_argument("--mode", choices=("formula", "exact"), default="formula")
    p.add_argument("--ckpt", type=Path, help="count this checkpoint instead of the configured model")
    p.add_argument("--input", default="64,64", help="H,W of the input image")
    p.add_argument("--gamma", type=float)
    p.add_argument("--sweep", help="param=v1,v2,... or param=start:stop:step (param in gamma|tau|q|C)")
    p.add_argument("--data", type=Path, help="eval set for a PSNR column in gamma sweeps (needs --ckpt)")
    p.add_argument("--out", type=Path, help="write CSV (sweeps) or JSON here")

    p = sub.add_parser("infer", help="restore one image")
    _common(p)
    p.add_argument("ckpt", type=Path)
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--gamma", type=float)
    p.add_argument("--dump-masks", type=Path, metavar="DIR",
                   help="write one PNG per spatial block; hard patches white")
    return parser


def _run_config(args) -> RunConfig:
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file {args.config} does not exist")
    cfg = load_config(args.config)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), name.strip(), value.strip())
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path, seed):
    out_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    (out_dir / "run.cfg").write_text(text + (f"\n# seed = {seed}\n" if seed is not None else ""))


def resolve_checkpoint(path: Path) -> Path:
    """Accept a checkpoint directory or a training output holding ``ema/`` or ``raw/``."""
    if (path / "weights.bin").exists():
        return path
    for sub in ("ema", "raw"):
        if (path / sub / "weights.bin").exists():
            return path / sub
    raise FileNotFoundError(f"no checkpoint found at {path}")


def _parse_values(spec: str, integral: bool):
    if ":" in spec:
        start, stop, step = (Fraction(x) for x in spec.split(":"))
        if step <= 0:
            raise UsageError("sweep step must be positive")
        values, v = [], start
        while v <= stop:
            values.append(v)
            v += step
    else:
        values = [Fraction(x) for x in spec.split(",") if x.strip()]
    return [int(v) if integral else float(v) for v in values]


def cmd_synth(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get("data", "seed", 0)
    if args.counts:
        cfg.set("data", "counts", args.counts)
    if args.size:
        cfg.set("data", "size", str(args.size))
    data = cfg.sections["data"]
    counts = data.get("counts")
    if counts is None and "weights" not in data:
        raise UsageError("give task counts via --counts or [data] counts/weights+total")
    manifest = build_dataset(args.out_dir, counts, data.get("size", 64), seed,
                             weights=data.get("weights"), total=data.get("total"),
                             workers=data.get("workers", 1), prefix=data.get("prefix", ""))
    _echo_config(cfg, args.out_dir, seed)
    print(json.dumps({"entries": len(manifest.entries), "counts": manifest.counts}))


def _train_kwargs(cfg, args):
    t = cfg.sections["train"]
    kw = {"batch_size": t.get("batch_size", 4), "crop": t.get("crop", 64), "log_every": t.get("log_every", 1)}
    steps = args.steps if args.steps is not None else t.get("steps", 500)
    seed = args.seed if args.seed is not None else t.get("seed", 0)
    return steps, seed, kw


def cmd_train(args, cfg):
    from .training import build_model, save_result, train

    steps, seed, kw = _train_kwargs(cfg, args)
    t = cfg.sections["train"]
    model = build_model(cfg.model_config(), seed)
    args.out_ckpt.mkdir(parents=True, exist_ok=True)
    result = train(model, args.data_dir, steps, t.get("lr", 2e-4), seed, t.get("use_ema", True),
                   ema_beta=t.get("ema_beta", 0.999), log_path=args.out_ckpt / "metrics.jsonl", **kw)
    save_result(result, args.out_ckpt, {"seed": seed, "steps": steps})
    _echo_config(cfg, args.out_ckpt, seed)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"steps": steps, "final": last}))


def cmd_extend(args, cfg):
    from .training import ExtensionPlan, extend, save_result

    steps, seed, kw = _train_kwargs(cfg, args)
    e = cfg.sections["extend"]
    new = tuple(x.strip() for x in args.new_tasks.split(",")) if args.new_tasks else e.get("new_tasks")
    if not new:
        raise UsageError("name the new tasks via --new-tasks or [extend] new_tasks")
    base = resolve_checkpoint(args.base_ckpt)
    plan = ExtensionPlan(new, mix_weights=e.get("mix_weights"),
                         lr_base=cfg.get("train", "lr", 2e-4),
                         lr_prompt_multiplier=e.get("lr_prompt_multiplier", 5.0),
                         ema_beta=e.get("ema_beta", 0.999))
    args.out_ckpt.mkdir(parents=True, exist_ok=True)
    result = extend(base, plan, args.data_dir, steps, seed, log_path=args.out_ckpt / "metrics.jsonl", **kw)
    save_result(result, args.out_ckpt, {"seed": seed, "steps": steps, "extended_from": str(base)})
    _echo_config(cfg, args.out_ckpt, seed)
    print(json.dumps({"tasks": list(result.model.config.tasks), "steps": steps}))


def cmd_eval(args, cfg):
    from .metrics import evaluate

    if args.seed is not None:
        torch.manual_seed(args.seed)
    model = load_checkpoint(resolve_checkpoint(args.ckpt))
    gamma = args.gamma if args.gamma is not None else cfg.get("eval", "gamma")
    result = evaluate(model, args.data_dir, gamma)
    text = result.to_json(indent=2)
    if args.out:
        args.out.write_text(text)
    print(text)


def cmd_flops(args, cfg):
    try:
        H, W = (int(x) for x in args.input.split(","))
    except ValueError:
        raise UsageError(f"--input expects H,W, got {args.input!r}") from None
    if args.ckpt:
        model = load_checkpoint(resolve_checkpoint(args.ckpt))
    else:
        from .backbone import CatAIR
        model = CatAIR(cfg.model_config())
    mc = model.config
    gamma = args.gamma if args.gamma is not None else mc.gamma0

    if args.sweep:
        param, sep, spec = args.sweep.partition("=")
        if not sep:
            raise UsageError("--sweep expects param=values")
        param = param.strip()
        if param not in costmodel.SWEEPABLE:
            raise UsageError(f"cannot sweep {param!r}; choose from {sorted(costmodel.SWEEPABLE)}")
        values = _parse_values(spec, integral=param in ("q", "C"))
        if not values:
            raise UsageError("sweep range is empty")
        rows = costmodel.sweep(param, values, mc, (H, W), gamma,
                               model=model if args.ckpt else None, eval_data=args.data)
        text = costmodel.rows_to_csv(rows)
        if args.out:
            args.out.write_text(text)
        sys.stdout.write(text)
        return

    if args.mode == "formula":
        num = lambda x: int(x) if x.denominator == 1 else float(x)
        mixed, complex_ = costmodel.flops_cross_layer(H, W, mc.channels, mc.enc_blocks, mc.dec_blocks)
        sp_mixed, sp_attn = costmodel.flops_spatial(H, W, mc.channels, mc.tau, mc.window, gamma, mc.kernel)
        out = {
            "mode": "formula", "input": [H, W], "channels": mc.channels, "gamma": gamma,
            "se_block": num(costmodel.flops_se(H, W, mc.channels)),
            "bottleneck_block": num(costmodel.flops_bottleneck(H, W, mc.channels)),
            "cross_layer": {"mixed": num(mixed), "all_complex": num(complex_),
                            "ratio": float(mixed / complex_)},
            "spatial": {"mixed": num(sp_mixed), "attention_only": num(sp_attn),
                        "ratio": float(sp_mixed / sp_attn)},
            "model_total": num(costmodel.flops_model_formula(H, W, mc, gamma)),
        }
        text = json.dumps(out, indent=2)
    else:
        report = costmodel.count_exact(model, (H, W), gamma)
        out = report.to_dict()
        out["comparison"] = {k: (float(v) if isinstance(v, Fraction) else v)
                             for k, v in costmodel.compare_modes(model, (H, W), gamma).items()}
        text = json.dumps(out, indent=2)
    if args.out:
        args.out.write_text(text)
    print(text)


def mask_images(output, size):
    """Nearest-neighbour upsampled ``uint8`` masks (255 = hard) for each spatial block."""
    H, W = size
    masks = {}
    for block_id, d in zip(output.block_ids, output.decisions):
        m = d.mask()[0].numpy()
        ry, rx = H // m.shape[0], W // m.shape[1]
        masks[block_id] = np.repeat(np.repeat(m, ry, axis=0), rx, axis=1).astype(np.uint8) * 255
    return masks


@torch.no_grad()
def cmd_infer(args, cfg):
    from ._validation import to_numpy, to_tensor

    if args.seed is not None:
        torch.manual_seed(args.seed)
    model = load_checkpoint(resolve_checkpoint(args.ckpt))
    gamma = args.gamma if args.gamma is not None else cfg.get("eval", "gamma")
    image = read_png(args.input)
    out = model(to_tensor(image[None]), gamma=gamma, mode="infer")
    restored = np.clip(to_numpy(out.restored)[0], 0.0, 1.0)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_png(args.output, restored)
    if args.dump_masks:
        args.dump_masks.mkdir(parents=True, exist_ok=True)
        for j, (block_id, mask) in enumerate(mask_images(out, image.shape[:2]).items()):
            write_png(args.dump_masks / f"{j:02d}_{block_id}.png", mask)
    print(json.dumps({"output": str(args.output),
                      "gammas": [round(float(g), 6) for g in out.gammas]}))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "extend": cmd_extend, "eval": cmd_eval,
            "flops": cmd_flops, "infer": cmd_infer}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        if args.seed is not None:
            torch.manual_seed(args.seed)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        print(f"catair {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit status 2
        log.debug("command failed", exc_info=True)
        print(f"catair {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
