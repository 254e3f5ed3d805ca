"""``flagdit`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .apps import EditRequest, RegionError, RegionPrompt, compose_sample, edit, style_batch_sample
from .codec import Layout, LayoutError, layout_for, read_grid, write_grid, write_pnm
from .config import RunConfigError, load_run_config
from .data import build_dataset
from .model import FlagDiT, ForwardOptions
from .sampler import SamplerConfig, SamplerConfigError, euler_solve, extrapolation_options
from .train import NumericalError, train_loop, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------


def _load_model(path) -> tuple[FlagDiT, dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    try:
        return checkpoint.load(p)
    except checkpoint.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def read_labels(path) -> dict[str, int]:
    """``name id`` or ``name = id`` per line; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"labels file not found: {p}")
    labels = {}
    for no, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").split()
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise UsageError(f"{p}:{no}: expected 'name id', got {line!r}")
        labels[parts[0]] = int(parts[1])
    return labels


def parse_prompt(text: str, vocab: int, labels: dict[str, int] | None = None) -> list[int]:
    """Comma-separated vocab ids or label names."""
    ids = []
    for tok in text.replace(" ", ",").split(","):
        if not tok:
            continue
        if tok.lstrip("-").isdigit():
            i = int(tok)
        elif labels and tok in labels:
            i = labels[tok]
        else:
            raise UsageError(f"unknown prompt token {tok!r}")
        if not 0 <= i < vocab:
            raise UsageError(f"prompt id {i} outside vocabulary [0, {vocab})")
        ids.append(i)
    if not ids:
        raise UsageError("empty prompt")
    return ids


def parse_region(text: str, vocab: int, labels=None) -> RegionPrompt:
    """``"r0,c0,r1,c1:ids"`` with a half-open patch box."""
    box, sep, ids = text.partition(":")
    if not sep:
        raise UsageError(f"region {text!r} is not of the form r0,c0,r1,c1:ids")
    try:
        coords = tuple(int(v) for v in box.split(","))
    except ValueError:
        raise UsageError(f"region box {box!r} must be four integers") from None
    if len(coords) != 4:
        raise UsageError(f"region box {box!r} must be four integers")
    try:
        return RegionPrompt(tuple(parse_prompt(ids, vocab, labels)), coords)
    except RegionError as exc:
        raise UsageError(str(exc)) from None


def _sampler_config(args, meta: dict) -> SamplerConfig:
    base = dict(meta.get("sampler", {}))
    for flag, key in (("steps", "steps"), ("shift", "shift"), ("cfg", "cfg_scale")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "no_proportional", False):
        base["proportional_attention"] = False
    try:
        return SamplerConfig(**base)
    except SamplerConfigError as exc:
        raise UsageError(str(exc)) from None


def _layout(model: FlagDiT, args) -> Layout:
    c = model.config
    H = args.height or c.train_height
    W = args.width or c.train_width
    T = args.frames or c.train_frames
    try:
        return Layout(H, W, T, c.patch_size)
    except LayoutError as exc:
        raise UsageError(str(exc)) from None


def _base_options(model: FlagDiT, layout: Layout, cfg: SamplerConfig) -> ForwardOptions | None:
    """Longer-than-training layouts get NTK RoPE and proportional attention."""
    if layout.length > model.config.train_layout().length:
        return extrapolation_options(model, layout, cfg)
    return None


def _write_outputs(path, grid) -> list[Path]:
    path = Path(path)
    write_grid(path, grid)
    written = [path]
    T, C = grid.shape[2], grid.shape[3]
    if T == 1 and C in (1, 3):
        prev = path.with_suffix(".pgm" if C == 1 else ".ppm")
        write_pnm(prev, grid)
        written.append(prev)
    return written


def _labels(args):
    return read_labels(args.labels) if getattr(args, "labels", None) else None


# --- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    tcfg = run.train if args.steps is None else replace(run.train, steps=args.steps)
    model = FlagDiT(run.model_config())
    dataset = build_dataset(run.data)

    def progress(rec):
        if args.verbose and rec.get("event") == "log":
            print(f"step {rec['step']:>6}  loss {rec['loss']:.5f}  "
                  f"grad {rec['grad_norm']:.3f}", file=sys.stderr)

    result = train_loop(model, dataset, tcfg, callbacks=[progress])
    out = Path(args.out)
    meta = {"train": asdict(tcfg), "sampler": asdict(run.sampler), "data": asdict(run.data)}
    checkpoint.save(model, out, meta)
    csv_path = out.with_suffix(".loss.csv")
    write_loss_csv(csv_path, result.log)
    print(f"wrote {out} and {csv_path}")
    if not args.no_plot:
        from .report import plot_loss_curve

        png = out.with_suffix(".loss.png")
        plot_loss_curve(result.log, png)
        print(f"wrote {png}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _sampler_config(args, meta)
    prompt = parse_prompt(args.prompt, model.config.vocab_size, _labels(args))
    layout = _layout(model, args)
    opts = _base_options(model, layout, cfg)
    grid = euler_solve(model, layout, prompt, cfg, np.random.default_rng(args.seed), opts=opts)
    for p in _write_outputs(args.out, grid):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_edit(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _sampler_config(args, meta)
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input grid not found: {src}")
    try:
        grid = read_grid(src)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    prompt = parse_prompt(args.prompt, model.config.vocab_size, _labels(args))
    try:
        req = EditRequest(grid, prompt, start=args.lam, normalize=not args.no_normalize)
        out = edit(model, req, cfg, np.random.default_rng(args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for p in _write_outputs(args.out, out):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_compose(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _sampler_config(args, meta)
    labels = _labels(args)
    regions = [parse_region(r, model.config.vocab_size, labels) for r in args.region]
    layout = _layout(model, args)
    try:
        grid = compose_sample(model, regions, layout, cfg, np.random.default_rng(args.seed),
                              opts=_base_options(model, layout, cfg))
    except RegionError as exc:
        raise UsageError(str(exc)) from None
    for p in _write_outputs(args.out, grid):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_style(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = _sampler_config(args, meta)
    labels = _labels(args)
    prompts = [parse_prompt(p, model.config.vocab_size, labels) for p in args.prompt]
    n = args.batch if args.batch is not None else len(prompts)
    if len(prompts) == 1:
        prompts = prompts * n
    if len(prompts) != n:
        raise UsageError(f"--batch {n} does not match {len(prompts)} prompts")
    if n < 2:
        raise UsageError("style-consistent sampling needs --batch of at least 2")
    layout = _layout(model, args)
    if layout.length > model.config.train_layout().length:
        raise UsageError("style batches are sampled at or below the training size")
    grids = style_batch_sample(model, prompts, layout, cfg, np.random.default_rng(args.seed),
                               share=not args.independent)
    out = Path(args.out)
    for i, g in enumerate(grids):
        for p in _write_outputs(out.with_name(f"{out.stem}_{i}{out.suffix or '.lfg'}"), g):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_gates(args) -> int:
    model, _ = _load_model(args.checkpoint)
    gates = np.abs(model.gate_values().astype(np.float64))
    tau = args.threshold
    active = gates >= tau
    if args.out:
        out = Path(args.out)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("layer", "head", "abs_tanh_alpha", "active"))
            for (layer, head), g in np.ndenumerate(gates):
                w.writerow((layer, head, repr(float(g)), int(active[layer, head])))
        print(f"wrote {out}")
        if not args.no_plot:
            from .report import plot_gates

            png = out.with_suffix(".png")
            plot_gates(gates, png, tau)
            print(f"wrote {png}")
    frac = 1.0 - float(active.mean())
    print(f"deactivated at tau={tau:g}: {int((~active).sum())}/{active.size} "
          f"({100 * frac:.1f}%)")
    if args.sweep:
        for t in args.sweep:
            print(f"  tau={t:g}: {100 * float(np.mean(gates < t)):.1f}% deactivated")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, meta = _load_model(args.checkpoint)
        c = model.config
        info = {"config": c.to_dict(), "parameters": sum(p.data.size for p in model.parameters()),
                "meta": meta}
        patch = args.patch or c.patch_size
        H, W, T = (args.height or c.train_height, args.width or c.train_width,
                   args.frames or c.train_frames)
    else:
        if not (args.height and args.width):
            raise UsageError("inspect needs --height and --width (or a checkpoint)")
        info = {}
        patch = args.patch or 1
        H, W, T = args.height, args.width, args.frames or 1
    try:
        info["layout"] = {"height": H, "width": W, "frames": T, "patch": patch,
                          **layout_for(H, W, T, patch)}
    except LayoutError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _sampling_flags(p, geometry: bool = True) -> None:
    p.add_argument("checkpoint", help="FDT1 checkpoint")
    if geometry:
        p.add_argument("--height", type=int, help="grid height (default: training size)")
        p.add_argument("--width", type=int, help="grid width (default: training size)")
        p.add_argument("--frames", type=int, help="frames (default: training value)")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--shift", type=float, help="time-shift factor m >= 1")
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--no-proportional", action="store_true",
                   help="disable proportional attention when extrapolating")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", help="file mapping label names to vocab ids")
    p.add_argument("--out", required=True, help="output LFG1 grid path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flagdit", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a TOML run config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="checkpoint path; CSV/PNG written alongside")
    p.add_argument("--steps", type=int, help="override [train] steps")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--verbose", "-v", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a grid")
    _sampling_flags(p)
    p.add_argument("--prompt", required=True, help="comma-separated ids or label names")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="partial-ODE edit of an existing grid")
    _sampling_flags(p, geometry=False)
    p.add_argument("--input", required=True, help="LFG1 grid to edit")
    p.add_argument("--prompt", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2,
                   help="start time in [0, 1]; 1 returns the (normalized) input")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("compose", help="region-wise prompts in one sample")
    _sampling_flags(p)
    p.add_argument("--region", action="append", required=True,
                   help='"r0,c0,r1,c1:ids" half-open patch box; repeatable')
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("style", help="style-consistent batch; element 0 is the anchor")
    _sampling_flags(p)
    p.add_argument("--prompt", action="append", required=True, help="repeatable")
    p.add_argument("--batch", type=int, help="batch size (replicates a single prompt)")
    p.add_argument("--independent", action="store_true", help="disable anchor sharing")
    p.set_defaults(func=cmd_style)

    p = sub.add_parser("gates", help="per-layer/head |tanh(alpha)| report")
    p.add_argument("checkpoint")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--out", help="CSV path; a PNG figure is written alongside")
    p.add_argument("--sweep", type=float, nargs="*", help="extra thresholds to report")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("inspect", help="print sequence layout (and checkpoint summary)")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--patch", type=int)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, RunConfigError) as exc:
        print(f"flagdit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"flagdit {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"flagdit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
