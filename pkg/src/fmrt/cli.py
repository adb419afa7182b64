"""Command-line entry point: match, eval, selftest, train-micro, synth.

Exit codes: 0 success, 1 input error, 2 numerical failure, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff.serialize import WeightsFormatError, atomic_write
from .autodiff.tensor import ShapeError
from .backbone import InputError
from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_ini
from .fine import FineMatchSet
from .imageio import ImageError, read_image, write_image

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3

MATCH_FIELDS = ("iA", "jB", "xA", "yA", "xB", "yB", "sigma_x", "sigma_y", "conf_coarse", "conf_fine")

log = logging.getLogger("fmrt")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config
def _apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """``section.key=value`` strings applied on top of ``cfg``."""
    if not overrides:
        return cfg
    sections: Dict[str, List[str]] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        sections.setdefault(section, []).append(f"{name} = {value}")
    text = "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())
    return parse_ini(text, cfg)


def resolve_config(args, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or (RunConfig() if getattr(args, "preset", "desk") == "full" else RunConfig.desk())
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    cfg = _apply_overrides(cfg, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path: str, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ------------------------------------------------------------- match dumps
def matches_to_records(fine: FineMatchSet) -> List[Dict[str, object]]:
    out = []
    for k in range(len(fine)):
        values = (
            int(fine.i[k]), int(fine.j[k]),
            float(fine.pa[k, 0]), float(fine.pa[k, 1]), float(fine.pb[k, 0]), float(fine.pb[k, 1]),
            float(fine.sigma[k, 0]), float(fine.sigma[k, 1]),
            float(fine.conf_coarse[k]), float(fine.conf[k]),
        )
        out.append(dict(zip(MATCH_FIELDS, values)))
    return out


def write_match_dump(header: Dict[str, object], records: Sequence[Dict[str, object]]) -> str:
    """JSON-lines text: a header object, then one object per match."""
    lines = [json.dumps({"header": header}, sort_keys=True)]
    lines += [json.dumps({k: r[k] for k in MATCH_FIELDS}) for r in records]
    return "\n".join(lines) + "\n"


def parse_match_dump(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty match dump")
    first = json.loads(lines[0])
    if "header" not in first:
        raise ValueError("match dump is missing its header line")
    records = [json.loads(ln) for ln in lines[1:]]
    for r in records:
        if tuple(r) != MATCH_FIELDS:
            raise ValueError(f"bad match record fields: {sorted(r)}")
    return first["header"], records


# ---------------------------------------------------------------- commands
def _load_model(weights: str, args):
    meta = read_meta(weights)
    base = RunConfig.from_dict(meta["config"]) if meta and "config" in meta else None
    cfg = resolve_config(args, base)
    return load_checkpoint(weights, cfg)


def cmd_match(args) -> int:
    img_a = read_image(args.image_a)
    img_b = read_image(args.image_b)
    if img_a.shape != img_b.shape:
        raise CommandError(f"image sizes differ: {img_a.shape} vs {img_b.shape}")
    ckpt = _load_model(args.weights, args)
    t0 = time.perf_counter()
    _, fine = ckpt.model.match(img_a, img_b)
    elapsed = time.perf_counter() - t0
    header = {
        "config": ckpt.model.cfg.to_dict(),
        "image_a": os.path.basename(args.image_a),
        "image_b": os.path.basename(args.image_b),
        "size": list(img_a.shape),
        "n_matches": len(fine),
    }
    atomic_write(args.out, write_match_dump(header, matches_to_records(fine)).encode("utf-8"))
    print(f"{len(fine)} matches written to {args.out} in {elapsed:.2f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import eval_pairs, evaluate

    if args.pairs <= 0:
        raise CommandError("no pairs")
    ckpt = _load_model(args.weights, args)
    cfg = ckpt.model.cfg
    pairs = eval_pairs(cfg, args.pairs, cfg.seed)
    report = evaluate(ckpt.model, pairs)
    out = report.to_dict()
    if args.out:
        _write_json(args.out, out)
    agg = out["aggregate"]
    for source in ("coarse", "fine"):
        a = agg[source]
        mre = a["mean_reprojection_error"]
        print(
            f"{source:>6}: CCM {a['ccm']}  AUC {a['auc']}  matches {a['n_matches']}  "
            f"mean err {'n/a' if mre is None else f'{mre:.3f}'}  failures {a['estimation_failures']}"
        )
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    t0 = time.perf_counter()
    try:
        report = run_selftest(
            seed=args.seed, fault=args.fault, names=args.check, on_result=lambda r: print(r.line(), flush=True)
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    status = "passed" if report.passed else f"FAILED: {', '.join(report.failures)}"
    print(f"selftest {status} ({len(report.results)} checks, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if report.passed else EXIT_SELFTEST


def cmd_train_micro(args) -> int:
    from .model import FMRT
    from .training import NumericalError, make_pairs, micro_train, trace_to_csv

    if args.resume:
        ckpt = _load_model(args.resume, args)
        model, start, velocity = ckpt.model, ckpt.step, ckpt.velocity
    else:
        model, start, velocity = FMRT(resolve_config(args)), 0, {}
    cfg = model.cfg
    steps = cfg.steps if args.steps is None else args.steps
    if steps < 0:
        raise CommandError("steps must be nonnegative")
    pairs = make_pairs(cfg)
    t0 = time.perf_counter()
    try:
        result = micro_train(model, pairs, steps, cfg, start_step=start, velocity=velocity)
    except NumericalError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from exc
    save_checkpoint(args.out, model, result.steps_done, result.velocity)
    trace_path = args.trace or os.path.splitext(args.out)[0] + ".csv"
    atomic_write(trace_path, trace_to_csv(result.trace, cfg).encode("utf-8"))
    print(
        f"steps {start}..{result.steps_done}: loss {result.initial_loss:.4f} -> {result.final_loss:.4f} "
        f"in {time.perf_counter() - t0:.1f}s; checkpoint {args.out}, trace {trace_path}"
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    from .geometry.synth import synth_pair

    cfg = resolve_config(args)
    pair = synth_pair(cfg.seed, cfg.image_size, cfg.warp_magnitude, cfg.photometric)
    os.makedirs(args.out_dir, exist_ok=True)
    ext = args.format
    write_image(os.path.join(args.out_dir, f"a.{ext}"), pair.img_a)
    write_image(os.path.join(args.out_dir, f"b.{ext}"), pair.img_b)
    _write_json(
        os.path.join(args.out_dir, "homography.json"),
        {"config": cfg.to_dict(), "seed": cfg.seed, "H": pair.warp.H.tolist()},
    )
    print(f"pair for seed {cfg.seed} written to {args.out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", choices=("desk", "full"), default="desk", help="base config before the file: desk scale or full-size model")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="override data.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmrt", description="Detector-free coarse-to-fine image matcher.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two grayscale images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="JSON-lines match dump")
    _config_args(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="homography evaluation on synthetic pairs")
    p.add_argument("--weights", required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--out", help="JSON report path")
    _config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="gradient checks, oracle comparisons and invariants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", help="inject a known bug (dw_conv2d) to exercise the checks")
    p.add_argument("--check", action="append", metavar="NAME", help="run only this check, e.g. grad:dw_conv2d")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("train-micro", help="desk-scale training on synthetic pairs")
    p.add_argument("--steps", type=int, help="defaults to train.steps")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss CSV path (default: next to the checkpoint)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _config_args(p)
    p.set_defaults(func=cmd_train_micro)

    p = sub.add_parser("synth", help="write a synthetic pair and its homography")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    _config_args(p)
    p.set_defaults(func=cmd_synth)
    return parser


def _limit_threads():
    value = os.environ.get("FMRT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise CommandError(f"FMRT_THREADS must be an integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ImageError, InputError, ShapeError, WeightsFormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
