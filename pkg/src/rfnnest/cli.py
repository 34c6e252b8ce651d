"""Command-line front end: training, fusing, strategy ablations, metric evaluation, gradient self-check.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort,
5 gradient-check failure. Diagnostics go to stderr; stdout carries only data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, gradsuite, images, metrics
from . import networks as nw
from . import training as tr
from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, CorpusError, FormatError, InputError, NumericError, ShapeError
from .strategies import get_strategy

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5
STRATEGY_CHOICES = ("rfn", "add", "max", "l1", "nuclear", "sca")

# Generator seeds of the synthetic fixture corpus selected with --corpus synthetic:N.
FIXTURE_SEEDS = {"single": 0, "paired": 1}

# Laptop-sized widths used when a config does not specify an architecture.
DESK_ARCH = {"stem_channels": 8, "scale_channels": [16, 24, 32, 40]}
# The full-scale 1e-4 assumes tens of thousands of steps; desk runs take hundreds.
DESK_LR = 1e-3

CONFIG_HELP = f"""\
config file (JSON, schema_version {SCHEMA_VERSION}): an object with "schema_version": {SCHEMA_VERSION}
and any of the training keys {sorted(f.name for f in dataclasses.fields(tr.TrainConfig))}.
"stage1", "stage2" and "arch" are nested objects with the loss and architecture
fields. Unknown keys are rejected; command-line flags override file values."""

log = logging.getLogger("rfnnest")


class GradcheckFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
def _nested(cls, value, where: str):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def read_config(path: str | Path | None) -> dict:
    """Load and validate a JSON config file; returns the training keys (without schema_version)."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return raw


def build_train_config(args: argparse.Namespace, stage: str) -> tr.TrainConfig:
    values = read_config(args.config)
    values.setdefault("arch", dict(DESK_ARCH))
    values.setdefault("lr", DESK_LR)
    for key in ("seed", "lr", "steps", "batch_size", "image_size", "epochs", "precision"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.deterministic:
        values["deterministic"] = True
    values["stage"] = stage
    values["arch"] = _nested(nw.ArchitectureConfig, values["arch"], "arch")
    values["stage1"] = _nested(tr.Stage1LossConfig, values.get("stage1", {}), "stage1")
    values["stage2"] = _nested(tr.Stage2LossConfig, values.get("stage2", {}), "stage2")
    return _nested(tr.TrainConfig, values, "config")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def _training_corpus(args, cfg: tr.TrainConfig, mode: str) -> data.Dataset:
    if args.corpus is None:
        raise ConfigError("--corpus is required")
    if args.corpus.startswith("synthetic:"):
        try:
            n = int(args.corpus.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic corpus spec {args.corpus!r} (expected synthetic:N)") from None
        # The fixture corpus is fixed; --seed only changes initialisation and batch order.
        if mode == "single":
            return data.synthetic_images(n, cfg.image_size, seed=FIXTURE_SEEDS["single"])
        return data.synthetic_pairs(n, cfg.image_size, seed=FIXTURE_SEEDS["paired"])
    return data.load_corpus(args.corpus, mode, cfg.image_size)


def _finish_training(result: tr.TrainResult, out: Path, cfg: tr.TrainConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.weights, out / "weights.rfnn", dtype=cfg.dtype)
    (out / "loss.csv").write_text(tr.history_csv(result.history))
    losses = result.losses()
    if len(losses):
        sm = tr.smoothed(losses)
        print(f"steps={len(losses)} first_loss={losses[0]:.6g} last_loss={losses[-1]:.6g} "
              f"smoothed_ratio={sm[-1] / sm[0]:.4f}", file=sys.stderr)
    print(out / "weights.rfnn")


def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_train_auto(args) -> int:
    cfg = build_train_config(args, "auto")
    ds = _training_corpus(args, cfg, "single")
    out = _out_dir(args, "runs/auto")
    cfg.checkpoint_dir = cfg.checkpoint_dir or (str(out) if args.epoch_checkpoints else None)
    _finish_training(tr.train_stage1(cfg, ds), out, cfg)
    return EXIT_OK


def cmd_train_rfn(args) -> int:
    cfg = build_train_config(args, "rfn")
    if args.checkpoint:
        cfg.init_checkpoint = args.checkpoint
    if not cfg.init_checkpoint:
        raise ConfigError("train-rfn needs a stage-1 checkpoint (--checkpoint)")
    if not Path(cfg.init_checkpoint).is_file():
        raise ConfigError(f"stage-1 checkpoint not found: {cfg.init_checkpoint}")
    ds = _training_corpus(args, cfg, "paired")
    out = _out_dir(args, "runs/rfn")
    cfg.checkpoint_dir = cfg.checkpoint_dir or (str(out) if args.epoch_checkpoints else None)
    _finish_training(tr.train_stage2(cfg, ds), out, cfg)
    return EXIT_OK


def cmd_train_one_stage(args) -> int:
    cfg = build_train_config(args, "one_stage")
    ds = _training_corpus(args, cfg, "paired")
    out = _out_dir(args, "runs/one_stage")
    cfg.checkpoint_dir = cfg.checkpoint_dir or (str(out) if args.epoch_checkpoints else None)
    _finish_training(tr.train_one_stage(cfg, ds), out, cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fusion and evaluation
# ---------------------------------------------------------------------------
def load_model(path: str | Path) -> tuple[nw.ModelWeights, nw.ArchitectureConfig]:
    w = load_checkpoint(path).astype(np.float64)
    return w, nw.infer_architecture(w)


def fuse_arrays(ir: np.ndarray, vi: np.ndarray, w: nw.ModelWeights, arch: nw.ArchitectureConfig,
                strategy: str = "rfn") -> np.ndarray:
    """Fuse two grayscale arrays in [0,1]; returns the clamped fused image."""
    if ir.shape != vi.shape:
        raise CorpusError(f"infrared {ir.shape} and visible {vi.shape} images differ in size")
    fn = None if strategy == "rfn" else get_strategy(strategy)
    with no_grad():
        out = nw.fuse_forward(Tensor(ir[None, None]), Tensor(vi[None, None]), w, arch, strategy=fn)
    return out.data[0, 0]


def cmd_fuse(args) -> int:
    for flag in ("checkpoint", "ir", "vi", "out"):
        if getattr(args, flag) is None:
            raise ConfigError(f"--{flag} is required")
    w, arch = load_model(args.checkpoint)
    ir, vi = images.read_gray(args.ir), images.read_gray(args.vi)
    fused = fuse_arrays(ir, vi, w, arch, args.strategy)
    images.write_gray(args.out, fused)
    print(args.out)
    return EXIT_OK


def _aligned_names(fused_dir: Path, ir_dir: Path, vi_dir: Path) -> list[str]:
    listing = {}
    for d in (fused_dir, ir_dir, vi_dir):
        if not d.is_dir():
            raise CorpusError(f"directory does not exist: {d}")
        listing[d] = {p.stem: p.name for p in images.list_images(d)}
    stems = [set(v) for v in listing.values()]
    common = set.intersection(*stems)
    orphans = sorted(f"{d / names[s]}" for d, names in listing.items() for s in names if s not in common)
    if orphans:
        raise CorpusError("orphan files without a matching triple: " + ", ".join(orphans))
    return sorted(common)


def evaluate_triples(fused_dir, ir_dir, vi_dir) -> list[metrics.MetricReport]:
    fused_dir, ir_dir, vi_dir = Path(fused_dir), Path(ir_dir), Path(vi_dir)
    reports = []
    for stem in _aligned_names(fused_dir, ir_dir, vi_dir):
        trip = []
        for d in (fused_dir, ir_dir, vi_dir):
            (path,) = [p for p in images.list_images(d) if p.stem == stem]
            trip.append(images.read_gray(path))
        reports.append(metrics.evaluate_all(*trip, name=stem))
    return reports


def cmd_evaluate(args) -> int:
    for flag in ("fused", "ir", "vi"):
        if getattr(args, flag) is None:
            raise ConfigError(f"--{flag} is required")
    if Path(args.fused).is_file():
        trip = [images.read_gray(p) for p in (args.fused, args.ir, args.vi)]
        if len({t.shape for t in trip}) != 1:
            raise CorpusError("fused, infrared and visible images differ in size")
        reports = [metrics.evaluate_all(*trip, name=Path(args.fused).stem)]
    else:
        reports = evaluate_triples(args.fused, args.ir, args.vi)
        if not reports:
            raise CorpusError(f"no images to evaluate in {args.fused}")
    text = metrics.format_csv(reports, metrics.mean_report(reports))
    _emit(text, args.out)
    return EXIT_OK


def ablation_table(w: nw.ModelWeights, arch: nw.ArchitectureConfig, corpus: data.Dataset,
                   strategies: Sequence[str]) -> list[metrics.MetricReport]:
    """Mean metrics over the corpus for every requested strategy plus the trained RFN (last row)."""
    rows = [s for s in strategies if s != "rfn"] + ["rfn"]
    table = []
    for s in rows:
        reports = [metrics.evaluate_all(fuse_arrays(p.ir, p.vi, w, arch, s), p.ir, p.vi, name=p.id)
                   for p in corpus.pairs]
        table.append(metrics.mean_report(reports, name=s))
    return table


def cmd_ablate(args) -> int:
    if args.checkpoint is None or args.corpus is None:
        raise ConfigError("--checkpoint and --corpus are required")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGY_CHOICES]
    if bad:
        raise ConfigError(f"unknown strategies {bad}; choose from {list(STRATEGY_CHOICES)}")
    w, arch = load_model(args.checkpoint)
    corpus = data.load_corpus(args.corpus, "paired", image_size=args.image_size)
    if len(corpus) == 0:
        raise CorpusError(f"no image pairs in {args.corpus}")
    _emit(metrics.format_csv(ablation_table(w, arch, corpus, strategies), label="strategy"), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, seconds = gradsuite.run_suite(args.seed if args.seed is not None else 0)
    _emit(gradsuite.format_report(results), args.out)
    print(f"gradient suite: {len(results)} checks in {seconds:.1f}s", file=sys.stderr)
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAIL {r.name}: worst relative error {r.worst:.3e} >= {r.tolerance:.0e}", file=sys.stderr)
        raise GradcheckFailure(", ".join(r.name for r in failed))
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help=f"JSON config, schema_version {SCHEMA_VERSION}")
    p.add_argument("--seed", type=int, help="random seed (weights init, batch order, synthetic corpus)")
    p.add_argument("--out", metavar="PATH", help="output path (directory for training, file otherwise)")
    p.add_argument("--deterministic", action="store_true",
                   help="plain SGD with fixed batch order, so resumed runs are bit-exact")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", metavar="DIR", help="corpus directory, or synthetic:N for the fixture generator")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--steps", type=int, help="number of optimizer steps (overrides epochs)")
    p.add_argument("--epochs", type=int, help="epochs over the corpus when --steps is not given")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="images per batch")
    p.add_argument("--image-size", dest="image_size", type=int, help="training resolution (multiple of 16)")
    p.add_argument("--precision", choices=("float32", "float64"), help="training precision")
    p.add_argument("--epoch-checkpoints", action="store_true", help="also save a checkpoint after every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfnnest",
        description="Infrared/visible image fusion with residual fusion networks and a nest-connected decoder.",
        epilog=CONFIG_HELP + "\n\nexit codes: 0 ok, 2 config, 3 data, 4 numeric abort, 5 gradient check failure",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _shared(p)
        p.set_defaults(func=fn)
        return p

    p = add("train-auto", cmd_train_auto, "stage 1: train encoder and decoder as an autoencoder")
    _training_flags(p)
    p = add("train-rfn", cmd_train_rfn, "stage 2: train the fusion blocks with the autoencoder frozen")
    _training_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", help="stage-1 checkpoint")
    p = add("train-one-stage", cmd_train_one_stage, "ablation: train every network jointly on the fusion loss")
    _training_flags(p)

    p = add("fuse", cmd_fuse, "fuse one infrared/visible pair into an 8-bit grayscale image")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--ir", metavar="PATH", help="infrared image")
    p.add_argument("--vi", metavar="PATH", help="visible image")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="rfn", help="fusion rule at every scale")

    p = add("evaluate", cmd_evaluate, "compute En, SD, MI, Nabf, SCD and MS-SSIM as CSV with a MEAN row")
    p.add_argument("--fused", metavar="PATH", help="fused image or directory")
    p.add_argument("--ir", metavar="PATH", help="infrared image or directory")
    p.add_argument("--vi", metavar="PATH", help="visible image or directory")

    p = add("ablate", cmd_ablate, "compare handcrafted strategies with the trained RFN on a paired corpus")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--corpus", metavar="DIR", help="paired corpus directory (ir/ and vi/)")
    p.add_argument("--strategies", default="add,max,l1,nuclear,sca",
                   help="comma-separated strategies; rfn is always added as the last row")
    p.add_argument("--image-size", dest="image_size", type=int, default=None,
                   help="resize corpus images (default: native size)")

    add("gradcheck", cmd_gradcheck, "finite-difference check of every op, loss, the RFN block and the decoder")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GradcheckFailure as e:
        print(f"gradient check failed: {e}", file=sys.stderr)
        return EXIT_GRADCHECK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, FormatError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
