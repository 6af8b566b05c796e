"""``mtscene`` command-line entry point.

Exit codes: 0 success, 1 invalid input (flags, config, data, checkpoint),
2 runtime failure (non-finite training, failed gradient check, I/O error).
Every file is written through a temporary file and renamed into place.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import Config, ConfigError, help_text, load_config
from .data import DataError, default_manifest, generate_scene, load_dataset, read_sample, write_dataset
from .encoder import flops_report, partial_full_ratio
from .gradsuite import format_rows, run_suite
from .io import FormatError, atomic_write_text, read_checkpoint, write_checkpoint, write_tensor
from .scheduler import StreamSpec, simulate_scheduler
from .tensor import NonFiniteError
from .trainer import (CheckpointMismatch, TrainingError, evaluate, infer, init_model, params_from_arrays,
                      params_to_arrays, train)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

CHECKPOINT_NAME = "model.ckpt"
CONFIG_NAME = "config.cfg"
LOG_NAME = "train_log.tsv"

log = logging.getLogger("mtscene")


class UsageError(Exception):
    """Bad command-line flags; exits with the validation code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _config(path: Optional[str]) -> Config:
    return load_config(path) if path else Config()


def _out_dir(path: str) -> Path:
    d = Path(path)
    if d.exists() and not d.is_dir():
        raise UsageError(f"--out {d} exists and is not a directory")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _kv(pairs: Sequence[Tuple[str, object]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _emit(out: Optional[str], stem: str, table: str, pairs: Sequence[Tuple[str, object]]) -> None:
    sys.stdout.write(table)
    if out:
        d = _out_dir(out)
        atomic_write_text(d / f"{stem}.txt", table)
        atomic_write_text(d / f"{stem}.kv", _kv(pairs))


def _check_manifest(cfg: Config, manifest) -> None:
    if len(manifest.semantic_names) != cfg["semantic.num_classes"]:
        raise ConfigError(f"dataset has {len(manifest.semantic_names)} semantic classes, "
                          f"semantic.num_classes={cfg['semantic.num_classes']}")
    if sorted(manifest.things) != sorted(cfg.thing_classes()):
        raise ConfigError(f"dataset thing classes {manifest.things} differ from configured "
                          f"{sorted(cfg.thing_classes())}")
    if len(manifest.scene_names) != cfg["scene.num_classes"]:
        raise ConfigError(f"dataset has {len(manifest.scene_names)} scene classes, "
                          f"scene.num_classes={cfg['scene.num_classes']}")


def _load_model(checkpoint: str, config: Optional[str]):
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg_path = Path(config) if config else ckpt.parent / CONFIG_NAME
    cfg = load_config(cfg_path)
    params = params_from_arrays(cfg, read_checkpoint(ckpt))
    return cfg, params


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    dcfg = cfg.data()
    num_things, num_scenes = cfg["data.num_things"], cfg["scene.num_classes"]
    samples = [generate_scene(args.seed + k, dcfg, num_things, num_scenes) for k in range(args.count)]
    write_dataset(_out_dir(args.out), samples, default_manifest(dcfg, num_things, num_scenes))
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values({"train.seed": args.seed})
    manifest, samples = load_dataset(args.data)
    _check_manifest(cfg, manifest)
    every = max(1, args.log_every)

    def progress(it, row):
        if it % every == 0:
            log.info("iteration %d total %.6f", it, row[-1])

    result = train(cfg, samples, on_step=progress)
    d = _out_dir(args.out)
    write_checkpoint(d / CHECKPOINT_NAME, params_to_arrays(result.params))
    atomic_write_text(d / CONFIG_NAME, cfg.to_text())
    atomic_write_text(d / LOG_NAME, result.log_text())
    first, last = result.log[0][-1], result.log[-1][-1]
    print(f"trained {len(result.log)} iterations, total loss {first:.6g} -> {last:.6g}; wrote {d}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = _load_model(args.checkpoint, args.config)
    manifest, samples = load_dataset(args.data)
    _check_manifest(cfg, manifest)
    report = evaluate(cfg, params, samples)
    _emit(args.out, "metrics", report.to_table(), report.key_values())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, params = _load_model(args.checkpoint, args.config)
    sample = read_sample(args.sample)
    (_, pan, scene), = infer(cfg, params, [sample])
    d = _out_dir(args.out)
    write_tensor(d / "category.mt", pan.category.astype(np.float32))
    write_tensor(d / "instance.mt", pan.instance.astype(np.float32))
    defined = sorted(i for i, a in pan.orientations.items() if a is not None)
    table = np.array([[i, pan.orientations[i]] for i in defined], dtype=np.float32).reshape(-1, 2)
    # an empty table cannot be stored as a tensor file; the text table is always written
    if len(defined):
        write_tensor(d / "orient.mt", table)
    rows = [(str(i), "undefined" if a is None else f"{a:.4f}") for i, a in sorted(pan.orientations.items())]
    atomic_write_text(d / "orient.txt", _aligned(("instance", "degrees"), rows))
    atomic_write_text(d / "scene.txt", f"{scene}\n")
    print(f"{len(pan.orientations)} instances, scene class {scene}; wrote {d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    seeds = args.seeds if args.seeds is not None else cfg["gradcheck.seeds"]
    if seeds < 1:
        raise UsageError("--seeds must be >= 1")
    rows = run_suite(range(seeds), cfg["gradcheck.eps"], cfg["gradcheck.coords"], cfg["gradcheck.tolerance"],
                     names=args.only or None)
    pairs = [(f"{r.name}.max_rel_error", f"{r.max_rel_error:.3e}") for r in rows]
    pairs += [(f"{r.name}.status", "pass" if r.passed else "fail") for r in rows]
    failed = [r.name for r in rows if not r.passed]
    pairs.append(("failed", ",".join(failed) or "none"))
    _emit(args.out, "gradcheck", format_rows(rows) + "\n", pairs)
    return EXIT_RUNTIME if failed else EXIT_OK


def nb1d_parameter_rows(arrays) -> List[Tuple[str, int, int, int, Fraction]]:
    """(block, channels, factorized weights, dense 3x3 weights, ratio) per non-bottleneck-1D pair."""
    rows = []
    for name in sorted(arrays):
        for pair in ("1", "2"):
            suffix = f".conv3x1_{pair}.weight"
            if not name.endswith(suffix):
                continue
            block = name[: -len(suffix)]
            vertical = arrays[name]
            horizontal = arrays[f"{block}.conv1x3_{pair}.weight"]
            cout, cin, kh, _ = vertical.shape
            factorized = int(vertical.size + horizontal.size)
            dense = cout * cin * kh * kh
            rows.append((f"{block}.pair{pair}", cout, factorized, dense, Fraction(factorized, dense)))
    return rows


def cmd_report(args) -> int:
    cfg = _config(args.config)
    if args.checkpoint:
        arrays = read_checkpoint(args.checkpoint)
        params_from_arrays(cfg, arrays)
    else:
        arrays = params_to_arrays(init_model(cfg.model(), cfg["train.seed"]))

    flops = flops_report(cfg.encoder(), cfg.model().input_size)
    flop_ratio = partial_full_ratio(flops)
    flop_rows = [(r.layer, r.kind, f"{r.h}x{r.w}", r.k, r.cin, r.cout, r.macs, r.full_macs) for r in flops]
    nb = nb1d_parameter_rows(arrays)
    if not nb:
        raise ConfigError("model has no non-bottleneck-1D blocks (instance.blocks_per_layer = 0)")
    factorized = sum(r[2] for r in nb)
    dense = sum(r[3] for r in nb)
    param_ratio = Fraction(factorized, dense)
    total_params = sum(int(a.size) for a in arrays.values())

    table = "encoder multiply-accumulates\n"
    table += _aligned(("layer", "kind", "extent", "k", "cin", "cout", "macs", "dense_macs"), flop_rows)
    table += f"partial/full conv FLOP ratio: {flop_ratio} = {float(flop_ratio):.6g}\n\n"
    table += "non-bottleneck-1D parameters (k x 1 + 1 x k vs k x k weights)\n"
    table += _aligned(("pair", "channels", "factorized", "dense", "ratio"),
                      [(b, c, f, d, str(r)) for b, c, f, d, r in nb])
    table += f"factorized/dense parameter ratio: {param_ratio} = {float(param_ratio):.6g}\n"
    table += f"model parameters: {total_params}\n"
    pairs = [
        ("flop_ratio", flop_ratio), ("flop_ratio_decimal", f"{float(flop_ratio):.12g}"),
        ("partial_macs", sum(r.macs for r in flops if r.kind == "partial")),
        ("partial_dense_macs", sum(r.full_macs for r in flops if r.kind == "partial")),
        ("nb1d_pairs", len(nb)), ("nb1d_factorized_params", factorized), ("nb1d_dense_params", dense),
        ("nb1d_param_ratio", param_ratio), ("nb1d_param_ratio_decimal", f"{float(param_ratio):.12g}"),
        ("model_params", total_params),
    ]
    _emit(args.out, "report", table, pairs)
    return EXIT_OK


def cmd_bench_scheduler(args) -> int:
    cfg = _config(args.config)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    stream = StreamSpec(epochs=cfg["bench.epochs"], batches_per_epoch=cfg["bench.batches_per_epoch"])
    rep = simulate_scheduler(stream, range(args.seeds), cfg.scheduler())
    fixed_tail, adaptive_tail = rep.tail_variance()
    header = ("epoch", "fixed_mean", "adaptive_mean", "fixed_var", "adaptive_var")
    rows = [(e + 1, f"{rep.fixed_trace[e]:.9g}", f"{rep.adaptive_trace[e]:.9g}",
             f"{rep.fixed_var[e]:.9g}", f"{rep.adaptive_var[e]:.9g}") for e in range(rep.epochs)]
    table = _aligned(header, rows)
    table += f"final-half mean variance: fixed {fixed_tail:.9g}, adaptive {adaptive_tail:.9g}\n"
    pairs = [("seeds", args.seeds), ("epochs", rep.epochs), ("fixed_tail_variance", f"{fixed_tail:.9g}"),
             ("adaptive_tail_variance", f"{adaptive_tail:.9g}"),
             ("min_adaptive_weight", f"{rep.min_adaptive_weight:.9g}")]
    _emit(args.out, "bench_scheduler", table, pairs)
    if args.out:
        tsv = "\t".join(header) + "\n" + "".join("\t".join(map(str, r)) + "\n" for r in rows)
        atomic_write_text(Path(args.out) / "bench_scheduler.tsv", tsv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtscene", description="Multi-task RGB-D scene understanding on synthetic scenes.",
                epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"mtscene {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help, epilog=help_text(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="key = value config file (defaults if omitted)")
        return sp

    sp = command("gen", cmd_gen, "generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--count", type=int, required=True, help="number of samples")
    sp.add_argument("--seed", type=int, default=0, help="sample k uses seed + k (default 0)")

    sp = command("train", cmd_train, "train a model on a dataset")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help=f"run directory ({CHECKPOINT_NAME}, {CONFIG_NAME}, {LOG_NAME})")
    sp.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    sp.add_argument("--log-every", type=int, default=50, help="progress interval with -v")

    sp = command("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True, help=f"checkpoint; {CONFIG_NAME} is read from its directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", help="directory for metrics.txt and metrics.kv")

    sp = command("infer", cmd_infer, "predict the panoptic map of one sample")
    sp.add_argument("--checkpoint", required=True, help=f"checkpoint; {CONFIG_NAME} is read from its directory")
    sp.add_argument("--sample", required=True, help="sample directory")
    sp.add_argument("--out", required=True, help="output directory")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of every op and sub-network")
    sp.add_argument("--seeds", type=int, default=None, help="seeds 0..N-1 (default gradcheck.seeds)")
    sp.add_argument("--only", nargs="*", help="restrict to these check names")
    sp.add_argument("--out", help="directory for gradcheck.txt and gradcheck.kv")

    sp = command("report", cmd_report, "FLOP and parameter accounting")
    sp.add_argument("--checkpoint", help="count parameters from this checkpoint instead of a fresh model")
    sp.add_argument("--out", help="directory for report.txt and report.kv")

    sp = command("bench-scheduler", cmd_bench_scheduler, "fixed vs adaptive weighting on synthetic loss streams")
    sp.add_argument("--seeds", type=int, default=5, help="seeds 0..N-1 (default 5)")
    sp.add_argument("--out", help="directory for bench_scheduler.txt/.kv/.tsv")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, DataError, FormatError, CheckpointMismatch) as e:
        print(f"mtscene {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, NonFiniteError, OSError) as e:
        print(f"mtscene {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
