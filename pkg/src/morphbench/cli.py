"""Command-line front end chaining the library into full experiments.

Subcommands::

    morphbench morph    --pairs pairs.csv --models toy:7 --out runs/m1
    morphbench vuln     --scores scores.csv --fmr 0.001 --out runs/v1
    morphbench quality  --morph-dir runs/m1 --pairs pairs.csv --out runs/q1
    morphbench mad      --scores mad.csv --out runs/d1

Every run writes a ``manifest.json`` with the fully resolved
configuration; re-running with the same flags reproduces all outputs
bit-exactly (no wall-clock anywhere in the outputs). Exit codes:
0 success, 1 partial with warnings, 2 configuration error, 3 model or
data error, 4 computation error. ``MORPHBENCH_LOG`` in
{error, warn, info, debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .engine import OptimizationDiverged, OptimizerConfig, optimize_morph
from .formats import PairListError, load_image, load_pairs_csv, save_image
from .losses import LossWeights
from .mad import MadError, load_mad_csv, mad_grid_report
from .models import ContainerError, load_model_weights, make_toy_models
from .quality import INF_SENTINEL, morph_quality, summarize_ci
from .vulnerability import ScoreSetError, load_score_csv, vulnerability_report

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COMPUTE = 4

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(Exception):
    pass


def _parse_latent_shape(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        shape = (int(rows), int(cols))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"latent shape must look like 18x512, got {text!r}") from exc
    if shape[0] < 1 or shape[1] < 1:
        raise argparse.ArgumentTypeError(f"latent shape must be positive, got {text!r}")
    return shape


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"morphbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    morph = sub.add_parser("morph", help="optimize morphs for a pair list")
    morph.add_argument("--pairs", required=True, type=Path)
    morph.add_argument("--models", required=True, help="weight container path or toy:<seed>")
    morph.add_argument("--out", required=True, type=Path)
    morph.add_argument("--seed", type=int, default=0)
    morph.add_argument("--jobs", type=int, default=1)
    morph.add_argument("--lambda1", type=float, default=LossWeights().lambda1)
    morph.add_argument("--lambda2", type=float, default=LossWeights().lambda2)
    morph.add_argument("--lambda3", type=float, default=LossWeights().lambda3)
    morph.add_argument("--lambda4", type=float, default=LossWeights().lambda4)
    morph.add_argument("--iterations", type=int, default=OptimizerConfig().iterations)
    morph.add_argument("--lr0", type=float, default=OptimizerConfig().lr0)
    morph.add_argument("--decay", type=float, default=OptimizerConfig().decay)
    morph.add_argument("--decay-every", type=int, default=OptimizerConfig().decay_every)
    morph.add_argument("--latent-shape", type=_parse_latent_shape, default=(18, 512), metavar="RxC")
    morph.add_argument("--image-side", type=int, default=64, metavar="N")

    vuln = sub.add_parser("vuln", help="verification vulnerability report from a score CSV")
    vuln.add_argument("--scores", required=True, type=Path)
    vuln.add_argument("--fmr", type=float, default=0.001)
    vuln.add_argument("--out", required=True, type=Path)
    vuln.add_argument("--seed", type=int, default=0)

    quality = sub.add_parser("quality", help="PSNR/SSIM of morphs against their parents")
    quality.add_argument("--morph-dir", required=True, type=Path)
    quality.add_argument("--pairs", required=True, type=Path)
    quality.add_argument("--out", required=True, type=Path)
    quality.add_argument("--seed", type=int, default=0)

    mad = sub.add_parser("mad", help="detector-evaluation grid from a MAD score CSV")
    mad.add_argument("--scores", required=True, type=Path)
    mad.add_argument("--out", required=True, type=Path)
    mad.add_argument("--seed", type=int, default=0)

    return parser


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _float_text(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# morph


def _resolve_models(spec: str, latent_shape: tuple[int, int], image_side: int):
    if spec.startswith("toy:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad toy model spec {spec!r}, expected toy:<seed>") from exc
        return make_toy_models(seed, image_side=image_side, latent=latent_shape)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"model container {path} does not exist")
    return load_model_weights(path)


def _write_trace_csv(path: Path, trace) -> None:
    lines = ["iteration,lr,loss_total,loss_perceptual,loss_identity,loss_ms_ssim,loss_id_diff"]
    for row in trace:
        lines.append(
            f"{row.iteration},{_float_text(row.lr)},{_float_text(row.loss_total)},"
            f"{_float_text(row.loss_perceptual)},{_float_text(row.loss_identity)},"
            f"{_float_text(row.loss_ms_ssim)},{_float_text(row.loss_id_diff)}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_morph(args: argparse.Namespace) -> int:
    if not args.pairs.is_file():
        log.error("pair list %s does not exist", args.pairs)
        return EXIT_CONFIG
    try:
        pairs = load_pairs_csv(args.pairs)
    except PairListError as exc:
        log.error("bad pair list: %s", exc)
        return EXIT_CONFIG
    missing = [p for pair in pairs for p in (pair.subject1_image, pair.subject2_image) if not p.is_file()]
    if missing:
        log.error("missing subject images: %s", ", ".join(str(m) for m in missing))
        return EXIT_CONFIG

    try:
        weights = LossWeights(args.lambda1, args.lambda2, args.lambda3, args.lambda4)
        cfg = OptimizerConfig(
            iterations=args.iterations,
            lr0=args.lr0,
            decay=args.decay,
            decay_every=args.decay_every,
            weights=weights,
            seed=args.seed,
        )
    except ValueError as exc:
        log.error("bad optimizer configuration: %s", exc)
        return EXIT_CONFIG

    try:
        models = _resolve_models(args.models, args.latent_shape, args.image_side)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (ContainerError, ValueError) as exc:
        log.error("cannot load models: %s", exc)
        return EXIT_DATA

    args.out.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        args.out,
        "morph",
        {
            "pairs": str(args.pairs),
            "models": args.models,
            "out": str(args.out),
            "seed": args.seed,
            "jobs": args.jobs,
            "iterations": cfg.iterations,
            "lr0": cfg.lr0,
            "decay": cfg.decay,
            "decay_every": cfg.decay_every,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "eps": cfg.eps,
            "lambda1": weights.lambda1,
            "lambda2": weights.lambda2,
            "lambda3": weights.lambda3,
            "lambda4": weights.lambda4,
            "latent_shape": f"{args.latent_shape[0]}x{args.latent_shape[1]}",
            "image_side": args.image_side,
        },
    )

    def run_pair(pair):
        i1 = load_image(pair.subject1_image)
        i2 = load_image(pair.subject2_image)
        result = optimize_morph(i1, i2, models, cfg)
        save_image(args.out / f"{pair.morph_id}.png", result.image)
        _write_trace_csv(args.out / f"{pair.morph_id}_trace.csv", result.trace)
        return result

    failures: list[tuple[str, str]] = []
    jobs = max(1, args.jobs)
    if jobs == 1:
        for pair in pairs:
            try:
                run_pair(pair)
            except (OptimizationDiverged, ValueError, OSError) as exc:
                failures.append((pair.morph_id, str(exc)))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pair.morph_id: pool.submit(run_pair, pair) for pair in pairs}
        for morph_id in sorted(futures):
            exc = futures[morph_id].exception()
            if exc is not None:
                failures.append((morph_id, str(exc)))

    if failures:
        failures.sort()
        lines = ["morph_id,error"] + [f"{mid},{msg.replace(',', ';')}" for mid, msg in failures]
        (args.out / "failures.csv").write_text("\n".join(lines) + "\n")
        log.error("%d of %d pairs failed", len(failures), len(pairs))
        return EXIT_COMPUTE
    return EXIT_OK


# ---------------------------------------------------------------------------
# vuln


def cmd_vuln(args: argparse.Namespace) -> int:
    if not args.scores.is_file():
        log.error("score file %s does not exist", args.scores)
        return EXIT_CONFIG
    if not (0.0 < args.fmr < 1.0):
        log.error("fmr must lie in (0, 1), got %s", args.fmr)
        return EXIT_CONFIG
    try:
        scores = load_score_csv(args.scores)
        report = vulnerability_report(scores, fmr_target=args.fmr)
    except ScoreSetError as exc:
        log.error("bad score data: %s", exc)
        return EXIT_DATA

    args.out.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        args.out,
        "vuln",
        {"scores": str(args.scores), "fmr": args.fmr, "out": str(args.out), "seed": args.seed},
    )
    (args.out / "vuln_report.csv").write_text(report.to_csv_text())
    (args.out / "vuln_report.json").write_text(report.to_json_text())
    return EXIT_PARTIAL if report.warnings else EXIT_OK


# ---------------------------------------------------------------------------
# quality


def cmd_quality(args: argparse.Namespace) -> int:
    if not args.pairs.is_file():
        log.error("pair list %s does not exist", args.pairs)
        return EXIT_CONFIG
    if not args.morph_dir.is_dir():
        log.error("morph directory %s does not exist", args.morph_dir)
        return EXIT_CONFIG
    try:
        pairs = load_pairs_csv(args.pairs)
    except PairListError as exc:
        log.error("bad pair list: %s", exc)
        return EXIT_CONFIG

    args.out.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        args.out,
        "quality",
        {"morph_dir": str(args.morph_dir), "pairs": str(args.pairs), "out": str(args.out), "seed": args.seed},
    )

    rows: list[str] = ["morph_id,psnr_avg,ssim_avg"]
    records = []
    errors = 0
    for pair in pairs:
        morph_path = args.morph_dir / f"{pair.morph_id}.png"
        try:
            im = load_image(morph_path)
            p1 = load_image(pair.subject1_image)
            p2 = load_image(pair.subject2_image)
            record = morph_quality(pair.morph_id, im, p1, p2)
        except Exception as exc:  # unreadable image: error row, keep going
            log.warning("pair %s failed: %s", pair.morph_id, exc)
            rows.append(f"{pair.morph_id},ERROR,ERROR")
            errors += 1
            continue
        records.append(record)
        rows.append(f"{record.morph_id},{record.psnr_text()},{_float_text(record.ssim_avg)}")

    (args.out / "quality.csv").write_text("\n".join(rows) + "\n")

    finite_psnr = [r.psnr_avg for r in records if not r.psnr_avg == float("inf")]
    summary: dict = {
        "n_records": len(records),
        "n_errors": errors,
        "psnr_inf_excluded": sum(1 for r in records if r.psnr_avg == float("inf")),
        "ci_method": "normal-approximation z=1.96",
    }
    if len(finite_psnr) >= 2:
        ci = summarize_ci(finite_psnr)
        summary["psnr"] = {"mean": ci.mean, "halfwidth": ci.halfwidth, "n": ci.n}
    if len(records) >= 2:
        ci = summarize_ci([r.ssim_avg for r in records])
        summary["ssim"] = {"mean": ci.mean, "halfwidth": ci.halfwidth, "n": ci.n}
    (args.out / "quality_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    if records:
        return EXIT_OK if errors == 0 else EXIT_PARTIAL
    return EXIT_DATA


# ---------------------------------------------------------------------------
# mad


def cmd_mad(args: argparse.Namespace) -> int:
    if not args.scores.is_file():
        log.error("score file %s does not exist", args.scores)
        return EXIT_CONFIG
    try:
        cells = load_mad_csv(args.scores)
        report = mad_grid_report(cells)
    except MadError as exc:
        log.error("bad detector scores: %s", exc)
        return EXIT_DATA

    args.out.mkdir(parents=True, exist_ok=True)
    _write_manifest(args.out, "mad", {"scores": str(args.scores), "out": str(args.out), "seed": args.seed})
    (args.out / "mad_report.csv").write_text(report.to_csv_text())
    (args.out / "mad_report.json").write_text(report.to_json_text())
    return EXIT_OK


# ---------------------------------------------------------------------------


_COMMANDS = {"morph": cmd_morph, "vuln": cmd_vuln, "quality": cmd_quality, "mad": cmd_mad}


def main(argv=None) -> int:
    level = _LOG_LEVELS.get(os.environ.get("MORPHBENCH_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, 0 on --help/--version
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception:  # anything unplanned is a computation failure
        log.exception("%s failed", args.command)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
