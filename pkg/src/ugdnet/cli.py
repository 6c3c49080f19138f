"""``ugdnet`` command line: synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure (failed gradient check, per-file
predict errors), 2 configuration or input errors, 3 training aborted on a
non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import checks
from .checkpoint import build_from_checkpoint, load_checkpoint
from .config import RunConfig
from .data import (Sample, load_dataset, read_image, read_mask, resize_image, save_dataset, select, split,
                   synth_generate)
from .errors import ConfigurationError, LoadError, TrainingAborted, UGDError
from .metrics import METRIC_COLUMNS, MetricsReport, evaluate_case
from .network import UGDNet, predict
from .trainer import predict_masks, train

log = logging.getLogger("ugdnet")

OUTPUT_ROOT_ENV = "UGDNET_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3

# Ablation letters and the NetworkConfig switch each one turns off.
TOGGLES = {"H": "use_cnn_branch", "D": "use_deformable", "U": "use_ugem", "B": "use_bds_loss"}
# The five incremental rows: each preset lists the components that are on.
PRESETS = {"Baseline": "", "H": "H", "H+D": "HD", "H+D+U": "HDU", "H+D+U+B": "HDUB"}

OVERLAY_TP = (255, 0, 0)
OVERLAY_FP = (0, 255, 0)
OVERLAY_FN = (0, 0, 255)


# ---------------------------------------------------------------------------
# config resolution


def output_dir(args: argparse.Namespace, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def apply_ablation(cfg: RunConfig, letters: Sequence[str]) -> None:
    for letter in letters:
        if letter == "baseline":
            for flag in TOGGLES.values():
                setattr(cfg.network, flag, False)
        elif letter in TOGGLES:
            setattr(cfg.network, TOGGLES[letter], False)
        else:
            raise ConfigurationError(f"unknown ablation {letter!r}; expected one of H, D, U, B, baseline")


def preset_config(cfg: RunConfig, preset: str) -> RunConfig:
    out = RunConfig.from_dict(cfg.to_dict())
    on = PRESETS[preset]
    for letter, flag in TOGGLES.items():
        setattr(out.network, flag, letter in on)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    cfg.apply_seed(cfg.seed if seed is None else seed)
    if getattr(args, "synth", False):
        cfg.data.synth = True
    if getattr(args, "size", None) is not None:
        cfg.data.size = args.size
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "batch", None) is not None:
        cfg.train.batch_size = args.batch
    if getattr(args, "spacing", None) is not None:
        cfg.metrics.spacing = tuple(args.spacing)
    apply_ablation(cfg, getattr(args, "ablate", None) or [])
    cfg.network.validate()
    cfg.train.validate()
    return cfg


def dataset_for(cfg: RunConfig) -> list[Sample]:
    if cfg.data.synth:
        return synth_generate(cfg.data.synth_spec.at_size(cfg.data.size), cfg.data.synth_count)
    if not cfg.data.root:
        raise ConfigurationError("no dataset: set data.root in the config or pass --synth")
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    samples = load_dataset(root, cfg.data.size, cfg.data.normalize)
    if not samples:
        raise ConfigurationError(f"dataset root {root} holds no image/mask pairs")
    return samples


# ---------------------------------------------------------------------------
# evaluation helpers


def write_metrics_csv(path: Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("case_id",) + METRIC_COLUMNS + ("empty_flag",))
        for c in report.cases:
            row = c.row()
            w.writerow([c.case_id] + [f"{row[k]:.6f}" for k in METRIC_COLUMNS] + [row["empty_flag"]])
        agg = report.aggregate()
        w.writerow(["aggregate"] + [f"{agg[k]:.6f}" for k in METRIC_COLUMNS] + [report.n_empty])


def evaluate_masks(case_ids, preds, gts, spacing, workers: int = 1) -> MetricsReport:
    def one(i):
        return evaluate_case(preds[i], gts[i], spacing, case_ids[i])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return MetricsReport(list(pool.map(one, range(len(case_ids)))))


def evaluate_model(model: UGDNet, samples: Sequence[Sample], spacing, workers: int = 1) -> MetricsReport:
    preds = predict_masks(model, samples)
    return evaluate_masks([s.case_id for s in samples], preds, [s.mask for s in samples], spacing, workers)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.data.synth_spec.at_size(cfg.data.size)
    out = output_dir(args, f"synth_seed{cfg.seed}")
    samples = synth_generate(spec, args.count if args.count is not None else cfg.data.synth_count)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} cases to {out}")
    return EXIT_OK


def run_training(cfg: RunConfig, out: Path, samples: Sequence[Sample]) -> dict:
    """Split, train, then score the best checkpoint on the test split."""
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    manifest = split(samples, cfg.data.ratios, cfg.seed, out / "split.txt")
    tr, va, te = (select(samples, ids) for ids in (manifest.train, manifest.val, manifest.test))
    model = UGDNet(cfg.network)
    t0 = time.time()
    result = train(cfg.train, tr, va, model, out, cfg.loss, cfg.to_dict())
    if result.best_path and result.best_path.exists():
        load_checkpoint(result.best_path, model)
    report = evaluate_model(model, te, cfg.metrics.spacing)
    write_metrics_csv(out / "test_metrics.csv", report)
    agg = report.aggregate()
    summary = {"best_val_dsc": result.best_val_dsc, "best_epoch": result.best_epoch,
               "test_dsc": agg["dsc"], "steps": result.steps, "seconds": time.time() - t0}
    log.info("finished: %s", summary)
    return summary


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = dataset_for(cfg)
    out = output_dir(args, f"train_seed{cfg.seed}")
    summary = run_training(cfg, out, samples)
    print(f"best val DSC {summary['best_val_dsc']:.2f} (epoch {summary['best_epoch']}), "
          f"test DSC {summary['test_dsc']:.2f}; outputs in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    samples = dataset_for(base)
    root = output_dir(args, f"ablate_seed{base.seed}")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for preset in args.presets or list(PRESETS):
        cfg = preset_config(base, preset)
        summary = run_training(cfg, root / preset.replace("+", "_"), samples)
        rows.append({"preset": preset, **summary})
        print(f"{preset:<10s} val {summary['best_val_dsc']:.2f} test {summary['test_dsc']:.2f}")
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def _model_for_eval(args) -> tuple[UGDNet, RunConfig]:
    if args.config:
        # an explicit config must describe the same network as the checkpoint
        cfg = RunConfig.load(args.config)
        model = UGDNet(cfg.network)
        load_checkpoint(args.checkpoint, model)
        model.eval()
        return model, cfg
    model, cfg, _ = build_from_checkpoint(args.checkpoint)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _model_for_eval(args)
    spacing = tuple(args.spacing) if args.spacing else cfg.metrics.spacing
    if args.data:
        samples = load_dataset(args.data, cfg.data.size, cfg.data.normalize)
        if not samples:
            raise ConfigurationError(f"no image/mask pairs under {args.data}")
    else:
        samples = dataset_for(cfg)
        if args.split != "all":
            manifest = split(samples, cfg.data.ratios, cfg.seed)
            samples = select(samples, getattr(manifest, args.split))
    if args.identity:
        ids = [s.case_id for s in samples]
        report = evaluate_masks(ids, [s.mask for s in samples], [s.mask for s in samples], spacing, args.workers)
    else:
        report = evaluate_model(model, samples, spacing, args.workers)
    out = output_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    agg = report.aggregate()
    print("  ".join(f"{k.upper()} {agg[k]:.4f}" for k in METRIC_COLUMNS) + f"  ({len(report.cases)} cases)")
    return EXIT_OK


def overlay_image(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Grayscale image as RGB with TP red, FP green, FN blue."""
    gray = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    p, g = pred > 0, gt > 0
    rgb[p & g] = OVERLAY_TP
    rgb[p & ~g] = OVERLAY_FP
    rgb[~p & g] = OVERLAY_FN
    return rgb


def _predict_inputs(path: Path) -> tuple[list[Path], Optional[Path]]:
    if path.is_file():
        return [path], None
    if (path / "images").is_dir():
        masks = path / "masks"
        return sorted((path / "images").glob("*.png")), masks if masks.is_dir() else None
    return sorted(path.glob("*.png")), None


def cmd_predict(args) -> int:
    model, cfg, _ = build_from_checkpoint(args.checkpoint)
    src = Path(args.input)
    if not src.exists():
        raise ConfigurationError(f"input {src} does not exist")
    files, mask_dir = _predict_inputs(src)
    if args.masks:
        mask_dir = Path(args.masks)
    out = output_dir(args, "predict")
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    failures = 0
    for f in files:
        try:
            img = read_image(f)
            if cfg.data.normalize == "minmax":
                lo, hi = img.min(), img.max()
                img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
            net_in = resize_image(img, cfg.data.size)
            mask = predict(model, torch.from_numpy(net_in)[None, None].to(dtype))[0].numpy().astype(np.uint8)
            if mask.shape != img.shape:
                mask = np.asarray(Image.fromarray(mask).resize(img.shape[::-1], Image.NEAREST))
            Image.fromarray((mask > 0).astype(np.uint8) * 255).save(out / f"{f.stem}.png")
            if args.overlay:
                gt_path = mask_dir / f"{f.stem}.png" if mask_dir else None
                if gt_path is None or not gt_path.exists():
                    log.warning("%s: no ground-truth mask, overlay skipped", f.name)
                else:
                    gt = read_mask(gt_path)
                    if gt.shape != img.shape:
                        raise ConfigurationError(f"mask {gt_path.name} is {gt.shape}, image is {img.shape}")
                    Image.fromarray(overlay_image(img, mask, gt)).save(out / f"{f.stem}_overlay.png")
        except (OSError, UGDError, ValueError) as e:
            failures += 1
            print(f"error: {f.name}: {e}", file=sys.stderr)
    print(f"wrote {len(files) - failures} masks to {out}; {failures} failed")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = list(range(args.seeds))
    t0 = time.time()
    items = checks.run_scope(args.scope, seeds)
    failed = []
    for name, rep in items:
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:<40s} {rep.max_error:.3e}  tol {rep.tolerance:.0e}  {status}")
        if not rep.passed:
            failed.append(name)
            for line in rep.table().splitlines():
                print("    " + line)
    print(f"{len(items) - len(failed)}/{len(items)} passed in {time.time() - t0:.1f}s")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="seed for init, data synthesis, split and batch order")
    p.add_argument("--synth", action="store_true", help="train on generated synthetic data")
    p.add_argument("--size", type=int, help="square input size (multiple of 16)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--spacing", type=float, nargs=2, metavar=("DY", "DX"), help="pixel spacing for distances")
    p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugdnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset as PNGs")
    _run_options(p)
    p.add_argument("--count", type=int, help="number of cases (default data.synth_count)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _run_options(p)
    p.add_argument("--ablate", action="append", choices=[*TOGGLES, "baseline"],
                   help="disable a component (repeatable); 'baseline' disables all four")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the five incremental ablation presets")
    _run_options(p)
    p.add_argument("--presets", nargs="+", choices=list(PRESETS), help="subset of presets to run")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="per-case and aggregate metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset root (images/ and masks/); default: the checkpoint's own data")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="split of the checkpoint's own data to score")
    p.add_argument("--config", help="config that must match the checkpoint's network")
    p.add_argument("--spacing", type=float, nargs=2, metavar=("DY", "DX"))
    p.add_argument("--identity", action="store_true", help="debug: score ground truth against itself")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks (and overlays)")
    p.add_argument("checkpoint")
    p.add_argument("input", help="PNG file, directory of PNGs, or dataset root")
    p.add_argument("--overlay", action="store_true", help="also write TP/FP/FN overlays (needs masks)")
    p.add_argument("--masks", help="ground-truth mask directory for overlays")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite in float64")
    p.add_argument("scope", choices=checks.SCOPES)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..N-1)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigurationError, LoadError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UGDError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
