"""Command line entry points: ``train``, ``predict``, ``evaluate`` and ``synth``.

Settings come from an optional YAML config file plus ``--set key=value``
overrides (dotted keys reach nested sections, values are parsed as YAML).
Relative output paths are resolved against ``$PROBSTEREO_OUTPUT_ROOT`` when
it is set. Exit codes: 0 success, 2 config, 3 data, 4 numerical, 5 shape.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, model_from_checkpoint
from .data_io import (
    IMAGE_SUFFIXES,
    SynthParams,
    find_pairs,
    load_disparity,
    load_image,
    load_pfm,
    synth_dataset,
    write_pfm,
    write_sample,
)
from .errors import ConfigError, DataError, ProbStereoError
from .evaluation import (
    MetricsAccumulator,
    error_uncertainty_histogram,
    sparsification,
)
from .inference import DEFAULT_T, mc_predict, uncertainty_stddev_maps
from .network import NetworkConfig
from .training import TrainConfig, train

logger = logging.getLogger("probstereo")

OUTPUT_ROOT_ENV = "PROBSTEREO_OUTPUT_ROOT"
PREDICTION_MAPS = ("disparity", "aleatoric", "epistemic", "combined")


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    cfg = {}
    if path:
        try:
            cfg = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(raw))
    return cfg


def _parse_value(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" (no dot) as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def run_record(command: str, config: dict, seed) -> dict:
    return {
        "command": command,
        "argv": sys.argv,
        "config": config,
        "seed": seed,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "versions": {
            "probstereo": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=str) + "\n")


# train


def cmd_train(config: dict, out_dir) -> dict:
    cfg = TrainConfig.from_dict(config)
    out_dir = resolve_output(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "run.json", run_record("train", cfg.to_dict(), cfg.seed))
    result = train(cfg, out_dir)
    summary = {"steps": len(result.log), "final": result.log[-1] if result.log else None}
    if result.report is not None:
        summary["validation"] = result.report.to_dict()
    return summary


# predict


def _pairs_from_args(left: Sequence[str], right: Sequence[str], data_dir: Optional[str]):
    if data_dir:
        return [(stem, lp, rp) for stem, lp, rp, _ in find_pairs(data_dir)]
    if len(left) != len(right):
        raise ConfigError("need the same number of --left and --right images")
    if not left:
        raise ConfigError("no input images: pass --left/--right or --data")
    return [(Path(lp).stem, Path(lp), Path(rp)) for lp, rp in zip(left, right)]


def cmd_predict(
    checkpoint,
    out_dir,
    left: Sequence[str] = (),
    right: Sequence[str] = (),
    data_dir: Optional[str] = None,
    T: int = DEFAULT_T,
    seed: int = 0,
    expected_network: Optional[dict] = None,
) -> list[str]:
    """Write the MC mean disparity and stddev maps (px) as PFM files.

    Images of any size are reflect-padded to the network's size multiple and
    the outputs cropped back.
    """
    ckpt = load_checkpoint(checkpoint)
    expected = NetworkConfig.from_dict(expected_network) if expected_network else None
    model = model_from_checkpoint(ckpt, expected)
    model.eval()
    pairs = _pairs_from_args(left, right, data_dir)
    out_dir = resolve_output(out_dir)
    for sub in PREDICTION_MAPS:
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(len(pairs))
    stems = []
    for (stem, lp, rp), child in zip(pairs, children):
        u = mc_predict(model, load_image(lp), load_image(rp), T, int(child.generate_state(1)[0]))
        alea, epi, comb = uncertainty_stddev_maps(u)
        for sub, arr in zip(PREDICTION_MAPS, (u.mean_disparity, alea, epi, comb)):
            write_pfm(out_dir / sub / f"{stem}.pfm", arr)
        stems.append(stem)
    meta = run_record("predict", {"checkpoint": str(checkpoint), "images": [str(p[1]) for p in pairs]}, seed)
    meta.update({"T": T, "checkpoint_sha256": file_sha256(checkpoint), "units": "px", "maps": list(PREDICTION_MAPS)})
    _write_json(out_dir / "metadata.json", meta)
    return stems


# evaluate


def _gt_files(gt_dir) -> dict[str, Path]:
    root = Path(gt_dir)
    for sub in ("disparity", "disp_occ_0", "disp_noc_0", "."):
        d = root / sub
        if d.is_dir():
            files = {f.stem: f for f in sorted(d.iterdir()) if f.suffix.lower() in (".pfm", ".png")}
            if files:
                return files
    raise DataError(f"{gt_dir}: no ground-truth disparity files found")


def cmd_evaluate(pred_dir, gt_dir, out_dir=None, steps: int = 100, bins: int = 50) -> dict:
    """Per-image and aggregate metrics plus sparsification/histogram tables."""
    pred_dir = Path(pred_dir)
    out_dir = resolve_output(out_dir) if out_dir else pred_dir / "evaluation"
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = {f.stem: f for f in sorted((pred_dir / "disparity").glob("*.pfm"))}
    gts = _gt_files(gt_dir)
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        logger.warning(
            "evaluating the intersection only; no ground truth for %s; no prediction for %s",
            missing_gt,
            missing_pred,
        )
    stems = sorted(set(preds) & set(gts))
    if not stems:
        raise DataError("no prediction/ground-truth pairs share a filename stem")

    total = MetricsAccumulator()
    pooled = {"error": [], "aleatoric": [], "epistemic": [], "combined": []}
    records = []
    for stem in stems:
        d_hat, _ = load_pfm(preds[stem])
        gt, valid = load_disparity(gts[stem])
        maps = {}
        for kind in ("aleatoric", "epistemic", "combined"):
            path = pred_dir / kind / f"{stem}.pfm"
            if path.exists():
                maps[kind] = load_pfm(path)[0].astype(np.float64)
        acc = MetricsAccumulator().update(d_hat, gt, valid, maps.get("aleatoric"), maps.get("epistemic"))
        total = total.merge(acc)
        rec = {"image": stem, **acc.report().to_dict()}
        err = np.abs(d_hat.astype(np.float64) - gt)
        mask = valid & np.isfinite(gt)
        pooled["error"].append(err[mask])
        for kind, arr in maps.items():
            rec[f"ause_{kind}"] = sparsification(err, arr, mask, steps).ause
            pooled[kind].append(arr[mask])
        records.append(rec)

    aggregate = total.report().to_dict()
    err = np.concatenate(pooled["error"])
    curves = {}
    for kind in ("aleatoric", "epistemic", "combined"):
        if len(pooled[kind]) == len(stems):
            curves[kind] = sparsification(err, np.concatenate(pooled[kind]), None, steps)
            aggregate[f"ause_{kind}"] = curves[kind].ause
    aggregate["ause_note"] = "AUSE is an extension metric; curves sample pixels by increasing uncertainty"

    with open(out_dir / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    _write_json(out_dir / "aggregate.json", {"images": len(stems), **aggregate})
    if curves:
        with open(out_dir / "sparsification.csv", "w") as f:
            f.write("uncertainty,density,mae,oracle_mae\n")
            for kind, curve in curves.items():
                for dens, mae, omae in curve.rows():
                    f.write(f"{kind},{dens:.4f},{mae:.6f},{omae:.6f}\n")
    if "combined" in curves:
        counts, ee, se = error_uncertainty_histogram(err, np.concatenate(pooled["combined"]), None, bins)
        with open(out_dir / "histogram.csv", "w") as f:
            f.write("error_lo,error_hi,stddev_lo,stddev_hi,count\n")
            for i in range(counts.shape[0]):
                for j in range(counts.shape[1]):
                    f.write(f"{ee[i]:.6g},{ee[i + 1]:.6g},{se[j]:.6g},{se[j + 1]:.6g},{counts[i, j]}\n")
    print(format_report_table(records, aggregate))
    return {"aggregate": aggregate, "images": records, "missing": missing_gt + missing_pred}


def format_report_table(records, aggregate) -> str:
    cols = ("bad1", "bad3", "bad5", "mae", "rmse", "mean_aleatoric_px", "mean_epistemic_px")
    heads = (">1px%", ">3px%", ">5px%", "MAE", "RMSE", "alea px", "epi px")
    lines = ["image".ljust(16) + "".join(h.rjust(9) for h in heads)]

    def fmt(v):
        return "-".rjust(9) if v is None else f"{v:9.3f}"

    for rec in records + [{"image": "ALL", **aggregate}]:
        lines.append(str(rec["image"])[:16].ljust(16) + "".join(fmt(rec.get(c)) for c in cols))
    return "\n".join(lines)


# synth


def cmd_synth(params: SynthParams, count: int, out_dir, seed: int) -> Path:
    if count < 1:
        raise ConfigError("count must be >= 1")
    out_dir = resolve_output(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample in synth_dataset(params, count, seed):
        write_sample(out_dir, sample)
    manifest = {"params": params.to_dict(), "seed": seed, "count": count, "version": __version__}
    _write_json(out_dir / "manifest.json", manifest)
    return out_dir


def read_manifest(out_dir) -> tuple[SynthParams, int, int]:
    m = json.loads((Path(out_dir) / "manifest.json").read_text())
    return SynthParams.from_dict(m["params"]), m["seed"], m["count"]


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probstereo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a probabilistic stereo network")
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("predict", help="Monte-Carlo disparity and uncertainty maps")
    p.add_argument("checkpoint")
    p.add_argument("--left", action="append", default=[])
    p.add_argument("--right", action="append", default=[])
    p.add_argument("--data", help="directory with left/ and right/ images")
    p.add_argument("-T", type=int, default=DEFAULT_T, help="forward passes per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML config whose 'network' section must match the checkpoint")
    p.add_argument("--out", default="predictions")

    p = sub.add_parser("evaluate", help="metrics for a prediction directory")
    p.add_argument("predictions")
    p.add_argument("ground_truth", help="dataset root or disparity directory")
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=100, help="sparsification density steps")
    p.add_argument("--bins", type=int, default=50, help="histogram bins per axis")

    p = sub.add_parser("synth", help="write a synthetic random-dot stereo dataset")
    p.add_argument("--config", help="YAML file with a 'synth' section")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synthetic")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "train":
            summary = cmd_train(load_config(args.config, args.set), args.out)
            print(json.dumps(summary, indent=1))
        elif args.command == "predict":
            net = load_config(args.config).get("network") if args.config else None
            stems = cmd_predict(args.checkpoint, args.out, args.left, args.right, args.data, args.T, args.seed, net)
            print(f"wrote predictions for {len(stems)} image pair(s) to {resolve_output(args.out)}")
        elif args.command == "evaluate":
            cmd_evaluate(args.predictions, args.ground_truth, args.out, args.steps, args.bins)
        elif args.command == "synth":
            cfg = load_config(args.config, args.set)
            params = SynthParams.from_dict(cfg.get("synth", {k: v for k, v in cfg.items() if k != "synth"}))
            out = cmd_synth(params, args.count, args.out, args.seed)
            print(f"wrote {args.count} samples to {out}")
    except ProbStereoError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        logger.error("invalid configuration: %s", exc)
        return ConfigError.exit_code
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
