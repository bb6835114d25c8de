"""Command line entry point: ``vesselseg <subcommand> ...``.

Every subcommand writes a ``run.json`` next to its output recording the
argument vector, the resolved configuration, the seed and the package
version; ``vesselseg rerun RUN.json`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .ablation import AblationSettings, run_ablation
from .config import RunConfig, load_config, resolve, with_overrides
from .metrics import CaseMetrics, aggregate, evaluate_case, paired_test
from .phantom import PhantomSpec, phantom_suite
from .preprocess import AhaParams, case_from_manifest, resample_to_spacing, save_prepared
from .trainer import fit, load_inference_network, make_state, predict_volume
from .volume_core import (
    DatasetManifest,
    LabelMask,
    load_manifest,
    load_mask,
    load_volume,
    mask_bounding_box,
    save_manifest,
    save_mask,
)

log = logging.getLogger("vesselseg")

TABLE_ROWS = (
    ("sensitivity", "Sensitivity"),
    ("precision", "Precision"),
    ("specificity", "Specificity"),
    ("jaccard", "Jac"),
    ("vs", "VS"),
    ("dsc", "DSC"),
    ("surface_error", "Surface Error"),
)


class UsageError(Exception):
    pass


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_run_record(path: Path, command: str, argv: list[str], config: dict | None = None,
                     seed: int | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "argv": argv, "seed": seed, "version": version_string(),
              "config": config}
    with open(path, "w") as f:
        json.dump(record, f, indent=2)
    return path


def _record_path(out: Path) -> Path:
    """``run.json`` inside an output directory, ``<stem>.run.json`` beside an output file."""
    if out.suffix:
        name = out.name.split(".")[0]
        return out.parent / f"{name}.run.json"
    return out / "run.json"


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, argv) -> int:
    spec = PhantomSpec(grid_size=args.size, spacing=args.spacing, depth=args.depth)
    out = Path(args.out)
    manifest = phantom_suite(args.n, spec, args.seed, out)
    write_run_record(out / "run.json", "phantom", argv, dataclasses.asdict(spec), args.seed)
    print(f"wrote {len(manifest.cases)} cases to {out}")
    return 0


def cmd_preprocess(args, argv) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out).resolve()
    aha = AhaParams(bins=args.bins)
    stride = args.stride or args.patch // 2
    records = []
    for rec in manifest.cases:
        case = case_from_manifest(manifest, dataclasses.replace(rec, cache=None), args.spacing, aha)
        save_prepared(case, out / rec.id, args.patch, stride)
        rebased = {k: os.path.relpath(manifest.resolve(v).resolve(), out) if v else None
                   for k, v in (("volume", rec.volume), ("mask", rec.mask), ("full_mask", rec.full_mask))}
        records.append(dataclasses.replace(rec, **rebased, extent=case.extent, cache=rec.id))
    prepared = DatasetManifest(records, manifest.splits, out, manifest.fold)
    save_manifest(prepared, out / "manifest.json")
    write_run_record(out / "run.json", "preprocess", argv,
                     {"spacing": args.spacing, "patch": args.patch, "stride": stride, "bins": args.bins})
    print(f"prepared {len(records)} cases in {out}")
    return 0


def run_training(cfg: RunConfig, manifest_path, out: Path, argv) -> int:
    manifest = load_manifest(manifest_path)
    out.mkdir(parents=True, exist_ok=True)
    cfg.paths.update({"manifest": str(Path(manifest_path).resolve()), "out": str(out.resolve())})
    write_run_record(out / "run.json", "train", argv, cfg.to_json(), cfg.trainer.seed)
    state = make_state(cfg.trainer)
    records = fit(state, manifest, cfg.trainer, out)
    val = records[-1].get("val_dsc") if records else None
    print(f"trained {len(records)} epochs; last val DSC {'n/a' if val is None else f'{val:.4f}'}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config) if args.config else resolve()
    cfg = with_overrides(cfg, epochs=args.epochs, seed=args.seed, patch_size=args.patch,
                         steps_per_epoch=args.steps)
    return run_training(cfg, args.manifest, Path(args.out), argv)


def _to_grid(mask: LabelMask, shape, spacing, origin) -> LabelMask:
    """Nearest-neighbour map of a prediction back onto the input grid."""
    if mask.shape == tuple(shape):
        return LabelMask(mask.data, spacing, origin)
    zoom = [n / m for n, m in zip(shape, mask.shape)]
    data = ndimage.zoom(mask.data, zoom, order=0, mode="nearest")
    return LabelMask(data, spacing, origin)


def predict_file(net, vessel_like: bool, cfg, path, stride: int) -> LabelMask:
    vol = load_volume(path)
    work = vol if np.allclose(vol.spacing, cfg.spacing) else resample_to_spacing(vol, None, cfg.spacing)[0]
    mask, _ = predict_volume(net, work, cfg.patch_size, stride, vessel_like, cfg.aha)
    return _to_grid(mask, vol.shape, vol.spacing, vol.origin)


def cmd_predict(args, argv) -> int:
    net, vessel_like, cfg = load_inference_network(args.checkpoint)
    stride = args.stride or cfg.patch_stride
    if args.volume:
        if not args.out:
            raise UsageError("--volume needs --out")
        out = Path(args.out)
        save_mask(predict_file(net, vessel_like, cfg, args.volume, stride), out)
        write_run_record(_record_path(out), "predict", argv, cfg.to_json(), cfg.seed)
        print(f"wrote {out}")
        return 0
    if not (args.manifest and args.out_dir):
        raise UsageError("predict needs --volume/--out or --manifest/--out-dir")
    manifest = load_manifest(args.manifest)
    cases = manifest.split(args.split) if args.split else list(manifest.cases)
    out_dir = Path(args.out_dir)
    for rec in cases:
        save_mask(predict_file(net, vessel_like, cfg, manifest.resolve(rec.volume), stride),
                  out_dir / f"{rec.id}.nii.gz")
    write_run_record(out_dir / "run.json", "predict", argv, cfg.to_json(), cfg.seed)
    print(f"wrote {len(cases)} predictions to {out_dir}")
    return 0


def cmd_evaluate(args, argv) -> int:
    manifest = load_manifest(args.manifest)
    cases = manifest.split(args.split) if args.split else list(manifest.cases)
    pred_dir = Path(args.pred_dir)
    rows: list[CaseMetrics] = []
    for rec in cases:
        gt_rel = rec.full_mask if args.gt == "full_mask" else rec.mask
        if gt_rel is None:
            raise ValueError(f"case {rec.id} has no {args.gt}")
        gt = load_mask(manifest.resolve(gt_rel))
        pred = load_mask(pred_dir / f"{rec.id}.nii.gz")
        if args.roi == "full":
            roi = None
        else:
            roi = rec.extent or mask_bounding_box(load_mask(manifest.resolve(rec.mask)))
        rows.append(evaluate_case(pred, gt, roi, gt.spacing, rec.id))
    report = {"method": args.method or pred_dir.name, "gt": args.gt, "roi": args.roi,
              "cases": [r.as_dict() for r in rows],
              "aggregate": {k: list(v) for k, v in aggregate(rows).items()}}
    if args.baseline:
        with open(args.baseline) as f:
            base = json.load(f)
        mine = {r.case_id: r.surface_error for r in rows}
        theirs = {c["case_id"]: c["surface_error"] for c in base["cases"]}
        shared = sorted(set(mine) & set(theirs))
        res = paired_test([theirs[c] for c in shared], [mine[c] for c in shared])
        report["paired_test"] = {"baseline": base.get("method", args.baseline), **dataclasses.asdict(res)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(report, f, indent=2)
    write_run_record(_record_path(out), "evaluate", argv)
    agg = report["aggregate"]
    print(f"{len(rows)} cases: DSC {agg['dsc'][0]:.4f}, surface error {agg['surface_error'][0]:.4f} mm")
    return 0


def format_table(reports: list[dict], fmt: str) -> str:
    """Metric rows by method columns, ``mean ± std`` cells, plus a p-value row."""
    header = ["Metric"] + [r.get("method", f"run{i}") for i, r in enumerate(reports)]
    body = []
    for key, label in TABLE_ROWS:
        cells = []
        for r in reports:
            mean, std = r["aggregate"][key]
            cells.append(f"{mean:.4f} ± {std:.4f}")
        body.append([label] + cells)
    pvals = []
    for r in reports:
        pt = r.get("paired_test")
        pvals.append("-" if pt is None else f"{pt['p_value']:.4g}")
    body.append(["p-value"] + pvals)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines) + "\n"


def format_provenance(cfg: RunConfig, fmt: str) -> str:
    rows = cfg.provenance_rows()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "value", "source", "note"])
        writer.writerows(rows)
        return buf.getvalue()
    lines = ["| Setting | Value | Source | Note |", "|---|---|---|---|"]
    lines += [f"| {k} | {v} | {tag} | {note} |" for k, v, tag, note in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args, argv) -> int:
    reports = []
    for path in args.inputs:
        with open(path) as f:
            reports.append(json.load(f))
    text = format_table(reports, args.format)
    if args.provenance:
        text += "\n" + format_provenance(load_config(args.provenance), args.format)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_run_record(_record_path(out), "report", argv)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablation(args, argv) -> int:
    settings = AblationSettings(n_cases=args.n, grid_size=args.size, phantom_seed=args.phantom_seed,
                                epochs=args.epochs, seeds=tuple(args.seeds), steps_per_epoch=args.steps)
    out = Path(args.out)
    write_run_record(out / "run.json", "ablation", argv, dataclasses.asdict(settings), args.phantom_seed)
    result = run_ablation(settings, out)
    print(json.dumps(result.summary(), indent=2))
    return 0


def cmd_rerun(args, argv) -> int:
    with open(args.record) as f:
        record = json.load(f)
    if record["command"] == "train":
        cfg = RunConfig.from_json(record["config"])
        out = Path(args.out or cfg.paths["out"])
        return run_training(cfg, cfg.paths["manifest"], out, ["rerun", args.record])
    old = list(record["argv"])
    if args.out:
        for flag in ("--out", "--out-dir"):
            if flag in old:
                old[old.index(flag) + 1] = args.out
    return main(old)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselseg", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic phantom suite")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--spacing", type=float, default=0.35)
    s.add_argument("--depth", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="resample, AHA and patch-index every case")
    s.add_argument("--manifest", required=True)
    s.add_argument("--spacing", type=float, default=0.35)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--stride", type=int, default=None)
    s.add_argument("--bins", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="teacher-student training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="TOML config or a previous run.json")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--steps", type=int, help="steps per epoch")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="sliding-window segmentation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume")
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.add_argument("--split")
    s.add_argument("--out-dir")
    s.add_argument("--stride", type=int)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="pixel metrics and surface error per case")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--gt", choices=["mask", "full_mask"], default="mask")
    s.add_argument("--roi", choices=["extent", "full"], default="extent")
    s.add_argument("--method")
    s.add_argument("--baseline", help="report.json to run the paired test against")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="tabulate evaluation reports")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--format", choices=["md", "csv"], default="md")
    s.add_argument("--provenance", help="train run.json or TOML config to list setting sources")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("ablation", help="supervised / +boundary / +semi phantom comparison")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--phantom-seed", type=int, default=2024)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--steps", type=int, default=60)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("rerun", help="replay a run.json")
    s.add_argument("record")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
