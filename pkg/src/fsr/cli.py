"""Command-line entry point: ``fsr {gen-data,train,eval,analyze,export-cam,ablate}``.

Exit status is 0 on success, 1 for validation errors (bad config, missing
files, malformed datasets) and 2 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalkit, plotting, synthdata, trainer
from .config import RunConfig
from .encoder import NumericError
from .trainer import ConfigError

log = logging.getLogger("fsr")

ABLATION_ROWS = (
    ("baseline", {"lambda4": 0.0, "lambda5": 0.0}),
    ("+unc", {"lambda5": 0.0}),
    ("+unc+cer", {}),
)


class UsageError(Exception):
    pass


def _dataset_dir(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else run_dir / "data"


def ensure_dataset(cfg: RunConfig, root: Path) -> Path:
    if not (root / "meta.json").exists():
        log.info("generating dataset under %s", root)
        synthdata.generate_dataset(cfg.data, root)
    return root


def _checkpoint_context(checkpoint: Path, data: str | None):
    state, tcfg = trainer.load_checkpoint(checkpoint)
    run_dir = checkpoint.parent
    data_root = Path(data) if data else None
    snapshot = run_dir / "config.json"
    if data_root is None and snapshot.exists():
        saved = json.loads(snapshot.read_text())
        data_root = Path(saved["data_dir"]) if saved.get("data_dir") else run_dir / "data"
    if data_root is None:
        data_root = run_dir / "data"
    return state, tcfg, run_dir, data_root


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_run_config(args.config, args.set)
    root = Path(args.out) if args.out else Path(cfg.data_dir or cfgmod.run_root(args.run_dir) / "data")
    synthdata.generate_dataset(cfg.data, root)
    cfgmod.save_snapshot(cfg, root)
    print(f"dataset written to {root}")
    return 0


def run_training(cfg: RunConfig, run_dir: Path, data_root: Path | None = None) -> dict:
    """Train one configuration into ``run_dir`` and evaluate it on the val split."""
    if run_dir.exists() and (run_dir / "metrics.jsonl").exists():
        (run_dir / "metrics.jsonl").unlink()
    if cfg.data_dir is None and data_root is not None:
        cfg.data_dir = str(data_root)
    cfgmod.save_snapshot(cfg, run_dir)
    root = ensure_dataset(cfg, Path(cfg.data_dir) if cfg.data_dir else run_dir / "data")
    images = synthdata.load_dataset(root, "train", shuffle_seed=cfg.train.seed)
    state, history = trainer.train_loop(cfg.train, images, run_dir=run_dir)
    plotting.plot_training_curves(history, run_dir / "figures" / "losses.png")
    val = synthdata.load_dataset(root, cfg.eval.eval_split, with_masks=True)
    result = evalkit.evaluate(state.model, val, cfg.train, split=cfg.eval.eval_split)
    _write_report(result, run_dir)
    return result.report()


def _write_report(result: evalkit.EvalResult, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / f"eval_{result.split}.json").write_text(json.dumps(result.report(), indent=2))
    rows = [[i, _fmt(p), _fmt(q)] for i, (p, q) in
            enumerate(zip(result.per_class_pseudo, result.per_class_pred))]
    rows.append(["mean", f"{result.miou_pseudo / 100:.6f}", f"{result.miou_pred / 100:.6f}"])
    plotting.write_csv(outdir / f"eval_{result.split}.csv", ["class", "iou_pseudo", "iou_pred"], rows)


def _fmt(v) -> str:
    return "" if v is None or np.isnan(v) else f"{v:.6f}"


def cmd_train(args) -> int:
    cfg = cfgmod.load_run_config(args.config, args.set)
    run_dir = cfgmod.run_root(args.run_dir) / cfg.run_name
    report = run_training(cfg, run_dir)
    print(json.dumps(report))
    print(f"run written to {run_dir}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    state, tcfg, run_dir, data_root = _checkpoint_context(checkpoint, args.data)
    images = synthdata.load_dataset(data_root, args.split, with_masks=True)
    result = evalkit.evaluate(state.model, images, tcfg, split=args.split)
    outdir = Path(args.out) if args.out else run_dir
    _write_report(result, outdir)
    samples = []
    for img, pseudo, _, cam in evalkit.predict(state.model, images[: args.figures], tcfg):
        samples.append((img.pixels, cam, pseudo, img.gt_mask, img.labels))
    if samples:
        names = synthdata.read_meta(data_root)["class_names"]
        plotting.plot_cam_panel(samples, names, outdir / "figures" / f"cams_{args.split}.png", tcfg.patch_size)
    print(json.dumps(result.report()))
    return 0


def cmd_analyze(args) -> int:
    checkpoint = Path(args.checkpoint)
    state, tcfg, run_dir, data_root = _checkpoint_context(checkpoint, args.data)
    images = synthdata.load_dataset(data_root, args.split, with_masks=False)
    outdir = Path(args.out) if args.out else run_dir / "analysis"
    outdir.mkdir(parents=True, exist_ok=True)
    if args.kind == "entropy":
        profile = evalkit.layer_entropy_profile(state.model, images)
        rows = [[layer, head, f"{profile[layer, head]:.6f}"]
                for layer in range(profile.shape[0]) for head in range(profile.shape[1])]
        plotting.write_csv(outdir / "attention_entropy.csv", ["layer", "head", "entropy"], rows)
        plotting.plot_entropy_profile(profile, outdir / "attention_entropy.png")
        payload = {"kind": "entropy", "entropy": profile.tolist()}
    else:
        mat = evalkit.layer_cka_matrix(state.model, images)
        rows = [[i, *[f"{v:.6f}" for v in row]] for i, row in enumerate(mat)]
        plotting.write_csv(outdir / "cka.csv", ["layer", *range(mat.shape[0])], rows)
        plotting.plot_cka_heatmap(mat, outdir / "cka.png")
        payload = {"kind": "cka", "cka": mat.tolist()}
    (outdir / f"{args.kind}.json").write_text(json.dumps(payload, indent=2))
    print(f"analysis written to {outdir}")
    return 0


def cmd_export_cam(args) -> int:
    checkpoint = Path(args.checkpoint)
    state, tcfg, run_dir, data_root = _checkpoint_context(checkpoint, args.data)
    images = synthdata.load_dataset(data_root, args.split, with_masks=False)
    if args.limit:
        images = images[: args.limit]
    outdir = Path(args.out) if args.out else run_dir / f"cams_{args.split}"
    evalkit.export_cam_maps(state.model, images, tcfg, outdir)
    print(f"CAM maps written to {outdir}")
    return 0


def run_ablation(cfg: RunConfig, outdir: Path, seeds=None) -> list[dict]:
    """Baseline / +L_u / +L_u+L_c over several seeds on one shared dataset."""
    seeds = list(seeds if seeds is not None else cfg.eval.seeds)
    data_root = ensure_dataset(cfg, Path(cfg.data_dir) if cfg.data_dir else outdir / "data")
    rows = []
    for name, changes in ABLATION_ROWS:
        for seed in seeds:
            run_cfg = cfgmod.replace_train(cfg, seed=seed, **changes)
            run_cfg.data_dir = str(data_root)
            run_cfg.run_name = f"{name}-s{seed}"
            started = time.perf_counter()
            report = run_training(run_cfg, outdir / run_cfg.run_name, data_root)
            rows.append({"config": name, "seed": seed, "miou_pseudo": report["miou_pseudo"],
                         "miou_pred": report["miou_pred"], "seconds": time.perf_counter() - started})
            log.info("%s seed %d: pseudo %.2f pred %.2f", name, seed,
                     report["miou_pseudo"], report["miou_pred"])
    plotting.write_csv(outdir / "ablation.csv", ["config", "seed", "miou_pseudo", "miou_pred", "seconds"],
                       [[r["config"], r["seed"], f"{r['miou_pseudo']:.4f}", f"{r['miou_pred']:.4f}",
                         f"{r['seconds']:.1f}"] for r in rows])
    (outdir / "ablation.json").write_text(json.dumps(rows, indent=2))
    plotting.plot_ablation(rows, outdir / "ablation_pseudo.png", "miou_pseudo")
    plotting.plot_ablation(rows, outdir / "ablation_pred.png", "miou_pred")
    return rows


def cmd_ablate(args) -> int:
    cfg = cfgmod.load_run_config(args.config, args.set)
    outdir = cfgmod.run_root(args.run_dir) / f"{cfg.run_name}-ablation"
    cfgmod.save_snapshot(cfg, outdir)
    rows = run_ablation(cfg, outdir, args.seeds)
    for name, _ in ABLATION_ROWS:
        vals = [r["miou_pseudo"] for r in rows if r["config"] == name]
        print(f"{name}\t{np.mean(vals):.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--run-dir", help=f"output root (default ${cfgmod.RUN_DIR_ENV} or ./runs)")

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="val", choices=("train", "val"))
        p.add_argument("--data", help="dataset root (default: the run's dataset)")
        p.add_argument("--out")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    with_config(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pseudo-label and prediction mIoU of a checkpoint")
    with_checkpoint(p)
    p.add_argument("--figures", type=int, default=6, help="images in the CAM figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention entropy or layer CKA of a checkpoint")
    with_checkpoint(p)
    p.add_argument("--kind", required=True, choices=("entropy", "cka"))
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-cam", help="write CAM and pseudo-label maps")
    with_checkpoint(p)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_export_cam)

    p = sub.add_parser("ablate", help="baseline / +unc / +unc+cer over seeds")
    with_config(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, synthdata.DatasetError, FileNotFoundError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
