"""One command-line executable for the whole toolchain.

Subcommands: synth, train, predict, eval, audit, propagate, gradcheck,
histogram. Configuration lives in a plain key=value file (# comments);
flags override config. Exit codes: 0 success, 2 usage error, 3 data
error, 4 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import loss as loss_mod, pipeline, terrain
from .loss import LossConfig, case_histogram, histogram_json, violation_rate
from .pipeline import (
    NumericError,
    TrainConfig,
    load_model_checkpoint,
    save_checkpoint as save_model_checkpoint,
)
from .raster import ElevationMap, LabelMap, read_grid, write_flood_ppm, write_grid

_CONFIG_KEYS = {
    "synth.width": int,
    "synth.height": int,
    "synth.seed": int,
    "synth.roughness": float,
    "synth.water_level_quantile": float,
    "synth.water_level": float,
    "synth.canopy_fraction": float,
    "synth.ambiguity_fraction": float,
    "synth.noise_sigma": float,
    "synth.train_regions": int,
    "synth.test_regions": int,
    "train.epochs": int,
    "train.lr": float,
    "train.batch_size": int,
    "train.optimizer": str,
    "train.seed": int,
    "train.checkpoint_every": int,
    "train.input_mode": str,
    "train.normalize_scope": str,
    "loss.scheme": str,
    "loss.lambda": float,
    "loss.weighting": str,
    "loss.border_pairs": str,
    "loss.reduce": str,
    "model.blocks": int,
    "model.base_channels": int,
    "model.patch_size": int,
    "model.pooling_spectral": str,
    "model.pooling_elevation": str,
    "model.skip_connections": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "model.spectral_activation": str,
    "model.dtype": str,
}


def read_config(path):
    """Parse a key=value config file; unknown keys are rejected by name."""
    out = {}
    if path is None:
        return out
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def _synth_config(cfg):
    kw = {}
    for name in (
        "width", "height", "seed", "roughness", "canopy_fraction",
        "ambiguity_fraction", "noise_sigma",
    ):
        if f"synth.{name}" in cfg:
            kw[name] = cfg[f"synth.{name}"]
    if "synth.water_level" in cfg:
        kw["water_level"] = cfg["synth.water_level"]
        kw["water_level_quantile"] = None
    elif "synth.water_level_quantile" in cfg:
        kw["water_level_quantile"] = cfg["synth.water_level_quantile"]
    return terrain.SynthConfig(**kw)


def _loss_config(cfg, override_scheme=None):
    kw = {}
    if "loss.scheme" in cfg:
        kw["scheme"] = cfg["loss.scheme"]
    if "loss.lambda" in cfg:
        kw["lambda_"] = cfg["loss.lambda"]
    for name in ("weighting", "border_pairs", "reduce"):
        if f"loss.{name}" in cfg:
            kw[name] = cfg[f"loss.{name}"]
    if override_scheme is not None:
        kw["scheme"] = override_scheme
    return LossConfig(**kw)


def _train_config(cfg, loss_cfg):
    kw = {"loss": loss_cfg}
    for name in (
        "epochs", "lr", "batch_size", "optimizer", "seed",
        "checkpoint_every", "input_mode", "normalize_scope",
    ):
        if f"train.{name}" in cfg:
            kw[name] = cfg[f"train.{name}"]
    return TrainConfig(**kw)


def _model_kwargs(cfg):
    kw = {}
    for name in (
        "blocks", "base_channels", "patch_size", "pooling_spectral",
        "pooling_elevation", "skip_connections", "spectral_activation", "dtype",
    ):
        if f"model.{name}" in cfg:
            kw[name] = cfg[f"model.{name}"]
    return kw


def _dump_json(obj, out_path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    cfg = read_config(args.config)
    scfg = _synth_config(cfg)
    n_train = args.train if args.train is not None else cfg.get("synth.train_regions", 2)
    n_test = args.test if args.test is not None else cfg.get("synth.test_regions", 1)
    manifest = terrain.gen_dataset(scfg, args.out, n_train, n_test)
    print(f"wrote {len(manifest['regions'])} regions to {args.out}")
    return 0


def cmd_train(args):
    cfg = read_config(args.config)
    loss_cfg = _loss_config(cfg, override_scheme=args.loss)
    tcfg = _train_config(cfg, loss_cfg)
    _, regions = terrain.load_dataset(args.data)
    train_regions = [r for role, r in regions.values() if role == "train"]
    if not train_regions:
        raise ValueError(f"dataset {args.data} has no train regions")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_epoch = 0
    if args.resume:
        model, start_epoch = load_model_checkpoint(args.resume, cfg.get("model.dtype", "float32"))
    else:
        model = pipeline.build_model(
            tcfg.input_mode,
            cfg.get("model.patch_size", 128),
            **{k: v for k, v in _model_kwargs(cfg).items() if k != "patch_size"},
        )
        model.init_params(tcfg.seed)

    loss_path = out / "loss.csv"
    mode = "a" if args.resume and loss_path.exists() else "w"
    with open(loss_path, mode) as fh:
        if mode == "w":
            fh.write("epoch,mean_loss\n")

        def on_epoch(epoch, mean):
            fh.write(f"{epoch},{mean!r}\n")
            fh.flush()
            if args.verbose:
                print(f"epoch {epoch}: mean loss {mean:.6g}")

        pipeline.train(model, train_regions, tcfg, ckpt_dir=out,
                       start_epoch=start_epoch, on_epoch=on_epoch)

    final = out / "final.evaw"
    save_model_checkpoint(model, final, start_epoch + tcfg.epochs)
    print(f"checkpoint: {final}")
    return 0


def cmd_predict(args):
    model, _ = load_model_checkpoint(args.ckpt)
    region = terrain.load_region(args.region)
    mode = args.mode
    if mode is None:
        ch = model.config.spectral_channels
        mode = "7C" if ch == 6 else ("4C" if model.config.use_elevation_path else "3C")
    prob, hard = pipeline.predict_region(model, region, mode, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid(prob, out / "prob.fgrd")
    write_grid(hard.grid, out / "pred.fgrd")
    write_flood_ppm(prob.data[1], out / "floodmap.ppm")
    print(f"wrote prob.fgrd, pred.fgrd, floodmap.ppm to {out}")
    return 0


def cmd_eval(args):
    pred = LabelMap(read_grid(args.pred))
    gt = LabelMap(read_grid(args.gt))
    elev = ElevationMap(read_grid(args.elev)) if args.elev else None
    report = pipeline.evaluate(pred, gt, elev)
    _dump_json(report.to_json(), args.out)
    return 0


def cmd_audit(args):
    pred = LabelMap(read_grid(args.pred))
    gt = LabelMap(read_grid(args.gt))
    elev = ElevationMap(read_grid(args.elev))
    report = pipeline.evaluate(pred, gt, elev)
    payload = {
        "case_histogram": histogram_json(case_histogram(gt, elev)),
        "violation_rate": violation_rate(pred.values, gt.values, elev),
        "metrics": report.to_json(),
    }
    _dump_json(payload, args.out)
    return 0


def cmd_propagate(args):
    elev = ElevationMap(read_grid(args.elev))
    try:
        i, j = (int(x) for x in args.seed.split(","))
    except ValueError as exc:
        raise ValueError(f"--seed must be 'i,j', got {args.seed!r}") from exc
    if args.label == "flood":
        pixels = terrain.propagate_flood(elev, (i, j), args.threshold)
    else:
        pixels = terrain.propagate_dry(elev, (i, j))
    mask = np.zeros((elev.height, elev.width), dtype=np.int8)
    for pi, pj in pixels:
        mask[pi, pj] = 1
    write_grid(LabelMap(mask).grid, args.out)
    print(f"{len(pixels)} pixels -> {args.out}")
    return 0


def cmd_histogram(args):
    gt = LabelMap(read_grid(args.gt))
    elev = ElevationMap(read_grid(args.elev))
    _dump_json(histogram_json(case_histogram(gt, elev)), args.out)
    return 0


def cmd_gradcheck(args):
    from .gradcheck_suite import run_suite

    reports = run_suite(eps=args.eps, tol=args.tol, seed=args.seed)
    width = max(len(name) for name, _ in reports)
    ok = True
    for name, rep in reports:
        print(f"{name:<{width}}  {rep.summary()}")
        ok &= rep.passed
    print("all checks passed" if ok else "GRADIENT CHECK FAILURES")
    return 0 if ok else 4


def build_parser():
    p = argparse.ArgumentParser(
        prog="floodseg",
        description="Elevation-guided flood extent segmentation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, help="number of training regions")
    s.add_argument("--test", type=int, help="number of test regions")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True, help="checkpoint/loss output dir")
    s.add_argument("--loss", choices=loss_mod.LOSS_SCHEMES, help="override loss scheme")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="predict a region and stitch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--region", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=pipeline.INPUT_MODES)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="metrics from prediction vs ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--elev", help="adds violation_rate")
    s.add_argument("--out", help="write JSON here instead of stdout")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("audit", help="physics audit: case histogram + violations")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--elev", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_audit)

    s = sub.add_parser("propagate", help="elevation-guided BFS from a seed pixel")
    s.add_argument("--elev", required=True)
    s.add_argument("--seed", required=True, help="pixel as 'i,j' (row,col)")
    s.add_argument("--label", choices=("flood", "dry"), required=True)
    s.add_argument("--threshold", choices=("seed", "path_monotone"), default="seed")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_propagate)

    s = sub.add_parser("gradcheck", help="finite-difference checks of all operators")
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("histogram", help="pair-case histogram of a labeling")
    s.add_argument("--gt", required=True)
    s.add_argument("--elev", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_histogram)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
