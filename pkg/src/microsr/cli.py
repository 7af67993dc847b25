"""Command-line pipeline driver.

Subcommands: synth (generate a synthetic dataset), register (stitch
low-resolution tiles and align high-resolution labels onto them),
train, infer (with optional self-feeding), eval (SSIM table), and mtf
(bar-target contrast curves for the network input and output).

Common flags: --seed, --threads (default 1 for bit-reproducible runs),
--config FILE with flat `key = value` lines and # comments. Flags win
over config values; every run prints its fully resolved configuration.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, imgio, metrics, model
from . import train as train_mod
from .errors import MicrosrError


class UsageError(Exception):
    """Bad invocation: missing inputs, malformed settings."""


def _read_config(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = text.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args, config: dict, schema) -> dict:
    """Merge flag values (win), config values, then defaults.

    schema rows: (name, cast, default); default None means required.
    """
    resolved = {}
    for name, cast, default in schema:
        value = getattr(args, name)
        if value is None and name in config:
            try:
                value = cast(config[name])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad config value {name} = {config[name]!r}: {exc}")
        if value is None:
            value = default
        if value is None:
            raise UsageError(f"missing required setting: {name}")
        resolved[name] = value
    return resolved


def _log_config(command: str, resolved: dict, out_dir=None) -> None:
    items = " ".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    print(f"resolved-config {command}: {items}")
    if out_dir is not None:
        lines = [f"command = {command}"]
        lines += [f"{k} = {resolved[k]}" for k in sorted(resolved)]
        imgio.write_text(os.path.join(out_dir, "run_config.txt"), "\n".join(lines) + "\n")


def _paths(text: str) -> list:
    return [p for p in (s.strip() for s in text.split(",")) if p]


def _floats(text: str) -> list:
    return [float(s) for s in text.split(",") if s.strip()]


def _require_files(*paths) -> None:
    for p in paths:
        if not os.path.exists(p):
            raise UsageError(f"input not found: {p}")


def _ensure_color(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    return img


# ---------------------------------------------------------------------------


def cmd_synth(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("count", int, None),
        ("seed", int, 0),
        ("psf_sigma", float, 1.0),
        ("hr_size", int, 150),
        ("bits", int, 16),
    ])
    os.makedirs(os.path.join(r["out"], "lr"), exist_ok=True)
    os.makedirs(os.path.join(r["out"], "hr"), exist_ok=True)
    _log_config("synth", r, r["out"])

    pairs = data.synth_dataset(r["count"], r["seed"], r["hr_size"], r["psf_sigma"])
    n = len(pairs)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    rows = []
    for i, pair in enumerate(pairs):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        lr_rel = os.path.join("lr", f"{pair.source_id}.png")
        hr_rel = os.path.join("hr", f"{pair.source_id}.png")
        imgio.write_image(os.path.join(r["out"], lr_rel), pair.lr, r["bits"])
        imgio.write_image(os.path.join(r["out"], hr_rel), pair.hr, r["bits"])
        rows.append({"pair_id": pair.source_id, "lr_path": lr_rel,
                     "hr_path": hr_rel, "split": split})
    imgio.write_manifest(os.path.join(r["out"], "manifest.csv"), rows)
    print(f"wrote {n} pairs ({n_train} train / {n_val} val / {n_test} test) to {r['out']}")
    return 0


def _read_tiles(path: str) -> list:
    import csv

    _require_files(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"path", "row", "col"}
        if not need <= set(reader.fieldnames or ()):
            raise UsageError(f"tiles file {path} must have columns path,row,col")
        rows = list(reader)
    if not rows:
        raise UsageError(f"tiles file {path} lists no tiles")
    base = os.path.dirname(os.path.abspath(path))
    tiles = []
    for row in rows:
        img_path = os.path.join(base, row["path"])
        _require_files(img_path)
        tiles.append((imgio.read_image(img_path), (int(row["row"]), int(row["col"]))))
    return tiles


def cmd_register(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("tiles", str, None),
        ("hr", _paths, None),
        ("seed", int, 0),
        ("bits", int, 16),
    ])
    _require_files(*r["hr"])
    tiles = _read_tiles(r["tiles"])
    os.makedirs(os.path.join(r["out"], "lr"), exist_ok=True)
    os.makedirs(os.path.join(r["out"], "hr"), exist_ok=True)
    _log_config("register", r, r["out"])

    mosaic, _ = data.stitch_mosaic(tiles)
    mosaic_gray = data.to_grayscale(mosaic) if mosaic.ndim == 3 else mosaic
    scale = Fraction(5, 2)

    rows = []
    failures = []
    log_lines = ["pair_id,row,col,peak,rotation,scale,dx,dy"]
    for hr_path in r["hr"]:
        pair_id = os.path.splitext(os.path.basename(hr_path))[0]
        try:
            hr_img = imgio.read_image(hr_path)
            hr_gray = data.to_grayscale(hr_img) if hr_img.ndim == 3 else hr_img
            small = data.bicubic_resize(hr_gray, 1 / scale)
            (row0, col0), peak = data.ncc_template_match(mosaic_gray, small)
            if peak < 0.5:
                raise MicrosrError(f"correlation peak {peak:.3f} < 0.5 against the mosaic")
            crop = mosaic[row0 : row0 + small.shape[0], col0 : col0 + small.shape[1]]
            transform, lr, aligned = data.refine_alignment(crop, hr_img, scale)
        except (MicrosrError, OSError) as exc:
            failures.append((hr_path, str(exc)))
            continue
        lr_rel = os.path.join("lr", f"{pair_id}.png")
        hr_rel = os.path.join("hr", f"{pair_id}.png")
        imgio.write_image(os.path.join(r["out"], lr_rel), lr, r["bits"])
        imgio.write_image(os.path.join(r["out"], hr_rel), np.clip(aligned, 0, 1), r["bits"])
        rows.append({"pair_id": pair_id, "lr_path": lr_rel, "hr_path": hr_rel,
                     "split": "train"})
        log_lines.append(
            f"{pair_id},{row0},{col0},{repr(peak)},{repr(transform.rotation)},"
            f"{repr(transform.scale)},{repr(transform.translation[0])},"
            f"{repr(transform.translation[1])}"
        )
    imgio.write_manifest(os.path.join(r["out"], "manifest.csv"), rows)
    imgio.write_text(os.path.join(r["out"], "register_log.csv"), "\n".join(log_lines) + "\n")
    print(f"registered {len(rows)} of {len(r['hr'])} labels into {r['out']}")
    for path, msg in failures:
        print(f"failed {path}: {msg}", file=sys.stderr)
    return 1 if failures else 0


def cmd_train(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("manifest", str, None),
        ("epochs", int, 100),
        ("batch_size", int, 64),
        ("learning_rate", float, 1e-4),
        ("reg_lambda", float, 0.001),
        ("seed", int, 0),
        ("val_interval", int, 1),
        ("a0", int, 32),
        ("blocks", int, 5),
        ("alpha", int, 10),
        ("shuffle_r", int, 5),
        ("down_stride", int, 2),
        ("lr_patch", int, 60),
        ("overlap", float, 0.4),
        ("resume", str, ""),
    ])
    _require_files(r["manifest"])
    if r["resume"]:
        _require_files(r["resume"])
    os.makedirs(r["out"], exist_ok=True)
    _log_config("train", r, r["out"])

    spec = model.ArchitectureSpec(
        a0=r["a0"], k=r["blocks"], alpha=r["alpha"],
        r=r["shuffle_r"], down_stride=r["down_stride"],
    )
    if (r["lr_patch"] * spec.r) % spec.down_stride:
        raise UsageError(
            f"lr_patch {r['lr_patch']} does not map to integer label dims at scale {spec.scale}"
        )
    hr_patch = r["lr_patch"] * spec.r // spec.down_stride

    def patches(split):
        out = []
        for pair in imgio.load_pairs(r["manifest"], split):
            out.extend(data.extract_patches(
                _ensure_color(pair.lr), _ensure_color(pair.hr),
                r["lr_patch"], hr_patch, r["overlap"], source_id=pair.source_id,
            ))
        return out

    train_patches = patches("train")
    val_patches = patches("val")
    if not train_patches:
        raise UsageError(f"manifest {r['manifest']} has no train rows")
    if not val_patches:
        print("note: manifest has no val rows; validating on the training patches")
        val_patches = train_patches

    cfg = train_mod.TrainConfig(
        learning_rate=r["learning_rate"], reg_lambda=r["reg_lambda"],
        batch_size=r["batch_size"], max_epochs=r["epochs"], seed=r["seed"],
        validation_interval=r["val_interval"],
    )
    state = None
    if r["resume"]:
        state = train_mod.load_train_state(r["resume"])
        if state.params.spec != spec:
            raise UsageError(
                f"resume state was trained with {state.params.spec}, flags give {spec}"
            )
    result = train_mod.train(train_patches, val_patches, cfg, spec=spec, state=state)

    model.save_checkpoint(result.params, os.path.join(r["out"], "checkpoint.bin"))
    train_mod.save_train_state(os.path.join(r["out"], "state.npz"), result.state, cfg)
    train_mod.write_log(os.path.join(r["out"], "train_log.csv"), result.log)
    print(
        f"trained {len(train_patches)} patches for {r['epochs']} epochs; "
        f"best val_loss {result.best_val!r} at epoch {result.best_epoch}"
    )
    return 0


def cmd_infer(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("checkpoint", str, None),
        ("input", str, None),
        ("self_feed", int, 1),
        ("repeat", int, 5),
        ("bits", int, 16),
    ])
    _require_files(r["checkpoint"], r["input"])
    if r["self_feed"] < 1:
        raise UsageError(f"self_feed must be >= 1, got {r['self_feed']}")
    if r["repeat"] < 1:
        raise UsageError(f"repeat must be >= 1, got {r['repeat']}")
    _log_config("infer", r)

    params = model.load_checkpoint(r["checkpoint"])
    img = _ensure_color(imgio.read_image(r["input"])).astype(np.float32)
    times = []
    out = None
    for _ in range(r["repeat"]):
        t0 = time.perf_counter()
        out = model.self_feed(params, img, r["self_feed"])
        times.append(time.perf_counter() - t0)
    imgio.write_image(r["out"], np.clip(out, 0.0, 1.0), r["bits"])
    print(
        f"output {out.shape[1]}x{out.shape[0]} written to {r['out']}; "
        f"wall time per image {np.mean(times):.3f} s (mean of {r['repeat']} runs)"
    )
    return 0


def cmd_eval(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("checkpoint", str, None),
        ("manifest", str, None),
    ])
    _require_files(r["checkpoint"], r["manifest"])
    _log_config("eval", r)

    pairs = imgio.load_pairs(r["manifest"], "test")
    if not pairs:
        raise UsageError(f"manifest {r['manifest']} has an empty test split")
    params = model.load_checkpoint(r["checkpoint"])
    pairs = [
        type(p)(lr=_ensure_color(p.lr), hr=_ensure_color(p.hr), source_id=p.source_id)
        for p in pairs
    ]
    rows, mean_net, mean_bic = metrics.evaluate_testset(params, pairs)
    lines = ["pair_id,ssim_network,ssim_bicubic"]
    lines += [f"{pid},{repr(sn)},{repr(sb)}" for pid, sn, sb in rows]
    imgio.write_text(r["out"], "\n".join(lines) + "\n")
    print(f"mean ssim over {len(rows)} pairs: network={mean_net!r} bicubic={mean_bic!r}")
    return 0


def cmd_mtf(args, config) -> int:
    r = _resolve(args, config, [
        ("out", str, None),
        ("checkpoint", str, None),
        ("periods", _floats, [10.0, 12.5, 15.0, 20.0, 25.0, 30.0]),
        ("psf_sigma", float, 1.0),
        ("pitch", float, metrics.DEFAULT_PITCH_UM),
        ("line_length", float, 2.5),
        ("margin", int, 8),
    ])
    _require_files(r["checkpoint"])
    _log_config("mtf", r)

    params = model.load_checkpoint(r["checkpoint"])
    scale = params.spec.scale
    target_spec = metrics.BarTargetSpec(
        periods=r["periods"], pitch_um=r["pitch"],
        line_length_factor=r["line_length"], margin=r["margin"],
    )
    hr_img, hr_elements = metrics.gen_bar_target(target_spec)
    # degradation needs dims divisible on the fine grid; pad with background
    block = scale.numerator
    pad_h = (-hr_img.shape[0]) % block
    pad_w = (-hr_img.shape[1]) % block
    hr_img = np.pad(hr_img, ((0, pad_h), (0, pad_w)), constant_values=1.0)

    lr_img = data.synth_degrade(hr_img, r["psf_sigma"], scale)
    lr_elements = metrics.rescale_elements(hr_elements, 1 / scale)
    lr_pitch = r["pitch"] * float(scale)

    out = model.self_feed(params, _ensure_color(lr_img).astype(np.float32), 1)
    out_gray = data.to_grayscale(np.clip(out, 0.0, 1.0))

    curve_in = metrics.mtf_curve(lr_img, lr_elements, lr_pitch)
    curve_out = metrics.mtf_curve(out_gray, hr_elements, r["pitch"])
    if not np.allclose(curve_in.period_cycles_per_mm, curve_out.period_cycles_per_mm):
        raise MicrosrError("input and output element frequencies disagree")

    lines = ["period_cycles_per_mm,input_contrast,output_contrast"]
    for f, ci, co in zip(curve_in.period_cycles_per_mm, curve_in.contrast, curve_out.contrast):
        lines.append(f"{repr(float(f))},{repr(float(ci))},{repr(float(co))}")
    imgio.write_text(r["out"], "\n".join(lines) + "\n")
    print(f"wrote {len(r['periods'])} MTF rows to {r['out']}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microsr",
        description="Microscopy super-resolution pipeline (2.5x upsampling CNN).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="global RNG seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread count; 1 (default) is bit-reproducible")
        p.add_argument("--config", default=None,
                       help="key = value settings file; flags override it")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", default=None, help="output dataset directory")
    p.add_argument("--count", type=int, default=None, help="number of pairs")
    p.add_argument("--psf-sigma", type=float, default=None, dest="psf_sigma",
                   help="Gaussian PSF sigma in label pixels (default 1.0)")
    p.add_argument("--hr-size", type=int, default=None, dest="hr_size",
                   help="label image size (default 150)")
    p.add_argument("--bits", type=int, default=None, choices=(8, 16),
                   help="PNG bit depth (default 16)")

    p = sub.add_parser("register", help="stitch tiles and align labels onto the mosaic")
    common(p)
    p.add_argument("--out", default=None, help="output dataset directory")
    p.add_argument("--tiles", default=None,
                   help="CSV of input tiles: path,row,col (approximate offsets)")
    p.add_argument("--hr", nargs="+", default=None, help="label image paths")
    p.add_argument("--bits", type=int, default=None, choices=(8, 16))

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    common(p)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--manifest", default=None, help="dataset manifest CSV")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--reg-lambda", type=float, default=None, dest="reg_lambda",
                   help="edge-energy regularizer weight (default 0.001)")
    p.add_argument("--val-interval", type=int, default=None, dest="val_interval")
    p.add_argument("--a0", type=int, default=None, help="input layer channels (default 32)")
    p.add_argument("--blocks", type=int, default=None, help="residual block count (default 5)")
    p.add_argument("--alpha", type=int, default=None, help="total channel growth (default 10)")
    p.add_argument("--shuffle-r", type=int, default=None, dest="shuffle_r",
                   help="pixel-shuffle factor (default 5)")
    p.add_argument("--down-stride", type=int, default=None, dest="down_stride",
                   help="final convolution stride (default 2)")
    p.add_argument("--lr-patch", type=int, default=None, dest="lr_patch",
                   help="input patch size (default 60)")
    p.add_argument("--overlap", type=float, default=None,
                   help="patch overlap fraction (default 0.4)")
    p.add_argument("--resume", default=None, help="state.npz from a previous run")

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    common(p)
    p.add_argument("--out", default=None, help="output PNG path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input", default=None, help="input PNG path")
    p.add_argument("--self-feed", type=int, default=None, dest="self_feed",
                   help="feed the output back through the network this many times (default 1)")
    p.add_argument("--repeat", type=int, default=None,
                   help="timing repetitions (default 5)")
    p.add_argument("--bits", type=int, default=None, choices=(8, 16))

    p = sub.add_parser("eval", help="SSIM table for the test split of a manifest")
    common(p)
    p.add_argument("--out", default=None, help="output CSV path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("mtf", help="bar-target contrast curves for input and output")
    common(p)
    p.add_argument("--out", default=None, help="output CSV path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--periods", type=_floats, default=None,
                   help="bar periods in label pixels, comma separated")
    p.add_argument("--psf-sigma", type=float, default=None, dest="psf_sigma")
    p.add_argument("--pitch", type=float, default=None,
                   help="label pixel pitch in micrometers (default 0.07)")
    p.add_argument("--line-length", type=float, default=None, dest="line_length",
                   help="bar length as a multiple of the period (default 2.5)")
    p.add_argument("--margin", type=int, default=None)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "register": cmd_register,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "mtf": cmd_mtf,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _read_config(args.config) if args.config else {}
        threads = args.threads
        if threads is None and "threads" in config:
            threads = int(config["threads"])
        if threads is None:
            threads = 1
        if threads < 1:
            raise UsageError(f"threads must be >= 1, got {threads}")
        with threadpool_limits(limits=threads):
            return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MicrosrError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
