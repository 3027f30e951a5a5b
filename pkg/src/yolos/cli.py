"""Command-line entry point: ``yolos {train,eval,predict,flops,scale,analyze}``.

Every command writes its artifacts under ``--out`` and prints a JSON
summary on stdout. Failures print one ``yolos: error: <kind>: <message>``
line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

CHECKPOINT_NAME = "model.ylos"
SIDECAR_SUFFIX = ".cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line instead of usage + message
        raise UsageError(message)


def _color_ok(stream) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def _fail(kind: str, message: str, code: int = 1) -> int:
    text = f"{kind}: {' '.join(str(message).split())}"
    prefix = "\x1b[31merror\x1b[0m" if _color_ok(sys.stderr) else "error"
    print(f"yolos: {prefix}: {text}", file=sys.stderr)
    return code


def _pairs(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolution(text: str):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        return int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use 224 or 800x1104")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="yolos", description="Desk-scale ViT object detector with [DET] tokens.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="BLAS threads (default from the config, 1)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="config override with a dotted key, repeatable")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--init", help="warm-start checkpoint; heads and [DET] tokens are re-initialized")
    t.add_argument("--steps", type=int, help="shorthand for --set optim.total_steps=N")

    e = sub.add_parser("eval", help="COCO-style AP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="annotation file (default: the held-out synthetic split)")
    e.add_argument("--short", type=int, help="resize the shorter side to this many pixels")
    e.add_argument("--long-max", type=int, help="cap on the longer side when resizing")

    pr = sub.add_parser("predict", help="detect objects in one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help="PPM (or PNG) image")
    pr.add_argument("--score-threshold", type=float, default=0.0)
    pr.add_argument("--overlay", help="write a PPM with the predicted boxes drawn")

    f = sub.add_parser("flops", help="FLOPs and f_lin/f_att of encoder configurations")
    f.add_argument("--preset", action="append", help="Ti, S, B, S-dwr or S-fast-dwr (default: all five)")
    f.add_argument("--resolution", type=_resolution, help="input resolution, e.g. 224 or 800x1104")
    f.add_argument("--extra-tokens", type=int, default=1)
    f.add_argument("--model", action="store_true", help="report the configured model instead of presets")

    s = sub.add_parser("scale", help="derive a scaled configuration for a FLOPs target")
    s.add_argument("--base", default="Ti")
    s.add_argument("--target", type=float, required=True, help="target FLOPs, e.g. 4.6e9")
    s.add_argument("--strategy", choices=["w", "dwr", "fast"], default="dwr")
    s.add_argument("--alpha", type=float, default=0.8)
    s.add_argument("--heads", type=int, default=6,
                   help="head count of the scaled model; width rounds to a multiple of it (default 6)")
    s.add_argument("--extra-tokens", type=int, default=1)
    s.add_argument("--tolerance", type=float, default=0.08)

    a = sub.add_parser("analyze", help="token statistics and attention maps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--which", required=True, choices=["geometry", "class", "scatter", "categories", "attention"])
    a.add_argument("--data", help="annotation file (default: the held-out synthetic split)")
    a.add_argument("--image", help="image for --which attention (default: first held-out image)")
    a.add_argument("--layer", type=int, default=-1)
    a.add_argument("--tokens", type=int, nargs="*", help="[DET] token indices to render")
    a.add_argument("--zero-pe", action="store_true", help="scatter with positional embeddings zeroed")
    return p


def _load_run(args):
    from .config import load_config

    overrides = _pairs(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if getattr(args, "steps", None) is not None:
        overrides["optim.total_steps"] = str(args.steps)
    return load_config(args.config, overrides)


def _load_detector(path, cfg):
    """Checkpoint plus the model config from its sidecar (or the run config when absent)."""
    from dataclasses import replace

    from .checkpoint import load_params
    from .config import model_from_file
    from .model import Detector

    side = Path(str(path) + SIDECAR_SUFFIX)
    model_cfg = model_from_file(side) if side.exists() else cfg.model
    params = load_params(path, requires_grad=False)
    expected = Detector.create(model_cfg, 0).params
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {missing[0]} (and {len(missing) - 1} more)")
    for k, t in expected.items():
        if params[k].shape != t.shape:
            raise ValueError(f"{path}: tensor {k} has shape {params[k].shape}, config expects {t.shape}")
    return Detector(model_cfg, params), replace(cfg, model=model_cfg)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def cmd_train(args, cfg) -> dict:
    from . import checkpoint
    from .config import dump_config
    from .train import NonFiniteLoss, load_split, train, write_loss_log

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    images = load_split(cfg, "train")
    warm = None
    if args.init:
        warm, cfg = _load_detector(args.init, cfg)
        for t in warm.params.values():
            t.requires_grad = True
    log_path = out / "loss.jsonl"
    log_file = log_path.open("w", encoding="utf-8")

    def on_record(r):
        log_file.write(json.dumps(r) + "\n")

    try:
        result = train(cfg, images, detector=warm, on_record=on_record)
    except NonFiniteLoss as exc:
        log_file.close()
        good = out / "last_good.ylos"
        checkpoint.save(good, exc.last_good)
        (out / ("last_good.ylos" + SIDECAR_SUFFIX)).write_text(dump_config(cfg), encoding="utf-8")
        raise RuntimeError(f"non-finite loss at step {exc.step}; last good parameters saved to {good}") from None
    log_file.close()
    write_loss_log(log_path, result.records)
    ckpt = out / CHECKPOINT_NAME
    checkpoint.save(ckpt, result.detector.params)
    (out / (CHECKPOINT_NAME + SIDECAR_SUFFIX)).write_text(dump_config(cfg), encoding="utf-8")
    summary = {"checkpoint": str(ckpt), "loss_log": str(log_path), "steps": len(result.records)}
    if result.records:
        summary["final_loss"] = result.records[-1]["total"]
    return summary


def cmd_eval(args, cfg) -> dict:
    from .train import evaluate_detector, load_split

    det, cfg = _load_detector(args.checkpoint, cfg)
    images = load_split(cfg, "eval", args.data)
    report = evaluate_detector(det, images, args.short, args.long_max)
    metrics = report.as_dict()
    _write_json(Path(cfg.out) / "metrics.json", metrics)
    return metrics


def cmd_predict(args, cfg) -> dict:
    import numpy as np

    from . import autodiff as ad
    from .boxes import cxcywh_to_xyxy
    from .data import LabeledImage, pad_to_multiple
    from .evaluate import predictions_from_logits
    from .imageio import draw_box, read_image, write_ppm

    det, cfg = _load_detector(args.checkpoint, cfg)
    pixels = read_image(args.image)
    h, w = pixels.shape[:2]
    padded = pad_to_multiple(LabeledImage(pixels, [], 0), cfg.model.patch_size)
    ph, pw = padded.size
    with ad.no_grad():
        out = det(padded.pixels)
    preds = predictions_from_logits(out.class_logits.data, out.boxes.data, 0, args.score_threshold)
    scale = np.array([pw, ph, pw, ph], dtype=float)
    records = []
    overlay = pixels.copy()
    for box, label, score in sorted(zip(preds.boxes, preds.labels, preds.scores), key=lambda r: -r[2]):
        x1, y1, x2, y2 = np.asarray(cxcywh_to_xyxy(box)) * scale
        x1, y1, x2, y2 = max(0.0, x1), max(0.0, y1), min(float(w), x2), min(float(h), y2)
        records.append({"bbox": [x1, y1, x2 - x1, y2 - y1], "category_id": int(label), "score": float(score)})
        draw_box(overlay, (x1, y1, x2, y2))
    result = {"image": str(args.image), "width": w, "height": h, "predictions": records}
    _write_json(Path(cfg.out) / "predictions.json", result)
    if args.overlay:
        write_ppm(args.overlay, overlay)
        result["overlay"] = str(args.overlay)
    return result


def cmd_flops(args, cfg) -> dict:
    from .scaling import TABLE1, ScalePoint, flops, format_table

    if args.model:
        m = cfg.model
        res = args.resolution or tuple(cfg.data.canvas)
        points = [("model", ScalePoint(m.depth, m.width, m.heads, res, m.patch_size, m.mlp_ratio, m.image_channels))]
    else:
        names = args.preset or list(TABLE1)
        unknown = [n for n in names if n not in TABLE1]
        if unknown:
            raise UsageError(f"unknown preset {unknown[0]!r}; choose from {', '.join(TABLE1)}")
        points = [(n, TABLE1[n]) for n in names]
    rows = [(n, pt, flops(pt, args.resolution, args.extra_tokens)) for n, pt in points]
    print(format_table(rows), file=sys.stderr)
    return {"rows": [{"name": n, "depth": pt.depth, "width": pt.width, "heads": pt.heads,
                      "resolution": list(pt.hw) if args.resolution is None else args.resolution,
                      **rep.as_dict()} for n, pt, rep in rows]}


def cmd_scale(args, cfg) -> dict:
    from .scaling import TABLE1, flops, scale_fast, scale_uniform, scale_width

    if args.base not in TABLE1:
        raise UsageError(f"unknown base {args.base!r}; choose from {', '.join(TABLE1)}")
    base = TABLE1[args.base]
    kw = dict(extra_tokens=args.extra_tokens, tolerance=args.tolerance, heads=args.heads)
    if args.strategy == "w":
        pt = scale_width(base, args.target, **kw)
    elif args.strategy == "dwr":
        pt = scale_uniform(base, args.target, **kw)
    else:
        pt = scale_fast(base, args.target, args.alpha, **kw)
    rep = flops(pt, extra_tokens=args.extra_tokens)
    h, w = pt.hw
    return {"base": args.base, "strategy": args.strategy, "depth": pt.depth, "width": pt.width,
            "heads": pt.heads, "resolution": h if h == w else [h, w], "flops": rep.total,
            "ratio": rep.ratio, "error": rep.total / args.target - 1}


def cmd_analyze(args, cfg) -> dict:
    import numpy as np

    from . import analysis
    from .imageio import read_image
    from .train import load_split

    det, cfg = _load_detector(args.checkpoint, cfg)
    out = Path(cfg.out)
    which = args.which
    if which == "attention":
        image = read_image(args.image) if args.image else load_split(cfg, "eval", args.data)[0].pixels
        maps = analysis.extract_attention(det, image, args.layer)
        tokens = args.tokens if args.tokens else list(range(min(4, cfg.model.det_tokens)))
        bad = [t for t in tokens if not 0 <= t < cfg.model.det_tokens]
        if bad:
            raise IndexError(f"token {bad[0]} out of range for {cfg.model.det_tokens} [DET] tokens")
        paths = analysis.write_attention(maps, out, tokens)
        result = {"layer": maps.layer, "row_sums_max_error": float(np.abs(maps.row_sums - 1).max()),
                  "files": [str(p) for p in paths]}
    else:
        images = load_split(cfg, "eval", args.data)
        if which == "geometry":
            result = {"rho": analysis.geometry_correlation(det, images), "images": len(images)}
        elif which == "class":
            result = {"rho": analysis.class_feature_correlation(det, images), "images": len(images)}
        elif which == "scatter":
            records = analysis.box_scatter(det, images, zero_pe=args.zero_pe)
            paths = analysis.write_scatter(records, out)
            result = {"tokens": [r.as_dict() for r in records], "files": [str(p) for p in paths]}
        else:
            stats = analysis.category_stats(det, images)
            null = analysis.category_null_std(stats, np.random.default_rng(cfg.seed))
            result = {**stats.as_dict(), "null_std": null.tolist()}
    _write_json(out / f"analysis_{which}.json", result)
    return result


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "flops": cmd_flops,
            "scale": cmd_scale, "analyze": cmd_analyze}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    if args.threads is not None:
        # only effective before the BLAS library loads, i.e. when run as a fresh process
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = _load_run(args)
        result = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except FileNotFoundError as exc:
        return _fail("not-found", f"{exc.filename or exc}: no such file")
    except KeyError as exc:
        return _fail("config", exc.args[0] if exc.args else exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        return _fail(type(exc).__name__, exc)
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
