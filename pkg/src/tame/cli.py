"""``tame`` command line: generate, train-backbone, train-tame, explain, evaluate.

Output layout under ``--out`` (default ``runs``)::

    backbone.tamew  backbone.json
    tame/epoch_<k>.tamew  tame/log.csv  tame/best.tamew  tame/best_epoch.txt
    explain/<stem>_class<k>.pgm  explain/<stem>_class<k>_overlay.png
    metrics.csv

Exit codes: 0 success, 2 configuration error, 3 I/O or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, PngImagePlugin

from tame.attention import AttentionModule
from tame.autodiff import Tensor, bilinear_upsample
from tame.backbone import Backbone, model_truth, train_backbone
from tame.config import RunConfig
from tame.data import INDEX_NAME, load_dataset, read_image, read_index, write_dataset, write_pgm16
from tame.errors import ConfigError, FormatError, NumericError
from tame.evaluator import BaselineSource, TameSource, evaluate, metrics_csv, metrics_table
from tame.trainer import fit
from tame.weights import read_weights, write_weights

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("tame")

# Perceptually uniform ramp (viridis sampled at 9 points), interpolated to 256 entries.
COLORMAP_ANCHORS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)
COLORMAP = np.stack(
    [np.interp(np.linspace(0, 1, 256), np.linspace(0, 1, len(COLORMAP_ANCHORS)), COLORMAP_ANCHORS[:, c]) for c in range(3)],
    axis=1,
).round().astype(np.uint8)
OVERLAY_ALPHA = 0.5


# ----------------------------------------------------------------- helpers
def _paths(cfg: RunConfig) -> dict[str, Path]:
    out = cfg.output
    return {
        "backbone": out / "backbone.tamew",
        "backbone_report": out / "backbone.json",
        "tame": out / "tame",
        "best": out / "tame" / "best.tamew",
        "explain": out / "explain",
        "metrics": out / "metrics.csv",
    }


def _load_data(cfg: RunConfig, splits):
    root = cfg.dataset_root
    if not (root / INDEX_NAME).exists():
        raise ConfigError(f"no dataset at {root} (run 'tame generate' first or set dataset.root)")
    return load_dataset(root, splits)


def _load_backbone(cfg: RunConfig, path: Path, dataset_digest: Optional[str] = None) -> tuple[Backbone, dict]:
    if not path.exists():
        raise ConfigError(f"no backbone weights at {path} (run 'tame train-backbone' first)")
    wf = read_weights(path, expected_digest=cfg.backbone_digest())
    meta = wf.metadata
    if dataset_digest is not None and meta.get("dataset_digest") != dataset_digest:
        raise ConfigError(f"{path} was trained on a different dataset than {cfg.dataset_root}")
    model = Backbone(cfg.backbone_config, params=wf.params).freeze()
    return model, meta


def _load_attention(cfg: RunConfig, path: Path) -> tuple[AttentionModule, dict]:
    if not path.exists():
        raise ConfigError(f"no attention weights at {path} (run 'tame train-tame' first)")
    wf = read_weights(path, expected_digest=cfg.training_digest())
    if wf.metadata.get("backbone_digest") != cfg.backbone_digest():
        raise ConfigError(f"{path} was trained against a different backbone")
    bcfg = cfg.backbone_config
    attention = AttentionModule(bcfg.feature_channels(), bcfg.num_classes, cfg.flags, tap_names=bcfg.tap_layers)
    attention.load_state_dict(wf.params)
    return attention, wf.metadata


def _normalise(images: np.ndarray, meta: dict) -> np.ndarray:
    mean = np.asarray(meta["mean"], dtype=np.float32)
    std = np.asarray(meta["std"], dtype=np.float32)
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def _write(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- commands
def cmd_generate(cfg: RunConfig, args) -> int:
    root = Path(args.out) if args.out else cfg.dataset_root
    index = write_dataset(cfg.dataset_spec, root)
    header, rows = read_index(root)
    counts = {s: sum(1 for r in rows if r[0] == s) for s in ("train", "val", "test")}
    print(f"wrote {sum(counts.values())} images to {root} ({counts}); digest {header['digest']}")
    logger.info("index at %s", index)
    return EXIT_OK


def cmd_train_backbone(cfg: RunConfig, args) -> int:
    sets, header = _load_data(cfg, ("train", "val"))
    model, report = train_backbone(cfg.backbone_config, sets["train"], sets["val"], cfg.backbone_settings)
    paths = _paths(cfg)
    meta = {
        "kind": "backbone",
        "backbone": cfg.backbone_config.to_dict(),
        "dataset_digest": header["digest"],
        "mean": [float(v) for v in sets["train"].mean],
        "std": [float(v) for v in sets["train"].std],
    }
    paths["backbone"].parent.mkdir(parents=True, exist_ok=True)
    write_weights(paths["backbone"], model.state_dict(), cfg.backbone_digest(), meta)
    summary = dict(report.to_dict(), config_digest=cfg.backbone_digest(), dataset_digest=header["digest"])
    _write(paths["backbone_report"], (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    print(f"validation accuracy {report.val_accuracy:.4f}; weights at {paths['backbone']}")
    return EXIT_OK


def _log_csv(records, digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    rows = [r.row() for r in records]
    fields = list(rows[0]) if rows else ["epoch"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([row[f] if f == "epoch" else repr(float(row[f])) for f in fields])
    return buf.getvalue()


def cmd_train_tame(cfg: RunConfig, args) -> int:
    sets, header = _load_data(cfg, ("train", "val"))
    paths = _paths(cfg)
    backbone, bmeta = _load_backbone(cfg, paths["backbone"], header["digest"])
    digest = cfg.training_digest()
    meta = {
        "kind": "attention",
        "flags": cfg.flags.to_dict(),
        "tap_layers": list(cfg.backbone_config.tap_layers),
        "num_classes": cfg.backbone_config.num_classes,
        "backbone_digest": cfg.backbone_digest(),
        "dataset_digest": header["digest"],
    }
    out = paths["tame"]
    out.mkdir(parents=True, exist_ok=True)
    records = []

    def checkpoint(record, attention):
        records.append(record)
        write_weights(out / f"epoch_{record.epoch}.tamew", attention.state_dict(), digest, dict(meta, epoch=record.epoch))
        _write(out / "log.csv", _log_csv(records, digest).encode())
        print(f"epoch {record.epoch}: loss {record.loss['total']:.4f}  AD15 {record.ad[15]:.2f}  IC15 {record.ic[15]:.2f}")

    train_cfg = dataclasses.replace(cfg.train_config, threads=args.threads)
    result = fit(sets["train"], sets["val"], backbone, train_cfg, on_epoch_end=checkpoint)
    write_weights(paths["best"], result.attention.state_dict(), digest, dict(meta, epoch=result.best_epoch))
    _write(out / "best_epoch.txt", f"{result.best_epoch}\n".encode())
    print(f"selected epoch {result.best_epoch}; weights at {paths['best']}")
    return EXIT_OK


def overlay_image(image_u8: np.ndarray, psi_up: np.ndarray) -> np.ndarray:
    """Alpha-blend the colour-mapped explanation over an ``H x W x 3`` image."""
    colours = COLORMAP[np.clip(np.round(psi_up * 255), 0, 255).astype(np.uint8)].astype(np.float64)
    blend = (1 - OVERLAY_ALPHA) * image_u8.astype(np.float64) + OVERLAY_ALPHA * colours
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)


def cmd_explain(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    backbone, bmeta = _load_backbone(cfg, Path(args.backbone) if args.backbone else paths["backbone"])
    attention, _ = _load_attention(cfg, Path(args.weights) if args.weights else paths["best"])
    h, w = cfg.backbone_config.input_size
    out_dir = Path(args.out_dir) if args.out_dir else paths["explain"]
    digest = cfg.training_digest()
    for image_path in args.images:
        rgb = read_image(image_path)
        if rgb.shape[:2] != (h, w):
            rgb = np.asarray(Image.fromarray(rgb).resize((w, h), Image.BILINEAR))
        x = _normalise((rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None], bmeta)
        logits, features = backbone.forward_with_taps(Tensor(x))
        truth = int(model_truth(logits)[0])
        cls = truth if args.class_id is None else args.class_id
        if not 0 <= cls < attention.num_classes:
            raise ConfigError(f"class {cls} out of range [0, {attention.num_classes})")
        psi = attention.explain(features, cls, mode="inference").data[0]
        stem = f"{Path(image_path).stem}_class{cls}"
        comments = [f"config_digest={digest}", f"class={cls}", f"model_truth={truth}"]
        write_pgm16(_ensure_dir(out_dir) / f"{stem}.pgm", psi, comments)
        up = bilinear_upsample(Tensor(psi[None, None].astype(np.float64)), h, w).data[0, 0]
        info = PngImagePlugin.PngInfo()
        for c in comments:
            key, _, value = c.partition("=")
            info.add_text(key, value)
        buf = io.BytesIO()
        Image.fromarray(overlay_image(rgb, up)).save(buf, format="PNG", pnginfo=info)
        _write(out_dir / f"{stem}_overlay.png", buf.getvalue())
        print(f"{image_path}: model truth {truth}, explained class {cls} -> {out_dir / stem}.pgm")
    return EXIT_OK


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_evaluate(cfg: RunConfig, args) -> int:
    sets, header = _load_data(cfg, ("test",))
    paths = _paths(cfg)
    backbone, bmeta = _load_backbone(cfg, paths["backbone"], header["digest"])
    weights_path = Path(args.weights) if args.weights else paths["best"]
    attention, wf_meta = _load_attention(cfg, weights_path)
    if wf_meta.get("dataset_digest") != header["digest"]:
        raise ConfigError(f"{weights_path} was trained on a different dataset than {cfg.dataset_root}")
    test = sets["test"]
    x = test.normalized()
    ev = cfg.values["evaluation"]
    n_classes = json.loads(header["spec"])["num_classes"]
    fill = test.fill_value(cfg.train_config.mask_fill)
    sources = [TameSource(attention)] + [BaselineSource(kind, seed=cfg.seed) for kind in ev["baselines"]]
    reports = [
        evaluate(src, backbone, x, cfg.thresholds, batch_size=ev["batch_size"], threads=args.threads,
                 num_classes=n_classes, fill=fill)
        for src in sources
    ]
    provenance = {
        "config_digest": cfg.digest(),
        "weights_digest": cfg.training_digest(),
        "dataset_digest": header["digest"],
        "count": len(test),
    }
    _write(paths["metrics"], metrics_csv(reports, provenance).encode())
    print(metrics_table(reports))
    print(f"metrics at {paths['metrics']}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train-backbone": cmd_train_backbone,
    "train-tame": cmd_train_tame,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
    common.add_argument("--out", help="output directory (for generate: dataset directory)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tame", description="Trainable attention explanations on a frozen CNN.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic shapes dataset")
    sub.add_parser("train-backbone", parents=[common], help="train and freeze the classifier")
    sub.add_parser("train-tame", parents=[common], help="train the attention module")
    p = sub.add_parser("explain", parents=[common], help="write explanation heatmaps for images")
    p.add_argument("images", nargs="+", help="PNG or PPM images")
    p.add_argument("--class", dest="class_id", type=int, help="class to explain (default: model truth)")
    p.add_argument("--weights", help="attention weights (default: <out>/tame/best.tamew)")
    p.add_argument("--backbone", help="backbone weights (default: <out>/backbone.tamew)")
    p.add_argument("--out-dir", help="heatmap directory (default: <out>/explain)")
    p = sub.add_parser("evaluate", parents=[common], help="AD/IC of TAME and baselines on the test split")
    p.add_argument("--weights", help="attention weights (default: <out>/tame/best.tamew)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out and args.command != "generate":
        overrides.append(f"output={json.dumps(args.out)}")
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return RunConfig.load(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
