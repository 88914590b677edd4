"""``daf`` command-line entry point.

Every command takes ``--config <json> [--seed N] [--out DIR]``, writes
``resolved_config.json`` into its output directory and reports failures as a
JSON object on stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, imgkit
from .config import RunConfig, load_run_config
from .errors import ConfigurationError, DAFError, MissingArtifactError
from .synth import get_strategy, synthesize

COMMANDS = ("synth", "pretrain-teacher", "train", "eval", "infer", "desktex")


def worker_count() -> int:
    raw = os.environ.get("DAF_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"DAF_THREADS must be an integer, got {raw!r}", key="DAF_THREADS") from None
    if n < 1:
        raise ConfigurationError("DAF_THREADS must be >= 1", key="DAF_THREADS")
    return n


def resolve(args) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.train = rc.train.replace(seed=args.seed)
        rc.data = dataclasses.replace(rc.data, desktex_seed=args.seed) if args.command == "desktex" else rc.data
    if args.out is not None:
        rc.out_dir = args.out
    for name in ("teacher", "weights", "image", "resume"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc, name, v)
    return rc


def _need(path: str | None, what: str, key: str) -> Path:
    if not path:
        raise ConfigurationError(f"{what} path not configured", key=key)
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found", str(p))
    return p


def _dataset(rc: RunConfig) -> data.DatasetIndex:
    root = _need(rc.data.root, "dataset", "data.root")
    cats = data.ingest_mvtec_dir(root)
    if rc.data.category is not None:
        if rc.data.category not in cats:
            raise ConfigurationError(f"category {rc.data.category!r} not in {sorted(cats)}", key="data.category")
        return cats[rc.data.category]
    if len(cats) != 1:
        raise ConfigurationError(f"several categories {sorted(cats)}; set data.category", key="data.category")
    return next(iter(cats.values()))


def _donors(rc: RunConfig, spec, train_images):
    if spec.texture_source == "external-folder":
        return data.load_texture_dir(_need(rc.data.texture_dir, "texture folder", "data.texture_dir"),
                                     rc.train.image_size)
    if spec.blend == "poisson":
        return train_images
    return ()


def _load_model(rc: RunConfig):
    from .nn.serialize import load_weights
    from .segtrain.model import DAFModel

    wf = load_weights(_need(rc.weights, "model weights", "weights"))
    model = DAFModel(rc.train)
    model.load_weightfile(wf)
    model.eval()
    return model


def cmd_synth(rc: RunConfig, out: Path) -> dict:
    size = rc.train.image_size
    if rc.n_preview == 0:
        return {"written": []}
    if rc.data.root:
        normals = [imgkit.load_image(p, size) for p in _dataset(rc).train_normals[: rc.n_preview]]
    else:
        normals = [data.desktex_normal(rc.train.seed * 1000 + i) for i in range(rc.n_preview)]
    written = []
    for name in rc.preview_strategies:
        spec = rc.strategy if name == rc.strategy.name else get_strategy(name)
        donors = _donors(rc, spec, normals)
        for i, img in enumerate(normals):
            s = synthesize(img, spec, donors, seed=rc.train.seed + i)
            mask = np.repeat(s.mask[..., None].astype(np.float32), img.shape[2], axis=2)
            p = out / f"{name}_{i:03d}.png"
            imgkit.save_image(np.concatenate([s.normal, s.corrupted, mask], axis=1), p)
            written.append(str(p))
    return {"written": written}


def cmd_pretrain(rc: RunConfig, out: Path) -> dict:
    from .nn.serialize import checksum, save_weights
    from .segtrain.pretrain import pretrain_teacher
    from .segtrain.trainer import torch_threads

    images = _dataset(rc).load_train(rc.train.image_size)
    with torch_threads(1):
        res = pretrain_teacher(images, rc.train)
    path = out / "teacher.dafw"
    save_weights(res.weights, path)
    summary = {"teacher": str(path), "heldout_accuracy": res.heldout_accuracy,
               "checksum": checksum(res.weights.tensors), "history": res.history}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {k: summary[k] for k in ("teacher", "heldout_accuracy", "checksum")}


def cmd_train(rc: RunConfig, out: Path) -> dict:
    from .nn.serialize import checksum, load_weights
    from .segtrain.trainer import FINAL_NAME, train

    teacher = None
    if rc.train.use_teacher:
        teacher = load_weights(_need(rc.teacher, "teacher weights", "teacher"), role="teacher")
    images = _dataset(rc).load_train(rc.train.image_size)
    donors = _donors(rc, rc.strategy, images)
    res = train(images, rc.strategy, rc.train, teacher=teacher, donor_pool=donors, out_dir=out,
                resume=rc.resume, threads=worker_count())
    final = out / FINAL_NAME
    return {"final": str(final), "checksum": checksum(load_weights(final).tensors),
            "epochs": len(res.history)}


def cmd_eval(rc: RunConfig, out: Path) -> dict:
    from .evaluation import evaluate_dataset
    from .segtrain.trainer import torch_threads

    model = _load_model(rc)
    index = _dataset(rc)
    images, masks, labels = index.load_test(rc.train.image_size)
    cats = [index.category] * len(images)
    with torch_threads(1):
        report, _ = evaluate_dataset(model, images, masks, labels, cats, rc.train, rc.experiment_hash())
    (out / "metrics.json").write_text(report.to_json())
    return {"metrics": str(out / "metrics.json"), "i_auc": report.i_auc, "p_auc": report.p_auc}


def cmd_infer(rc: RunConfig, out: Path) -> dict:
    from .evaluation import score_map
    from .segtrain.model import infer
    from .segtrain.trainer import torch_threads

    img_path = _need(rc.image, "input image", "image")
    model = _load_model(rc)
    img = imgkit.load_image(img_path)
    h, w = img.shape[:2]
    size = rc.train.image_size
    with torch_threads(1):
        mbar, ms = infer(model, imgkit.resize_bilinear(img, size, size) if (h, w) != (size, size) else img)
    c = rc.train
    sm = score_map(mbar if c.score_discrepancy else None, ms if c.score_segmentation else None,
                   c.score_lambda, c.gaussian_sigma, c.topk)
    raster = sm.map if (h, w) == (size, size) else imgkit.resize_bilinear(sm.map, h, w)
    stem = img_path.stem
    imgkit.save_heatmap(raster, out / f"{stem}_heatmap.png")
    imgkit.write_raster(raster, out / f"{stem}_score.dafr")
    return {"heatmap": str(out / f"{stem}_heatmap.png"), "raster": str(out / f"{stem}_score.dafr"),
            "image_score": sm.image_score}


def cmd_desktex(rc: RunConfig, out: Path) -> dict:
    d = rc.data
    index = data.generate_desktex(out, d.n_train, d.n_test_normal, d.n_test_anomalous, d.desktex_seed,
                                  d.category or "desk")
    tex = data.generate_textures(out / "textures", seed=d.desktex_seed)
    return {"root": str(out), "category": index.category, "textures": str(out / "textures"), "n_textures": len(tex)}


HANDLERS = {
    "synth": cmd_synth,
    "pretrain-teacher": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "desktex": cmd_desktex,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daf", description="Teacher-student anomaly detection with synthesis-robust training.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name in ("train",):
            p.add_argument("--teacher", help="teacher DAFW file")
            p.add_argument("--resume", help="checkpoint to resume from")
        if name in ("eval", "infer"):
            p.add_argument("--weights", help="trained model DAFW file")
        if name == "infer":
            p.add_argument("--image", help="input image")
    return parser


def _error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    key = getattr(exc, "key", None)
    if key:
        payload["key"] = key
    for attr in ("path", "checkpoint", "filename"):
        v = getattr(exc, attr, None)
        if v:
            payload[attr] = str(v)
    return payload


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = resolve(args)
        worker_count()
        out = Path(rc.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rc.write(out / "resolved_config.json")
        result = HANDLERS[args.command](rc, out)
    except (DAFError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps(_error_payload(exc)) + "\n")
        return 2 if isinstance(exc, ConfigurationError) else 1
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
