"""End-to-end training loop.

Per step: synthesize corrupted images from normal ones, feed the clean image to
the teacher and the corrupted one to the student, and update student, decoder
and auxiliary heads with ``L_kd + L_seg + L_dis``.

Determinism: the synthesis seed of every sample depends only on
``(config.seed, epoch, image index)``, batch order only on
``(config.seed, epoch)``, and torch runs single-threaded during training, so
the worker count never changes results.
"""
from __future__ import annotations

import contextlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .. import distill
from ..config import TrainConfig
from ..distill import LossReport
from ..errors import ConfigurationError, DegenerateBatchError, TrainingError
from ..nn.optim import AdamW, lr_at
from ..nn.serialize import WeightFile, load_weights, save_weights
from ..synth import StrategySpec, synthesize
from .losses import aux_loss, seg_loss, stage_targets, total_loss
from .model import DAFModel, to_tensor

LOG_NAME = "train_log.jsonl"
FINAL_NAME = "final.dafw"


@dataclass
class TrainResult:
    model: DAFModel
    history: list[dict]
    checkpoints: list[str] = field(default_factory=list)
    teacher_checksum: str | None = None


@contextlib.contextmanager
def torch_threads(n: int = 1):
    """Temporarily pin torch's intra-op thread count."""
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def sample_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def epoch_order(base_seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([base_seed, epoch, 0xBA7C])).permutation(n)


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch + 1:04d}.dafw"


def _checkpoint(model: DAFModel, opt: AdamW, epoch: int) -> WeightFile:
    wf = model.to_weightfile("checkpoint")
    for k, v in opt.state_tensors().items():
        wf.tensors[f"optim.{k}"] = v.detach().cpu().numpy().astype(np.float32)
    wf.tensors["meta.epoch"] = np.asarray([epoch], dtype=np.float32)
    return wf


def _resume(model: DAFModel, opt: AdamW, path) -> int:
    wf = load_weights(path)
    model.load_weightfile(wf)
    opt.load_state_tensors({k: torch.from_numpy(np.array(v)) for k, v in wf.subset("optim.").items()})
    return int(wf.tensors["meta.epoch"][0])


def _synth_batch(images, idx, strategy, donor_pool, seed, epoch):
    out = [synthesize(images[i], strategy, donor_pool, sample_seed(seed, epoch, int(i))) for i in idx]
    return (
        np.stack([s.corrupted for s in out]),
        np.stack([s.mask for s in out]).astype(np.uint8),
    )


def train(
    images: Sequence[np.ndarray],
    strategy: StrategySpec,
    config: TrainConfig,
    teacher: WeightFile | dict | None = None,
    donor_pool: Sequence[np.ndarray] = (),
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    threads: int = 1,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a :class:`DAFModel` on normal ``images`` (float ``(H, W, C)`` arrays).

    When ``out_dir`` is given, a JSONL log and DAFW checkpoints (every
    ``config.checkpoint_every`` epochs plus ``final.dafw``) are written there.
    ``resume`` continues from a checkpoint written by this function.
    """
    images = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    n, h, w, ch = images.shape
    if config.use_teacher and teacher is None:
        raise ConfigurationError("training needs teacher weights", key="teacher")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with torch_threads(1):
        torch.manual_seed(config.seed)
        model = DAFModel(config, in_channels=ch)
        if config.use_teacher:
            tensors = teacher.tensors if isinstance(teacher, WeightFile) else teacher
            model.set_teacher(tensors)
        opt = AdamW(model.trainable_parameters(), lr=config.base_lr, weight_decay=config.weight_decay)

        start = 0
        last_ckpt = None
        if resume is not None:
            start = _resume(model, opt, resume) + 1
            last_ckpt = str(resume)

        t_sum = model.teacher_checksum()
        cache = None
        if config.use_teacher:
            # No augmentation is applied to the clean image, so its teacher features never change.
            feats = [model.teacher_features(to_tensor(images[s:s + 16])) for s in range(0, n, 16)]
            cache = [torch.cat([f[k] for f in feats]) for k in range(3)]

        history: list[dict] = []
        checkpoints: list[str] = []
        log_path = out / LOG_NAME if out is not None else None
        if log_path is not None and resume is None and log_path.exists():
            log_path.unlink()

        pool = ThreadPoolExecutor(max_workers=max(1, int(threads)))
        try:
            for epoch in range(start, config.epochs):
                t0 = time.perf_counter()
                lr = lr_at(config, epoch)
                opt.lr = lr
                model.train()
                order = epoch_order(config.seed, epoch, n)
                batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]
                sums = LossReport()
                pending = pool.submit(_synth_batch, images, batches[0], strategy, donor_pool, config.seed, epoch)
                for b, idx in enumerate(batches):
                    corrupted, masks = pending.result()
                    if b + 1 < len(batches):
                        pending = pool.submit(_synth_batch, images, batches[b + 1], strategy, donor_pool,
                                              config.seed, epoch)
                    report, loss = _step(model, opt, config, corrupted, masks,
                                         None if cache is None else [c[idx] for c in cache], (h, w))
                    if not math.isfinite(float(loss)):
                        raise TrainingError(f"non-finite total loss at epoch {epoch + 1}", checkpoint=last_ckpt)
                    for k in ("l_cos", "l_ssim", "l_kd", "l_seg", "l_dis", "total"):
                        setattr(sums, k, getattr(sums, k) + getattr(report, k) * len(idx))

                if model.teacher_checksum() != t_sum:
                    raise TrainingError(f"teacher weights changed during epoch {epoch + 1}", checkpoint=last_ckpt)
                rec = {
                    "epoch": epoch + 1,
                    "lr": lr,
                    "L_cos": sums.l_cos / n,
                    "L_SSIM": sums.l_ssim / n,
                    "L_kd": sums.l_kd / n,
                    "L_seg": sums.l_seg / n,
                    "L_dis": sums.l_dis / n,
                    "total": sums.total / n,
                    "wall_ms": int(round(1000 * (time.perf_counter() - t0))),
                }
                history.append(rec)
                if log_path is not None:
                    with log_path.open("a") as fh:
                        fh.write(json.dumps(rec) + "\n")
                if on_epoch is not None:
                    on_epoch(rec)
                if out is not None and ((epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs):
                    wf = _checkpoint(model, opt, epoch)
                    path = out / checkpoint_name(epoch)
                    save_weights(wf, path)
                    checkpoints.append(str(path))
                    last_ckpt = str(path)
                    if epoch + 1 == config.epochs:
                        save_weights(wf, out / FINAL_NAME)
                        checkpoints.append(str(out / FINAL_NAME))
        except TrainingError as exc:
            if exc.checkpoint is None and last_ckpt is not None:
                raise TrainingError(exc.args[0], checkpoint=last_ckpt) from exc
            raise
        finally:
            pool.shutdown(wait=True)

        model.eval()
        return TrainResult(model, history, checkpoints, t_sum)


def _step(model: DAFModel, opt: AdamW, config: TrainConfig, corrupted, masks, ft, size):
    x = to_tensor(corrupted)
    fs = model.student(x)
    stage_masks = stage_targets(masks, [tuple(f.shape[-2:]) for f in fs])
    report = LossReport()
    kd = seg = dis = None

    if ft is not None:
        try:
            kd, r = distill.kd_loss(ft, fs, stage_masks, config.ssim_window, config.lambda1, config.lambda2,
                                    terms=config.kd_terms)
            report.l_cos, report.l_ssim, report.l_kd = r.l_cos, r.l_ssim, r.l_kd
        except DegenerateBatchError:
            kd = None
    if model.decoder is not None:
        mbar = model.discrepancy(ft, fs, size) if config.discrepancy_to_decoder else None
        prob = model.decoder(fs, mbar)
        seg = seg_loss(prob, torch.from_numpy(masks), config.mining_ratio)
        report.l_seg = float(seg.detach())
    if model.aux is not None:
        dis = aux_loss(model.aux(fs), stage_masks, config.mining_ratio)
        report.l_dis = float(dis.detach())

    loss = total_loss(report, kd, seg, dis)
    opt.zero_grad()
    if isinstance(loss, torch.Tensor) and loss.requires_grad:
        loss.backward()
        opt.step()
    return report, report.total
