"""Teacher pretext training: 4-way rotation prediction on normal images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..config import TrainConfig
from ..errors import ConfigurationError
from ..nn.models import ResidualEncoder, RotationHead
from ..nn.optim import AdamW
from ..nn.serialize import WeightFile, module_tensors
from .model import to_tensor

MIN_CORPUS = 50
HELDOUT_FRACTION = 0.1


@dataclass
class PretrainResult:
    weights: WeightFile
    heldout_accuracy: float
    history: list[dict] = field(default_factory=list)


def rotations(img: np.ndarray) -> list[np.ndarray]:
    """The four quarter-turn rotations of a square ``(H, W, C)`` image, label = index."""
    return [np.ascontiguousarray(np.rot90(img, k, axes=(0, 1))) for k in range(4)]


def _rotated_set(images) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for img in images:
        for k, r in enumerate(rotations(img)):
            xs.append(r)
            ys.append(k)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def pretrain_teacher(images, config: TrainConfig, in_channels: int | None = None) -> PretrainResult:
    """Train an encoder on rotation prediction and return its weights (role ``teacher``).

    Deterministic given ``config.seed``. Every image contributes all four
    rotations, so labels are balanced. Held-out accuracy is measured on a
    seeded 10% split of the images.
    """
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if len(images) < MIN_CORPUS:
        raise ConfigurationError(
            f"teacher pretraining needs at least {MIN_CORPUS} normal images, got {len(images)}",
            key="data.n_train",
        )
    if any(im.shape[0] != im.shape[1] for im in images):
        raise ConfigurationError("rotation pretraining needs square images", key="train.image_size")
    channels = in_channels or images[0].shape[2]

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7E4C]))
    perm = rng.permutation(len(images))
    n_hold = max(1, int(round(HELDOUT_FRACTION * len(images))))
    hold_idx, train_idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    x_train, y_train = _rotated_set([images[i] for i in train_idx])
    x_hold, y_hold = _rotated_set([images[i] for i in hold_idx])

    torch.manual_seed(config.seed)
    encoder = ResidualEncoder(config.channels, channels)
    head = RotationHead(config.channels[-1])
    params = list(encoder.parameters()) + list(head.parameters())
    opt = AdamW(params, lr=config.pretrain_lr, weight_decay=config.weight_decay)

    history = []
    bs = config.pretrain_batch_size
    for epoch in range(config.pretrain_epochs):
        encoder.train()
        head.train()
        order = rng.permutation(len(x_train))
        total, correct = 0.0, 0
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            x = to_tensor(x_train[idx])
            y = torch.from_numpy(y_train[idx])
            logits = head(encoder(x)[-1])
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        history.append({"epoch": epoch, "loss": total / len(order), "train_acc": correct / len(order)})

    encoder.eval()
    head.eval()
    with torch.no_grad():
        preds = []
        for s in range(0, len(x_hold), bs):
            preds.append(head(encoder(to_tensor(x_hold[s:s + bs]))[-1]).argmax(1).numpy())
    acc = float((np.concatenate(preds) == y_hold).mean())
    return PretrainResult(WeightFile("teacher", module_tensors(encoder)), acc, history)
