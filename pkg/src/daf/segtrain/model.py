"""The full framework: frozen teacher, student, segmentation decoder and auxiliary heads."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .. import distill
from ..config import TrainConfig
from ..errors import ConfigurationError, SchemaError
from ..nn.models import AuxHeads, ResidualEncoder, SegDecoder
from ..nn.serialize import WeightFile, load_module, module_checksum, module_tensors

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def to_tensor(images) -> torch.Tensor:
    """``(H, W, C)`` or ``(N, H, W, C)`` float images -> normalized ``(N, C, H, W)`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return (t - PIXEL_MEAN) / PIXEL_STD


class DAFModel(nn.Module):
    """Container wiring the components together according to a :class:`TrainConfig`.

    Components disabled by the config are ``None``. The teacher never
    requires gradients and always runs in eval mode.
    """

    def __init__(self, config: TrainConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        ch = config.channels
        self.teacher = ResidualEncoder(ch, in_channels) if config.use_teacher else None
        self.student = ResidualEncoder(ch, in_channels)
        self.decoder = (
            SegDecoder(ch, config.decoder_widths, use_discrepancy=config.discrepancy_to_decoder)
            if config.use_decoder else None
        )
        self.aux = AuxHeads(ch) if config.use_aux else None
        if self.teacher is not None:
            self.freeze_teacher()

    def freeze_teacher(self) -> None:
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.teacher is not None:
            self.teacher.eval()
        return self

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        mods = [self.student, self.decoder, self.aux]
        return [p for m in mods if m is not None for p in m.parameters()]

    def set_teacher(self, tensors: dict[str, np.ndarray]) -> None:
        if self.teacher is None:
            raise ConfigurationError("config has no teacher", key="train.use_teacher")
        load_module(self.teacher, tensors)
        self.freeze_teacher()
        if self.config.student_init == "teacher":
            load_module(self.student, tensors)

    def teacher_checksum(self) -> str | None:
        return None if self.teacher is None else module_checksum(self.teacher)

    @torch.no_grad()
    def teacher_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.teacher(x)

    def discrepancy(self, ft, fs, size) -> torch.Tensor:
        c = self.config
        with torch.no_grad():
            mbar, _ = distill.discrepancy_map(
                ft, [f.detach() for f in fs], size[0], size[1], c.ssim_window, c.lambda1, c.lambda2
            )
        return mbar

    @torch.no_grad()
    def infer(self, x: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        """Discrepancy map and probability map ``(N, H, W)`` for a batch.

        Teacher and student both see the same input. Auxiliary heads are not
        evaluated. Entries are ``None`` when the config disables the branch.
        """
        was_training = self.training
        self.eval()
        try:
            size = tuple(x.shape[-2:])
            fs = self.student(x)
            mbar = None
            if self.teacher is not None:
                ft = self.teacher(x)
                mbar = self.discrepancy(ft, fs, size)
            prob = None
            if self.decoder is not None:
                prob = self.decoder(fs, mbar if self.config.discrepancy_to_decoder else None)[:, 0]
            return mbar, prob
        finally:
            self.train(was_training)

    def to_weightfile(self, role: str = "model") -> WeightFile:
        tensors = {}
        for name in ("teacher", "student", "decoder", "aux"):
            mod = getattr(self, name)
            if mod is not None:
                tensors.update(module_tensors(mod, prefix=f"{name}."))
        return WeightFile(role, tensors)

    def load_weightfile(self, wf: WeightFile) -> None:
        """Load every enabled component; missing tensors raise :class:`SchemaError` before any copy."""
        staged = []
        for name in ("teacher", "student", "decoder", "aux"):
            mod = getattr(self, name)
            if mod is None:
                continue
            sub = wf.subset(f"{name}.")
            if not sub:
                raise SchemaError(f"weight file has no tensors for component {name!r}")
            probe = {k: v for k, v in mod.state_dict().items() if v.is_floating_point()}
            for k, ref in probe.items():
                if k not in sub:
                    raise SchemaError(f"missing tensor {name}.{k!r}")
                if tuple(sub[k].shape) != tuple(ref.shape):
                    raise SchemaError(f"tensor {name}.{k} has shape {sub[k].shape}, expected {tuple(ref.shape)}")
            staged.append((mod, sub))
        for mod, sub in staged:
            load_module(mod, sub)
        if self.teacher is not None:
            self.freeze_teacher()


def infer(model: DAFModel, img: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Run one ``(H, W, C)`` image; returns ``(M_bar, M_S)`` as float32 ``(H, W)`` arrays."""
    mbar, prob = model.infer(to_tensor(img))
    return (
        None if mbar is None else mbar[0].numpy().astype(np.float32),
        None if prob is None else prob[0].numpy().astype(np.float32),
    )


def infer_batch(model: DAFModel, images: np.ndarray, batch_size: int = 8):
    mbars, probs = [], []
    for i in range(0, len(images), batch_size):
        mbar, prob = model.infer(to_tensor(images[i:i + batch_size]))
        mbars.extend([None] * len(images[i:i + batch_size]) if mbar is None else list(mbar.numpy()))
        probs.extend([None] * len(images[i:i + batch_size]) if prob is None else list(prob.numpy()))
    return mbars, probs
