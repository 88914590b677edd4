"""Network core: encoder/decoder modules, AdamW + schedule, weight files."""
from .models import AuxHeads, ResidualEncoder, RotationHead, SegDecoder
from .optim import AdamW, adamw_state, adamw_step, grad_check, lr_at
from .serialize import WeightFile, checksum, load_weights, module_checksum, save_weights

__all__ = [
    "AdamW", "AuxHeads", "ResidualEncoder", "RotationHead", "SegDecoder", "WeightFile",
    "adamw_state", "adamw_step", "checksum", "grad_check", "load_weights", "lr_at",
    "module_checksum", "save_weights",
]
