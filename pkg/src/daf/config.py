"""Training configuration, ablation presets and the JSON run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .synth import StrategySpec, get_strategy

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters. Defaults are the desk-scale profile; see :data:`PROFILES`."""

    image_size: int = 256
    batch_size: int = 8
    epochs: int = 60
    base_lr: float = 2e-4
    warmup_epochs: int = 5
    decay_epochs: tuple[int, int] = (35, 50)
    decay_factor: float = 0.2
    weight_decay: float = 1e-5
    lambda1: float = 0.1
    lambda2: float = 9e-4
    ssim_window: int = 11
    score_lambda: float = 3.0
    gaussian_sigma: float = 4.0
    mining_ratio: float = 3.0
    topk: int = 50
    seed: int = 0
    channels: tuple[int, int, int] = (16, 32, 64)
    decoder_widths: tuple[int, int, int] = (64, 32, 16)
    checkpoint_every: int = 10
    # component switches (ablations)
    use_teacher: bool = True
    use_decoder: bool = True
    use_aux: bool = True
    discrepancy_to_decoder: bool = True
    score_discrepancy: bool = True
    score_segmentation: bool = True
    student_init: str = "random"
    kd_terms: str = "both"
    # teacher pretext pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigurationError(f"train.{key}: {msg}", key=f"train.{key}")

        positive = (
            "image_size", "batch_size", "epochs", "base_lr", "decay_factor",
            "lambda1", "lambda2", "ssim_window", "score_lambda", "gaussian_sigma", "mining_ratio",
            "topk", "checkpoint_every", "pretrain_epochs", "pretrain_lr", "pretrain_batch_size",
        )
        for k in positive:
            if not getattr(self, k) > 0:
                bad(k, f"must be positive, got {getattr(self, k)}")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.image_size % 16:
            bad("image_size", "must be a multiple of 16")
        if self.ssim_window % 2 != 1:
            bad("ssim_window", "must be odd")
        d1, d2 = self.decay_epochs
        if self.warmup_epochs < 0:
            bad("warmup_epochs", "must be >= 0")
        if not self.warmup_epochs <= d1 <= d2:
            bad("decay_epochs", f"need warmup <= first decay <= second decay, got "
                f"{self.warmup_epochs} / {self.decay_epochs}")
        if self.student_init not in ("random", "teacher"):
            bad("student_init", "must be 'random' or 'teacher'")
        if self.kd_terms not in ("both", "cos", "ssim"):
            bad("kd_terms", "must be 'both', 'cos' or 'ssim'")
        if not self.use_teacher and (self.discrepancy_to_decoder or self.score_discrepancy):
            bad("use_teacher", "discrepancy inputs/scores need the teacher")
        if not self.use_decoder and self.score_segmentation:
            bad("use_decoder", "segmentation scores need the decoder")
        if not (self.use_teacher or self.use_decoder):
            bad("use_decoder", "nothing to train without teacher and decoder")
        if not (self.score_discrepancy or self.score_segmentation):
            bad("score_discrepancy", "at least one score term must be enabled")
        if self.student_init == "teacher" and not self.use_teacher:
            bad("student_init", "copying teacher weights needs the teacher")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"train: unknown key(s) {unknown}", key=f"train.{unknown[0]}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return dataclasses.replace(base, **kw) if base else cls(**kw)


PROFILES: dict[str, dict] = {
    "desk": {},
    "long": {"epochs": 1200, "warmup_epochs": 50, "decay_epochs": (700, 1000)},
}

# Component ablations. Strategy-level ablations (fixed opacity) live in synth.STRATEGIES.
PRESETS: dict[str, dict] = {
    "full": {},
    "only_ts": {
        "use_decoder": False, "use_aux": False, "discrepancy_to_decoder": False,
        "score_segmentation": False,
    },
    "only_seg": {
        "use_teacher": False, "use_aux": False, "discrepancy_to_decoder": False,
        "score_discrepancy": False,
    },
    "seg_with_aux": {
        "use_teacher": False, "discrepancy_to_decoder": False, "score_discrepancy": False,
    },
    "wo_aux": {"use_aux": False},
    "no_discrepancy_input": {"discrepancy_to_decoder": False},
    "seg_score_only": {"score_discrepancy": False},
    "student_pretrained": {"student_init": "teacher"},
    "kd_cos_only": {"kd_terms": "cos"},
    "kd_ssim_only": {"kd_terms": "ssim"},
}


def make_config(profile: str = "desk", preset: str = "full", **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}", key="profile")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}", key="preset")
    kw = {**PROFILES[profile], **PRESETS[preset], **overrides}
    return TrainConfig(**kw)


@dataclass
class DataSection:
    root: str | None = None
    category: str | None = None
    texture_dir: str | None = None
    desktex_seed: int = 0
    n_train: int = 80
    n_test_normal: int = 20
    n_test_anomalous: int = 20


@dataclass
class RunConfig:
    """Resolved configuration of one CLI run (serialized as JSON)."""

    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: StrategySpec = field(default_factory=lambda: get_strategy("dra"))
    data: DataSection = field(default_factory=DataSection)
    profile: str = "desk"
    preset: str = "full"
    teacher: str | None = None
    weights: str | None = None
    out_dir: str = "runs/default"
    image: str | None = None
    n_preview: int = 4
    preview_strategies: list[str] = field(default_factory=lambda: ["dra"])
    resume: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "profile": self.profile,
            "preset": self.preset,
            "train": self.train.to_dict(),
            "strategy": self.strategy.to_dict(),
            "data": dataclasses.asdict(self.data),
            "teacher": self.teacher,
            "weights": self.weights,
            "out_dir": self.out_dir,
            "image": self.image,
            "n_preview": self.n_preview,
            "preview_strategies": list(self.preview_strategies),
            "resume": self.resume,
        }

    def experiment_hash(self) -> str:
        """Hash of everything that determines results (paths excluded)."""
        d = self.to_dict()
        core = {
            "train": d["train"],
            "strategy": d["strategy"],
            "data": {k: v for k, v in d["data"].items() if k not in ("root", "texture_dir")},
        }
        blob = json.dumps(core, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_TOP_KEYS = {
    "schema_version", "profile", "preset", "train", "strategy", "data", "teacher", "weights",
    "out_dir", "image", "n_preview", "preview_strategies", "resume",
}


def parse_run_config(raw: dict[str, Any]) -> RunConfig:
    """Validate and resolve a JSON run configuration; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object", key="")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown}", key=unknown[0])
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})",
                                 key="schema_version")
    profile = raw.get("profile", "desk")
    preset = raw.get("preset", "full")
    train_raw = raw.get("train", {}) or {}
    if not isinstance(train_raw, dict):
        raise ConfigurationError("train must be an object", key="train")
    base = make_config(profile, preset)
    train = TrainConfig.from_dict(train_raw, base=base) if train_raw else base

    strat_raw = raw.get("strategy", "dra")
    if isinstance(strat_raw, str):
        strategy = get_strategy(strat_raw)
    elif isinstance(strat_raw, dict):
        strat_raw = dict(strat_raw)
        name = strat_raw.get("name", "dra")
        base_spec = get_strategy(name) if name in _strategy_names() else StrategySpec()
        extra = {k: v for k, v in strat_raw.items() if k != "name"}
        strategy = StrategySpec.from_dict({**base_spec.to_dict(), "name": name, **extra})
    else:
        raise ConfigurationError("strategy must be a name or an object", key="strategy")

    data_raw = raw.get("data", {}) or {}
    dnames = {f.name for f in dataclasses.fields(DataSection)}
    dunknown = sorted(set(data_raw) - dnames)
    if dunknown:
        raise ConfigurationError(f"data: unknown key(s) {dunknown}", key=f"data.{dunknown[0]}")
    data = DataSection(**data_raw)

    rc = RunConfig(train=train, strategy=strategy, data=data, profile=profile, preset=preset)
    for k in ("teacher", "weights", "out_dir", "image", "n_preview", "preview_strategies", "resume"):
        if k in raw:
            setattr(rc, k, raw[k])
    if not isinstance(rc.n_preview, int) or rc.n_preview < 0:
        raise ConfigurationError("n_preview must be a non-negative integer", key="n_preview")
    for s in rc.preview_strategies:
        get_strategy(s)
    return rc


def _strategy_names():
    from .synth import STRATEGIES

    return STRATEGIES


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})", key="") from exc
    return parse_run_config(raw)
