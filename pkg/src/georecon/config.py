"""Run configuration and the ``key = value`` config file reader."""
from __future__ import annotations

import difflib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .model import DecoderConfig, EncoderConfig
from .objectives import LossWeights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 4e-4
    lr_min: float = 1e-7
    warmup_steps: int = 100
    cosine_length: int = 2000

    def __post_init__(self):
        if not (0 < self.lr_min <= self.peak_lr):
            raise ValueError("need 0 < lr_min <= peak_lr")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.cosine_length <= self.warmup_steps:
            raise ValueError("cosine_length must exceed warmup_steps")


MODES = ("pretrain", "finetune", "linear_probe")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    batch_size: int = 4
    total_steps: int = 2000
    sigma: float = 0.04
    lam: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: str | None = None
    mode: str = "pretrain"
    target: str = "energy"
    denoising_weight: float = 0.1
    aux_denoise: bool = False
    lr_schedule: str = "cosine_warmup"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s: str) -> int:
    f = float(s)
    if not f.is_integer():
        raise ValueError(f"not an integer: {s!r}")
    return int(f)


# key -> (section, field, parser); section None means top-level RunConfig
KEYS = {
    "seed": (None, "seed", _int),
    "batch_size": (None, "batch_size", _int),
    "total_steps": (None, "total_steps", _int),
    "position_noise_scale": (None, "sigma", float),
    "lambda": (None, "lam", float),
    "rec_noise_scale": (None, "lam", float),
    "dataset": (None, "dataset", str),
    "mode": (None, "mode", str),
    "target": (None, "target", str),
    "denoising_weight": (None, "denoising_weight", float),
    "aux_denoise": (None, "aux_denoise", _bool),
    "lr_schedule": (None, "lr_schedule", str),
    "w_nsd": ("weights", "w_nsd", float),
    "w_rec": ("weights", "w_rec", float),
    "w_cln": ("weights", "w_cln", float),
    "num_layers": ("encoder", "num_layers", _int),
    "embedding_dimension": ("encoder", "hidden_dim", _int),
    "hidden_dim": ("encoder", "hidden_dim", _int),
    "cutoff_upper": ("encoder", "cutoff", float),
    "max_z": ("encoder", "max_z", _int),
    "num_rbf": ("encoder", "num_rbf", _int),
    "decoder_depth": ("decoder", "depth", _int),
    "decoder_width": ("decoder", "width", _int),
    "lr": ("schedule", "peak_lr", float),
    "lr_min": ("schedule", "lr_min", float),
    "lr_warmup_steps": ("schedule", "warmup_steps", _int),
    "lr_cosine_length": ("schedule", "cosine_length", _int),
}

# accepted for compatibility with published configs; no effect on this implementation
IGNORED = {
    "num_heads": "the message-passing encoder has no attention heads",
    "cutoff_lower": "the radial basis always starts at 0",
    "ema_alpha_dy": "no exponential moving average of weights",
    "ema_alpha_y": "no exponential moving average of weights",
    "energy_weight": "no joint energy/force supervision",
    "force_weight": "no joint energy/force supervision",
    "inference_batch_size": "evaluation runs per molecule",
    "lr_patience": "no plateau scheduler",
    "max_num_neighbors": "all pairs within the cutoff are neighbours",
    "num_nodes": "single-process training",
    "num_workers": "single-process training",
    "precision": "arithmetic is always float64",
    "save_interval": "only the final checkpoint is written",
    "test_interval": "evaluation cadence is fixed by the drivers",
}


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    base = base or RunConfig()
    sections: dict[str | None, dict] = {None: {}, "weights": {}, "encoder": {}, "decoder": {}, "schedule": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in IGNORED:
            log.warning("%s:%d: %s is accepted but ignored (%s)", source, lineno, key, IGNORED[key])
            continue
        if key not in KEYS:
            hint = difflib.get_close_matches(key, list(KEYS) + list(IGNORED), n=3)
            extra = f"; did you mean {', '.join(hint)}?" if hint else ""
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}{extra}")
        section, name, conv = KEYS[key]
        try:
            sections[section][name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        top = sections[None]
        return replace(
            base,
            weights=replace(base.weights, **sections["weights"]),
            encoder=replace(base.encoder, **sections["encoder"]),
            decoder=replace(base.decoder, **sections["decoder"]),
            schedule=replace(base.schedule, **sections["schedule"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def config_to_dict(cfg: RunConfig) -> dict:
    """Flat key/value view used in checkpoint metadata and run manifests."""
    out = {}
    for key, (section, name, _) in KEYS.items():
        if key in ("hidden_dim", "rec_noise_scale"):
            continue
        obj = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(obj, name)
    return out


def config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    lines = [f"{k} = {v}" for k, v in d.items() if v is not None and k in KEYS]
    return parse_config("\n".join(lines), base)
