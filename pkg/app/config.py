"""
config.py — load process configuration from the environment and run configs from key-value files.

Environment variables (all optional, `.env` honoured) control paths, log level and the
default seed. Run configs are `key=value` text files parsed with python-dotenv; they map
onto TrainConfig. Bad values raise ConfigError naming the field.
"""
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for an unknown or invalid run-config field. `.field` names it."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _optional(key: str, default: str = "") -> str:
    return os.environ.get(key, default)


def _truthy(val: str | None, default: bool = False) -> bool:
    if val is None:
        return default
    return val.strip().lower() in ("1", "true", "yes", "y", "on")


# --- Paths ---
OUT_DIR = os.path.abspath(_optional("ADP_OUT_DIR", "./runs"))
DATA_DIR = os.path.abspath(_optional("ADP_DATA_DIR", "./data"))

# --- Runtime ---
DEBUG = _truthy(_optional("ADP_DEBUG"), default=False)
DEFAULT_SEED = int(_optional("ADP_SEED", "0"))
# Gates the acceptance-scale tests (minutes of training each).
RUN_SLOW = _truthy(_optional("ADP_RUN_SLOW"), default=False)


def _log_level() -> str:
    val = _optional("ADP_LOG_LEVEL").strip()
    if val:
        return val.upper()
    return "DEBUG" if DEBUG else "INFO"


LOG_LEVEL = _log_level()


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

_GENERATOR_LOSSES = ("non_saturating", "saturating")
_ROTATION_MODES = ("sample", "average")
_SS_FAKE_LABELS = ("lfb", "theta")
_LABEL_RULES = ("final", "theta")
_DIRECTIONS = ("argmax", "argmin")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on. Defaults are the desk-scale operating point."""

    iterations: int = 5000
    d_steps: int = 5
    batch_size: int = 32
    lr_gen: float = 5e-5
    lr_disc: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = DEFAULT_SEED

    latent_dim: int = 16
    trunk_widths: tuple[int, ...] = (64, 64)
    head_widths: tuple[int, ...] = (64,)
    disc_widths: tuple[int, ...] = (64,)
    label_widths: tuple[int, ...] = (32,)
    common_widths: tuple[int, ...] = (64,)
    lfb_widths: tuple[int, ...] = (32,)

    image_size: int = 8
    classes: int = 3
    lfs: int = 5
    dataset_count: int = 1200
    noise: float = 0.1

    generator_loss: str = "non_saturating"
    label_rule: str = "final"
    lambda_self: float = 0.3
    lambda_cycle: float = 0.3
    rotation_mode: str = "sample"
    ss_fake_label: str = "lfb"
    zero_shot_direction: str = "argmax"

    checkpoint_every: int = 0
    log_every: int = 50
    audit_every: int = 100

    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.d_steps < 1:
            raise ConfigError("d_steps", "must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        for name in ("lr_gen", "lr_disc"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "learning rates must be > 0")
        for name in ("lambda_self", "lambda_cycle"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not 2 <= self.classes <= 5:
            raise ConfigError("classes", "shapes worlds support 2..5 classes")
        if not 5 <= self.image_size <= 12:
            raise ConfigError("image_size", "must be within 5..12")
        _check_choice("generator_loss", self.generator_loss, _GENERATOR_LOSSES)
        _check_choice("label_rule", self.label_rule, _LABEL_RULES)
        _check_choice("rotation_mode", self.rotation_mode, _ROTATION_MODES)
        _check_choice("ss_fake_label", self.ss_fake_label, _SS_FAKE_LABELS)
        _check_choice("zero_shot_direction", self.zero_shot_direction, _DIRECTIONS)

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)

    def canonical_text(self) -> str:
        """Sorted key=value text; the input of config_hash."""
        items = asdict(self)
        items.pop("extra")
        items.update({f"extra.{k}": v for k, v in self.extra.items()})
        return "\n".join(f"{k}={_format_value(v)}" for k, v in sorted(items.items()))


def _check_choice(name: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(name, f"expected one of {', '.join(choices)}, got {value!r}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, raw: str, template):
    try:
        if isinstance(template, bool):
            return _truthy(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}") from exc


def config_hash(cfg: TrainConfig) -> str:
    """First 12 hex chars of sha256 over the canonical config text."""
    return hashlib.sha256(cfg.canonical_text().encode("utf-8")).hexdigest()[:12]


def parse_train_config(values: dict, **overrides) -> TrainConfig:
    """Build a TrainConfig from raw string values. Keys prefixed `extra.` are kept verbatim."""
    defaults = TrainConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(TrainConfig) if f.name != "extra"}
    kwargs: dict = {}
    extra: dict = {}
    for key, raw in values.items():
        key = key.strip().lower()
        if raw is None:
            raise ConfigError(key, "missing value")
        if key.startswith("extra."):
            extra[key[len("extra."):]] = raw.strip()
            continue
        if key not in known:
            raise ConfigError(key, "unknown config key")
        kwargs[key] = _coerce(key, raw, known[key])
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(key, "unknown override")
        kwargs[key] = value
    return TrainConfig(extra=extra, **kwargs)


def load_train_config(path: str | os.PathLike | None, **overrides) -> TrainConfig:
    """Read a key-value run config (or defaults when path is None) and apply overrides."""
    if path is None:
        return parse_train_config({}, **overrides)
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file not found: {p}")
    values = dotenv_values(p)
    logger.debug("Loaded %d config keys from %s", len(values), p)
    return parse_train_config(dict(values), **overrides)


def log_config_summary(cfg: TrainConfig) -> None:
    """Log the run config on one line per group (no secrets exist here, log everything)."""
    logger.info("Run config hash=%s seed=%d iterations=%d d_steps=%d batch=%d",
                config_hash(cfg), cfg.seed, cfg.iterations, cfg.d_steps, cfg.batch_size)
    logger.info("World: classes=%d image=%dx%d lfs=%d count=%d",
                cfg.classes, cfg.image_size, cfg.image_size, cfg.lfs, cfg.dataset_count)
    logger.debug("Full config:\n%s", cfg.canonical_text())
