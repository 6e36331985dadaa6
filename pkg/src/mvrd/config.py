"""Training configuration and the flat key=value config file format.

Config files contain one ``key = value`` pair per line (``#`` comments and
blank lines allowed). Keys mirror the field names of TrainConfig and
SyntheticConfig; unknown keys are hard errors so typos cannot silently fall
back to defaults. The single exception is ``lambda``, which maps to the
``lambda_`` field because of the Python keyword.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """A configuration value (or file) violates its contract."""


ABLATION_FLAGS = (
    "drop_L_text",
    "drop_L_image",
    "drop_L_cross",
    "drop_text_view",
    "drop_image_view",
    "no_teacher",
    "no_reasoning_prompts_mode",
    "no_feature_extractors_mode",
    "no_attention_mode",
)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the dataset itself.

    Note the defaults pair heads=8 with d=32; the head count must divide d,
    so configs that raise d to a multiple of 12 can use 12 fusion heads.
    """

    lambda_: float = 1.0  # config key: lambda
    tau: float = 2.0
    alpha: float = 0.5
    heads: int = 8
    encoder_heads: int = 4
    d: int = 32
    d_h: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    master_seed: int = 0
    pooling: str = "mean"
    debug_checks: bool = True
    drop_L_text: bool = False
    drop_L_image: bool = False
    drop_L_cross: bool = False
    drop_text_view: bool = False
    drop_image_view: bool = False
    no_teacher: bool = False
    no_reasoning_prompts_mode: bool = False
    no_feature_extractors_mode: bool = False
    no_attention_mode: bool = False

    def validate(self) -> "TrainConfig":
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"fusion heads={self.heads} must divide d={self.d}")
        if self.encoder_heads < 1:
            raise ConfigError(f"encoder_heads must be >= 1, got {self.encoder_heads}")
        if self.d_h < self.d:
            raise ConfigError(f"d_h={self.d_h} must be >= d={self.d}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")
        return self

    @property
    def lambda_effective(self) -> float:
        return 0.0 if self.no_teacher else self.lambda_

    @property
    def enabled_views(self) -> frozenset:
        dropped = {
            "text": self.drop_L_text,
            "image": self.drop_L_image,
            "cross": self.drop_L_cross,
        }
        return frozenset(v for v, off in dropped.items() if not off)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


_KEY_ALIASES = {"lambda": "lambda_"}


def _parse_value(raw: str, py_type, key: str):
    raw = raw.strip()
    if py_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if py_type is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from exc
    if py_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from exc
    if py_type is str:
        return raw
    # tuple-of-floats fields (e.g. corruption_mix)
    try:
        return tuple(float(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected comma-separated numbers, got {raw!r}") from exc


def read_config_file(path) -> dict[str, str]:
    """Parse a flat key=value file into raw strings."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in entries:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def build_configs(entries: dict[str, str], synthetic_cls=None):
    """Split raw entries into a (TrainConfig, SyntheticConfig) pair.

    Unknown keys raise; every key must belong to exactly one of the two
    dataclasses (their field names are disjoint by construction).
    """
    if synthetic_cls is None:
        from .datasynth import SyntheticConfig as synthetic_cls  # local to avoid cycles

    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    synth_fields = {f.name: f.type for f in dataclasses.fields(synthetic_cls)}
    type_of = {
        **{name: _resolve_type(t) for name, t in synth_fields.items()},
        **{name: _resolve_type(t) for name, t in train_fields.items()},
    }

    train_kwargs: dict = {}
    synth_kwargs: dict = {}
    for key, raw in entries.items():
        field = _KEY_ALIASES.get(key, key)
        if field in train_fields:
            train_kwargs[field] = _parse_value(raw, type_of[field], key)
        elif field in synth_fields:
            synth_kwargs[field] = _parse_value(raw, type_of[field], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(**train_kwargs).validate(), synthetic_cls(**synth_kwargs).validate()


def _resolve_type(annotation):
    # dataclass fields carry string annotations under `from __future__ import annotations`
    mapping = {"bool": bool, "int": int, "float": float, "str": str}
    if isinstance(annotation, str):
        return mapping.get(annotation, tuple)
    return annotation


def load_configs(path):
    return build_configs(read_config_file(path))
