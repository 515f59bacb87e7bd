"""Run configuration: a key-value file merged with command-line flags.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the long flag names with dashes or underscores (``batch_size`` and
``batch-size`` are the same key).  Model hyperparameters such as
``dropout`` or ``lstm_hidden`` may also appear.  Flags given on the command
line always win over the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .models import MODEL_KINDS, ModelSpec
from .training import TrainConfig

_SPEC_FIELDS = {f.name: f for f in dataclasses.fields(ModelSpec)}
_SPEC_KEYS = set(_SPEC_FIELDS) - {"kind", "max_len", "num_classes"}


@dataclass
class RunConfig:
    model: str = "lstm"
    models: list[str] = field(default_factory=lambda: list(MODEL_KINDS))
    train: str | None = None
    test: str | None = None
    embeddings: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    input: str | None = None
    epochs: int = 10
    batch_size: int = 32
    lr: float | None = None
    optimizer: str = "adam"
    seed: int = 0
    replicates: int = 3
    max_len: int = 64
    spec_overrides: dict = field(default_factory=dict)

    def model_spec(self, kind: str | None = None) -> ModelSpec:
        return ModelSpec(kind=kind or self.model, max_len=self.max_len, **self.spec_overrides)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            learning_rate=self.lr,
            seed=self.seed if seed is None else seed,
            replicates=self.replicates,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def require_paths(self, *names: str) -> None:
        """Fail before any work if a referenced input path is absent."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required")
            if not Path(value).exists():
                raise FileNotFoundError(f"{name} file not found: {value}")


_INT_KEYS = {"epochs", "batch_size", "seed", "replicates", "max_len"}
_FLOAT_KEYS = {"lr"}
_STR_KEYS = {"model", "train", "test", "embeddings", "out", "checkpoint", "input", "optimizer"}


def _coerce_spec(key: str, raw: str):
    kind = _SPEC_FIELDS[key].type
    if key == "dnn_dims":
        return tuple(int(p) for p in raw.replace(",", " ").split())
    if "bool" in str(kind):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(raw)
        return low in ("true", "1", "yes")
    if "int" in str(kind):
        return None if raw.lower() == "none" else int(raw)
    if "float" in str(kind):
        return float(raw)
    return raw


def coerce(key: str, raw: str):
    key = key.strip().replace("-", "_")
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return key, int(raw)
        if key in _FLOAT_KEYS:
            return key, float(raw)
        if key in _STR_KEYS:
            return key, raw
        if key == "models":
            return key, [m for m in raw.replace(",", " ").split() if m]
        if key in _SPEC_KEYS:
            return key, _coerce_spec(key, raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        k, v = coerce(key, raw)
        values[k] = v
    return values


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


def build_run_config(file_values: dict, flag_values: dict) -> RunConfig:
    """Merge config-file values with flags (flags win; ``None`` flags are unset)."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    overrides = {k: merged.pop(k) for k in list(merged) if k in _SPEC_KEYS}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**merged, spec_overrides=overrides)
    for m in [cfg.model, *cfg.models]:
        if m not in MODEL_KINDS:
            raise ConfigError(f"unknown model {m!r}; expected one of {', '.join(MODEL_KINDS)}")
    # Validate eagerly so bad values fail before any data is read.
    cfg.model_spec()
    cfg.train_config()
    return cfg
