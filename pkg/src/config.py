from __future__ import annotations
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import UsageError

MODEL_DIR_ENV = "TWPARSE_MODEL_DIR"
DEFAULT_CONFIG_FILE = "config.json"

def _to_bool(v, default=False) -> bool:
    if v is None:
        return default
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return bool(v)
    s = str(v).strip().lower()
    if s in ("1","true","yes","y","on"):
        return True
    if s in ("0","false","no","n","off",""):
        return False
    return default

def _to_int(v, default=0) -> int:
    try:
        return int(v)
    except Exception:
        return default

def _to_float(v, default=0.0) -> float:
    try:
        return float(v)
    except Exception:
        return default

def _to_path(v) -> Optional[str]:
    if v is None:
        return None
    s = str(v).strip()
    return s or None

def _validate_log_level(level: str, default: str) -> str:
    """Validate and normalize a log level string.

    Args:
        level: Log level string to validate
        default: Default log level to use if invalid

    Returns:
        Valid log level string (uppercase)
    """
    valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
    normalized = str(level).upper()
    return normalized if normalized in valid_levels else default

@dataclass
class TrainingConfig:
    epochs: int = 30
    learning_rate: float = 0.1
    learning_rate_decay: float = 0.05  # lr_t = lr_0 / (1 + decay * t)
    clip_norm: float = 5.0
    seed: int = 1
    progress: bool = True

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TrainingConfig":
        return TrainingConfig(
            epochs=max(1, _to_int(d.get("epochs", 30), 30)),
            learning_rate=_to_float(d.get("learning_rate", 0.1), 0.1),
            learning_rate_decay=_to_float(d.get("learning_rate_decay", 0.05), 0.05),
            clip_norm=_to_float(d.get("clip_norm", 5.0), 5.0),
            seed=_to_int(d.get("seed", 1), 1),
            progress=_to_bool(d.get("progress", True), True),
        )

@dataclass
class TokenizerConfig:
    char_dim: int = 32
    hidden_dim: int = 64  # per direction
    min_char_freq: int = 2
    dropout: float = 0.0

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TokenizerConfig":
        return TokenizerConfig(
            char_dim=_to_int(d.get("char_dim", 32), 32),
            hidden_dim=_to_int(d.get("hidden_dim", 64), 64),
            min_char_freq=_to_int(d.get("min_char_freq", 2), 2),
            dropout=_to_float(d.get("dropout", 0.0), 0.0),
        )

@dataclass
class TaggerConfig:
    word_dim: int = 64
    char_dim: int = 24
    char_hidden: int = 32
    hidden_dim: int = 64
    min_word_freq: int = 2
    dropout: float = 0.0
    pretrained: Optional[str] = None  # whitespace text vectors

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TaggerConfig":
        return TaggerConfig(
            word_dim=_to_int(d.get("word_dim", 64), 64),
            char_dim=_to_int(d.get("char_dim", 24), 24),
            char_hidden=_to_int(d.get("char_hidden", 32), 32),
            hidden_dim=_to_int(d.get("hidden_dim", 64), 64),
            min_word_freq=_to_int(d.get("min_word_freq", 2), 2),
            dropout=_to_float(d.get("dropout", 0.0), 0.0),
            pretrained=_to_path(d.get("pretrained")),
        )

@dataclass
class ParserConfig:
    word_dim: int = 64
    char_dim: int = 24
    char_hidden: int = 32
    pos_dim: int = 16
    hidden_dim: int = 100
    action_dim: int = 16
    mlp_dim: int = 100
    min_word_freq: int = 2
    dropout: float = 0.0
    pretrained: Optional[str] = None

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ParserConfig":
        return ParserConfig(
            word_dim=_to_int(d.get("word_dim", 64), 64),
            char_dim=_to_int(d.get("char_dim", 24), 24),
            char_hidden=_to_int(d.get("char_hidden", 32), 32),
            pos_dim=_to_int(d.get("pos_dim", 16), 16),
            hidden_dim=_to_int(d.get("hidden_dim", 100), 100),
            action_dim=_to_int(d.get("action_dim", 16), 16),
            mlp_dim=_to_int(d.get("mlp_dim", 100), 100),
            min_word_freq=_to_int(d.get("min_word_freq", 2), 2),
            dropout=_to_float(d.get("dropout", 0.0), 0.0),
            pretrained=_to_path(d.get("pretrained")),
        )


@dataclass
class DistillConfig:
    alpha: float = 1.0
    mode: str = "exploration"  # oracle | exploration
    members: int = 20
    jobs: int = 1

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "DistillConfig":
        mode = str(d.get("mode", "exploration")).strip().lower()
        if mode not in ("oracle", "exploration"):
            raise UsageError(f"Invalid distillation mode: {mode!r}. Expected 'oracle' or 'exploration'.")
        alpha = _to_float(d.get("alpha", 1.0), 1.0)
        if not 0.0 <= alpha <= 1.0:
            raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
        return DistillConfig(
            alpha=alpha,
            mode=mode,
            members=max(1, _to_int(d.get("members", 20), 20)),
            jobs=max(1, _to_int(d.get("jobs", 1), 1)),
        )

@dataclass
class LoggingConfig:
    log_level: str = "INFO"
    console_level: str = "INFO"
    file_level: str = "DEBUG"
    log_dir: str = "logs"
    log_file: str = "twparse.log"
    max_bytes: int = 10 * 1024 * 1024  # 10MB
    backup_count: int = 5
    enable_file_logging: bool = False
    enable_console_logging: bool = True

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "LoggingConfig":
        return LoggingConfig(
            log_level=_validate_log_level(d.get("log_level", "INFO"), "INFO"),
            console_level=_validate_log_level(d.get("console_level", "INFO"), "INFO"),
            file_level=_validate_log_level(d.get("file_level", "DEBUG"), "DEBUG"),
            log_dir=str(d.get("log_dir", "logs")),
            log_file=str(d.get("log_file", "twparse.log")),
            max_bytes=_to_int(d.get("max_bytes", 10 * 1024 * 1024), 10 * 1024 * 1024),
            backup_count=_to_int(d.get("backup_count", 5), 5),
            enable_file_logging=_to_bool(d.get("enable_file_logging", False), False),
            enable_console_logging=_to_bool(d.get("enable_console_logging", True), True),
        )

@dataclass
class TwparseConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    tagger: TaggerConfig = field(default_factory=TaggerConfig)
    parser: ParserConfig = field(default_factory=ParserConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TwparseConfig":
        return TwparseConfig(
            training=TrainingConfig.from_dict(d.get("training", {}) or {}),
            tokenizer=TokenizerConfig.from_dict(d.get("tokenizer", {}) or {}),
            tagger=TaggerConfig.from_dict(d.get("tagger", {}) or {}),
            parser=ParserConfig.from_dict(d.get("parser", {}) or {}),
            distill=DistillConfig.from_dict(d.get("distill", {}) or {}),
            logging=LoggingConfig.from_dict(d.get("logging", {}) or {}),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def parse_key_value_config(text: str) -> Dict[str, Any]:
    """Read ``section.key = value`` lines into the nested dict ``from_dict`` expects."""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {lineno}: empty key")
        cur = out
        *sections, leaf = key.split(".")
        for section in sections:
            cur = cur.setdefault(section, {})
            if not isinstance(cur, dict):
                raise UsageError(f"config line {lineno}: {key!r} conflicts with an earlier value")
        cur[leaf] = value
    return out


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Load a ``.json`` config or a ``key = value`` config. Missing path means defaults."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise UsageError(f"{path} is not valid UTF-8 at byte {e.start}")
    if p.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"invalid JSON in {path}: {e}")
        if not isinstance(data, dict):
            raise UsageError(f"{path} must hold a JSON object")
        return data
    return parse_key_value_config(text)


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Deep-merge ``overrides`` into a copy of ``base``; ``None`` values are ignored."""
    merged: Dict[str, Any] = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged[key] = merge_overrides(merged.get(key, {}) or {}, value)
        else:
            merged[key] = value
    return merged


def resolve_model_path(path: str) -> str:
    """Resolve a relative model path against ``$TWPARSE_MODEL_DIR`` when it is set."""
    root = os.environ.get(MODEL_DIR_ENV)
    if not root or path == "-" or os.path.isabs(path):
        return path
    return str(Path(root) / path)
