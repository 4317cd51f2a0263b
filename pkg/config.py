"""Configuration management for the open-set traffic identification engine."""

import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()

__version__ = "0.3.0"
BUILD_ID = "trafficrag-0.3.0+flat"

DEFAULT_TEMPLATE_PATH = Path(__file__).parent / "templates" / "default_prompt.txt"


class Config:
    """Process-wide settings read from the environment."""

    # Remote completion backend
    LLM_URL: Optional[str] = os.getenv("MALRAG_LLM_URL")
    LLM_MODEL: Optional[str] = os.getenv("MALRAG_LLM_MODEL")
    LLM_KEY: Optional[str] = os.getenv("MALRAG_LLM_KEY")

    # Logging Configuration
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("LOG_FILE", "trafficrag.log")
    ENABLE_FILE_LOGGING: bool = os.getenv("ENABLE_FILE_LOGGING", "false").lower() == "true"
    DEBUG_MODE: bool = os.getenv("DEBUG_MODE", "false").lower() == "true"


class NormConfig(BaseModel):
    """Fixed vector lengths and frame size used by feature normalization."""

    model_config = ConfigDict(frozen=True)

    L_pay: int = Field(default=256, ge=1)
    L_len: int = Field(default=64, ge=1)
    L_time: int = Field(default=64, ge=1)
    W_seg: int = Field(default=16, ge=2)

    @property
    def k_f(self) -> int:
        return self.W_seg // 2

    def frames(self, length: int) -> int:
        """Number of frames N_f for a sequence normalized to ``length``."""
        return -(-length // self.W_seg)


class RetrievalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(default=5, ge=1)
    alpha: float = Field(default=1.0, ge=0.0)


class BackendConfig(BaseModel):
    """Answer-generation backend settings."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["remote_chat", "mock_majority"] = "mock_majority"
    endpoint_url: Optional[str] = None
    model_name: Optional[str] = None
    api_key: Optional[str] = Field(default=None, repr=False)
    timeout_seconds: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=2, ge=0, le=10)
    temperature: float = Field(default=0.0, ge=0.0)
    max_in_flight: int = Field(default=4, ge=1)
    retry_backoff_seconds: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _remote_fields(self) -> "BackendConfig":
        if self.kind == "remote_chat":
            if not self.endpoint_url:
                raise ValueError("endpoint_url is required for the remote_chat backend")
            if not self.model_name:
                raise ValueError("model_name is required for the remote_chat backend")
        elif self.endpoint_url or self.model_name:
            raise ValueError("endpoint_url/model_name are only valid for the remote_chat backend")
        return self

    @property
    def identity(self) -> str:
        if self.kind == "remote_chat":
            return f"remote_chat:{self.model_name}@{self.endpoint_url}"
        return "mock_majority"


class EngineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    norm: NormConfig = Field(default_factory=NormConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    template_path: Path = DEFAULT_TEMPLATE_PATH
    reasoning: bool = False
    stats_include_self: bool = True
    display_cap: int = Field(default=64, ge=1)


_NORM_KEYS = {"L_pay", "L_len", "L_time", "W_seg"}
_RETRIEVAL_KEYS = {"k", "alpha"}
_BACKEND_KEYS = {
    "endpoint_url", "model_name", "timeout_seconds", "max_retries",
    "temperature", "max_in_flight", "retry_backoff_seconds",
}
_ENGINE_KEYS = {"template_path", "reasoning", "display_cap"}
_BACKEND_ALIASES = {"mock": "mock_majority", "remote": "remote_chat"}


def _as_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}", field=key)


def build_engine_config(values: Dict[str, Any]) -> EngineConfig:
    """Assemble an EngineConfig from flat ``key -> value`` settings.

    Values may be strings (config file) or already-typed (CLI flags); pydantic
    performs the coercion. ``None`` values are ignored so unset flags do not
    override anything.
    """
    norm: Dict[str, Any] = {}
    retrieval: Dict[str, Any] = {}
    backend: Dict[str, Any] = {}
    engine: Dict[str, Any] = {}

    for key, value in values.items():
        if value is None:
            continue
        if key in _NORM_KEYS:
            norm[key] = value
        elif key in _RETRIEVAL_KEYS:
            retrieval[key] = value
        elif key in _BACKEND_KEYS:
            backend[key] = value
        elif key == "backend":
            backend["kind"] = _BACKEND_ALIASES.get(str(value), value)
        elif key == "api_key":
            backend["api_key"] = value
        elif key == "stats_exclude_self":
            flag = _as_bool(key, value) if isinstance(value, str) else bool(value)
            engine["stats_include_self"] = not flag
        elif key == "reasoning":
            engine["reasoning"] = _as_bool(key, value) if isinstance(value, str) else bool(value)
        elif key in _ENGINE_KEYS:
            engine[key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}", field=key)

    if backend.get("kind") == "remote_chat":
        backend.setdefault("endpoint_url", Config.LLM_URL)
        backend.setdefault("model_name", Config.LLM_MODEL)
        backend.setdefault("api_key", Config.LLM_KEY)
    else:
        # a manifest may name an endpoint while a flag selects the mock
        for key in ("endpoint_url", "model_name", "api_key"):
            backend.pop(key, None)

    try:
        return EngineConfig(
            norm=NormConfig(**norm),
            retrieval=RetrievalConfig(**retrieval),
            backend=BackendConfig(**backend),
            **engine,
        )
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(first["msg"], field=field) from e


def load_engine_config(path: Optional[Path] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> EngineConfig:
    """Load the engine configuration file and apply flag overrides (flags win)."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file not found: {path}", field="config")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return build_engine_config(values)


# Global configuration instance
config = Config()
