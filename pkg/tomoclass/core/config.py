# tomoclass/core/config.py

import logging
import os
import re
import tomllib  # Python 3.11+
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv

from tomoclass.core.errors import ConfigError

logger = logging.getLogger(__name__)

# ---------- ENV ----------
PROJECT_ROOT = os.path.abspath(
    os.path.join(os.path.dirname(__file__), "..", "..")
)

load_dotenv(os.path.join(PROJECT_ROOT, ".env"), override=False)

# ---------- CORE SETTINGS ----------
THREADS_ENV = "TOMOCLASS_THREADS"
OUTPUT_DIR = os.getenv("TOMOCLASS_OUTPUT_DIR", "out").strip() or "out"
LEDGER_ENABLED = os.getenv("TOMOCLASS_LEDGER", "1").lower() in ("1", "true", "yes")
FULL_CHECKS = os.getenv("TOMOCLASS_FULL_CHECKS", "").lower() in ("1", "true", "yes")

# ---------- LOGGING ----------
LOG_LEVEL = (os.getenv("LOG_LEVEL", "INFO") or "INFO").upper()
LOG_FILE = os.getenv("LOG_FILE", os.path.join(PROJECT_ROOT, "logs", "tomoclass.log"))


def resolve_threads(flag: Optional[int] = None) -> int:
    """Worker count: explicit flag, then TOMOCLASS_THREADS, then logical cores."""
    if flag is not None:
        if flag < 1:
            raise ConfigError(f"threads must be >= 1, got {flag}")
        return flag
    env = (os.getenv(THREADS_ENV) or "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


# ---------- Experiment config files ----------

_ENV_REF = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")


def _resolve(v: Any) -> Any:
    if isinstance(v, str):
        m = _ENV_REF.match(v.strip())
        if m:
            val = os.getenv(m.group(1))
            if val is None:
                raise ConfigError(f"Env var {m.group(1)} not set")
            return val
    return v


def _flatten(o: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in o.items():
        key = f"{prefix}{k}".replace("-", "_")
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "_"))
        elif isinstance(v, list):
            flat[key] = [_resolve(i) for i in v]
        else:
            flat[key] = _resolve(v)
    return flat


def load_config(path: str | Path) -> dict:
    """
    Read a TOML or YAML experiment config into a flat key/value dict.

    Nested tables are flattened with '_' ([split] method -> split_method) and
    "${VAR}" values are taken from the environment.
    """
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix.lower() in (".yaml", ".yml"):
            raw = yaml.safe_load(text) or {}
        else:
            raw = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {p}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a table/mapping")
    cfg = _flatten(raw)
    logger.debug("Loaded config %s (%d keys)", p, len(cfg))
    return cfg
