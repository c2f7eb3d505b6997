# adamw_ema/utils.py
import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Dict

from adamw_ema.errors import AdamwEmaError


def log_level() -> str:
    return os.environ.get("ADAMW_EMA_LOG_LEVEL", "INFO").upper()


def progress_enabled() -> bool:
    return os.environ.get("ADAMW_EMA_PROGRESS", "1") not in ("0", "false", "no", "")


def sanitize_filename(name: str) -> str:
    return re.sub(r"[^a-zA-Z0-9_.-]", "_", name or "run")


def config_hash(flat: Dict[str, Any]) -> str:
    blob = json.dumps(flat, sort_keys=True, default=str)
    return hashlib.md5(blob.encode("utf-8")).hexdigest()[:10]


def run_id(flat: Dict[str, Any]) -> str:
    """`<name>-<hash>` when the config is named, else just the hash."""
    h = config_hash(flat)
    name = flat.get("name") or ""
    return f"{sanitize_filename(name)}-{h}" if name else h


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise AdamwEmaError(f"cannot create output directory {p}: {e}") from e
    return p
