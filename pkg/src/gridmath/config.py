"""Line-based ``key = value`` configuration files."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

from .core import GridMathError
from .transport import CostModel

PACKAGE_DATA = Path(__file__).parent / "data"
SIMULATED_CFG = PACKAGE_DATA / "simulated.cfg"


class ConfigError(GridMathError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.replace(",", " ").split()]


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.replace(",", " ").split()]


def _words(v: str) -> list[str]:
    return [x for x in v.replace(",", " ").split()]


PARSERS = {
    "workers": int,
    "worker-counts": _ints,
    "sizes": _ints,
    "seed": int,
    "deterministic": _bool,
    "backend": str,
    "alpha": float,
    "beta": float,
    "rate": float,
    "chunk-size": int,
    "panel": int,
    "widths": _ints,
    "batch": int,
    "steps": int,
    "learning-rate": float,
    "dataset": str,
    "samples": int,
    "log": str,
    "stages": _words,
    "host": _floats,
    "device": _floats,
    "transfer": float,
    "thread-overhead": float,
    "max-threads": int,
    "train-time": float,
}


def parse(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in PARSERS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {exc}") from None
    return out


def load(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse(text, str(p))


def config_hash(cfg: dict) -> str:
    """Stable short hash of a parsed config (keys sorted)."""
    canon = ";".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def cost_model(cfg: Optional[dict] = None) -> CostModel:
    """Cost model from ``cfg``, falling back to the pinned simulated.cfg values."""
    pinned = load(SIMULATED_CFG)
    cfg = {**pinned, **(cfg or {})}
    return CostModel(cfg["alpha"], cfg["beta"], cfg["rate"])
