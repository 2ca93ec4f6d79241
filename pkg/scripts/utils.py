import csv
import json
import logging
import os
import platform
from datetime import datetime, timedelta, timezone
from importlib import metadata
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence

import yaml

CONFIG_PATH = "config.yaml"
CONFIG_LOCAL_PATH = "config.local.yaml"
SEED_ENV_VAR = "DRIFTCAST_SEED"
EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
VERSIONED_PACKAGES = ("numpy", "scipy", "PyYAML")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    result = dict(base)
    for key, value in override.items():
        if (
            key in result
            and isinstance(result[key], dict)
            and isinstance(value, dict)
        ):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _read_yaml(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        payload = yaml.safe_load(f) or {}
    if not isinstance(payload, dict):
        raise ValueError(f"Config file {path} must contain a mapping, got {type(payload).__name__}")
    return payload


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Base config.yaml, then config.local.yaml, then an explicit --config file."""
    config: Dict[str, Any] = {}
    if os.path.exists(CONFIG_PATH):
        config = _read_yaml(CONFIG_PATH)
    if os.path.exists(CONFIG_LOCAL_PATH):
        config = _deep_merge(config, _read_yaml(CONFIG_LOCAL_PATH))
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Missing {path}")
        config = _deep_merge(config, _read_yaml(path))
    return config


def config_section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = config.get(name, {}) or {}
    if not isinstance(section, dict):
        raise ValueError(f"Config section '{name}' must be a mapping")
    return section


def resolve_seed(seed: Optional[int], default: int = 0) -> int:
    env_value = str(os.environ.get(SEED_ENV_VAR, "") or "").strip()
    if env_value:
        try:
            return int(env_value)
        except ValueError as exc:
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got '{env_value}'") from exc
    return default if seed is None else int(seed)


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=str(level).upper(), format=LOG_FORMAT, force=True)


def ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_json(path: str, data: Any) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=True, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


META_PREFIX = "# "


def _meta_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def write_csv(
    path: str, header: Sequence[str], rows: Iterable[Sequence[Any]], meta: Optional[Mapping[str, Any]] = None
) -> None:
    """Atomic CSV write; ``meta`` entries become ``# key: value`` lines above the header row."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        for key, value in (meta or {}).items():
            f.write(f"{META_PREFIX}{key}: {_meta_text(value)}\n")
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))
    os.replace(tmp, path)


def read_csv(path: str) -> list:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith(META_PREFIX)))


def read_csv_meta(path: str) -> Dict[str, str]:
    meta: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line in f:
            if not line.startswith(META_PREFIX):
                break
            key, _, value = line[len(META_PREFIX):].rstrip("\r\n").partition(": ")
            meta[key] = value
    return meta


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def epoch_days_to_datetime(days: float) -> datetime:
    return EPOCH + timedelta(days=float(days))


def day_of_year(epoch_days: float) -> int:
    return epoch_days_to_datetime(epoch_days).timetuple().tm_yday


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions
