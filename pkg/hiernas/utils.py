# hiernas/utils.py

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Dict, Type, TypeVar

from loguru import logger

from hiernas.common import UsageError, ValidationError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_key_value_text(text: str) -> Dict[str, str]:
    """
    Parse `key = value` lines → dict. Blank lines and `#` comments are skipped.
    """
    info: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key in info:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        info[key] = val.strip()
    return info


def _coerce(value: str, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if annotation in (int, float, str):
            return annotation(value)
        if origin is tuple:
            (item_type, *_) = typing.get_args(annotation) or (str,)
            items = [v.strip() for v in value.split(",") if v.strip()]
            return tuple(item_type(v) for v in items)
    except ValueError:
        raise ValidationError(f"{key}: cannot read {value!r} as {getattr(annotation, '__name__', annotation)}")
    raise ValidationError(f"{key}: unsupported field type {annotation!r}")


def dataclass_from_text(cls: Type[T], text: str) -> T:
    """
    Build a config dataclass from flat key-value text; unknown keys are rejected.
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    values = parse_key_value_text(text)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    logger.trace("Parsed {} from text: {}", cls.__name__, kwargs)
    return cls(**kwargs)


def dataclass_to_text(obj: Any) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def require_file(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def require_dir(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")
    return path


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")


def dump_json(payload: Any) -> str:
    """
    Stable JSON text: insertion-ordered keys, two-space indent, trailing newline.
    """
    return json.dumps(payload, indent=2) + "\n"


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(payload), encoding="utf-8")
    logger.debug("Wrote {}", path)
    return path


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parse_size(text: str) -> typing.Tuple[int, int]:
    """
    Convert "HxW" (e.g. "512x1024") into (height, width).
    """
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
        raise UsageError(f"expected input size as HxW, got {text!r}")
    h, w = (int(p) for p in parts)
    return h, w
