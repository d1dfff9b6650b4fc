"""IndexArtifact persistence: one file per index, dispatched on its 4 byte magic."""
from __future__ import annotations

import importlib
from pathlib import Path
from typing import Dict, Type

from loguru import logger

from .errors import FormatError
from .formats import PathLike, peek_magic

_REGISTRY: Dict[bytes, Type] = {}

INDEX_MODULES = (
    "vexir.flat_index",
    "vexir.lsh_index",
    "vexir.quant_index",
    "vexir.graph_index",
    "vexir.sparse_retrieval",
)


def register(cls: Type) -> Type:
    """Class decorator: make ``cls`` loadable from payloads starting with ``cls.MAGIC``"""
    if cls.MAGIC in _REGISTRY and _REGISTRY[cls.MAGIC] is not cls:
        raise ValueError(f"magic {cls.MAGIC!r} registered twice")
    _REGISTRY[cls.MAGIC] = cls
    return cls


def _registry() -> Dict[bytes, Type]:
    for name in INDEX_MODULES:
        importlib.import_module(name)
    return _REGISTRY


def save(index, path: PathLike) -> int:
    payload = index.to_bytes()
    Path(path).write_bytes(payload)
    logger.info(f"saved {type(index).__name__} ({len(payload)} bytes) to {path}")
    return len(payload)


def loads(payload: bytes):
    magic = bytes(payload[:4])
    try:
        cls = _registry()[magic]
    except KeyError:
        raise FormatError(f"unknown artifact magic {magic!r}") from None
    return cls.from_bytes(payload)


def load(path: PathLike):
    magic = peek_magic(path)
    if magic not in _registry():
        raise FormatError(f"{path}: unknown artifact magic {magic!r}")
    index = loads(Path(path).read_bytes())
    logger.info(f"loaded {type(index).__name__} from {path}")
    return index
