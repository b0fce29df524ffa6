"""Reproducible-run plumbing: named seed streams, manifests, atomic writes, worker pool."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar, Union

import numpy as np

from . import __version__

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

STREAMS = ("simulate", "init", "forecast", "repeat")


def derive_seed(seed: int, stream: str, *index: int) -> int:
    """Stable 32-bit seed for a named substream of ``seed``.

    The stream name enters through its CRC32, so adding a stream never shifts the others.
    The index count is mixed in too: trailing zero words are otherwise indistinguishable.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8")), len(index)]
    entropy.extend(int(i) for i in index)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(seed: int, stream: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream, *index))


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    return obj


def dumps_canonical(obj: Any) -> str:
    """Byte-stable JSON: sorted keys, shortest round-trip floats, no NaN."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def build_manifest(
    command: str,
    config: Dict[str, Any],
    seed: int,
    inputs: Optional[Dict[str, str]] = None,
) -> Dict[str, Any]:
    """Manifest of a run; ``hash`` covers every other field."""
    body = {
        "command": command,
        "config": to_jsonable(config),
        "seed": int(seed),
        "inputs": dict(inputs or {}),
        "version": __version__,
    }
    digest = hashlib.sha256(
        json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()
    return {**body, "hash": digest}


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write via a temp file in the target directory, then ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path: Union[str, Path], obj: Any) -> Path:
    return atomic_write_text(path, dumps_canonical(obj))


def default_threads() -> int:
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1) -> List[R]:
    """Map ``fn`` over ``items`` on at most ``threads`` workers, keeping input order."""
    seq: Sequence[T] = list(items)
    workers = default_threads() if threads is None else max(1, int(threads))
    if workers == 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=min(workers, len(seq))) as pool:
        return list(pool.map(fn, seq))
