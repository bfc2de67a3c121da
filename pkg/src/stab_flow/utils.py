import hashlib
import json
import os
import sys
from typing import Any

from cpg_utils import to_path
from loguru import logger

LOG_ENV = 'STAB_LOG'


def configure_logging(level: str | None = None) -> str:
    """
    Replace loguru's default sink with one on stderr at the level named by STAB_LOG
    """
    level = (level or os.environ.get(LOG_ENV) or 'INFO').upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format='{time:HH:mm:ss} | {level: <8} | {name}:{line} - {message}')
    return level


def sub_seed(seed: int, name: str) -> int:
    """Named child seed: the first 8 bytes of sha256('<seed>:<name>'), kept non-negative"""
    digest = hashlib.sha256(f'{seed}:{name}'.encode()).digest()
    return int.from_bytes(digest[:8], 'big') & (2**63 - 1)


SUB_SEEDS = ('initial', 'sampler', 'partition', 'inf_conv', 'verify')


def seed_table(seed: int) -> dict[str, int]:
    return {name: sub_seed(seed, name) for name in SUB_SEEDS}


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=_jsonable)


def digest(data: Any) -> str:
    """16 hex characters of the sha256 of the canonical JSON form"""
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]


def _jsonable(value: Any) -> Any:
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'item'):
        return value.item()
    raise TypeError(f'{type(value).__name__} is not JSON serialisable')


def write_json(data: Any, path: str) -> None:
    with to_path(path).open('w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True, default=_jsonable)
        handle.write('\n')


def read_json(path: str) -> Any:
    with to_path(path).open() as handle:
        return json.load(handle)
