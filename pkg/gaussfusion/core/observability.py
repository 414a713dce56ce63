import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Mapping, Optional

import numpy as np

logging.basicConfig(level=os.getenv('GAUSSFUSION_LOG_LEVEL', 'INFO'), format='%(message)s')
logger = logging.getLogger('gaussfusion')


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays to JSON-encodable builtins."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def configure_logging(level: str = 'INFO') -> None:
    logger.setLevel(str(level).upper())


class Observability:
    @staticmethod
    def record(event: str, payload: Optional[Mapping[str, Any]] = None) -> dict:
        return {
            'ts': datetime.now(timezone.utc).isoformat(),
            'event': event,
            'payload': to_jsonable(dict(payload or {})),
        }

    @staticmethod
    def log(event: str, payload: Optional[Mapping[str, Any]] = None, level: int = logging.INFO) -> None:
        logger.log(level, json.dumps(Observability.record(event, payload)))


class JsonLinesWriter:
    """Append-only JSON-lines sink used for training logs."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, 'w', encoding='utf-8')

    def write(self, record: Mapping[str, Any]) -> None:
        self._fh.write(json.dumps(to_jsonable(dict(record)), sort_keys=True) + '\n')
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
