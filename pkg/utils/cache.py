import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Optional

logger = logging.getLogger(__name__)


class ResultCache:
    """JSON file per key; keys are hashed so any string is a valid key.

    Entries record the key they were stored under, so a hash collision or a
    foreign file reads as a miss.
    """

    def __init__(self, cache_dir: str):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(exist_ok=True, parents=True)

    def get(self, key: str) -> Optional[Any]:
        cache_path = self.get_cache_path(key)
        if not cache_path.exists():
            return None

        try:
            with cache_path.open("r") as f:
                cached_data = json.load(f)
            if cached_data["key"] != key:
                return None
            return cached_data["data"]
        except (json.JSONDecodeError, KeyError, TypeError, OSError):
            logger.debug("ignoring unreadable cache entry %s", cache_path.name)
            return None

    def set(self, key: str, data: Any) -> None:
        cache_path = self.get_cache_path(key)
        try:
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            with os.fdopen(fd, "w") as f:
                json.dump({"key": key, "data": data}, f)
            os.replace(tmp, cache_path)
        except OSError as e:
            logger.warning("failed to write cache entry %s: %s", key, e)

    def generate_cache_key(self, key: str) -> str:
        return hashlib.sha256(key.encode("utf-8")).hexdigest() + ".json"

    def get_cache_path(self, key: str) -> Path:
        return self.cache_dir / self.generate_cache_key(key)
