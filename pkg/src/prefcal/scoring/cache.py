"""Append-only JSON-lines cache of pair scores keyed by content digest."""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from prefcal.scoring.scorer import PairScores


def cache_key(left: str, right: str, category: str, dims_digest: str, mode: int) -> str:
    body = json.dumps([left, right, category, dims_digest, int(mode)])
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


class ScoreCache:
    """In-memory map backed by an optional JSON-lines file.

    Reads are lock-free dictionary lookups; writes are serialised and each
    record is flushed as one line. When a key appears twice in the file the
    first record wins.
    """

    def __init__(self, path: str | Path | None = None):
        from prefcal.scoring.scorer import PairScores  # scorer imports this module

        self.path = None if path is None else Path(path)
        self._entries: dict[str, PairScores] = {}
        self.transcripts: dict[str, list[dict]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    if rec["key"] not in self._entries:
                        self._entries[rec["key"]] = PairScores.from_dict(rec["value"])
                        self.transcripts[rec["key"]] = rec.get("transcript") or []

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> PairScores | None:
        return self._entries.get(key)

    def put(self, key: str, value: PairScores, transcript: list[dict] | None = None) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = value
            self.transcripts[key] = list(transcript or [])
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps({"key": key, "value": value.to_dict(), "transcript": transcript or []},
                                  ensure_ascii=False)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
