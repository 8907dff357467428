"""Append-only job journal using the wire framing."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterator, Optional

from ..protocol import WireMessage, decode, encode


class Journal:
    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[WireMessage] = []
        if self.path is not None and self.path.exists():
            data = self.path.read_bytes()
            offset = 0
            while offset < len(data):
                got = decode(data, offset)
                if got is None:
                    # torn final frame: drop it so later appends stay aligned
                    with open(self.path, "r+b") as fh:
                        fh.truncate(offset)
                    break
                msg, n = got
                self.entries.append(msg)
                offset += n

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[WireMessage]:
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def append(self, msg: WireMessage) -> int:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(encode(msg))
                fh.flush()
                os.fsync(fh.fileno())
        self.entries.append(msg)
        return len(self.entries) - 1

    def reset(self) -> None:
        self.entries.clear()
        if self.path is not None and self.path.exists():
            self.path.write_bytes(b"")

    def since(self, start: int, limit: Optional[int] = None) -> list[WireMessage]:
        end = None if limit is None else start + limit
        return self.entries[start:end]
