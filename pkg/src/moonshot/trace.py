"""Execution traces: an ordered list of event tuples plus a metadata header.

Every event is ``(kind, t, node, *fields)`` with the fields listed in
:data:`FIELDS`. Hashes are hex strings so traces round-trip through JSONL
unchanged. The first JSONL line is ``{"meta": {...}}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Union

FIELDS: dict[str, tuple[str, ...]] = {
    "send": ("mid", "mkind", "view", "dest"),
    "recv": ("mid", "src", "sent"),
    "block": ("hash", "parent", "height", "view", "size"),
    "propose": ("pkind", "view", "hash"),
    "vote": ("vkind", "view", "hash"),
    "timeout": ("view", "lock_view"),
    "enter": ("view", "via"),
    "cert": ("ckind", "view", "hash"),
    "tc": ("view", "high"),
    "lock": ("view", "hash"),
    "commit": ("height", "hash", "direct"),
    "conflict": ("hash",),
    "timer": ("tkind", "view"),
    "drop": ("reason", "mkind"),
}


@dataclass
class Trace:
    meta: dict[str, Any]
    events: list[tuple] = field(default_factory=list)

    def of_kind(self, *kinds: str) -> Iterator[tuple[int, tuple]]:
        want = set(kinds)
        for i, ev in enumerate(self.events):
            if ev[0] in want:
                yield i, ev

    def to_dicts(self) -> Iterator[dict]:
        for ev in self.events:
            d = {"ev": ev[0], "t": ev[1], "node": ev[2]}
            d.update(zip(FIELDS[ev[0]], ev[3:]))
            yield d

    def write_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for d in self.to_dicts():
                fh.write(json.dumps(d) + "\n")

    @classmethod
    def read_jsonl(cls, path: Union[str, Path]) -> "Trace":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty trace")
        head = json.loads(lines[0])
        if "meta" not in head:
            raise ValueError(f"{path}: first line must be the metadata header")
        return cls(meta=head["meta"], events=[event_from_dict(json.loads(ln)) for ln in lines[1:]])

    @classmethod
    def merge(cls, meta: dict, parts: list[list[tuple]]) -> "Trace":
        """Combine per-node logs into one trace ordered by time."""
        merged = [ev for part in parts for ev in part]
        merged.sort(key=lambda ev: ev[1])
        return cls(meta=meta, events=merged)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta, sort_keys=True).encode())
        for ev in self.events:
            h.update(repr(ev).encode())
        return h.hexdigest()


def event_from_dict(d: dict) -> tuple:
    kind = d["ev"]
    if kind not in FIELDS:
        raise ValueError(f"unknown event kind {kind!r}")
    return (kind, d["t"], d["node"], *(d.get(k) for k in FIELDS[kind]))
