"""Content-addressed image store, per-image mask store, session logs, LRU.

Layout under the store root (plain files, inspectable, restart-safe):

    images/<sha256>.<png|jpeg>     original upload bytes
    masks/<image_id>/<mask_id>.rle RLE textual form, ids m1, m2, ... per image
    sessions/<session_id>.log      JSONL: meta record first, then messages

All writes are atomic (write temp, rename); session appends are serialized
per session.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Generic, TypeVar

import numpy as np

from .chat import ChatMessage, ChatSession
from .errors import UnknownImage, UnknownSession
from .geometry import ImageDims, RleMask

K = TypeVar("K")
V = TypeVar("V")


class LruCache(Generic[K, V]):
    """Thread-safe LRU with hit/miss counters."""

    def __init__(self, max_entries: int):
        if max_entries < 1:
            raise ValueError("max_entries must be >= 1")
        self._max = max_entries
        self._store: OrderedDict[K, V] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: K) -> V | None:
        with self._lock:
            if key not in self._store:
                self.misses += 1
                return None
            self._store.move_to_end(key)
            self.hits += 1
            return self._store[key]

    def put(self, key: K, value: V) -> None:
        with self._lock:
            if key in self._store:
                self._store.move_to_end(key)
            self._store[key] = value
            while len(self._store) > self._max:
                self._store.popitem(last=False)

    def __len__(self) -> int:
        return len(self._store)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class ImageStore:
    """Idempotent content-addressed store for png/jpeg uploads."""

    def __init__(self, root: str | Path):
        self.root = Path(root) / "images"
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> tuple[str, ImageDims, str]:
        """Store bytes, returning (image_id, dims, format). Raises ValueError
        for undecodable input or formats other than png/jpeg."""
        from PIL import Image

        try:
            with Image.open(io.BytesIO(data)) as im:
                fmt = (im.format or "").lower()
                if fmt not in ("png", "jpeg"):
                    raise ValueError(f"unsupported format {fmt or 'unknown'}")
                im.load()
                dims = ImageDims(im.width, im.height)
        except ValueError:
            raise
        except Exception as exc:
            raise ValueError(f"undecodable image: {exc}") from exc
        image_id = hashlib.sha256(data).hexdigest()
        path = self.root / f"{image_id}.{fmt}"
        if not path.exists():
            _atomic_write(path, data)
        return image_id, dims, fmt

    def _path_for(self, image_id: str) -> Path:
        for ext in ("png", "jpeg"):
            path = self.root / f"{image_id}.{ext}"
            if path.exists():
                return path
        raise UnknownImage(image_id)

    def exists(self, image_id: str) -> bool:
        try:
            self._path_for(image_id)
            return True
        except UnknownImage:
            return False

    def load_raster(self, image_id: str) -> np.ndarray:
        from PIL import Image

        with Image.open(self._path_for(image_id)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


class MaskStore:
    """Sequential per-image mask ids (m1, m2, ...) persisted as RLE JSON."""

    def __init__(self, root: str | Path):
        self.root = Path(root) / "masks"
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _dir_for(self, image_id: str) -> Path:
        return self.root / image_id

    def put(self, image_id: str, rle: RleMask) -> str:
        with self._lock:
            directory = self._dir_for(image_id)
            directory.mkdir(parents=True, exist_ok=True)
            existing = [
                int(p.stem[1:])
                for p in directory.glob("m*.rle")
                if p.stem[1:].isdigit()
            ]
            mask_id = f"m{max(existing, default=0) + 1}"
            payload = json.dumps(rle.to_json(), separators=(",", ":")).encode("utf-8")
            _atomic_write(directory / f"{mask_id}.rle", payload)
            return mask_id

    def get(self, image_id: str, mask_id: str) -> RleMask:
        path = self._dir_for(image_id) / f"{mask_id}.rle"
        if not path.exists():
            raise KeyError(mask_id)
        return RleMask.from_json(json.loads(path.read_text(encoding="utf-8")))


class SessionStore:
    """Append-only JSONL logs; first record is session metadata."""

    def __init__(self, root: str | Path):
        self.root = Path(root) / "sessions"
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _path_for(self, session_id: str) -> Path:
        return self.root / f"{session_id}.log"

    def create(self, session: ChatSession) -> None:
        meta = {
            "kind": "meta",
            "session_id": session.session_id,
            "image_id": session.image_id,
            "mask": session.mask.to_json(),
            "seed_caption": session.seed_caption,
            "system_prompt": session.system_prompt,
        }
        with self._lock_for(session.session_id):
            _atomic_write(
                self._path_for(session.session_id),
                (json.dumps(meta, separators=(",", ":")) + "\n").encode("utf-8"),
            )

    def append_messages(self, session_id: str, messages: list[ChatMessage]) -> None:
        lines = "".join(
            json.dumps({"kind": "message", "role": m.role, "text": m.text}) + "\n"
            for m in messages
        )
        with self._lock_for(session_id):
            with open(self._path_for(session_id), "a", encoding="utf-8") as fh:
                fh.write(lines)

    def load(self, session_id: str) -> ChatSession:
        path = self._path_for(session_id)
        if not path.exists():
            raise UnknownSession(session_id)
        records = [
            json.loads(line)
            for line in path.read_text(encoding="utf-8").splitlines()
            if line
        ]
        if not records or records[0].get("kind") != "meta":
            raise UnknownSession(f"{session_id}: corrupt session log")
        meta = records[0]
        session = ChatSession(
            session_id=meta["session_id"],
            image_id=meta["image_id"],
            mask=RleMask.from_json(meta["mask"]),
            seed_caption=meta["seed_caption"],
            system_prompt=meta["system_prompt"],
        )
        for record in records[1:]:
            if record.get("kind") == "message":
                session.messages.append(ChatMessage(record["role"], record["text"]))
        return session
