"""Checkpoint container.

File layout::

    b"HRCK" | u64 header_len (LE) | header JSON (utf-8) | tensor blobs

Every tensor is stored as little-endian float32 at the offset recorded in the
header (offsets are relative to the start of the blob section).  Tensors are
held as float32 in memory too, so save -> load -> save is bit-exact and an
in-memory checkpoint scores exactly like one read back from disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError, DataError

MAGIC = b"HRCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    variant: str
    seed: int
    config: dict = field(default_factory=dict)
    user_ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("E", "A"):
            raise ValueError(f"variant tag must be 'E' or 'A', got {self.variant!r}")
        self.tensors = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.tensors.items()}

    # parameter groups -----------------------------------------------------

    def group(self, prefixes: tuple[str, ...]) -> dict[str, np.ndarray]:
        def member(name: str) -> bool:
            return any(name == p or (name.startswith(p) and name[len(p):].isdigit()) for p in prefixes)

        return {k: v.astype(np.float64) for k, v in self.tensors.items() if member(k)}

    @property
    def gnn_params(self) -> dict[str, np.ndarray]:
        return self.group(("X", "Z", "W0", "Wu", "Wv"))

    @property
    def transfer_params(self) -> dict[str, np.ndarray]:
        return self.group(("P",))

    @property
    def discriminator_params(self) -> dict[str, np.ndarray]:
        return self.group(("Q",))

    @property
    def user_embeddings(self) -> np.ndarray:
        """Final-layer user embeddings, (D, M)."""
        return self.tensors["U_final"].astype(np.float64)

    @property
    def w0(self) -> np.ndarray:
        return self.tensors["W0"].astype(np.float64)

    def user_index(self, user_id: str) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise DataError(f"unknown user {user_id!r}: not present at training time") from None

    def require_variant(self, variant: str) -> None:
        if variant != self.variant:
            raise CheckpointMismatchError(f"requested variant {variant!r} but checkpoint is tagged {self.variant!r}")

    # serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            raw = arr.tobytes(order="C")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "dtype": "float32-le",
            "variant": self.variant,
            "seed": self.seed,
            "config": self.config,
            "users": self.user_ids,
            "meta": self.meta,
            "tensors": entries,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        if data[:4] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack_from("<Q", data, 4)
        start = 12 + hlen
        try:
            header = json.loads(data[12:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        tensors = {}
        for e in header["tensors"]:
            lo = start + e["offset"]
            raw = data[lo : lo + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise DataError(f"checkpoint truncated in tensor {e['name']!r}")
            tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        return cls(tensors, header["variant"], header["seed"], header["config"], header["users"], header.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())
