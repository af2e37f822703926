"""
Binary FlatParams dumps used for per-round checkpoints.

Format (all integers little-endian):
    b"TFP1"
    u32 layer count
    per layer: u16 name length, UTF-8 name, u64 offset, u64 length
    u64 sample_count
    float64 values (little-endian)
"""
import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from app.core.errors import LayoutMismatch
from app.services.params import FlatParams, LayerSlot

logger = logging.getLogger(__name__)

MAGIC = b"TFP1"


def dump_params(params: FlatParams) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params.layout))]
    for slot in params.layout:
        name = slot.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<QQ", slot.offset, slot.length))
    parts.append(struct.pack("<Q", params.sample_count))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


def load_params(blob: bytes) -> FlatParams:
    if blob[:4] != MAGIC:
        raise LayoutMismatch("not a parameter dump (bad magic)")
    pos = 4
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    slots = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        slots.append(LayerSlot(name, offset, length))
    (sample_count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    values = np.frombuffer(blob, dtype="<f8", offset=pos)
    return FlatParams(values.astype(np.float64), tuple(slots), sample_count)


def write_round_checkpoint(
    directory: Path,
    round_index: int,
    root: FlatParams,
    leaves: Mapping[str, FlatParams],
) -> Path:
    """Write root and leaf dumps under `<directory>/round-NNN/`."""
    round_dir = Path(directory) / f"round-{round_index:03d}"
    round_dir.mkdir(parents=True, exist_ok=True)
    (round_dir / "root.tfp").write_bytes(dump_params(root))
    for client_id in sorted(leaves):
        (round_dir / f"leaf-{client_id}.tfp").write_bytes(dump_params(leaves[client_id]))
    logger.debug(f"Checkpoint written: {round_dir}")
    return round_dir
