"""Binary checkpoint container for parameter maps.

Layout (little-endian): magic ``MSCK``, u32 version=1, u32 entry count, then
per entry: u32 name length, UTF-8 name, u32 rank, u32 dims..., float64
payload row-major. Parameter tensors round-trip bit-exactly. The entry named
``__config__`` carries a JSON document (architecture, vocabulary, anything
the model needs to reload) encoded as space-padded UTF-8 bytes viewed as
float64; entries prefixed ``__norm__`` carry feature normalization stats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mstream.autograd import Tensor
from mstream.errors import DataFormatError
from mstream.model import ModelConfig, NormStats, init_params

MAGIC = b"MSCK"
VERSION = 1
CONFIG_ENTRY = "__config__"
NORM_PREFIX = "__norm__"


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: dict
    norm: NormStats | None


def _config_to_array(config: dict) -> np.ndarray:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    return np.frombuffer(blob, dtype="<f8").copy()


def _config_from_array(arr: np.ndarray) -> dict:
    return json.loads(arr.astype("<f8").tobytes().decode("utf-8"))


def save_checkpoint(path, params: dict[str, Tensor], config: dict,
                    norm: NormStats | None = None) -> None:
    entries: list[tuple[str, np.ndarray]] = [(CONFIG_ENTRY, _config_to_array(config))]
    for name in sorted(params):
        entries.append((name, params[name].data))
    if norm is not None:
        for s, (m, sd) in enumerate(zip(norm.mean, norm.std)):
            entries.append((f"{NORM_PREFIX}.s{s}.mean", m))
            entries.append((f"{NORM_PREFIX}.s{s}.std", sd))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` set, verify parameter shapes."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header", offset=len(blob))
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}", offset=4)
    pos = 12
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack("<I", blob[pos:pos + 4])
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack("<I", blob[pos:pos + 4])
            pos += 4
            dims = struct.unpack(f"<{rank}I", blob[pos:pos + 4 * rank])
            pos += 4 * rank
            size = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            payload = blob[pos:pos + size]
            if len(payload) != size:
                raise struct.error("payload short")
            raw[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
            pos += size
        except struct.error as e:
            raise DataFormatError(f"{path}: corrupt entry: {e}", offset=pos) from e
    if pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - pos} trailing bytes", offset=pos)
    if CONFIG_ENTRY not in raw:
        raise DataFormatError(f"{path}: missing {CONFIG_ENTRY} entry")
    config = _config_from_array(raw.pop(CONFIG_ENTRY))
    mean, std = {}, {}
    for name in [n for n in raw if n.startswith(NORM_PREFIX)]:
        _, stream, kind = name.rsplit(".", 2)
        (mean if kind == "mean" else std)[int(stream[1:])] = raw.pop(name)
    norm = None
    if mean:
        idx = sorted(mean)
        norm = NormStats([mean[i] for i in idx], [std[i] for i in idx])
    params = {name: Tensor(arr, requires_grad=True) for name, arr in raw.items()}
    if expect is not None:
        reference = init_params(expect, seed=0)
        for name in sorted(set(reference) | set(params)):
            if name not in params:
                raise DataFormatError(f"{path}: parameter {name} missing from checkpoint")
            if name not in reference:
                raise DataFormatError(f"{path}: unexpected parameter {name}")
            if params[name].shape != reference[name].shape:
                raise DataFormatError(
                    f"{path}: parameter {name} has shape {params[name].shape}, "
                    f"config expects {reference[name].shape}")
    return Checkpoint(params, config, norm)
