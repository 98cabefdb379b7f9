"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"FFCKPT\\0\\0"            magic
    u32 format_version
    u32 n, n bytes             JSON header (format version, config digest, config, metadata)
    u32 count, blobs           model parameters
    u32 count, blobs           optimizer state (exp_avg/<name>, exp_avg_sq/<name>)
    32 bytes                   SHA-256 of everything above

    blob := u16 name_len, name (utf-8), u8 ndim, ndim x u32 extents, float32 data
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FFCKPT\0\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, torch.Tensor]
    optimizer: dict = field(default_factory=dict)

    @property
    def config_digest(self) -> str:
        return self.header["config_digest"]


def _write_blob(buf: io.BytesIO, name: str, tensor: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4"))
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_blob(view: memoryview, pos: int) -> tuple[str, torch.Tensor, int]:
    (n,) = struct.unpack_from("<H", view, pos)
    pos += 2
    name = bytes(view[pos:pos + n]).decode("utf-8")
    pos += n
    (ndim,) = struct.unpack_from("<B", view, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}I", view, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
    pos += 4 * count
    return name, torch.from_numpy(arr), pos


def save_checkpoint(path: str | Path, model, meta: dict | None = None, optimizer_state: dict | None = None) -> str:
    """Write ``model`` (a :class:`~foodfuse.model.CompositionModel`) and return the file's SHA-256."""
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": model.cfg.digest(),
        "config": asdict(model.cfg),
        "meta": meta or {},
        "optimizer_steps": (optimizer_state or {}).get("step", {}),
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
    buf.write(raw)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        _write_blob(buf, name, state[name])
    opt_blobs = []
    for kind in ("exp_avg", "exp_avg_sq"):
        for name, t in sorted((optimizer_state or {}).get(kind, {}).items()):
            opt_blobs.append((f"{kind}/{name}", t))
    buf.write(struct.pack("<I", len(opt_blobs)))
    for name, t in opt_blobs:
        _write_blob(buf, name, t)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return hashlib.sha256(body + digest).hexdigest()


def read_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 40 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    view = memoryview(body)
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", view, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += 8
    header = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    params: dict[str, torch.Tensor] = {}
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    for _ in range(count):
        name, t, pos = _read_blob(view, pos)
        params[name] = t
    optimizer = {"step": header.get("optimizer_steps", {}), "exp_avg": {}, "exp_avg_sq": {}}
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    for _ in range(count):
        name, t, pos = _read_blob(view, pos)
        kind, pname = name.split("/", 1)
        optimizer[kind][pname] = t
    return Checkpoint(header, params, optimizer)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_model(path: str | Path):
    """Rebuild the model described by a checkpoint header and load its weights."""
    from .config import from_dict
    from .model import CompositionModel, ModelConfig

    ckpt = read_checkpoint(path)
    cfg = from_dict(ModelConfig, ckpt.header["config"], "checkpoint.config")
    if cfg.digest() != ckpt.config_digest:
        raise CheckpointError(f"{path}: config digest {cfg.digest()} does not match header {ckpt.config_digest}")
    model = CompositionModel(cfg)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model, ckpt
