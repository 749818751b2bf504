"""Chunked little-endian checkpoint files.

Layout: magic ``SLGS``, u32 version, then chunks until end of file. Each chunk
is u32 name length, UTF-8 name, u64 payload length, payload. The ``meta``
chunk holds JSON; every other chunk is an array encoded as u8 dtype code,
u8 ndim, ndim x u64 dims, raw little-endian data.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .model import ModelConfig, SplatModel
from .scene import GaussianCloud

MAGIC = b"SLGS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CLOUD_EXTRA = ("grad_accum", "grad_count", "max_radii")


@dataclass
class Checkpoint:
    cloud: dict[str, np.ndarray]
    networks: dict[str, dict[str, np.ndarray]]
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    iteration: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    version: int = VERSION

    def model_config(self) -> ModelConfig:
        keys = {f for f in ModelConfig.__dataclass_fields__}
        return ModelConfig(**{k: v for k, v in self.config.get("model", {}).items() if k in keys})

    def build_cloud(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.cloud.items()})

    def build_model(self) -> SplatModel:
        model = SplatModel(self.build_cloud(), self.model_config())
        for name, net in model.all_networks().items():
            net.load_state_dict(self.networks[name])
        return model


def _encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    code = next((c for c, dt in _DTYPES.items() if dt.kind == a.dtype.kind and dt.itemsize == a.dtype.itemsize),
                None)
    if code is None:
        raise TypeError(f"unsupported checkpoint dtype {a.dtype}")
    header = struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def _decode_array(payload: bytes, name: str) -> np.ndarray:
    if len(payload) < 2:
        raise MalformedFile(f"chunk {name!r}: truncated array header")
    code, ndim = struct.unpack_from("<BB", payload)
    if code not in _DTYPES:
        raise MalformedFile(f"chunk {name!r}: unknown dtype code {code}")
    end = 2 + 8 * ndim
    if len(payload) < end:
        raise MalformedFile(f"chunk {name!r}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2)
    dt = _DTYPES[code]
    expected = dt.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(payload) - end != expected:
        raise MalformedFile(f"chunk {name!r}: expected {expected} data bytes, found {len(payload) - end}")
    return np.frombuffer(payload, dtype=dt, offset=end).reshape(shape).astype(dt.newbyteorder("="))


def _write_chunk(out, name: str, payload: bytes) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", ckpt.version))
    meta = {"iteration": ckpt.iteration, "config": ckpt.config, "rng_state": ckpt.rng_state,
            "steps": ckpt.steps, "networks": sorted(ckpt.networks)}
    _write_chunk(buf, "meta", json.dumps(meta, sort_keys=True).encode())
    for name, arr in ckpt.cloud.items():
        _write_chunk(buf, f"cloud/{name}", _encode_array(arr))
    for net, state in ckpt.networks.items():
        for name, arr in state.items():
            _write_chunk(buf, f"net/{net}/{name}", _encode_array(arr))
    for name, (m, v) in ckpt.moments.items():
        _write_chunk(buf, f"adam_m/{name}", _encode_array(m))
        _write_chunk(buf, f"adam_v/{name}", _encode_array(v))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_chunks(data: bytes) -> tuple[int, dict[str, bytes]]:
    if data[:4] != MAGIC:
        raise MalformedFile("not a checkpoint: bad magic")
    if len(data) < 8:
        raise MalformedFile("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}")
    pos, chunks = 8, {}
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedFile("truncated chunk name length")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + nlen + 8 > len(data):
            raise MalformedFile("truncated chunk header")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + plen > len(data):
            raise MalformedFile(f"chunk {name!r} runs past end of file")
        if name in chunks:
            raise MalformedFile(f"duplicate chunk {name!r}")
        chunks[name] = data[pos:pos + plen]
        pos += plen
    return version, chunks


def load_checkpoint(path) -> Checkpoint:
    version, chunks = read_chunks(Path(path).read_bytes())
    if "meta" not in chunks:
        raise MalformedFile("checkpoint has no meta chunk")
    try:
        meta = json.loads(chunks.pop("meta"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"bad meta chunk: {exc}") from exc
    cloud, networks, m, v = {}, {name: {} for name in meta.get("networks", [])}, {}, {}
    for name, payload in chunks.items():
        kind, _, rest = name.partition("/")
        arr = _decode_array(payload, name)
        if kind == "cloud":
            cloud[rest] = arr
        elif kind == "net":
            net, _, pname = rest.partition("/")
            networks.setdefault(net, {})[pname] = arr
        elif kind == "adam_m":
            m[rest] = arr
        elif kind == "adam_v":
            v[rest] = arr
        else:
            raise MalformedFile(f"unknown chunk {name!r}")
    if set(m) != set(v):
        raise MalformedFile("optimizer first and second moments do not match")
    for key in GaussianCloud.PARAM_FIELDS:
        if key not in cloud:
            raise MalformedFile(f"checkpoint is missing cloud field {key!r}")
    return Checkpoint(cloud, networks, {k: (m[k], v[k]) for k in m}, meta.get("steps", {}),
                      meta.get("iteration", 0), meta.get("config", {}), meta.get("rng_state"), version)


def checkpoint_from_trainer(trainer) -> Checkpoint:
    from .trainer import config_dict

    cloud = trainer.model.cloud
    arrays = {name: getattr(cloud, name).copy() for name in cloud.param_fields() + _CLOUD_EXTRA}
    opt = trainer.optimizer
    return Checkpoint(
        cloud=arrays,
        networks={name: net.state_dict() for name, net in trainer.model.all_networks().items()},
        moments={k: (opt.m[k].copy(), opt.v[k].copy()) for k in opt.m},
        steps=dict(opt.t),
        iteration=trainer.iteration,
        config={"model": config_dict(trainer.model.config), "train": config_dict(trainer.config)},
        rng_state=trainer.rng.bit_generator.state,
    )


def trainer_from_checkpoint(ckpt: Checkpoint, dataset, train_indices=None):
    """Rebuild a trainer that continues exactly where the checkpoint left off."""
    from .trainer import Adam, TrainConfig, Trainer

    config = TrainConfig(**ckpt.config.get("train", {}))
    trainer = Trainer(ckpt.build_model(), dataset, config, train_indices)
    trainer.iteration = ckpt.iteration
    opt = Adam()
    for name, (m, v) in ckpt.moments.items():
        opt.m[name], opt.v[name] = m.copy(), v.copy()
    opt.t = {k: int(t) for k, t in ckpt.steps.items()}
    trainer.optimizer = opt
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    return trainer
