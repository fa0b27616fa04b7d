"""Named-tensor checkpoint container and the validated WeightStore.

The on-disk layout is the common safetensors layout: an 8-byte
little-endian header length, a JSON header mapping each tensor name to
``{"dtype", "shape", "data_offsets"}``, then one raw little-endian buffer.
"""
from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .config import ModelConfig
from .errors import DecodeError, DimensionError, MissingParameterError

log = logging.getLogger(__name__)

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2"), "F64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype("float32"): "F32", np.dtype("float16"): "F16", np.dtype("float64"): "F64"}


def write_container(path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        try:
            code = _DTYPE_NAMES[arr.dtype]
        except KeyError:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}") from None
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blob = json.dumps(header, separators=(",", ":")).encode()
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, metadata)`` with tensors in their stored dtype."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DecodeError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise DecodeError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[8 : 8 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"{path}: bad header: {exc}") from exc
    buf = memoryview(data)[8 + hlen :]
    metadata = header.pop("__metadata__", {}) or {}
    tensors = {}
    for name, info in header.items():
        dtype = _DTYPES.get(info["dtype"])
        if dtype is None:
            raise DecodeError(f"{path}: tensor {name} has unsupported dtype {info['dtype']}")
        begin, end = info["data_offsets"]
        shape = tuple(info["shape"])
        if end - begin != dtype.itemsize * int(np.prod(shape, dtype=np.int64)) or end > len(buf):
            raise DecodeError(f"{path}: tensor {name} offsets do not match its shape")
        tensors[name] = np.frombuffer(buf[begin:end], dtype=dtype).reshape(shape).copy()
    return tensors, metadata


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, n, p = config.embed_dim, config.mlp_hidden, config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3, p, p),
        "pos_embed": (config.n_prefix + config.n_patches, d),
    }
    if config.patch_bias:
        shapes["patch_embed.bias"] = (d,)
    if config.has_cls:
        shapes["cls_token"] = (d,)
    if config.ln_pre:
        shapes["ln_pre.weight"] = (d,)
        shapes["ln_pre.bias"] = (d,)
    for i in range(config.n_layers):
        b = f"blocks.{i}"
        shapes.update({
            f"{b}.norm1.weight": (d,), f"{b}.norm1.bias": (d,),
            f"{b}.attn.qkv.weight": (3 * d, d), f"{b}.attn.qkv.bias": (3 * d,),
            f"{b}.attn.proj.weight": (d, d), f"{b}.attn.proj.bias": (d,),
            f"{b}.norm2.weight": (d,), f"{b}.norm2.bias": (d,),
            f"{b}.mlp.fc1.weight": (n, d), f"{b}.mlp.fc1.bias": (n,),
            f"{b}.mlp.fc2.weight": (d, n), f"{b}.mlp.fc2.bias": (d,),
        })
        if config.layer_scale:
            shapes[f"{b}.ls1.gamma"] = (d,)
            shapes[f"{b}.ls2.gamma"] = (d,)
    if config.final_norm:
        shapes["norm.weight"] = (d,)
        shapes["norm.bias"] = (d,)
    return shapes


class WeightStore(Mapping):
    """Read-only mapping of canonical parameter names to float32 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray], config: ModelConfig):
        shapes = expected_shapes(config)
        missing = [k for k in shapes if k not in tensors]
        if missing:
            raise MissingParameterError(missing)
        store = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if tuple(arr.shape) != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tuple(arr.shape)}")
            arr = np.array(arr, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            store[name] = arr
        extra = sorted(set(tensors) - set(shapes))
        if extra:
            log.warning("ignoring %d unexpected parameters: %s", len(extra), ", ".join(extra[:8]))
        self.config = config
        self._store = MappingProxyType(store)

    def __getitem__(self, key: str) -> np.ndarray:
        return self._store[key]

    def __iter__(self):
        return iter(self._store)

    def __len__(self) -> int:
        return len(self._store)

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self._store.items() if k.startswith(prefix)}

    def to_bytes_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._store):
            h.update(name.encode())
            h.update(self._store[name].tobytes())
        return h.hexdigest()


def load_remap(path) -> dict[str, str]:
    """Read a JSON sidecar mapping canonical name -> name inside the source file."""
    with open(path) as fh:
        remap = json.load(fh)
    if not isinstance(remap, dict):
        raise DecodeError(f"{path}: remap sidecar must be a JSON object")
    return {str(k): str(v) for k, v in remap.items()}


def load_weights(path, config: ModelConfig, remap: Mapping[str, str] | None = None) -> WeightStore:
    return load_model(path, config, remap)[0]


def load_model(
    path, config: ModelConfig | None = None, remap: Mapping[str, str] | None = None
) -> tuple[WeightStore, ModelConfig]:
    """Load a container; without ``config`` the one embedded in its metadata is used."""
    raw, meta = read_container(path)
    if config is None:
        if "config" not in meta:
            raise MissingParameterError(["config (container carries no embedded ModelConfig)"])
        config = ModelConfig.from_dict(json.loads(meta["config"]))
    if remap:
        renamed = dict(raw)
        for canonical, source in remap.items():
            if source in raw:
                renamed[canonical] = raw[source]
                if source != canonical:
                    renamed.pop(source, None)
        raw = renamed
    return WeightStore(raw, config), config


def save_weights(path, weights: Mapping[str, np.ndarray], config: ModelConfig | None = None) -> None:
    meta = {"config": json.dumps(config.to_dict())} if config is not None else None
    write_container(path, {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}, meta)
