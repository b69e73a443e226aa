"""Weight container and companion config file I/O.

Container layout: an 8-byte little-endian unsigned header length, then that
many bytes of UTF-8 JSON mapping canonical tensor names to
{"dtype", "shape", "byte_offset", "byte_length"}, then raw little-endian
row-major tensor payloads. Offsets are relative to the end of the header.
Tensors are laid out in sorted-name order, which makes write -> read ->
write a byte-identical round trip.

The companion config file is JSON: the ModelConfig fields, per-channel
normalization constants, and optional reference dumps keyed by the sha256 of
the fixture image file ({"logits": [...], "tokens": [[...]]} recorded at
real32 by the exporter).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, ModelError
from .model import ModelBundle, ModelConfig

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise ModelError(f"{name}: unsupported dtype {arr.dtype}")
        nbytes = arr.size * arr.itemsize
        header[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_length": nbytes,
        }
        offset += nbytes
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            arr = np.ascontiguousarray(tensors[name])
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise InputError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: bad container header: {exc}") from exc
    payload = raw[8 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        dtype = _DTYPES.get(meta.get("dtype"))
        if dtype is None:
            raise InputError(f"{path}: {name}: unknown dtype {meta.get('dtype')}")
        shape = tuple(int(s) for s in meta["shape"])
        off, ln = int(meta["byte_offset"]), int(meta["byte_length"])
        count = int(np.prod(shape)) if shape else 1
        if count * dtype.itemsize != ln:
            raise InputError(f"{path}: {name}: byte_length {ln} inconsistent with shape {shape}")
        if off + ln > len(payload):
            raise InputError(f"{path}: {name}: payload out of range")
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape)
    return tensors


def write_config(
    path: str | Path,
    config: ModelConfig,
    norm_mean=(0.0, 0.0, 0.0),
    norm_std=(1.0, 1.0, 1.0),
    reference_dumps: dict | None = None,
) -> None:
    doc = {
        "model": {
            "image_size": config.image_size,
            "patch_size": config.patch_size,
            "d_model": config.d_model,
            "n_heads": config.n_heads,
            "n_blocks": config.n_blocks,
            "d_ff": config.d_ff,
            "n_classes": config.n_classes,
            "layernorm_eps": config.layernorm_eps,
        },
        "normalize": {"mean": list(map(float, norm_mean)), "std": list(map(float, norm_std))},
    }
    if reference_dumps:
        doc["reference_dumps"] = reference_dumps
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def read_config(path: str | Path) -> tuple[ModelConfig, np.ndarray, np.ndarray, dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        m = doc["model"]
        config = ModelConfig(
            image_size=int(m["image_size"]),
            patch_size=int(m["patch_size"]),
            d_model=int(m["d_model"]),
            n_heads=int(m["n_heads"]),
            n_blocks=int(m["n_blocks"]),
            d_ff=int(m["d_ff"]),
            n_classes=int(m["n_classes"]),
            layernorm_eps=float(m.get("layernorm_eps", 1e-6)),
        )
    except KeyError as exc:
        raise InputError(f"config {path} missing field {exc}") from exc
    norm = doc.get("normalize", {})
    mean = np.asarray(norm.get("mean", [0.0, 0.0, 0.0]), dtype=np.float64)
    std = np.asarray(norm.get("std", [1.0, 1.0, 1.0]), dtype=np.float64)
    return config, mean, std, doc.get("reference_dumps", {})


def save_bundle(bundle: ModelBundle, weights_path: str | Path, config_path: str | Path) -> None:
    write_container(weights_path, bundle.weights)
    write_config(
        config_path,
        bundle.config,
        bundle.norm_mean,
        bundle.norm_std,
        bundle.reference_dumps or None,
    )


def load_bundle(weights_path: str | Path, config_path: str | Path) -> ModelBundle:
    config, mean, std, dumps = read_config(config_path)
    try:
        weights = read_container(weights_path)
    except OSError as exc:
        raise InputError(f"cannot read weights {weights_path}: {exc}") from exc
    bundle = ModelBundle(
        config=config, weights=weights, norm_mean=mean, norm_std=std, reference_dumps=dumps
    )
    bundle.validate()
    return bundle
