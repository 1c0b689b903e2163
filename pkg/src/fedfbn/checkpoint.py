"""Binary checkpoints: a JSON header plus raw float64 payloads.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then the concatenation of all tensors as little-endian float64. The header
carries a ``kind`` tag, arbitrary JSON metadata, and one entry per tensor
(key, shape, offset in floats, count). Writing and reading the same model
is bit-exact because the payload is the raw IEEE-754 bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError
from .network import BnParams, DenseParams, HEAD_PREFIX, Model, ModelSpec
from .numerics import Tensor

MAGIC = b"FBNCKPT1"
FORMAT_VERSION = 1


def write_archive(path, kind: str, meta: dict, tensors: dict[str, Tensor]) -> None:
    """Write a tensor map; iteration order of ``tensors`` fixes the layout."""
    entries = []
    blobs = []
    offset = 0
    for key, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append(
            {
                "key": key,
                "shape": list(arr.shape),
                "offset": offset,
                "count": int(arr.size),
            }
        )
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_archive(path) -> tuple[str, dict, dict[str, Tensor]]:
    """Inverse of write_archive; malformed files raise ParseError."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4:
        raise ParseError(f"{path}: truncated checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic, not a checkpoint file")
    (header_len,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    body_start = len(MAGIC) + 4
    if len(data) < body_start + header_len:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(data[body_start : body_start + header_len])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: header is not valid JSON: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(
            f"{path}: unsupported format_version {header.get('format_version')}"
        )
    payload = np.frombuffer(data[body_start + header_len :], dtype="<f8")
    tensors: dict[str, Tensor] = {}
    expected = 0
    for entry in header["entries"]:
        key, shape = entry["key"], tuple(entry["shape"])
        offset, count = entry["offset"], entry["count"]
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise ParseError(f"{path}: entry '{key}' shape/count mismatch")
        if offset + count > payload.size:
            raise ParseError(f"{path}: entry '{key}' runs past the payload")
        tensors[key] = (
            payload[offset : offset + count].astype(np.float64).reshape(shape)
        )
        expected = max(expected, offset + count)
    if payload.size != expected:
        raise ParseError(
            f"{path}: payload holds {payload.size} floats, header expects {expected}"
        )
    return header["kind"], header["meta"], tensors


def spec_meta(spec: ModelSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "label_names": list(spec.label_names),
        "bn_momentum": spec.bn_momentum,
        "bn_eps": spec.bn_eps,
    }


def spec_from_meta(meta: dict) -> ModelSpec:
    try:
        return ModelSpec(
            input_dim=int(meta["input_dim"]),
            hidden_dims=tuple(int(h) for h in meta["hidden_dims"]),
            label_names=tuple(meta["label_names"]),
            bn_momentum=float(meta["bn_momentum"]),
            bn_eps=float(meta["bn_eps"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid model spec metadata: {exc}") from None


def model_tensors(model: Model) -> dict[str, Tensor]:
    """Canonical flat view: trunk layers in forward order, heads by spec order."""
    out: dict[str, Tensor] = {}
    for name, params in model.layers.items():
        if isinstance(params, DenseParams):
            out[f"{name}/weight"] = params.weight
            out[f"{name}/bias"] = params.bias
        else:
            out[f"{name}/gamma"] = params.gamma
            out[f"{name}/beta"] = params.beta
            out[f"{name}/running_mean"] = params.running_mean
            out[f"{name}/running_var"] = params.running_var
    for label in model.spec.label_names:
        head = model.heads[label]
        out[f"{HEAD_PREFIX}{label}/weight"] = head.weight
        out[f"{HEAD_PREFIX}{label}/bias"] = head.bias
    return out


def save_model(model: Model, path) -> None:
    write_archive(path, "model", {"spec": spec_meta(model.spec)}, model_tensors(model))


def _take(tensors: dict[str, Tensor], key: str, path) -> Tensor:
    if key not in tensors:
        raise ParseError(f"{path}: missing tensor '{key}'")
    return tensors.pop(key)


def load_model(path) -> Model:
    kind, meta, tensors = read_archive(path)
    if kind != "model":
        raise ParseError(f"{path}: expected a model checkpoint, got kind '{kind}'")
    spec = spec_from_meta(meta.get("spec", {}))
    layers: dict[str, DenseParams | BnParams] = {}
    for i in range(len(spec.hidden_dims)):
        layers[f"dense{i}"] = DenseParams(
            weight=_take(tensors, f"dense{i}/weight", path),
            bias=_take(tensors, f"dense{i}/bias", path),
        )
        layers[f"bn{i}"] = BnParams(
            gamma=_take(tensors, f"bn{i}/gamma", path),
            beta=_take(tensors, f"bn{i}/beta", path),
            running_mean=_take(tensors, f"bn{i}/running_mean", path),
            running_var=_take(tensors, f"bn{i}/running_var", path),
        )
    heads = {}
    for label in spec.label_names:
        heads[label] = DenseParams(
            weight=_take(tensors, f"{HEAD_PREFIX}{label}/weight", path),
            bias=_take(tensors, f"{HEAD_PREFIX}{label}/bias", path),
        )
    if tensors:
        raise ParseError(f"{path}: unexpected tensors {sorted(tensors)}")
    model = Model(spec=spec, layers=layers, heads=heads)
    _validate_shapes(model, path)
    return model


def _validate_shapes(model: Model, path) -> None:
    spec = model.spec
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        dense = model.layers[f"dense{i}"]
        if dense.weight.shape != (fan_in, width) or dense.bias.shape != (width,):
            raise ParseError(f"{path}: dense{i} tensors have the wrong shape")
        bn = model.layers[f"bn{i}"]
        for t in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
            if t.shape != (width,):
                raise ParseError(f"{path}: bn{i} tensors have the wrong shape")
        fan_in = width
    for label, head in model.heads.items():
        if head.weight.shape != (fan_in, 1) or head.bias.shape != (1,):
            raise ParseError(f"{path}: head '{label}' has the wrong shape")
