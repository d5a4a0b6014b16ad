"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SVE1"                      magic
    uint32 version               FORMAT_VERSION
    uint32 header_len
    header                       UTF-8 JSON, sorted keys
    payload                      float64 little-endian arrays, back to back
    sha256(all preceding bytes)  32 bytes

The header records the rng algorithm id, a hash of the model spec, the spec
itself, free-form metadata, and for every array its name, shape and byte
offset into the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError, LengthError
from .layers import PlainLinear, SveLinear
from .models import DeepEnsemble, EnsembleModel
from .rng import ALGORITHM_ID

MAGIC = b"SVE1"
FORMAT_VERSION = 1
_DIGEST = 32


def spec_hash(spec):
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _model_arrays(model):
    return model.state()


def _model_layout(model):
    return {
        "spec": model.spec,
        "layers": {name: {"kind": layer.kind,
                          "factored": bool(getattr(layer, "factored", True)),
                          "trainable": bool(layer.parameters())}
                   for name, layer in model.layers.items()},
    }


def encode(model, metadata=None):
    if isinstance(model, DeepEnsemble):
        arrays, layout = {}, {"kind": "deep_ensemble", "members": []}
        for k, m in enumerate(model.members):
            for name, arr in _model_arrays(m).items():
                arrays[f"member{k}/{name}"] = arr
            layout["members"].append(_model_layout(m))
    else:
        arrays = _model_arrays(model)
        layout = dict(kind="ensemble", **_model_layout(model))
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "rng_algorithm": ALGORITHM_ID,
        "spec_hash": spec_hash(model.spec),
        "layout": layout,
        "metadata": metadata or {},
        "arrays": entries,
        "payload_bytes": offset,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hjson)) + hjson + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model, path, metadata=None):
    blob = encode(model, metadata)
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def decode(blob):
    """Parse bytes into (header, {name: array})."""
    if len(blob) < 12:
        raise LengthError(f"checkpoint truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(blob) < 12 + hlen:
        raise LengthError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    start = 12 + hlen
    need = start + header["payload_bytes"] + _DIGEST
    if len(blob) != need:
        raise LengthError(f"checkpoint has {len(blob)} bytes, expected {need}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = blob[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header, arrays


def _rebuild(layout, arrays, prefix=""):
    spec = layout["spec"]
    layers = {}
    for name, info in layout["layers"].items():
        get = lambda key: arrays.get(f"{prefix}layers/{name}/{key}")  # noqa: E731
        if info["kind"] == "sve":
            layer = SveLinear(get("u"), get("vt"), get("sigma_pretrained"), list(get("sigma_members")),
                              bias=get("bias"), name=name)
            layer.factored = info["factored"]
        else:
            layer = PlainLinear(get("weight"), get("bias"), name=name, trainable=info["trainable"])
        layers[name] = layer
    heads = []
    for k in range(spec["n_members"]):
        heads.append(PlainLinear(arrays[f"{prefix}heads/{k}/weight"], arrays.get(f"{prefix}heads/{k}/bias"),
                                 name=f"head{k}"))
    frozen = {key[len(prefix) + len("frozen/"):]: arr for key, arr in arrays.items()
              if key.startswith(f"{prefix}frozen/")}
    model = EnsembleModel(spec["arch"], layers, heads, spec, frozen or None)
    model.mode = "eval"
    return model


def load_checkpoint(path, return_header=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    header, arrays = decode(blob)
    layout = header["layout"]
    if layout["kind"] == "deep_ensemble":
        model = DeepEnsemble([_rebuild(m, arrays, f"member{k}/") for k, m in enumerate(layout["members"])])
    else:
        model = _rebuild(layout, arrays)
    if spec_hash(model.spec) != header["spec_hash"]:
        raise FormatError("model spec hash does not match the header")
    return (model, header) if return_header else model
