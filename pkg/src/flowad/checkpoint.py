"""Versioned binary checkpoint container.

Layout (little-endian):

    magic   b"FLOW"
    version u32 (currently 1)
    variant u16 length + utf-8 string
    header  u32 length + utf-8 JSON (model config echo + actnorm state)
    count   u32 number of tensors
    tensors u32 ndim, ndim * u32 dims, then size * f64 values

Tensors appear in parameter declaration order, so a rebuilt model restores
bit-exactly.
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .models import ModelConfig, build_variant

MAGIC = b"FLOW"
VERSION = 1


def save_model(model, path):
    header = {
        "config": model.config.to_dict(),
        "actnorm_initialized": [l.initialized for l in model.actnorm_layers()],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    variant = model.variant.encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<H", len(variant)))
        f.write(variant)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            arr = p.value.data
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_model(path):
    """Rebuild the model from its config echo and restore all parameters."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("not a flow checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (vlen,) = struct.unpack("<H", _read_exact(f, 2, "variant length"))
        variant = _read_exact(f, vlen, "variant").decode("utf-8")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        if config.variant != variant:
            raise FormatError(f"variant tag {variant!r} disagrees with config")
        model = build_variant(config)
        params = model.parameters()
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        if count != len(params):
            raise FormatError(f"checkpoint has {count} tensors, model expects {len(params)}")
        for p in params:
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            if tuple(shape) != p.value.shape:
                raise FormatError(f"tensor shape {shape} != expected {p.value.shape}")
            n = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(_read_exact(f, 8 * n, "values"), dtype="<f8")
            p.assign(vals.reshape(shape))
        flags = header.get("actnorm_initialized", [])
        for layer, flag in zip(model.actnorm_layers(), flags):
            layer.initialized = bool(flag)
    return model
