"""On-disk bundle format and small JSON helpers.

A bundle is a directory holding ``manifest.json`` plus one ``<name>.bin``
per tensor. Dense tensors are raw 8-bit codes in row-major order; the
embedding table uses the bitmask layout from ``edgeinfer.sparse``. The
manifest carries the config, spans, layer-norm parameters and, per tensor,
its shape and number format.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import AttentionSpans, EncoderBundle, EncoderConfig, OffRamp
from .numerics import FloatFormat, QuantTensor
from .sparse import BitmaskTensor, from_bytes, to_bytes

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1

_DENSE = ("embed_proj", "wq", "wk", "wv", "wo", "w1", "w2")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _dense_entry(name: str, t: QuantTensor) -> dict:
    return {
        "file": f"{name}.bin",
        "encoding": "dense",
        "shape": list(t.shape),
        "exponent_bits": t.format.exponent_bits,
        "exponent_bias": t.format.exponent_bias,
    }


def save_bundle(bundle: EncoderBundle, directory) -> None:
    d = Path(directory)
    tensors = {}
    for name in _DENSE:
        t = getattr(bundle, name)
        tensors[name] = _dense_entry(name, t)
        atomic_write(d / f"{name}.bin", t.codes.tobytes())
    for i, ramp in enumerate(bundle.offramps):
        for part in ("pooler", "classifier"):
            name = f"offramp{i}_{part}"
            t = getattr(ramp, part)
            tensors[name] = _dense_entry(name, t)
            atomic_write(d / f"{name}.bin", t.codes.tobytes())
    tensors["embedding"] = {"file": "embedding.bin", "encoding": "bitmask", "shape": list(bundle.embedding.shape)}
    atomic_write(d / "embedding.bin", to_bytes(bundle.embedding))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(bundle.config),
        "spans": list(bundle.spans),
        "layer_norm": {
            "attn": {"gamma": bundle.ln_attn[0].tolist(), "beta": bundle.ln_attn[1].tolist()},
            "ffn": {"gamma": bundle.ln_ffn[0].tolist(), "beta": bundle.ln_ffn[1].tolist()},
        },
        "tensors": tensors,
    }
    atomic_write(d / MANIFEST, dumps(manifest))


def _load_dense(d: Path, entry: dict) -> QuantTensor:
    raw = (d / entry["file"]).read_bytes()
    shape = tuple(entry["shape"])
    codes = np.frombuffer(raw, dtype=np.uint8)
    if codes.size != int(np.prod(shape)):
        raise ValueError(f"{entry['file']}: expected {int(np.prod(shape))} bytes, found {codes.size}")
    fmt = FloatFormat(entry["exponent_bits"], entry["exponent_bias"])
    return QuantTensor(codes.reshape(shape).copy(), fmt)


def load_bundle(directory) -> EncoderBundle:
    d = Path(directory)
    manifest_path = d / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no bundle manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    if m.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported bundle schema {m.get('schema_version')}")
    cfg = EncoderConfig(**m["config"])
    t = m["tensors"]
    dense = {name: _load_dense(d, t[name]) for name in _DENSE}
    ramps = tuple(
        OffRamp(_load_dense(d, t[f"offramp{i}_pooler"]), _load_dense(d, t[f"offramp{i}_classifier"]))
        for i in range(cfg.num_layers)
    )
    embedding = load_tensor(d / t["embedding"]["file"])
    ln = m["layer_norm"]
    arr = lambda site: (np.asarray(ln[site]["gamma"], dtype=np.float64), np.asarray(ln[site]["beta"], dtype=np.float64))
    return EncoderBundle(
        config=cfg,
        embedding=embedding,
        ln_attn=arr("attn"),
        ln_ffn=arr("ffn"),
        offramps=ramps,
        spans=AttentionSpans(m["spans"]),
        **dense,
    )


def load_tensor(path) -> BitmaskTensor:
    return from_bytes(Path(path).read_bytes())
