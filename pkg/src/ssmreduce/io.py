"""On-disk formats.

Both formats are a directory holding ``manifest.json`` plus one raw
little-endian, row-major binary file per tensor. Complex tensors are stored
as interleaved ``(re, im)`` pairs.

* system directories: f64 tensors, ``"kind": "dense_system" | "diagonal_system"``
* checkpoints: f32 tensors, ``"kind": "lru_checkpoint"``, ``"format": 1``
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .lti import DenseSystem, DiagonalSystem
from .ssm import LruBlock, LruModel, ModelConfig, config_dict

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _write_tensor(directory: Path, name, arr, real_dtype):
    arr = np.asarray(arr)
    is_complex = np.iscomplexobj(arr)
    if is_complex:
        cdt = "<c16" if real_dtype == "<f8" else "<c8"
        raw = np.ascontiguousarray(arr.astype(cdt)).view(real_dtype)
    else:
        raw = np.ascontiguousarray(arr.astype(real_dtype))
    fname = name + ".bin"
    raw.tofile(directory / fname)
    return {"file": fname, "shape": list(arr.shape), "complex": bool(is_complex)}


def _read_tensor(directory: Path, spec, real_dtype):
    path = directory / spec["file"]
    if not path.is_file():
        raise FormatError(f"missing tensor file {path}")
    raw = np.fromfile(path, dtype=real_dtype)
    shape = tuple(spec["shape"])
    count = int(np.prod(shape)) * (2 if spec.get("complex") else 1)
    if raw.size != count:
        raise FormatError(f"{path}: expected {count} values, found {raw.size}")
    if spec.get("complex"):
        raw = raw.view("<c16" if real_dtype == "<f8" else "<c8")
    return raw.reshape(shape).astype(complex if spec.get("complex") else float)


def read_manifest(path):
    path = Path(path)
    mf = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint or system directory: {path}")
    if not mf.is_file():
        raise FormatError(f"{path} has no {MANIFEST}")
    try:
        with open(mf) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mf}: {exc}") from exc


def _write_manifest(path: Path, manifest):
    tmp = path / (MANIFEST + ".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, path / MANIFEST)


# --------------------------------------------------------------------------
# systems


def save_system(sys, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(sys, DiagonalSystem):
        fields = {"a": sys.a, "B": sys.B, "C": sys.C, "D": sys.D}
        kind = "diagonal_system"
    else:
        fields = {"A": sys.A, "B": sys.B, "C": sys.C, "D": sys.D}
        kind = "dense_system"
    tensors = {k: _write_tensor(path, k, v, "<f8") for k, v in fields.items()}
    manifest = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "dims": {"n": sys.n, "p": sys.p, "q": sys.q},
        "dtype": "f64",
        "complex_as_pairs": True,
        "fields": list(fields),
        "tensors": tensors,
        "post_update_readout": bool(sys.post_update_readout),
    }
    if isinstance(sys, DiagonalSystem):
        manifest["real_part_readout"] = bool(sys.real_part_readout)
    _write_manifest(path, manifest)
    return path


def load_system(path):
    path = Path(path)
    m = read_manifest(path)
    if m.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format {m.get('format')!r}")
    t = {k: _read_tensor(path, spec, "<f8") for k, spec in m["tensors"].items()}
    D = t["D"].real
    if m["kind"] == "diagonal_system":
        return DiagonalSystem(t["a"], t["B"], t["C"], D, real_part_readout=m.get("real_part_readout", False),
                              post_update_readout=m.get("post_update_readout", False))
    if m["kind"] == "dense_system":
        A, B, C = t["A"], t["B"], t["C"]
        if not any(spec["complex"] for spec in m["tensors"].values()):
            A, B, C = A.real, B.real, C.real
        return DenseSystem(A, B, C, D, post_update_readout=m.get("post_update_readout", False))
    raise FormatError(f"{path}: unknown system kind {m['kind']!r}")


# --------------------------------------------------------------------------
# checkpoints


def _model_tensors(model: LruModel):
    out = {"embed.W": model.embed_W, "embed.b": model.embed_b,
           "head.W": model.head_W, "head.b": model.head_b}
    for i, b in enumerate(model.blocks):
        p = f"blocks.{i}."
        out.update({p + "nu": b.nu, p + "theta": b.theta, p + "B": b.B, p + "C": b.C,
                    p + "D": b.D, p + "ln.gamma": b.ln_gamma, p + "ln.beta": b.ln_beta})
    return out


def save_checkpoint(model: LruModel, path, step=0, seed=0, policy=None, optimizer_state=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {k: _write_tensor(path, k, v, "<f4") for k, v in _model_tensors(model).items()}
    opt = None
    if optimizer_state is not None:
        opt = {"t": optimizer_state.t, "m": {}, "v": {}}
        for kind, store in (("m", optimizer_state.m), ("v", optimizer_state.v)):
            for k, v in store.items():
                opt[kind][k] = _write_tensor(path, f"adam.{kind}.{k}", v, "<f4")
    manifest = {
        "format": FORMAT_VERSION,
        "kind": "lru_checkpoint",
        "architecture": config_dict(model.config),
        "block_orders": model.orders,
        "step": int(step),
        "seed": int(seed),
        "policy": policy,
        "tensors": tensors,
        "optimizer": opt,
    }
    if extra:
        manifest["extra"] = extra
    _write_manifest(path, manifest)
    return path


def load_checkpoint(path, with_optimizer=False):
    """Returns ``(model, manifest)`` or ``(model, manifest, optimizer_state)``."""
    from .train import AdamState

    path = Path(path)
    m = read_manifest(path)
    if m.get("kind") != "lru_checkpoint":
        raise FormatError(f"{path}: not a checkpoint (kind={m.get('kind')!r})")
    if m.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format {m.get('format')!r}")
    t = {k: _read_tensor(path, spec, "<f4") for k, spec in m["tensors"].items()}
    try:
        cfg = ModelConfig(**m["architecture"])
        blocks = []
        for i in range(cfg.depth):
            p = f"blocks.{i}."
            blocks.append(LruBlock(t[p + "nu"].real, t[p + "theta"].real, t[p + "B"].astype(complex),
                                   t[p + "C"].astype(complex), t[p + "D"].real,
                                   t[p + "ln.gamma"].real, t[p + "ln.beta"].real))
        model = LruModel(cfg, t["embed.W"].real, t["embed.b"].real, blocks,
                         t["head.W"].real, t["head.b"].real)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint ({exc})") from exc
    if model.orders != list(m.get("block_orders", model.orders)):
        raise FormatError(f"{path}: block orders disagree with manifest")
    if not with_optimizer:
        return model, m
    state = None
    if m.get("optimizer"):
        o = m["optimizer"]
        state = AdamState(t=o["t"])
        for kind, store in (("m", state.m), ("v", state.v)):
            for k, spec in o[kind].items():
                store[k] = _read_tensor(path, spec, "<f4").real
    return model, m, state


def is_checkpoint(path):
    try:
        return read_manifest(path).get("kind") == "lru_checkpoint"
    except (FormatError, FileNotFoundError):
        return False
