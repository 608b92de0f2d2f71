"""Portable checkpoint format.

A checkpoint is a directory holding manifest.json and weights.bin. The
manifest carries a format version, the run configuration, and a tensor
index mapping each name to (dtype, shape, byte offset, length) into the
single weights file of little-endian float32 values in row-major order.
The declared byte ranges tile weights.bin exactly; save -> load -> save
reproduces identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_tensors(directory: str, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write manifest.json + weights.bin atomically under `directory`."""
    os.makedirs(directory, exist_ok=True)
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        index[name] = {
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "tensors": index,
        "total_bytes": offset,
    }
    _atomic_write(os.path.join(directory, "weights.bin"), b"".join(blobs))
    _atomic_write(
        os.path.join(directory, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True).encode(),
    )


def load_tensors(directory: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; verifies the index tiles weights.bin exactly."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    with open(os.path.join(directory, "weights.bin"), "rb") as fh:
        blob = fh.read()
    index = manifest["tensors"]
    spans = sorted((e["offset"], e["length"]) for e in index.values())
    at = 0
    for off, ln in spans:
        if off != at:
            raise ValueError("tensor index does not tile weights.bin")
        at = off + ln
    if at != len(blob) or manifest["total_bytes"] != len(blob):
        raise ValueError("weights.bin size does not match the manifest")
    tensors = {}
    for name, entry in index.items():
        arr = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        )
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float64)
    return tensors, manifest["config"]


def save_denoiser(directory: str, model, extra_config: dict | None = None, optimizer=None, step: int | None = None) -> None:
    from .denoiser import Denoiser  # noqa: F401  (type only)

    cfg = {
        "kind": "denoiser",
        "model": vars(model.config).copy() if hasattr(model.config, "__dict__") else dict(model.config.__dict__),
        "vocab": list(model.vocab.tokens),
        "trainable": {n: bool(v) for n, v in sorted(model.store.trainable.items())},
        "adapter_cond_dim": model.adapter_cond_dim,
    }
    if step is not None:
        cfg["step"] = int(step)
    if extra_config:
        cfg.update(extra_config)
    tensors = dict(model.store.params)
    if optimizer is not None:
        cfg["optimizer_step"] = int(optimizer.step_count)
        for n in model.store.trainable_names():
            tensors[f"opt.m.{n}"] = optimizer.m[n]
            tensors[f"opt.v.{n}"] = optimizer.v[n]
    save_tensors(directory, tensors, cfg)


def load_denoiser(directory: str):
    """Rebuild a Denoiser (plus optimizer moments if present). Returns
    (model, config_dict, opt_state) where opt_state is None or
    (step_count, m, v)."""
    from dataclasses import fields

    from .denoiser import Denoiser, DenoiserConfig
    from .vocab import build_vocab

    tensors, cfg = load_tensors(directory)
    if cfg.get("kind") != "denoiser":
        raise ValueError(f"checkpoint holds a {cfg.get('kind')}, not a denoiser")
    allowed = {f.name for f in fields(DenoiserConfig)}
    model_cfg = DenoiserConfig(**{k: v for k, v in cfg["model"].items() if k in allowed})
    specials = {"[X]", "[PAD]", "[BOS]", "[EOS]"}
    body = [t for t in cfg["vocab"] if t not in specials]
    vocab = build_vocab(body)
    if list(vocab.tokens) != list(cfg["vocab"]):
        raise ValueError("checkpoint vocab does not round-trip")
    model = Denoiser(model_cfg, vocab, seed=0)
    if cfg.get("adapter_cond_dim") is not None:
        model.attach_adapter(int(cfg["adapter_cond_dim"]))
    opt_m, opt_v = {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            if name not in model.store.params:
                raise ValueError(f"unexpected tensor {name}")
            if tuple(model.store.params[name].shape) != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {name}")
            model.store.params[name][...] = arr
    for name, flag in cfg.get("trainable", {}).items():
        model.store.trainable[name] = bool(flag)
    opt_state = None
    if "optimizer_step" in cfg:
        opt_state = (int(cfg["optimizer_step"]), opt_m, opt_v)
    return model, cfg, opt_state


def save_labeler(directory: str, gm, extra_config: dict | None = None) -> None:
    cfg = {
        "kind": "labeler",
        "vocab": list(gm.vocab.tokens),
        "num_classes": gm.num_classes,
        "window": gm.window,
        "embed_dim": gm.embed_dim,
        "hidden": int(gm.store.params["h1.w"].shape[1]),
    }
    if extra_config:
        cfg.update(extra_config)
    save_tensors(directory, dict(gm.store.params), cfg)


def load_labeler(directory: str):
    from .guidance import WindowLabeler
    from .vocab import build_vocab

    tensors, cfg = load_tensors(directory)
    if cfg.get("kind") != "labeler":
        raise ValueError(f"checkpoint holds a {cfg.get('kind')}, not a labeler")
    specials = {"[X]", "[PAD]", "[BOS]", "[EOS]"}
    body = [t for t in cfg["vocab"] if t not in specials]
    gm = WindowLabeler(
        build_vocab(body), num_classes=cfg["num_classes"], window=cfg["window"],
        embed_dim=cfg["embed_dim"], hidden=cfg["hidden"],
    )
    for name, arr in tensors.items():
        gm.store.params[name][...] = arr
    return gm, cfg
