"""Checkpoint bundle IO: format tag "jtckpt-v1".

A bundle is a directory holding:
  meta.json       format tag + iteration counter
  config.json     model and train configs as key-value documents
  vocab.txt       one token per line, order preserved
  params.json     manifest: [{name, shape, offset}], float32 little-endian
  params.bin      concatenated parameter blobs
  optim.json      optimizer scalars + manifest for optim.bin
  optim.bin       first/second-moment blobs
  rng.json        bit-generator state

Everything round-trips bit-exactly so a resumed run reproduces an
unbroken one.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_TAG = "jtckpt-v1"
_BLOB_DTYPE = "<f4"  # little-endian float32


def _write_blobs(dirpath: Path, stem: str, arrays: dict[str, np.ndarray], extra: dict | None = None):
    manifest = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    doc = {"dtype": _BLOB_DTYPE, "entries": manifest}
    if extra:
        doc.update(extra)
    (dirpath / f"{stem}.json").write_text(json.dumps(doc, indent=1))
    (dirpath / f"{stem}.bin").write_bytes(b"".join(chunks))


def _read_blobs(dirpath: Path, stem: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads((dirpath / f"{stem}.json").read_text())
    raw = (dirpath / f"{stem}.bin").read_bytes()
    arrays = {}
    for entry in doc["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=doc["dtype"], count=n, offset=start
        ).reshape(shape).copy()
    extra = {k: v for k, v in doc.items() if k not in ("dtype", "entries")}
    return arrays, extra


def save_bundle(
    path,
    *,
    iteration: int,
    config: dict,
    vocab_lines: list[str],
    params: dict[str, np.ndarray],
    optim_arrays: dict[str, np.ndarray],
    optim_extra: dict,
    rng_state: dict,
) -> None:
    dirpath = Path(path)
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / "meta.json").write_text(json.dumps({"format": FORMAT_TAG, "iteration": iteration}))
    (dirpath / "config.json").write_text(json.dumps(config, indent=1))
    (dirpath / "vocab.txt").write_text("\n".join(vocab_lines) + "\n")
    _write_blobs(dirpath, "params", params)
    _write_blobs(dirpath, "optim", optim_arrays, extra=optim_extra)
    (dirpath / "rng.json").write_text(json.dumps(rng_state))


def load_bundle(path) -> dict:
    dirpath = Path(path)
    meta = json.loads((dirpath / "meta.json").read_text())
    if meta.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r} (want {FORMAT_TAG})")
    params, _ = _read_blobs(dirpath, "params")
    optim_arrays, optim_extra = _read_blobs(dirpath, "optim")
    return {
        "iteration": meta["iteration"],
        "config": json.loads((dirpath / "config.json").read_text()),
        "vocab_lines": (dirpath / "vocab.txt").read_text().splitlines(),
        "params": params,
        "optim_arrays": optim_arrays,
        "optim_extra": optim_extra,
        "rng_state": json.loads((dirpath / "rng.json").read_text()),
    }
