"""``MVPCKPT1`` checkpoint files.

Layout::

    MVPCKPT1\\n
    key: value\\n        (one per line)
    ...
    \\n                   (blank line ends the header)
    <payload>            little-endian float32, ``count`` values

Prompt checkpoints store ``N*p*d`` floats in layer-major, token-major,
dim-minor order. Backbone checkpoints store the arrays of
:meth:`BackboneWeights.named_arrays` back to back, each row-major.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from mvp.prompts import PromptBank
from mvp.vit import BackboneWeights, ViTConfig, from_named_arrays, weight_shapes

MAGIC = b"MVPCKPT1"
_PAYLOAD = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class DimMismatchError(CheckpointError):
    pass


def _write(path, header: dict[str, object], payload: np.ndarray) -> None:
    payload = np.ascontiguousarray(payload, dtype=_PAYLOAD)
    lines = [MAGIC.decode()] + [f"{k}: {v}" for k, v in header.items()]
    lines.append(f"count: {payload.size}")
    blob = ("\n".join(lines) + "\n\n").encode("ascii") + payload.tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _read(path) -> tuple[dict[str, str], bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC + b"\n"):
        raise BadMagicError(f"{path}: bad magic, expected {MAGIC.decode()}")
    end = data.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise TruncatedPayloadError(f"{path}: truncated header")
    header = {}
    for line in data[len(MAGIC) + 1:end].decode("ascii").splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header, data[end + 2:]


def _payload(path, header: dict[str, str], body: bytes, expected: int) -> np.ndarray:
    declared = int(header.get("count", expected))
    if declared != expected:
        raise DimMismatchError(
            f"{path}: header dims imply {expected} values but payload holds {declared}")
    have = len(body) // _PAYLOAD.itemsize
    if len(body) < expected * _PAYLOAD.itemsize:
        raise TruncatedPayloadError(f"{path}: truncated payload, {have} of {expected} values")
    if len(body) > expected * _PAYLOAD.itemsize:
        raise DimMismatchError(f"{path}: payload longer than header dims allow")
    return np.frombuffer(body, dtype=_PAYLOAD).copy()


def save_checkpoint(bank: PromptBank, path, digest: str = "", extra: dict | None = None) -> None:
    header = {"kind": "prompts", "d": bank.dim, "N": bank.num_layers, "p": bank.num_tokens,
              "seed": bank.seed, "precision": np.dtype(bank.dtype).name}
    if digest:
        header["digest"] = digest
    header.update(extra or {})
    flat = np.concatenate([a.reshape(-1) for a in bank.prompts]) if bank.prompts else np.zeros(0)
    _write(path, header, flat)


def load_checkpoint(path) -> PromptBank:
    header, body = _read(path)
    try:
        d, n, p = int(header["d"]), int(header["N"]), int(header["p"])
    except KeyError as err:
        raise CheckpointError(f"{path}: header lacks {err}") from None
    flat = _payload(path, header, body, n * p * d)
    dtype = np.dtype(header.get("precision", "float32"))
    arrays = flat.reshape(n, p, d).astype(dtype)
    return PromptBank(tuple(arrays[i].copy() for i in range(n)), int(header.get("seed", 0)))


def read_header(path) -> dict[str, str]:
    return _read(path)[0]


_CFG_KEYS = ("image_height", "image_width", "patch_height", "patch_width", "embed_dim",
             "num_layers", "num_heads", "mlp_ratio")


def save_backbone(weights: BackboneWeights, path, seed: int | None = None) -> None:
    header: dict[str, object] = {"kind": "backbone"}
    header.update({k: getattr(weights.cfg, k) for k in _CFG_KEYS})
    if seed is not None:
        header["seed"] = seed
    header["precision"] = np.dtype(weights.dtype).name
    flat = np.concatenate([a.reshape(-1) for _, a in weights.named_arrays()])
    _write(path, header, flat)


def load_backbone(path) -> BackboneWeights:
    header, body = _read(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    cfg = ViTConfig(**{k: int(header[k]) for k in _CFG_KEYS})
    template = weight_shapes(cfg)
    total = sum(int(np.prod(s)) for _, s in template)
    flat = _payload(path, header, body, total)
    dtype = np.dtype(header.get("precision", "float32"))
    arrays, offset = {}, 0
    for name, shape in template:
        size = int(np.prod(shape))
        arrays[name] = flat[offset:offset + size].reshape(shape).astype(dtype)
        offset += size
    return from_named_arrays(cfg, arrays)
