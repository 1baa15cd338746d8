"""Binary checkpoints with a JSON index.

Byte layout, designed so any language can read it:

    offset 0   4 bytes   magic ``GMC1``
    offset 4   4 bytes   uint32 little-endian header length L
    offset 8   L bytes   UTF-8 JSON header (sorted keys, no whitespace)
    offset 8+L           tensor payloads, concatenated in header order

Every tensor is stored as little-endian float64 in C (row-major) order.
The header's ``tensors`` list gives, per tensor, its namespaced name
(``param:`` or ``momentum:`` prefix), shape, and byte offset relative to
the start of the payload section. The header also embeds the model spec,
the epoch counter, and the training generator's state, so a run can be
resumed exactly. Writing is canonical: the same state always produces
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DataError
from .models import Model, ModelSpec, spec_from_json, spec_to_json

MAGIC = b"GMC1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Full training state: parameters, optimizer buffers, and RNG."""

    spec: ModelSpec
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)


def checkpoint_from_model(
    model: Model,
    momentum: dict[str, np.ndarray] | None = None,
    epoch: int = 0,
    rng_state: dict | None = None,
) -> Checkpoint:
    """Snapshot a model (and optionally optimizer state) into a Checkpoint.

    Arrays are copied, so later training steps do not mutate the snapshot.
    """
    params = {n: np.array(t.data, dtype=np.float64) for n, t in model.named_parameters()}
    mom = {n: np.array(v, dtype=np.float64) for n, v in (momentum or {}).items()}
    state = rng_state if rng_state is not None else np.random.default_rng(0).bit_generator.state
    return Checkpoint(model.spec, params, mom, epoch, state)


def restore_model(ckpt: Checkpoint) -> Model:
    """Build a model from the checkpoint's spec and load its parameters."""
    model = Model(ckpt.spec, np.random.default_rng(0))
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(named))
        raise DataError(
            f"checkpoint parameters do not match the spec: missing {missing}, unexpected {extra}"
        )
    for name, arr in ckpt.params.items():
        tensor = named[name]
        if tensor.data.shape != arr.shape:
            raise DataError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, model expects {tensor.data.shape}"
            )
        tensor.data[...] = arr
    return model


def _payload_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param:{n}", a) for n, a in ckpt.params.items()]
    entries += [(f"momentum:{n}", a) for n, a in ckpt.momentum.items()]
    entries.sort(key=lambda e: e[0])
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    entries = _payload_entries(ckpt)
    index = []
    offset = 0
    blobs = []
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8", order="C")
        blob = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "epoch": int(ckpt.epoch),
        "format": FORMAT_VERSION,
        "rng_state": ckpt.rng_state,
        "spec": json.loads(spec_to_json(ckpt.spec)),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from err
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError(
            f"{path}: not a checkpoint (expected magic {MAGIC!r} at byte offset 0, "
            f"found {raw[:4]!r})"
        )
    (header_len,) = struct.unpack("<I", raw[4:8])
    if 8 + header_len > len(raw):
        raise DataError(
            f"{path}: header claims {header_len} bytes but only "
            f"{len(raw) - 8} follow the length field"
        )
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"{path}: malformed checkpoint header: {err}") from err
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {header.get('format')!r}")

    payload = raw[8 + header_len :]
    expected = sum(
        8 * int(np.prod(rec["shape"], dtype=np.int64)) for rec in header["tensors"]
    )
    if len(payload) != expected:
        raise DataError(
            f"{path}: tensor payload has {len(payload)} bytes, index expects {expected}"
        )

    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=int(rec["offset"])
        ).reshape(shape)
        arr = np.array(arr, dtype=np.float64)
        full_name = rec["name"]
        kind, _, name = full_name.partition(":")
        if kind == "param":
            params[name] = arr
        elif kind == "momentum":
            momentum[name] = arr
        else:
            raise DataError(f"{path}: unknown tensor namespace in {full_name!r}")

    spec = spec_from_json(json.dumps(header["spec"]))
    return Checkpoint(spec, params, momentum, int(header["epoch"]), header["rng_state"])
