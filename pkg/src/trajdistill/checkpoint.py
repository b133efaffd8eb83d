"""Single-file model checkpoints.

Layout: magic ``CDDM``, format version (u32 LE), header length (u64 LE), a
JSON header, then the payload of every tensor's float32 bytes (little
endian) back to back. The header records model and schedule configuration,
the standardizer, training provenance, a tensor table with byte offsets,
and the SHA-256 of the payload; any flipped payload byte is rejected at
load time. Writes go through a temp file and os.replace, so a checkpoint
path never holds a partial file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Standardizer
from .exceptions import CheckpointError
from .nets import DenoiserConfig, EncoderConfig
from .numerics import ParamSet, Tensor
from .schedule import NoiseSchedule

MAGIC = b"CDDM"
VERSION = 1
_MAX_HEADER = 1 << 24


@dataclass
class CheckpointBundle:
    denoiser_config: DenoiserConfig
    encoder_config: EncoderConfig
    denoiser_params: ParamSet
    encoder_params: ParamSet
    schedule: NoiseSchedule
    standardizer: Standardizer
    steps: int                    # native sampler grid the denoiser was trained for
    iteration: int = 0
    conditioning: str = "step_start"
    provenance: dict = field(default_factory=dict)


def _config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _config_from(cls, d: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    missing = names - set(d)
    if unknown or missing:
        raise CheckpointError(
            f"{what} fields do not match: unknown {sorted(unknown)}, missing {sorted(missing)}"
        )
    try:
        return cls(**d)
    except Exception as exc:
        raise CheckpointError(f"invalid {what}: {exc}") from exc


def save_checkpoint(path: str, bundle: CheckpointBundle) -> None:
    chunks: list[bytes] = []
    table: list[dict] = []
    offset = 0
    for group, params in (
        ("denoiser", bundle.denoiser_params),
        ("encoder", bundle.encoder_params),
    ):
        for name, t in params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            table.append(
                {
                    "name": f"{group}.{name}",
                    "shape": list(t.data.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": "trajectory-denoiser",
        "denoiser_config": _config_dict(bundle.denoiser_config),
        "encoder_config": _config_dict(bundle.encoder_config),
        "schedule": {
            "alpha_start": bundle.schedule.alpha_start,
            "alpha_end": bundle.schedule.alpha_end,
        },
        "standardizer": {
            "mean": [float(v) for v in bundle.standardizer.mean],
            "std": [float(v) for v in bundle.standardizer.std],
        },
        "steps": bundle.steps,
        "iteration": bundle.iteration,
        "conditioning": bundle.conditioning,
        "provenance": bundle.provenance,
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if hlen > _MAX_HEADER or 16 + hlen > len(data):
        raise CheckpointError(f"{path}: header length {hlen} out of bounds")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = data[16 + hlen :]
    want = header.get("payload_sha256")
    got = hashlib.sha256(payload).hexdigest()
    if want != got:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    den_cfg = _config_from(DenoiserConfig, header["denoiser_config"], "denoiser config")
    enc_cfg = _config_from(EncoderConfig, header["encoder_config"], "encoder config")
    sched = NoiseSchedule(**header["schedule"])
    std = Standardizer(
        np.array(header["standardizer"]["mean"], dtype=np.float32),
        np.array(header["standardizer"]["std"], dtype=np.float32),
    )
    groups: dict[str, ParamSet] = {"denoiser": ParamSet(), "encoder": ParamSet()}
    for entry in header["tensors"]:
        full = entry["name"]
        group, _, name = full.partition(".")
        if group not in groups or not name:
            raise CheckpointError(f"{path}: unexpected tensor name {full!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(entry["nbytes"])
        offset = int(entry["offset"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {full} size does not match its shape")
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {full} extends past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        groups[group].add(name, Tensor(arr.reshape(shape).copy(), requires_grad=True))
    return CheckpointBundle(
        denoiser_config=den_cfg,
        encoder_config=enc_cfg,
        denoiser_params=groups["denoiser"],
        encoder_params=groups["encoder"],
        schedule=sched,
        standardizer=std,
        steps=int(header["steps"]),
        iteration=int(header["iteration"]),
        conditioning=str(header["conditioning"]),
        provenance=dict(header.get("provenance", {})),
    )
