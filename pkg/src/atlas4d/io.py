"""Single-file NIfTI-1 volumes, cohort manifests and model checkpoints.

Only a small NIfTI-1 subset is read and written: little-endian, float32
payload, scalar volumes (``dim[0] = 3``) or 3-vector fields
(``dim[0] = 4``, ``dim[4] = 3``), isotropic spacing in ``pixdim``, data at
byte 352 in x-fastest order. Every other header field is zero.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .atlas import AtlasModel, CohortEntry, FitConfig
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
FLOAT32 = 16
MAGIC = b"n+1\x00"


class VolumeFormatError(ValueError):
    """The file is not in the supported NIfTI-1 subset."""


def _header(shape, spacing, day):
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, FLOAT32, 32)
    pixdim = [1.0, spacing, spacing, spacing] + [1.0 if len(shape) == 4 else 0.0] + [0.0] * 3
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    if day is not None:
        hdr[148:148 + 80] = f"day={int(day)}".encode().ljust(80, b"\x00")
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_volume(path, vol, spacing: float | None = None, day: int | None = None):
    """Write a ``Volume``, scalar array or (nx, ny, nz, 3) field as float32."""
    if isinstance(vol, Volume):
        data = vol.data
        spacing = vol.spacing if spacing is None else spacing
        day = vol.day if day is None else day
    else:
        data = np.asarray(vol)
    spacing = 1.0 if spacing is None else float(spacing)
    if data.ndim == 4 and data.shape[-1] != 3:
        raise VolumeFormatError(f"vector fields need 3 components, got {data.shape[-1]}")
    if data.ndim not in (3, 4):
        raise VolumeFormatError(f"cannot store an array of shape {data.shape}")
    payload = np.asarray(data, dtype="<f4").ravel(order="F").tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header(data.shape, spacing, day))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)
    return path


def read_header(raw: bytes):
    if len(raw) < VOX_OFFSET:
        raise VolumeFormatError(f"truncated header: expected at least {VOX_OFFSET} bytes, got {len(raw)}")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != HEADER_SIZE:
        raise VolumeFormatError(f"sizeof_hdr is {size}, expected {HEADER_SIZE} (little-endian only)")
    if raw[344:348] != MAGIC:
        raise VolumeFormatError(f"bad magic {raw[344:348]!r}, expected {MAGIC!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype != FLOAT32:
        raise VolumeFormatError(f"unsupported datatype {datatype}; only 16 (float32) is supported")
    if dim[0] == 3:
        shape = tuple(dim[1:4])
    elif dim[0] == 4:
        if dim[4] != 3:
            raise VolumeFormatError(f"4D files must hold 3-vector fields, got dim[4]={dim[4]}")
        shape = tuple(dim[1:5])
    else:
        raise VolumeFormatError(f"dim[0]={dim[0]} unsupported; expected 3 or 4")
    if min(shape) <= 0:
        raise VolumeFormatError(f"non-positive dimension in {shape}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("ascii", "replace")
    day = int(descrip[4:]) if descrip.startswith("day=") and descrip[4:].lstrip("-").isdigit() else None
    return {"shape": shape, "spacing": float(pixdim[1]), "vox_offset": int(vox_offset), "day": day}


def read_volume(path):
    """Returns ``(data, header)``; ``data`` is float32 with shape (nx, ny, nz[, 3])."""
    raw = Path(path).read_bytes()
    hdr = read_header(raw)
    count = int(np.prod(hdr["shape"]))
    expected = hdr["vox_offset"] + 4 * count
    if len(raw) < expected:
        raise VolumeFormatError(f"truncated payload: expected {expected} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=hdr["vox_offset"])
    return data.reshape(hdr["shape"], order="F").astype(np.float32), hdr


def load_volume(path) -> Volume:
    data, hdr = read_volume(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path} holds a vector field, expected a scalar volume")
    return Volume(data, hdr["spacing"], hdr["day"])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- manifests

MANIFEST_KEYS = ("subject_id", "day", "group", "volume_path", "mask_path")


def read_manifest(path):
    """Parse a manifest; returns the records with paths resolved against its folder."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    seen = set()
    out = []
    for i, rec in enumerate(records):
        missing = [k for k in MANIFEST_KEYS if k not in rec]
        if missing:
            raise ValueError(f"{path}: record {i} lacks {missing}")
        key = (str(rec["subject_id"]), int(rec["day"]))
        if key in seen:
            raise ValueError(f"{path}: duplicate acquisition {key}")
        seen.add(key)
        r = dict(rec)
        r["day"] = int(r["day"])
        for k in ("volume_path", "mask_path", "label_path"):
            if r.get(k):
                r[k] = str((path.parent / r[k]).resolve())
        out.append(r)
    return out


def write_manifest(path, records):
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_cohort(manifest_path):
    """Load every manifest entry as a ``CohortEntry`` (images and masks as float64 / bool)."""
    entries = []
    for r in read_manifest(manifest_path):
        vol = load_volume(r["volume_path"])
        mask = load_volume(r["mask_path"]).data >= 0.5
        labels = None
        if r.get("label_path"):
            labels = np.rint(load_volume(r["label_path"]).data).astype(np.int16)
        entries.append(CohortEntry(str(r["subject_id"]), r["day"], vol.data.astype(np.float64), mask,
                                   group=r.get("group"), labels=labels, spacing=vol.spacing))
    return entries


# ---------------------------------------------------------------- checkpoints

DESCRIPTOR = "model.json"


def save_model(model: AtlasModel, directory):
    """Write one volume per initial atlas, deviation and velocity field plus ``model.json``."""
    d = Path(directory)
    (d / "atlas").mkdir(parents=True, exist_ok=True)
    (d / "fields").mkdir(exist_ok=True)
    for t in model.days:
        write_volume(d / "atlas" / f"initial_d{t}.nii", model.initial[t], model.spacing[t], t)
        write_volume(d / "atlas" / f"deviation_d{t}.nii", model.deviation[t], model.spacing[t], t)
    for key in sorted(model.velocities):
        t = model.image_days[key]
        write_volume(d / "fields" / f"{key}.nii", model.velocities[key], model.spacing.get(t, 1.0), t)
    desc = {
        "day_range": [model.days[0], model.days[-1]],
        "shape": list(model.shape),
        "spacing": {str(t): model.spacing[t] for t in model.days},
        "images": {k: model.image_days[k] for k in sorted(model.image_days)},
        "config": model.config.to_dict(),
        "loss_trace": [_json_float(v) for v in model.loss_trace],
        "final_loss": _json_float(model.final_loss),
    }
    (d / DESCRIPTOR).write_text(json.dumps(desc, indent=2) + "\n")
    return d


def _json_float(v):
    if v is None:
        return None
    return v if math.isfinite(v) else str(v)


def load_model(directory) -> AtlasModel:
    d = Path(directory)
    desc_path = d / DESCRIPTOR
    if not desc_path.exists():
        raise FileNotFoundError(f"{d} has no {DESCRIPTOR}")
    desc = json.loads(desc_path.read_text())
    lo, hi = desc["day_range"]
    days = list(range(lo, hi + 1))
    f64 = lambda p: read_volume(p)[0].astype(np.float64)
    initial = {t: f64(d / "atlas" / f"initial_d{t}.nii") for t in days}
    deviation = {t: f64(d / "atlas" / f"deviation_d{t}.nii") for t in days}
    velocities = {k: f64(d / "fields" / f"{k}.nii") for k in desc["images"]}
    return AtlasModel(
        days=days,
        initial=initial,
        deviation=deviation,
        spacing={int(t): float(s) for t, s in desc["spacing"].items()},
        velocities=velocities,
        image_days={k: int(t) for k, t in desc["images"].items()},
        config=FitConfig.from_dict(desc["config"]),
        loss_trace=[float(v) for v in desc["loss_trace"]],
        final_loss=None if desc["final_loss"] is None else float(desc["final_loss"]),
    )
