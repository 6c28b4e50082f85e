"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TRFC" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_arrays
    per array: u16 name_len | name | u8 dtype code | u8 ndim | u32 dims[ndim] | payload

Payloads are row-major little-endian. The JSON header carries the model
tags (mode, decoder, ranks, grid geometry, density shift) and, when present,
the occupancy volume bounds.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .decoders import MlpDecoder, make_decoder
from .model import RadianceModel
from .renderer import OccupancyVolume
from .tensor_field import AppearanceField, FactorField, GridGeometry

MAGIC = b"TRFC"
VERSION = 1

DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"), 5: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _code(arr):
    for k, v in DTYPES.items():
        if arr.dtype.kind == v.kind and arr.dtype.itemsize == v.itemsize:
            return k, v
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def write_container(fh, meta: dict, arrays: dict):
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code, dt = _code(arr)
        key = name.encode()
        fh.write(struct.pack("<H", len(key)))
        fh.write(key)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_container(fh):
    magic = _read(fh, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, meta_len = struct.unpack("<II", _read(fh, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        meta = json.loads(_read(fh, meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from e
    (n_arrays,) = struct.unpack("<I", _read(fh, 4, "array count"))
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack("<H", _read(fh, 2, "name length"))
        name = _read(fh, nlen, "array name").decode()
        code, ndim = struct.unpack("<BB", _read(fh, 2, f"{name} header"))
        if code not in DTYPES:
            raise CheckpointError(f"array {name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, f"{name} dims"))
        dt = DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        data = _read(fh, count * dt.itemsize, f"{name} payload")
        arrays[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last array")
    return meta, arrays


def model_meta(model: RadianceModel, occupancy: OccupancyVolume | None = None, extra=None):
    g = model.geometry
    meta = {
        "mode": model.mode,
        "decoder": model.decoder.kind,
        "density_ranks": list(model.density.ranks),
        "appearance_ranks": list(model.appearance.ranks),
        "n_features": model.appearance.n_features,
        "bbox_min": [float(x) for x in g.bbox_min],
        "bbox_max": [float(x) for x in g.bbox_max],
        "resolution": [int(x) for x in g.resolution],
        "density_shift": model.density_shift,
    }
    if isinstance(model.decoder, MlpDecoder):
        meta["mlp"] = {"hidden": model.decoder.hidden, "n_freqs": model.decoder.n_freqs}
    if occupancy is not None:
        meta["occupancy"] = {"bbox_min": [float(x) for x in occupancy.lo],
                             "bbox_max": [float(x) for x in occupancy.hi],
                             "threshold": float(occupancy.threshold)}
    if extra:
        meta["extra"] = extra
    return meta


def to_bytes(model: RadianceModel, occupancy: OccupancyVolume | None = None, extra=None):
    buf = io.BytesIO()
    arrays = dict(model.params())
    if occupancy is not None:
        arrays["occupancy"] = occupancy.bits.astype(np.uint8)
    write_container(buf, model_meta(model, occupancy, extra), arrays)
    return buf.getvalue()


def save(path, model, occupancy=None, extra=None):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, occupancy, extra))


def from_meta(meta, arrays):
    """Rebuild ``(model, occupancy, extra)`` from a decoded container."""
    try:
        geo = GridGeometry(tuple(meta["bbox_min"]), tuple(meta["bbox_max"]), tuple(meta["resolution"]))
        mode = meta["mode"]
        dens = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("density.")}
        app = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("appearance.")}
        dec = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("decoder.")}
        dtype = dens["vec_x"].dtype
        density = FactorField(mode, meta["density_ranks"], geo, arrays=dens, dtype=dtype)
        appearance = AppearanceField(mode, meta["appearance_ranks"], geo, meta["n_features"], arrays=app,
                                     dtype=dtype)
        if meta["decoder"] == "mlp":
            mlp = meta.get("mlp", {})
            decoder = MlpDecoder(meta["n_features"], mlp.get("hidden", 128), mlp.get("n_freqs", 2),
                                 params=dec, dtype=density.dtype)
        else:
            decoder = make_decoder(meta["decoder"], meta["n_features"])
        model = RadianceModel(density, appearance, decoder, meta["density_shift"])
    except KeyError as e:
        raise CheckpointError(f"checkpoint metadata lacks key {e}") from e
    occupancy = None
    if "occupancy" in meta:
        o = meta["occupancy"]
        occupancy = OccupancyVolume(np.asarray(o["bbox_min"]), np.asarray(o["bbox_max"]),
                                    arrays["occupancy"].astype(bool), o["threshold"])
    return model, occupancy, meta.get("extra")


def load(path):
    with open(path, "rb") as fh:
        meta, arrays = read_container(fh)
    return from_meta(meta, arrays)
