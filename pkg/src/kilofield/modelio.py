"""Bit-exact binary serialization of a grid field.

Layout (little-endian throughout):

  header:  magic "KNSF" | u32 version | u32 N | 6*f32 bbox | u32 F
           u32 L_x | u32 L_v | layer spec for the SDF grid | same for color
  spec:    u32 n_layers | (n_layers+1)*u32 dims | n_layers*u32 activation codes
  payload: f32 log-s | SDF MLPs in flat cell order | color MLPs
           (each MLP: per layer, row-major f32 weights then biases)
  trailer: u32 CRC32 over the payload

File size is therefore header_size + 4*(1 + parameter count) + 4, exactly
derivable from the header alone.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .grid import GridConfig, KiloField, MlpGrid
from .nn import ACTIVATION_CODES, ACTIVATION_NAMES

MAGIC = b"KNSF"
FORMAT_VERSION = 1


class ModelIOError(Exception):
    """Base for model file failures."""


class BadMagicError(ModelIOError):
    pass


class VersionMismatchError(ModelIOError):
    pass


class TruncatedPayloadError(ModelIOError):
    pass


class ChecksumError(ModelIOError):
    pass


def _pack_layer_spec(grid: MlpGrid) -> bytes:
    n_layers = len(grid.weights)
    parts = [struct.pack("<I", n_layers)]
    parts.append(struct.pack(f"<{n_layers + 1}I", *grid.layer_dims))
    parts.append(struct.pack(f"<{n_layers}I", *[ACTIVATION_CODES[a] for a in grid.activations]))
    return b"".join(parts)


def _unpack_layer_spec(buf: bytes, off: int):
    (n_layers,) = struct.unpack_from("<I", buf, off)
    off += 4
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", buf, off))
    off += 4 * (n_layers + 1)
    codes = struct.unpack_from(f"<{n_layers}I", buf, off)
    off += 4 * n_layers
    try:
        acts = [ACTIVATION_NAMES[c] for c in codes]
    except KeyError as e:
        raise ModelIOError(f"unknown activation code {e}") from None
    return dims, acts, off


def _grid_payload(grid: MlpGrid) -> np.ndarray:
    """Cell-major parameter block: one row of weights-then-biases per cell."""
    cols = []
    for w, b in zip(grid.weights, grid.biases):
        cols.append(np.ascontiguousarray(w, dtype="<f4").reshape(grid.n_cells, -1))
        cols.append(np.ascontiguousarray(b, dtype="<f4").reshape(grid.n_cells, -1))
    return np.concatenate(cols, axis=1)


def _grid_from_payload(flat: np.ndarray, n_cells: int, dims: list[int], acts: list[str]) -> MlpGrid:
    per_cell = flat.reshape(n_cells, -1)
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = per_cell[:, off : off + fan_out * fan_in].reshape(n_cells, fan_out, fan_in)
        off += fan_out * fan_in
        b = per_cell[:, off : off + fan_out]
        off += fan_out
        weights.append(np.ascontiguousarray(w, dtype=np.float32))
        biases.append(np.ascontiguousarray(b, dtype=np.float32))
    return MlpGrid(dims, acts, weights, biases)


def header_bytes(field: KiloField) -> bytes:
    cfg = field.config
    head = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", cfg.resolution),
        struct.pack("<6f", *cfg.bbox_min, *cfg.bbox_max),
        struct.pack("<III", cfg.feature_dim, cfg.sdf_freqs, cfg.dir_freqs),
        _pack_layer_spec(field.sdf),
        _pack_layer_spec(field.color),
    ]
    return b"".join(head)


def predicted_file_size(field: KiloField) -> int:
    """header + 4*(1 + MLP parameter count) + 4 CRC bytes."""
    n_mlp_params = field.sdf.param_count() + field.color.param_count()
    return len(header_bytes(field)) + 4 * (1 + n_mlp_params) + 4


def save_model(field: KiloField, path):
    """Write the field; the payload is guarded by a trailing CRC32."""
    payload = bytearray()
    payload += np.asarray(field.inv_std_param, dtype="<f4").tobytes()
    payload += _grid_payload(field.sdf).tobytes()
    payload += _grid_payload(field.color).tobytes()
    with open(path, "wb") as fh:
        fh.write(header_bytes(field))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def load_model(path) -> KiloField:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, supported {FORMAT_VERSION}")
    (n,) = struct.unpack_from("<I", buf, 8)
    bbox = struct.unpack_from("<6f", buf, 12)
    feature_dim, l_x, l_v = struct.unpack_from("<III", buf, 36)
    off = 48
    sdf_dims, sdf_acts, off = _unpack_layer_spec(buf, off)
    col_dims, col_acts, off = _unpack_layer_spec(buf, off)

    cfg = GridConfig(
        resolution=n,
        bbox_min=bbox[:3],
        bbox_max=bbox[3:],
        sdf_freqs=l_x,
        dir_freqs=l_v,
        feature_dim=feature_dim,
    )
    n_cells = cfg.n_cells
    count_sdf = sum(di * do + do for di, do in zip(sdf_dims[:-1], sdf_dims[1:])) * n_cells
    count_col = sum(di * do + do for di, do in zip(col_dims[:-1], col_dims[1:])) * n_cells
    payload_len = 4 * (1 + count_sdf + count_col)
    if len(buf) < off + payload_len + 4:
        raise TruncatedPayloadError(f"file has {len(buf)} bytes, needs {off + payload_len + 4}")
    payload = buf[off : off + payload_len]
    (crc_stored,) = struct.unpack_from("<I", buf, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("payload CRC32 mismatch")

    vals = np.frombuffer(payload, dtype="<f4")
    inv_std = np.array(vals[0], dtype=np.float32)
    sdf = _grid_from_payload(vals[1 : 1 + count_sdf], n_cells, sdf_dims, sdf_acts)
    color = _grid_from_payload(vals[1 + count_sdf :], n_cells, col_dims, col_acts)
    return KiloField(cfg, sdf, color, inv_std)
