"""On-disk garment asset: a directory holding mesh, Gaussian texture and rest state.

``texture.ggt`` layout (little endian)::

    4s   magic "GGAR"
    u4   format version
    u4   height, u4 width, u4 channels
    u4   length of the layout descriptor, then that many ASCII bytes
    f4   height * width * channels texel values, row-major
    u1   packed validity bits, ceil(height * width / 8) bytes
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptAsset, InvalidMesh, NotAnAsset, UnsupportedVersion, ValidationError
from .mesh import TriangleMesh, build_topology
from .meshio import load_ply, save_ply
from .simulator import MaterialField, RestGeometry
from .texture import CHANNEL_LAYOUT, N_CHANNELS, GaussianTexture

MAGIC = b"GGAR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class GarmentAsset:
    mesh: TriangleMesh
    texture: GaussianTexture
    rest: RestGeometry
    material: MaterialField


def write_texture(texture: GaussianTexture, path) -> None:
    layout = CHANNEL_LAYOUT.encode("ascii")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, texture.height, texture.width, N_CHANNELS, len(layout))
    bits = np.packbits(texture.valid_mask.ravel())
    Path(path).write_bytes(header + layout + texture.data.astype("<f4").tobytes() + bits.tobytes())


def read_texture(path) -> GaussianTexture:
    path = Path(path)
    if not path.is_file():
        raise NotAnAsset(f"{path} does not exist")
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise NotAnAsset(f"{path}: bad magic bytes")
    if len(raw) < _HEADER.size:
        raise CorruptAsset(f"{path}: truncated header")
    _, version, h, w, c, nlay = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if c != N_CHANNELS:
        raise UnsupportedVersion(f"{path}: {c} channels, this reader supports {N_CHANNELS}")
    off = _HEADER.size
    layout = raw[off:off + nlay]
    if len(layout) < nlay:
        raise CorruptAsset(f"{path}: truncated layout descriptor")
    if layout.decode("ascii", "replace") != CHANNEL_LAYOUT:
        raise UnsupportedVersion(f"{path}: unknown channel layout {layout!r}")
    off += nlay
    n_data = h * w * c * 4
    n_bits = (h * w + 7) // 8
    if len(raw) < off + n_data + n_bits:
        raise CorruptAsset(f"{path}: payload truncated ({len(raw)} of {off + n_data + n_bits} bytes)")
    if len(raw) > off + n_data + n_bits:
        raise CorruptAsset(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=off).reshape(h, w, c).astype(np.float32)
    bits = np.frombuffer(raw, dtype=np.uint8, count=n_bits, offset=off + n_data)
    mask = np.unpackbits(bits, count=h * w).astype(bool).reshape(h, w)
    if np.any(data[~mask] != 0):
        raise CorruptAsset(f"{path}: invalid texels hold non-zero data")
    return GaussianTexture(data, mask)


def save_asset(mesh: TriangleMesh, texture: GaussianTexture, rest: RestGeometry, material: MaterialField,
               path) -> Path:
    path = Path(path)
    if rest.n_vertices != mesh.n_vertices or len(material) != mesh.n_vertices:
        raise ValidationError("mesh, rest geometry and material sizes differ")
    if not np.array_equal(rest.faces, mesh.faces):
        raise ValidationError("rest geometry was built for different faces")
    path.mkdir(parents=True, exist_ok=True)
    save_ply(mesh, path / "mesh.ply")
    write_texture(texture, path / "texture.ggt")
    rest_doc = {
        "edges": rest.topology.edges.tolist(),
        "edge_lengths": rest.edge_lengths.tolist(),
        "rest_angles": rest.rest_angles.tolist(),
        "thickness": rest.thickness,
        "material": material.values.tolist(),
        "rest_positions": mesh.rest.tolist(),
    }
    (path / "rest.json").write_text(json.dumps(rest_doc))
    meta = {"format": "garment-asset", "version": FORMAT_VERSION, "units": "m", "channels": N_CHANNELS,
            "layout": CHANNEL_LAYOUT, "n_vertices": mesh.n_vertices, "n_faces": mesh.n_faces,
            "texture": [texture.height, texture.width]}
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    return path


def load_asset(path) -> GarmentAsset:
    path = Path(path)
    if not path.is_dir() or not (path / "meta.json").is_file():
        raise NotAnAsset(f"{path} is not an asset directory")
    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise CorruptAsset(f"{path}/meta.json: {exc}") from exc
    if meta.get("format") != "garment-asset":
        raise NotAnAsset(f"{path}: meta.json does not describe a garment asset")
    if meta.get("version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: asset version {meta.get('version')}")
    texture = read_texture(path / "texture.ggt")
    try:
        mesh = load_ply(path / "mesh.ply", validate_uvs=False)
        rest_doc = json.loads((path / "rest.json").read_text())
    except (OSError, ValueError, InvalidMesh) as exc:
        raise CorruptAsset(f"{path}: {exc}") from exc
    try:
        mesh = TriangleMesh(mesh.vertices, mesh.faces, mesh.uvs, np.asarray(rest_doc["rest_positions"]))
        top = build_topology(mesh)
        if not np.array_equal(top.edges, np.asarray(rest_doc["edges"]).reshape(-1, 2)):
            raise CorruptAsset(f"{path}: rest edges do not match the mesh")
        rest = RestGeometry(top, np.asarray(rest_doc["edge_lengths"]), np.asarray(rest_doc["rest_angles"]),
                            float(rest_doc["thickness"]))
        material = MaterialField(np.asarray(rest_doc["material"]).reshape(-1, 4))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, (CorruptAsset,)):
            raise
        raise CorruptAsset(f"{path}: inconsistent rest state: {exc}") from exc
    if len(material) != mesh.n_vertices:
        raise CorruptAsset(f"{path}: material has {len(material)} rows for {mesh.n_vertices} vertices")
    return GarmentAsset(mesh, texture, rest, material)


# ----------------------------------------------------------------- sequences
# Tracked or simulated vertex sequences: "GGTR", u4 frames, u4 vertices,
# then frames * vertices * 3 float32 positions.

SEQ_MAGIC = b"GGTR"
_SEQ_HEADER = struct.Struct("<4sII")


def write_sequence(positions, path) -> None:
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"sequence must have shape (T, N, 3), got {x.shape}")
    Path(path).write_bytes(_SEQ_HEADER.pack(SEQ_MAGIC, x.shape[0], x.shape[1]) + x.astype("<f4").tobytes())


def read_sequence(path) -> np.ndarray:
    """Returns a float64 ``(T, N, 3)`` array."""
    path = Path(path)
    if not path.is_file():
        raise NotAnAsset(f"{path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _SEQ_HEADER.size or raw[:4] != SEQ_MAGIC:
        raise NotAnAsset(f"{path}: not a vertex sequence")
    _, t, n = _SEQ_HEADER.unpack_from(raw)
    if len(raw) != _SEQ_HEADER.size + t * n * 12:
        raise CorruptAsset(f"{path}: expected {t} frames of {n} vertices, got {len(raw) - _SEQ_HEADER.size} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=_SEQ_HEADER.size).reshape(t, n, 3).astype(np.float64)
