"""OBJ and binary PLY reading/writing (positions, faces, per-corner UVs)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import InvalidMesh
from .mesh import TriangleMesh, check_uv_charts


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.reshape(-1, 2).tolist()]
        for i, (a, b, c) in enumerate(mesh.faces.tolist()):
            t = 3 * i + 1
            lines.append(f"f {a + 1}/{t} {b + 1}/{t + 1} {c + 1}/{t + 2}")
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path, validate_uvs: bool = True) -> TriangleMesh:
    verts, tex, faces, face_uv = [], [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(c) for c in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(c) for c in parts[1:3]])
        elif parts[0] == "f":
            corners = [p.split("/") for p in parts[1:]]
            if len(corners) != 3:
                raise InvalidMesh("only triangle faces are supported")
            faces.append([int(c[0]) - 1 for c in corners])
            if all(len(c) > 1 and c[1] for c in corners):
                face_uv.append([int(c[1]) - 1 for c in corners])
    uvs = None
    if tex and len(face_uv) == len(faces):
        uvs = np.asarray(tex, dtype=np.float64)[np.asarray(face_uv)]
    mesh = TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3), uvs)
    if validate_uvs:
        check_uv_charts(mesh)
    return mesh


def save_ply(mesh: TriangleMesh, path) -> None:
    vert = np.empty(mesh.n_vertices, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    fields = [("vertex_indices", "<i4", (3,))]
    if mesh.uvs is not None:
        fields.append(("texcoord", "<f8", (6,)))
    face = np.empty(mesh.n_faces, dtype=fields)
    face["vertex_indices"] = mesh.faces
    if mesh.uvs is not None:
        face["texcoord"] = mesh.uvs.reshape(-1, 6)
    elements = [PlyElement.describe(vert, "vertex"),
                PlyElement.describe(face, "face", len_types={"vertex_indices": "u1", "texcoord": "u1"})]
    PlyData(elements, text=False, byte_order="<").write(str(path))


def load_ply(path, validate_uvs: bool = True) -> TriangleMesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    verts = np.stack([np.asarray(v["x"], dtype=np.float64), np.asarray(v["y"], dtype=np.float64),
                      np.asarray(v["z"], dtype=np.float64)], axis=1)
    fdata = ply["face"].data
    names = fdata.dtype.names
    idx_name = "vertex_indices" if "vertex_indices" in names else "vertex_index"
    faces = np.stack([np.asarray(f, dtype=np.int64) for f in fdata[idx_name]]) if len(fdata) else np.zeros((0, 3))
    if faces.shape[1:] != (3,):
        raise InvalidMesh("only triangle faces are supported")
    uvs = None
    if "texcoord" in names and len(fdata):
        uvs = np.stack([np.asarray(t, dtype=np.float64) for t in fdata["texcoord"]]).reshape(-1, 3, 2)
    mesh = TriangleMesh(verts, faces, uvs)
    if validate_uvs:
        check_uv_charts(mesh)
    return mesh


def load_mesh(path, validate_uvs: bool = True) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path, validate_uvs)
    if path.suffix.lower() == ".ply":
        return load_ply(path, validate_uvs)
    raise InvalidMesh(f"unsupported mesh format: {path.suffix}")


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        save_obj(mesh, path)
    elif path.suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        raise InvalidMesh(f"unsupported mesh format: {path.suffix}")
