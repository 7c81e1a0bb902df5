"""Point cloud and mesh file formats (binary PLY, ASCII OBJ)."""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .voxgrid import read_vxg, write_vxg

__all__ = [
    "write_ply",
    "read_ply",
    "write_obj",
    "read_obj",
    "write_json",
    "save_grid",
    "load_grid",
    "save_trajectory",
    "load_trajectory",
    "save_latent_grid",
    "load_latent_grid",
]

LAT_MAGIC = b"LAT1"


def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n = None
        props = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property" and n is not None:
                props.append((tok[-1], tok[1]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian" or n is None:
            raise ValueError(f"{path}: only binary little-endian vertex PLY is supported")
        types = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        dtype = np.dtype([(name, types[t]) for name, t in props])
        data = np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype, count=n)
    return np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)


def write_obj(path, vertices, triangles) -> None:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return (np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_grid(path, grid) -> None:
    with open(path, "wb") as fh:
        write_vxg(fh, grid)


def load_grid(path):
    with open(path, "rb") as fh:
        return read_vxg(fh)


def save_trajectory(path, states) -> None:
    """Concatenated VXG1 blocks, one per state."""
    with open(path, "wb") as fh:
        for s in states:
            write_vxg(fh, s)


def load_trajectory(path) -> list:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out = []
    while fh.tell() < len(data):
        out.append(read_vxg(fh))
    return out


def save_latent_grid(path, grid) -> None:
    """VXG1 block of the occupied cells followed by ``LAT1``, u32 K and f64 latents."""
    from .voxgrid import SparseOccupancyGrid

    with open(path, "wb") as fh:
        write_vxg(fh, SparseOccupancyGrid(grid.volume, grid.cells))
        fh.write(LAT_MAGIC)
        fh.write(struct.pack("<I", grid.k))
        fh.write(np.ascontiguousarray(grid.latents, dtype="<f8").tobytes())


def load_latent_grid(path):
    from .implicit import AugmentedLatentGrid

    with open(path, "rb") as fh:
        g = read_vxg(fh)
        magic = fh.read(4)
        if magic != LAT_MAGIC:
            raise ValueError(f"{path}: bad latent block magic {magic!r}")
        (k,) = struct.unpack("<I", fh.read(4))
        lat = np.frombuffer(fh.read(8 * k * len(g)), dtype="<f8").reshape(len(g), k)
    return AugmentedLatentGrid(g.volume, g.cells, lat.astype(np.float64))
