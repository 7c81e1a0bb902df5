"""Triangle meshes, a median-split BVH and Möller–Trumbore ray casting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

__all__ = ["TriMesh", "BVH", "box_mesh", "merge_meshes", "cast_rays", "cast_rays_brute", "raycast"]

LEAF_SIZE = 4


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    _bvh: "BVH | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_triangles(self):
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def bvh(self) -> "BVH":
        if self._bvh is None:
            self._bvh = BVH.build(self.corners())
        return self._bvh

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())

    def sample_surface(self, density: float, rng, box=None) -> np.ndarray:
        """Uniform surface samples, about ``density`` points per square meter.

        With ``box=(lo, hi)`` only triangles overlapping the box are sampled and
        the result is cropped to it.
        """
        c = self.corners()
        if box is not None:
            lo, hi = np.asarray(box[0]), np.asarray(box[1])
            keep = np.all(c.max(axis=1) >= lo, axis=1) & np.all(c.min(axis=1) <= hi, axis=1)
            c = c[keep]
        if len(c) == 0:
            return np.zeros((0, 3))
        areas = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
        counts = rng.poisson(areas * density)
        idx = np.repeat(np.arange(len(c)), counts)
        u = rng.random((len(idx), 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        tri = c[idx]
        pts = tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])
        if box is not None:
            pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
        return pts

    def euler_characteristic(self) -> int:
        e = np.sort(np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(e, axis=0))
        used = len(np.unique(self.triangles))
        return used - n_edges + len(self.triangles)

    def components(self) -> list:
        """Triangle index arrays, one per edge-connected component."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        nv = len(self.vertices)
        if len(self.triangles) == 0:
            return []
        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
        _, labels = connected_components(g, directed=False)
        tl = labels[t[:, 0]]
        return [np.flatnonzero(tl == lab) for lab in np.unique(tl)]

    def submesh(self, tri_idx) -> "TriMesh":
        t = self.triangles[tri_idx]
        used, inv = np.unique(t, return_inverse=True)
        return TriMesh(self.vertices[used], inv.reshape(-1, 3))


def box_mesh(lo, hi) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                  [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]], [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriMesh(v, f)


def merge_meshes(meshes) -> TriMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass
class BVH:
    """Flattened binary BVH over triangle corner arrays.

    Leaves reference a contiguous run of ``order``; inner nodes store child
    indices. Boxes are padded slightly so slab tests never reject a box whose
    triangle the exact intersection test would accept.
    """

    tri: np.ndarray  # (F, 3, 3) corners in original order
    order: np.ndarray  # (F,) triangle ids in leaf order
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray

    @classmethod
    def build(cls, tri: np.ndarray) -> "BVH":
        tri = np.ascontiguousarray(tri, dtype=np.float64)
        n = len(tri)
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        cen = 0.5 * (tmin + tmax)
        order = np.arange(n)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node():
            for lst in (lo, hi):
                lst.append(np.zeros(3))
            for lst in (left, right, start, count):
                lst.append(-1)
            return len(lo) - 1

        root = new_node()
        stack = [(root, 0, n)]
        while stack:
            node, s, e = stack.pop()
            ids = order[s:e]
            if e > s:
                bl, bh = tmin[ids].min(axis=0), tmax[ids].max(axis=0)
                pad = 1e-9 * (1.0 + np.abs(bl).max() + np.abs(bh).max())
                lo[node], hi[node] = bl - pad, bh + pad
            if e - s <= LEAF_SIZE:
                start[node], count[node] = s, e - s
                continue
            c = cen[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            order[s:e] = srt
            mid = s + (e - s) // 2
            l, r = new_node(), new_node()
            left[node], right[node] = l, r
            stack.append((r, mid, e))
            stack.append((l, s, mid))
        as_i = lambda a: np.asarray(a, dtype=np.int64)
        return cls(tri, order, np.asarray(lo), np.asarray(hi), as_i(left), as_i(right), as_i(start), as_i(count))

    def cast(self, origins, dirs, tmax=np.inf):
        origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
        dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
        tmax_arr = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(origins),)).copy()
        if len(self.tri) == 0:
            return np.full(len(origins), np.inf), np.full(len(origins), -1, np.int64)
        return _bvh_cast(self.tri, self.order, self.lo, self.hi, self.left, self.right, self.start, self.count,
                         origins, dirs, tmax_arr)


@numba.njit(cache=True, inline="always")
def _tri_hit(ox, oy, oz, dx, dy, dz, tri, k):
    v0x, v0y, v0z = tri[k, 0, 0], tri[k, 0, 1], tri[k, 0, 2]
    e1x, e1y, e1z = tri[k, 1, 0] - v0x, tri[k, 1, 1] - v0y, tri[k, 1, 2] - v0z
    e2x, e2y, e2z = tri[k, 2, 0] - v0x, tri[k, 2, 1] - v0y, tri[k, 2, 2] - v0z
    px, py, pz = dy * e2z - dz * e2y, dz * e2x - dx * e2z, dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - v0x, oy - v0y, oz - v0z
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx, qy, qz = sy * e1z - sz * e1y, sz * e1x - sx * e1z, sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t > 0.0:
        return t
    return np.inf


@numba.njit(cache=True)
def _slab(ox, oy, oz, dx, dy, dz, lo, hi, n, best):
    t0, t1 = 0.0, best
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[n, a] or o[a] > hi[n, a]:
                return False
        else:
            inv = 1.0 / d[a]
            ta = (lo[n, a] - o[a]) * inv
            tb = (hi[n, a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
    return True


@numba.njit(cache=True)
def _bvh_cast(tri, order, lo, hi, left, right, start, count, origins, dirs, tmax):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_id = np.full(n, -1, np.int64)
    stack = np.empty(128, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = tmax[r]
        best_id = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(ox, oy, oz, dx, dy, dz, lo, hi, node, best):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    k = order[j]
                    t = _tri_hit(ox, oy, oz, dx, dy, dz, tri, k)
                    if t < best or (t == best and t < np.inf and (best_id < 0 or k < best_id)):
                        best = t
                        best_id = k
            else:
                stack[sp] = right[node]
                sp += 1
                stack[sp] = left[node]
                sp += 1
        if best_id >= 0:
            out_t[r] = best
            out_id[r] = best_id
    return out_t, out_id


@numba.njit(cache=True)
def _brute_cast(tri, origins, dirs, tmax):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_id = np.full(n, -1, np.int64)
    for r in range(n):
        best = tmax[r]
        best_id = -1
        for k in range(tri.shape[0]):
            t = _tri_hit(origins[r, 0], origins[r, 1], origins[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2], tri, k)
            if t < best or (t == best and t < np.inf and (best_id < 0 or k < best_id)):
                best = t
                best_id = k
        if best_id >= 0:
            out_t[r] = best
            out_id[r] = best_id
    return out_t, out_id


def cast_rays(mesh: TriMesh, origins, dirs, tmax=np.inf):
    """Nearest hit distance and triangle id per ray (``inf``/-1 on miss)."""
    return mesh.bvh.cast(origins, dirs, tmax)


def cast_rays_brute(mesh: TriMesh, origins, dirs, tmax=np.inf):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    tmax_arr = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(origins),)).copy()
    return _brute_cast(np.ascontiguousarray(mesh.corners()), origins, dirs, tmax_arr)


def raycast(scene: TriMesh, origin, direction):
    """Single-ray query: ``(hit_point, range, triangle_id)`` or ``None``."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if not np.isclose(norm, 1.0, atol=1e-9):
        raise ValueError("direction must be normalized")
    t, tid = cast_rays(scene, np.asarray(origin, dtype=np.float64)[None], d[None])
    if tid[0] < 0:
        return None
    return np.asarray(origin, dtype=np.float64) + t[0] * d, float(t[0]), int(tid[0])
