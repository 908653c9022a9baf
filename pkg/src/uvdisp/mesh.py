"""Triangle meshes with per-corner UVs and per-vertex region labels.

Covers OBJ/PLY IO, region sidecars, normals, one-ring adjacency,
consistent midpoint subdivision and regional Laplacian smoothing.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse

log = logging.getLogger(__name__)

REGIONS = ("scalp", "face_skin", "lips", "ears", "eyeballs", "inner_mouth", "neck")
REGION_INDEX = {name: i for i, name in enumerate(REGIONS)}

# Regional smoothing counts used when transferring displacements to new templates.
DEFAULT_SMOOTHING = {
    "lips": 3,
    "face_skin": 5,
    "scalp": 10,
    "neck": 10,
    "ears": 0,
    "eyeballs": 0,
    "inner_mouth": 0,
}


class MeshError(ValueError):
    pass


@dataclass
class TemplateMesh:
    """Indexed triangle mesh.

    ``vertices`` (n, 3) float64, ``faces`` (m, 3) int64, ``corner_uvs`` (m, 3, 2)
    or None, ``regions`` (n,) int8 indices into :data:`REGIONS`.
    """

    vertices: np.ndarray
    faces: np.ndarray
    corner_uvs: np.ndarray | None = None
    regions: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.corner_uvs is not None:
            self.corner_uvs = np.ascontiguousarray(self.corner_uvs, dtype=np.float64).reshape(-1, 3, 2)
        if self.regions is None:
            self.regions = np.zeros(len(self.vertices), dtype=np.int8)
        else:
            self.regions = np.asarray(self.regions, dtype=np.int8).reshape(-1)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self):
        n = len(self.vertices)
        f = self.faces
        if len(f):
            if f.min() < 0 or f.max() >= n:
                raise MeshError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")
        if self.corner_uvs is not None:
            if len(self.corner_uvs) != len(f):
                raise MeshError("corner_uvs count does not match face count")
            uv = self.corner_uvs
            if uv.size and (uv.min() < -1e-9 or uv.max() > 1 + 1e-9):
                raise MeshError("UV coordinates outside [0, 1]")
        if len(self.regions) != n:
            raise MeshError("region label count does not match vertex count")
        if len(self.regions) and (self.regions.min() < 0 or self.regions.max() >= len(REGIONS)):
            raise MeshError("unknown region label")

    def copy(self, vertices=None) -> TemplateMesh:
        return TemplateMesh(
            self.vertices.copy() if vertices is None else vertices,
            self.faces.copy(),
            None if self.corner_uvs is None else self.corner_uvs.copy(),
            self.regions.copy(),
        )

    def region_mask(self, names) -> np.ndarray:
        if isinstance(names, str):
            names = [names]
        ids = [REGION_INDEX[n] for n in names]
        return np.isin(self.regions, ids)


@dataclass
class ScanCloud:
    points: np.ndarray
    faces: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise MeshError("scan cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise MeshError("scan cloud has non-finite coordinates")


# ---------------------------------------------------------------------------
# IO


def _parse_obj_index(tok: str, count: int, lineno: int) -> int:
    try:
        idx = int(tok)
    except ValueError:
        raise MeshError(f"line {lineno}: bad index {tok!r}") from None
    if idx == 0:
        raise MeshError(f"line {lineno}: OBJ indices are 1-based, got 0")
    if idx < 0:
        idx = count + idx
    else:
        idx -= 1
    if idx < 0 or idx >= count:
        raise MeshError(f"line {lineno}: index {tok} out of range")
    return idx


def read_obj(path, require_uvs=False):
    """Parse an OBJ file. Polygons are fan-triangulated.

    Returns ``(vertices, faces, corner_uvs)``; ``corner_uvs`` is None when
    the faces carry no ``vt`` references.
    """
    verts, uvs, faces, face_uv = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                    if len(parts) < 3:
                        raise ValueError
            except ValueError:
                raise MeshError(f"line {lineno}: malformed {tag!r} record") from None
            if tag != "f":
                continue
            corners = parts[1:]
            if len(corners) < 3:
                raise MeshError(f"line {lineno}: face with fewer than 3 corners")
            vi, ti = [], []
            for c in corners:
                sub = c.split("/")
                vi.append(_parse_obj_index(sub[0], len(verts), lineno))
                if len(sub) > 1 and sub[1]:
                    ti.append(_parse_obj_index(sub[1], len(uvs), lineno))
            if ti and len(ti) != len(vi):
                raise MeshError(f"line {lineno}: mixed corners with and without UVs")
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                face_uv.append([ti[0], ti[k], ti[k + 1]] if ti else None)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    has_uv = bool(face_uv) and all(t is not None for t in face_uv)
    if require_uvs and not has_uv:
        raise MeshError(f"{path}: template requires texture coordinates on every face")
    corner_uvs = None
    if has_uv:
        corner_uvs = np.array(uvs, dtype=np.float64)[np.array(face_uv)]
    return v, f, corner_uvs


def write_obj(path, vertices, faces, corner_uvs=None):
    """Write an OBJ; UVs are written one ``vt`` per distinct corner UV."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if corner_uvs is not None:
        flat = np.asarray(corner_uvs, dtype=np.float64).reshape(-1, 2)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        inv = inv.reshape(-1, 3)
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in uniq]
        lines += [
            f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}"
            for (a, b, c), (ta, tb, tc) in zip(faces, inv)
        ]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read vertices (and triangle faces, if any) from ASCII or binary PLY."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated PLY header")
            parts = line.decode("ascii", "replace").split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise MeshError(f"{path}: property before element")
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        body = fh.read()

    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    verts, faces = None, None
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos]); pos += 1
                        row.append([float(t) for t in tokens[pos:pos + n]]); pos += n
                    else:
                        row.append(float(tokens[pos])); pos += 1
                rows.append(row)
            if name == "vertex":
                names = [p[0] for p in props]
                idx = [names.index(c) for c in "xyz"]
                verts = np.array([[r[i] for i in idx] for r in rows], dtype=np.float64).reshape(-1, 3)
            elif name == "face":
                faces = _triangulate([r[0] for r in rows])
        return verts, faces

    endian = "<" if fmt == "binary_little_endian" else ">"
    buf = memoryview(body)
    pos = 0
    for name, count, props in elements:
        if all(not isinstance(p[1], tuple) for p in props):
            dt = np.dtype([(p[0], endian + p[1]) for p in props])
            arr = np.frombuffer(buf[pos:pos + dt.itemsize * count], dtype=dt, count=count)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr[c].astype(np.float64) for c in "xyz"], axis=1)
            continue
        polys = []
        for _ in range(count):
            for pname, ptype in props:
                if isinstance(ptype, tuple):
                    ct = np.dtype(endian + ptype[1])
                    it = np.dtype(endian + ptype[2])
                    n = int(np.frombuffer(buf[pos:pos + ct.itemsize], dtype=ct)[0]); pos += ct.itemsize
                    vals = np.frombuffer(buf[pos:pos + it.itemsize * n], dtype=it); pos += it.itemsize * n
                    if pname in ("vertex_indices", "vertex_index"):
                        polys.append(vals.astype(np.int64))
                else:
                    pos += np.dtype(ptype).itemsize
        if name == "face":
            faces = _triangulate(polys)
    if verts is None:
        raise MeshError(f"{path}: no vertex element")
    return verts, faces


def _triangulate(polys):
    tris = [[p[0], p[k], p[k + 1]] for p in polys for k in range(1, len(p) - 1)]
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_ply(path, points, faces=None, binary=True):
    points = np.asarray(points, dtype=np.float64)
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {len(points)}", "property float x", "property float y", "property float z"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(points.astype("<f4").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", 3)])
                rec["n"] = 3
                rec["i"] = faces
                fh.write(rec.tobytes())
        else:
            for p in points:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n".encode())
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode())


def regions_path(mesh_path) -> str:
    return os.fspath(mesh_path) + ".regions.txt"


def read_regions(path, n_vertices):
    labels = np.zeros(n_vertices, dtype=np.int8)
    seen = np.zeros(n_vertices, dtype=bool)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2 or parts[1] not in REGION_INDEX:
                raise MeshError(f"{path}:{lineno}: expected 'vertex_index region_name'")
            i = int(parts[0])
            if not 0 <= i < n_vertices:
                raise MeshError(f"{path}:{lineno}: vertex index {i} out of range")
            if seen[i]:
                raise MeshError(f"{path}:{lineno}: vertex {i} labeled twice")
            labels[i] = REGION_INDEX[parts[1]]
            seen[i] = True
    if not seen.all():
        log.warning("%s: %d vertices without label default to scalp", path, int((~seen).sum()))
    return labels


def write_regions(path, regions):
    with open(path, "w") as fh:
        for i, r in enumerate(regions):
            fh.write(f"{i} {REGIONS[r]}\n")


def load_mesh(path, kind="template"):
    """Load a template (OBJ with UVs + optional regions sidecar) or a scan cloud.

    ``kind`` is ``"template"`` or ``"scan"``; the format follows the suffix.
    """
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".obj":
        v, f, uv = read_obj(path, require_uvs=(kind == "template"))
    elif ext == ".ply":
        v, f = read_ply(path)
        uv = None
        if kind == "template":
            raise MeshError(f"{path}: templates must be OBJ with texture coordinates")
    else:
        raise MeshError(f"{path}: unknown mesh format {ext!r}")
    if kind == "scan":
        return ScanCloud(v, f)
    side = regions_path(path)
    regions = read_regions(side, len(v)) if os.path.exists(side) else None
    return TemplateMesh(v, f, uv, regions)


def save_template(path, mesh: TemplateMesh, vertices=None):
    write_obj(path, mesh.vertices if vertices is None else vertices, mesh.faces, mesh.corner_uvs)
    write_regions(regions_path(path), mesh.regions)


# ---------------------------------------------------------------------------
# topology and geometry


def unique_edges(faces) -> np.ndarray:
    e = np.asarray(faces)[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def adjacency(faces, n_vertices) -> sparse.csr_matrix:
    """Binary symmetric one-ring adjacency."""
    e = unique_edges(faces)
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    a = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices))
    a.sort_indices()
    return a


def uniform_laplacian(faces, n_vertices) -> sparse.csr_matrix:
    """Rows give ``mean(neighbours) - v``; isolated vertices get zero rows."""
    a = adjacency(faces, n_vertices)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    lap = sparse.diags(inv) @ a - sparse.diags((deg > 0).astype(float))
    return lap.tocsr()


def face_normals(vertices, faces, normalize=True):
    v = np.asarray(vertices)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    return n


def vertex_normals(mesh: TemplateMesh, displacement=None) -> np.ndarray:
    """Area-weighted vertex normals of the (optionally displaced) mesh."""
    v = mesh.vertices if displacement is None else mesh.vertices + displacement
    fn = face_normals(v, mesh.faces, normalize=False)  # |fn| = 2 * area
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    ln = np.linalg.norm(acc, axis=1)
    bad = ln <= 1e-300
    if bad.any():
        log.warning("%d vertices have no non-degenerate incident face; using +z normal", int(bad.sum()))
        acc[bad] = (0.0, 0.0, 1.0)
        ln[bad] = 1.0
    return acc / ln[:, None]


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(face_normals(vertices, faces, normalize=False), axis=1)


# ---------------------------------------------------------------------------
# consistent subdivision


@dataclass
class SubdivisionMap:
    """Barycentric provenance of a midpoint subdivision against base faces.

    Vertices ``< n_base_vertices`` are copies of base vertices. Every later
    vertex is ``sum_k vertex_bary[i, k] * V[base_faces[vertex_face[i], k]]``.
    Every output face lies inside base face ``face_parent[f]``; its corner
    barycentrics are ``corner_bary[f]`` (3 corners x 3 weights).
    """

    base_faces: np.ndarray
    n_base_vertices: int
    vertex_face: np.ndarray
    vertex_bary: np.ndarray
    faces: np.ndarray
    face_parent: np.ndarray
    corner_bary: np.ndarray
    iterations: int = 0

    @property
    def n_vertices(self):
        return self.n_base_vertices + len(self.vertex_face)


def build_subdivision_map(mesh: TemplateMesh, iterations: int = 3) -> SubdivisionMap:
    """Record 1->4 midpoint subdivision in barycentric form.

    Midpoints shared between faces are created once (first face in order
    wins provenance); seams are carried by the per-corner barycentrics.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    base = mesh.faces
    n0 = mesh.n_vertices
    m0 = len(base)
    faces = base.copy()
    parent = np.arange(m0, dtype=np.int64)
    cbary = np.broadcast_to(np.eye(3), (m0, 3, 3)).copy()
    vface = np.zeros(0, dtype=np.int64)
    vbary = np.zeros((0, 3))
    n = n0
    for _ in range(iterations):
        m = len(faces)
        pairs = faces[:, [0, 1, 1, 2, 2, 0]].reshape(m, 3, 2)
        keys = np.sort(pairs, axis=2).reshape(-1, 2)
        uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(m, 3)
        mids = n + inv  # (m, 3): midpoints of edges 01, 12, 20
        mb = 0.5 * (cbary[:, [0, 1, 2]] + cbary[:, [1, 2, 0]])  # (m, 3 edges, 3)
        fi, ei = np.divmod(first, 3)
        vface = np.concatenate([vface, parent[fi]])
        vbary = np.concatenate([vbary, mb[fi, ei]])
        n += len(uniq)

        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mids[:, 0], mids[:, 1], mids[:, 2]
        new_faces = np.stack([
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ], axis=1).reshape(-1, 3)
        A, B, C = cbary[:, 0], cbary[:, 1], cbary[:, 2]
        AB, BC, CA = mb[:, 0], mb[:, 1], mb[:, 2]
        new_cb = np.stack([
            np.stack([A, AB, CA], 1),
            np.stack([AB, B, BC], 1),
            np.stack([CA, BC, C], 1),
            np.stack([AB, BC, CA], 1),
        ], axis=1).reshape(-1, 3, 3)
        faces = new_faces
        cbary = new_cb
        parent = np.repeat(parent, 4)
    return SubdivisionMap(base.copy(), n0, vface, vbary, faces, parent, cbary, iterations)


def _barycentric_eval(values, base_faces, face_idx, bary):
    # values: (n, d); explicit sum in fixed order for bitwise reproducibility
    tri = values[base_faces[face_idx]]  # (k, 3, d)
    return bary[:, 0, None] * tri[:, 0] + bary[:, 1, None] * tri[:, 1] + bary[:, 2, None] * tri[:, 2]


def apply_subdivision_map(smap: SubdivisionMap, mesh: TemplateMesh) -> TemplateMesh:
    if mesh.n_vertices != smap.n_base_vertices or not np.array_equal(mesh.faces, smap.base_faces):
        raise MeshError("mesh topology does not match the subdivision map's base")
    v_new = _barycentric_eval(mesh.vertices, smap.base_faces, smap.vertex_face, smap.vertex_bary)
    vertices = np.concatenate([mesh.vertices, v_new])

    uvs = None
    if mesh.corner_uvs is not None:
        cuv = mesh.corner_uvs[smap.face_parent]  # (m, 3 base corners, 2)
        # corner_bary[f, c, k]: weight of base corner k for new corner c
        uvs = np.einsum("fck,fkd->fcd", smap.corner_bary, cuv)
        np.clip(uvs, 0.0, 1.0, out=uvs)

    # inherited label: base corner with the largest weight, ties -> lowest vertex index
    tri_ids = smap.base_faces[smap.vertex_face]  # (k, 3)
    w = smap.vertex_bary
    best = w.max(axis=1, keepdims=True)
    cand = np.where(w == best, tri_ids, np.iinfo(np.int64).max)
    src = cand.min(axis=1)
    regions = np.concatenate([mesh.regions, mesh.regions[src]])
    return TemplateMesh(vertices, smap.faces.copy(), uvs, regions)


def subdivide(mesh: TemplateMesh, iterations: int = 3) -> TemplateMesh:
    return apply_subdivision_map(build_subdivision_map(mesh, iterations), mesh)


# ---------------------------------------------------------------------------
# smoothing


def laplacian_smooth(mesh: TemplateMesh, iterations_per_region=None) -> TemplateMesh:
    """Uniform Laplacian smoothing with per-region pass counts.

    Runs ``max(counts)`` Jacobi passes; a vertex moves in pass ``p`` only if
    its region count exceeds ``p``. Regions absent from the mapping count 0.
    """
    counts = DEFAULT_SMOOTHING if iterations_per_region is None else iterations_per_region
    per_vertex = np.zeros(mesh.n_vertices, dtype=np.int64)
    for name, c in counts.items():
        if c < 0:
            raise ValueError(f"negative smoothing count for {name}")
        per_vertex[mesh.regions == REGION_INDEX[name]] = c
    passes = int(per_vertex.max()) if len(per_vertex) else 0
    v = mesh.vertices.copy()
    if passes == 0:
        return mesh.copy(v)
    a = adjacency(mesh.faces, mesh.n_vertices)
    deg = np.asarray(a.sum(axis=1)).ravel()
    for p in range(passes):
        move = (per_vertex > p) & (deg > 0)
        mean = (a @ v)[move] / deg[move, None]
        v[move] = mean
    return mesh.copy(v)


def laplacian_energy(vertices, faces) -> float:
    lv = uniform_laplacian(faces, len(vertices)) @ vertices
    return float(np.sum(lv * lv))
