"""Synthetic head-like fixtures: a UV-unwrapped sphere template with region
labels, bumpy scans over the scalp, planar two-chart meshes and map families.

The sphere layout mimics a two-region head unwrap: a frontal cap (+z) maps to
the right half of UV space, the remaining "scalp" maps to the left half, and
the cap border is the seam.
"""
from __future__ import annotations

import numpy as np

from .mesh import REGION_INDEX, TemplateMesh, build_subdivision_map, apply_subdivision_map, subdivide

FACE_CAP_Z = 0.55
CHART_RADIUS = 0.23
SCALP_CENTER = (0.25, 0.5)
FACE_CENTER = (0.75, 0.5)

_BUMP_CENTERS = np.array([
    [0.0, 0.7, -0.7],
    [0.55, 0.35, -0.75],
    [-0.55, 0.3, -0.78],
    [0.0, 0.05, -1.0],
    [0.0, 0.98, 0.15],
    [0.45, 0.75, 0.1],
])
_BUMP_CENTERS /= np.linalg.norm(_BUMP_CENTERS, axis=1, keepdims=True)
DEFAULT_BUMP_COEFFS = np.array([1.0, 0.6, -0.5, 0.8, 0.7, -0.4])


def icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(level=2, radius=1.0):
    """Icosphere with ``10 * 4**level + 2`` vertices on a sphere of ``radius``."""
    v, f = icosahedron()
    mesh = TemplateMesh(v, f)
    for _ in range(level):
        mesh = subdivide(mesh, 1)
        mesh.vertices /= np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return mesh.vertices * radius, mesh.faces


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _angle(dirs, c):
    return np.arccos(np.clip(dirs @ (c / np.linalg.norm(c)), -1.0, 1.0))


def sphere_regions(vertices):
    d = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    lab = np.full(len(d), REGION_INDEX["scalp"], dtype=np.int8)
    lab[np.abs(d[:, 0]) > 0.85] = REGION_INDEX["ears"]
    lab[d[:, 1] < -0.6] = REGION_INDEX["neck"]
    face = d[:, 2] > FACE_CAP_Z
    lab[face] = REGION_INDEX["face_skin"]
    mouth = np.array([0.0, -0.3, 0.95])
    lab[face & (_angle(d, mouth) < 0.16)] = REGION_INDEX["lips"]
    lab[face & (_angle(d, mouth) < 0.06)] = REGION_INDEX["inner_mouth"]
    for sx in (-1, 1):
        eye = np.array([0.33 * sx, 0.28, 0.9])
        lab[face & (_angle(d, eye) < 0.12)] = REGION_INDEX["eyeballs"]
    return lab


def _chart_uvs(corner_pos, in_face):
    d = corner_pos / np.linalg.norm(corner_pos, axis=-1, keepdims=True)
    uv = np.zeros(d.shape[:-1] + (2,))
    # frontal cap: azimuthal equidistant projection about +z
    df = d[in_face]
    th = np.arccos(np.clip(df[..., 2], -1, 1))
    ph = np.arctan2(df[..., 1], df[..., 0])
    r = th / th.max() * CHART_RADIUS
    uv[in_face] = np.stack([FACE_CENTER[0] + r * np.cos(ph), FACE_CENTER[1] + r * np.sin(ph)], -1)
    # scalp: projection about -z, mirrored in x to keep orientation
    ds = d[~in_face]
    th = np.arccos(np.clip(-ds[..., 2], -1, 1))
    ph = np.arctan2(ds[..., 1], -ds[..., 0])
    r = th / th.max() * CHART_RADIUS
    uv[~in_face] = np.stack([SCALP_CENTER[0] + r * np.cos(ph), SCALP_CENTER[1] + r * np.sin(ph)], -1)
    return uv


def sphere_base(level=2, radius=1.0) -> TemplateMesh:
    """Coarse UV-unwrapped sphere: the 'base topology' before subdivision."""
    v, f = icosphere(level, radius)
    centroid = v[f].mean(axis=1)
    in_face = centroid[:, 2] / np.linalg.norm(centroid, axis=1) > FACE_CAP_Z
    uv = _chart_uvs(v[f], in_face)
    return TemplateMesh(v, f, uv, sphere_regions(v))


def sphere_template(level=2, iterations=2, radius=1.0, project=True):
    """Subdivided sphere template and its subdivision map.

    Positions come from the consistent subdivision map; with ``project`` the
    new vertices are pushed back onto the sphere and regions relabeled.
    """
    base = sphere_base(level, radius)
    smap = build_subdivision_map(base, iterations)
    tpl = apply_subdivision_map(smap, base)
    if project:
        v = tpl.vertices / np.linalg.norm(tpl.vertices, axis=1, keepdims=True) * radius
        tpl = TemplateMesh(v, tpl.faces, tpl.corner_uvs, sphere_regions(v))
    return tpl, smap, base


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def bump_field(dirs, coeffs=DEFAULT_BUMP_COEFFS, width=0.45):
    """Smooth scalar field on the unit sphere, zero outside the scalp."""
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    val = np.zeros(len(dirs))
    for c, a in zip(_BUMP_CENTERS[: len(coeffs)], coeffs):
        ang = np.arccos(np.clip(dirs @ c, -1, 1))
        val += a * np.exp(-0.5 * (ang / width) ** 2)
    taper = (
        _smoothstep((0.35 - dirs[:, 2]) / 0.25)
        * _smoothstep((dirs[:, 1] + 0.45) / 0.2)
        * _smoothstep((0.78 - np.abs(dirs[:, 0])) / 0.15)
    )
    return val * taper


def bumpy_sphere_points(n=10000, radius=1.0, amplitude=0.08, coeffs=DEFAULT_BUMP_COEFFS):
    d = fibonacci_sphere(n)
    return d * (radius + amplitude * bump_field(d, coeffs))[:, None]


def family_coeffs(count, seed=0, n_bumps=6):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(count, n_bumps)) * 0.6


# ---------------------------------------------------------------------------
# planar fixtures


def planar_two_chart(n=16) -> TemplateMesh:
    """Unit square in z=0 cut along x=0.5 into two UV charts.

    The left half maps to u in [0.05, 0.45], the right half to
    u in [0.55, 0.95]; both map y to v in [0.05, 0.95]. The cut column is
    the seam.
    """
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    faces = []
    for r in range(n):
        for c in range(n):
            a, b, d, e = idx[r, c], idx[r, c + 1], idx[r + 1, c], idx[r + 1, c + 1]
            faces += [[a, b, e], [a, e, d]]
    faces = np.array(faces)
    corner = v[faces]
    centroid_x = corner[..., 0].mean(axis=1)
    left = centroid_x < 0.5
    uv = np.empty(corner.shape[:-1] + (2,))
    x, y = corner[..., 0], corner[..., 1]
    uv[..., 1] = 0.05 + 0.9 * y
    uv[..., 0] = np.where(left[:, None], 0.05 + 0.8 * x, 0.55 + 0.8 * (x - 0.5))
    regions = np.where(v[:, 0] < 0.5, REGION_INDEX["scalp"], REGION_INDEX["face_skin"])
    return TemplateMesh(v, faces, uv, regions)


def planar_grid(n=4, spacing=1.0):
    """Regular (n+1)x(n+1) grid with axis-aligned UVs in [0, 1]^2."""
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    v = np.stack([gx.ravel() * n * spacing, gy.ravel() * n * spacing, np.zeros(gx.size)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    faces = []
    for r in range(n):
        for c in range(n):
            a, b, d, e = idx[r, c], idx[r, c + 1], idx[r + 1, c], idx[r + 1, c + 1]
            faces += [[a, b, e], [a, e, d]]
    faces = np.array(faces)
    uv = np.stack([gx.ravel(), gy.ravel()], axis=1)[faces]
    return TemplateMesh(v, faces, uv)


def random_mesh(n_side=6, seed=0, jitter=0.1):
    """Jittered, bent grid: a small irregular open surface."""
    rng = np.random.default_rng(seed)
    g = planar_grid(n_side - 1)
    v = g.vertices / (n_side - 1)
    v[:, :2] += rng.uniform(-jitter, jitter, size=(len(v), 2)) / (n_side - 1)
    v[:, 2] = 0.3 * np.sin(2.0 * v[:, 0]) + 0.2 * v[:, 1] ** 2 + rng.normal(0, 0.02, len(v))
    return TemplateMesh(v, g.faces, np.clip(g.corner_uvs, 0, 1))


def smooth_map_family(count, height=64, width=64, n_basis=8, seed=0, noise=0.0):
    """Random linear combinations of smooth 3-channel fields on a UV grid."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx / (width - 1)
    v = yy / (height - 1)
    basis = []
    for k in range(n_basis):
        fx, fy = rng.uniform(0.5, 2.5, 2)
        ph = rng.uniform(0, 2 * np.pi, 3)
        basis.append(np.stack([np.sin(2 * np.pi * (fx * u + fy * v) + ph[c]) for c in range(3)], -1))
    basis = np.array(basis)
    mean = 0.2 * np.stack([u, v, u * v], -1)
    coeffs = rng.normal(0, 1, size=(count, n_basis)) * np.linspace(1.0, 0.4, n_basis)
    maps = mean[None] + np.einsum("sk,khwc->shwc", coeffs, basis)
    if noise:
        maps = maps + rng.normal(0, noise, size=maps.shape)
    return maps, coeffs
