"""Transfer a displacement map onto deforming template sequences.

Displacements sampled on the neutral frame are expressed in its per-vertex
tangent frames and re-expressed in each target frame's tangent frames, so
they follow the surface as it rotates.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mesh import (MeshError, SubdivisionMap, TemplateMesh, apply_subdivision_map, face_areas,
                   laplacian_smooth, vertex_normals, write_obj)
from .uv import UvMap, sample_vertices

log = logging.getLogger(__name__)


@dataclass
class TbnFrame:
    tangent: np.ndarray  # (n, 3)
    bitangent: np.ndarray
    normal: np.ndarray

    def matrices(self) -> np.ndarray:
        """(n, 3, 3) with columns t, b, n."""
        return np.stack([self.tangent, self.bitangent, self.normal], axis=2)


def _normalize(v):
    ln = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, ln, out=np.zeros_like(v), where=ln > 0), ln[:, 0]


def compute_tbn(mesh: TemplateMesh, eps=1e-12) -> TbnFrame:
    """Per-vertex orthonormal tangent frames from UV derivatives.

    Face tangents are normalised and averaged per vertex with area weights,
    then made orthogonal to the vertex normal. The bitangent is ``n x t``,
    i.e. the Gram-Schmidt bitangent with handedness fixed so det[t b n] > 0.
    Vertices without a usable tangent get an arbitrary perpendicular.
    """
    if mesh.corner_uvs is None:
        raise MeshError("mesh has no texture coordinates")
    v = mesh.vertices
    f = mesh.faces
    p = v[f]
    uv = mesh.corner_uvs
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    d1, d2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = np.abs(det) > eps
    t_face = np.zeros_like(e1)
    t_face[ok] = (e1[ok] * d2[ok, 1:2] - e2[ok] * d1[ok, 1:2]) / det[ok, None]
    t_face, _ = _normalize(t_face)
    t_face *= face_areas(v, f)[:, None]

    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], t_face)
    n = vertex_normals(mesh)
    t = acc - np.einsum("ij,ij->i", acc, n)[:, None] * n
    t, ln = _normalize(t)
    bad = ln <= 1e-12 * np.maximum(np.linalg.norm(acc, axis=1), 1e-300)
    bad |= ln == 0
    if bad.any():
        log.warning("%d vertices have no usable UV tangent; using a fallback frame", int(bad.sum()))
        nb = n[bad]
        axis = np.eye(3)[np.argmin(np.abs(nb), axis=1)]
        t[bad], _ = _normalize(np.cross(nb, axis))
    b = np.cross(n, t)
    return TbnFrame(t, b, n)


def encode_tbn(displacements, frame: TbnFrame) -> np.ndarray:
    """Object-space displacements -> (t.d, b.d, n.d) per vertex."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.shape != frame.tangent.shape:
        raise ValueError(f"displacements {d.shape} do not match the frame {frame.tangent.shape}")
    return np.stack([np.einsum("ij,ij->i", frame.tangent, d),
                     np.einsum("ij,ij->i", frame.bitangent, d),
                     np.einsum("ij,ij->i", frame.normal, d)], axis=1)


def decode_tbn(coeffs, frame: TbnFrame) -> np.ndarray:
    """Inverse of :func:`encode_tbn` using the triads of ``frame``."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != frame.tangent.shape:
        raise ValueError(f"coefficients {c.shape} do not match the frame {frame.tangent.shape}")
    return frame.tangent * c[:, :1] + frame.bitangent * c[:, 1:2] + frame.normal * c[:, 2:3]


def prepare_frame(mesh: TemplateMesh, smap: SubdivisionMap, smoothing=None) -> TemplateMesh:
    """Subdivide with the shared map and apply regional smoothing."""
    return laplacian_smooth(apply_subdivision_map(smap, mesh), smoothing)


def animate_sequence(neutral: TemplateMesh, frames, uvmap: UvMap, smap: SubdivisionMap,
                     smoothing=None, workers=1):
    """Displaced, subdivided meshes for every frame.

    The map is sampled once on the prepared neutral surface, encoded in the
    neutral tangent frames and decoded with each frame's own frames.
    """
    frames = list(frames)
    for i, fr in enumerate(frames):
        if fr.n_vertices != neutral.n_vertices or not np.array_equal(fr.faces, neutral.faces):
            raise MeshError(f"frame {i} does not share the neutral topology")
    base = prepare_frame(neutral, smap, smoothing)
    disp = sample_vertices(uvmap, base)[:, :3]
    coeffs = encode_tbn(disp, compute_tbn(base))

    def run(fr):
        m = prepare_frame(fr, smap, smoothing)
        return m.copy(m.vertices + decode_tbn(coeffs, compute_tbn(m)))

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(run, frames))
    return [run(fr) for fr in frames]


def write_sequence(directory, meshes):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, m in enumerate(meshes):
        path = os.path.join(directory, f"frame_{i:05d}.obj")
        write_obj(path, m.vertices, m.faces, m.corner_uvs)
        paths.append(path)
    return paths
