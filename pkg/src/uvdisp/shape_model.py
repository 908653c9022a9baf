"""Linear (PCA) model over UV displacement maps.

Maps are flattened over the shared valid-texel index (row-major, channels
last). Latent codes are in units of per-component standard deviations, so
``z ~ N(0, I)`` samples the model and ``psi`` truncates toward the mean.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .optim import AdamState, adam_step
from .uv import UvMap, face_circle_mask, left_half

log = logging.getLogger(__name__)

PCA_MAGIC = b"HCPC"
DEFAULT_PSI = 0.7
DEFAULT_REG = 1e-3
DEFAULT_FACE_WEIGHT = 10.0 / 256.0
DEFAULT_L1_WEIGHT = 3.0


class ShapeModelError(ValueError):
    pass


@dataclass
class LinearShapeModel:
    mean: np.ndarray  # (T,)
    basis: np.ndarray  # (K, T), orthonormal rows
    sigma: np.ndarray  # (K,)
    valid: np.ndarray  # (H, W) bool
    face_mask: np.ndarray  # (H, W) bool
    channels: int = 3

    @property
    def n_components(self):
        return len(self.sigma)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def dim(self):
        return len(self.mean)

    def flatten(self, uvmap) -> np.ndarray:
        values = uvmap.values if isinstance(uvmap, UvMap) else np.asarray(uvmap, dtype=np.float64)
        if values.shape[:2] != self.shape or values.shape[2] != self.channels:
            raise ShapeModelError(f"map of shape {values.shape} does not match the model {self.shape}")
        return values[self.valid].reshape(-1)

    def texel_mask(self, mask) -> np.ndarray:
        """Per-texel (H, W) mask -> per-element mask over the flattened vector."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.shape:
            raise ShapeModelError(f"mask shape {mask.shape} does not match the model {self.shape}")
        return np.repeat(mask[self.valid], self.channels)

    def to_map(self, vec) -> UvMap:
        h, w = self.shape
        values = np.zeros((h, w, self.channels))
        values[self.valid] = np.asarray(vec, dtype=np.float64).reshape(-1, self.channels)
        return UvMap(values, self.valid.copy(), self.face_mask.copy(), seam_processed=True)


def _stack(maps):
    if len(maps) < 2:
        raise ShapeModelError("need at least two maps")
    valid = maps[0].valid
    for m in maps[1:]:
        if m.values.shape != maps[0].values.shape:
            raise ShapeModelError("maps have different resolutions")
        if not np.array_equal(m.valid, valid):
            raise ShapeModelError("maps have inconsistent valid masks")
    return valid, np.stack([m.values[valid].reshape(-1) for m in maps])


def fit_pca(maps, n_components=None) -> LinearShapeModel:
    """Fit mean, orthonormal basis and scales from centred-data SVD.

    ``n_components`` defaults to ``min(64, S - 1)``. Component signs are
    fixed so the largest-magnitude entry of each basis vector is positive.
    """
    valid, x = _stack(list(maps))
    s = len(x)
    k = min(64, s - 1) if n_components is None else int(n_components)
    if k < 1 or k > min(s - 1, x.shape[1]):
        raise ShapeModelError(f"n_components={k} must be in [1, {min(s - 1, x.shape[1])}]")
    mean = x.mean(axis=0)
    _, sv, vt = linalg.svd(x - mean, full_matrices=False, lapack_driver="gesvd")
    basis = vt[:k].copy()
    flip = np.sign(basis[np.arange(k), np.argmax(np.abs(basis), axis=1)])
    basis *= flip[:, None]
    sigma = sv[:k] / np.sqrt(s - 1)
    return LinearShapeModel(mean, basis, sigma, valid.copy(), maps[0].face_mask.copy(),
                            maps[0].values.shape[2])


def reconstruct(model: LinearShapeModel, code) -> np.ndarray:
    """Flattened map ``mu + B^T diag(sigma) code``."""
    code = np.asarray(code, dtype=np.float64)
    return model.mean + (model.sigma * code) @ model.basis


def project(model: LinearShapeModel, uvmap) -> np.ndarray:
    """Latent code (sigma units) of the orthogonal projection onto the model span."""
    coords = model.basis @ (model.flatten(uvmap) - model.mean)
    return np.divide(coords, model.sigma, out=np.zeros_like(coords), where=model.sigma > 0)


def sample(model: LinearShapeModel, z=None, psi=DEFAULT_PSI, seed=None) -> UvMap:
    """One map ``mu + B diag(sigma) (psi z)``; ``z`` is drawn from N(0, I) if omitted."""
    if psi < 0:
        raise ValueError("psi must be non-negative")
    if z is None:
        z = np.random.default_rng(seed).standard_normal(model.n_components)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.n_components,):
        raise ShapeModelError(f"latent code must have {model.n_components} entries")
    if psi == 0:
        return model.to_map(model.mean)
    return model.to_map(reconstruct(model, psi * z))


def sample_codes(model: LinearShapeModel, count, seed=None) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((int(count), model.n_components))


def fit_latent_masked(model: LinearShapeModel, target, mask, reg=DEFAULT_REG,
                      face_weight=DEFAULT_FACE_WEIGHT, iterative=False, steps=300, lr=1e-2,
                      l1_weight=DEFAULT_L1_WEIGHT):
    """Latent code explaining ``target`` on the texels selected by ``mask``.

    Closed form: ridge least squares over masked elements,
    ``(A_M^T A_M + reg I) c = A_M^T (U - mu)_M`` with ``A = B^T diag(sigma)``.
    With ``iterative`` the code is refined by Adam on a masked L1 data term
    plus ``face_weight`` times the mean absolute reconstruction inside the
    face mask, keeping the ridge term.
    """
    m = model.texel_mask(mask)
    if not m.any():
        raise ShapeModelError("mask selects no valid texels")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    y = model.flatten(target) - model.mean
    a = model.basis[:, m].T * model.sigma  # (|M|, K)
    normal = a.T @ a
    if reg > 0:
        normal = normal + reg * np.eye(model.n_components)
    ev = np.linalg.eigvalsh(normal)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise ShapeModelError("singular normal matrix; use reg > 0")
    code = linalg.solve(normal, a.T @ y[m], assume_a="pos")
    if not iterative:
        return code

    face = model.texel_mask(model.face_mask)
    a_face = model.basis[:, face].T * model.sigma if face.any() else None
    state = AdamState(lr=lr)
    n_m = int(m.sum())
    for _ in range(steps):
        r = a @ code - y[m]
        g = l1_weight * (a.T @ np.sign(r)) / n_m + 2.0 * reg * code
        if a_face is not None and face_weight > 0:
            rec_face = model.mean[face] + a_face @ code
            g += face_weight * (a_face.T @ np.sign(rec_face)) / len(rec_face)
        code = adam_step(state, code, g)
    return code


def masked_objective(model, code, target, mask, reg=DEFAULT_REG):
    m = model.texel_mask(mask)
    r = (reconstruct(model, code) - model.flatten(target))[m]
    return float(r @ r + reg * np.dot(code, code))


def nearest_training(maps, query, region=None):
    """Index and region-restricted L2 distance of the closest training map.

    ``region`` defaults to the scalp half (``u < 0.5``). Ties go to the
    lowest index.
    """
    maps = list(maps)
    if not maps:
        raise ShapeModelError("empty training set")
    q = query.values if isinstance(query, UvMap) else np.asarray(query, dtype=np.float64)
    if region is None:
        region = left_half(*q.shape[:2])
    region = np.asarray(region, dtype=bool)
    qv = q[region]
    best, best_d = -1, np.inf
    for i, m in enumerate(maps):
        v = m.values if isinstance(m, UvMap) else np.asarray(m, dtype=np.float64)
        if v.shape != q.shape:
            raise ShapeModelError("training map and query shapes differ")
        diff = v[region] - qv
        d = float(np.sqrt(np.sum(diff * diff)))
        if d < best_d:
            best, best_d = i, d
    return best, best_d


# ---------------------------------------------------------------------------
# persistence


def orthonormalize_rows(basis) -> np.ndarray:
    """Closest matrix with orthonormal rows (symmetric / Loewdin orthogonalisation)."""
    gram = basis @ basis.T
    w, v = np.linalg.eigh(gram)
    return (v / np.sqrt(w)) @ v.T @ basis


def save_model(path, model: LinearShapeModel):
    h, w = model.shape
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(struct.pack("<5I", h, w, model.channels, model.n_components, model.dim))
        fh.write(model.valid.astype(np.uint8).tobytes())
        fh.write(model.face_mask.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(model.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.sigma, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.basis, dtype="<f4").tobytes())


def load_model(path) -> LinearShapeModel:
    """Read a model file; the float32 basis is re-orthonormalised on load."""
    with open(path, "rb") as fh:
        if fh.read(4) != PCA_MAGIC:
            raise ShapeModelError(f"{path}: bad model magic")
        h, w, c, k, t = struct.unpack("<5I", fh.read(20))
        valid = np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w) > 0
        face = np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w) > 0
        mean = np.frombuffer(fh.read(4 * t), dtype="<f4").astype(np.float64)
        sigma = np.frombuffer(fh.read(4 * k), dtype="<f4").astype(np.float64)
        basis = np.frombuffer(fh.read(4 * k * t), dtype="<f4").astype(np.float64)
    if basis.size != k * t or mean.size != t or int(valid.sum()) * c != t:
        raise ShapeModelError(f"{path}: truncated or inconsistent model file")
    basis = orthonormalize_rows(basis.reshape(k, t))
    return LinearShapeModel(mean, basis, sigma, valid, face, c)


def default_face_mask(height, width):
    return face_circle_mask(height, width)
