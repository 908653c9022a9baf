"""Registration objective (Chamfer + edge + Laplacian), its gradient, and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import uniform_laplacian, unique_edges
from .spatial import PointIndex, chamfer_pruned


@dataclass
class LossWeights:
    chamfer: float = 2e3
    edge: float = 2e5
    laplacian: float = 1e4
    prune_threshold: float = 1.0
    squared: bool = True

    def __post_init__(self):
        if min(self.chamfer, self.edge, self.laplacian) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.prune_threshold > 0:
            raise ValueError("prune_threshold must be positive")


def loss_edge(vertices, faces) -> float:
    """Mean squared length over unique undirected edges."""
    e = unique_edges(faces)
    if len(e) == 0:
        return 0.0
    d = vertices[e[:, 0]] - vertices[e[:, 1]]
    return float(np.sum(d * d) / len(e))


def loss_laplacian(vertices, faces) -> float:
    """Frobenius norm of the uniform Laplacian applied to the vertex positions."""
    lv = uniform_laplacian(faces, len(vertices)) @ vertices
    return float(np.sqrt(np.sum(lv * lv)))


class MeshLoss:
    """Loss and position-gradient for a fixed topology and target cloud.

    Chamfer correspondences are re-found on every call and held fixed for
    the gradient, as in ICP-style linearisation.
    """

    def __init__(self, faces, n_vertices, target, weights: LossWeights):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.n = int(n_vertices)
        self.target = np.ascontiguousarray(target, dtype=np.float64).reshape(-1, 3)
        self.weights = weights
        self.edges = unique_edges(self.faces)
        self.lap = uniform_laplacian(self.faces, self.n)
        self.lap_t = self.lap.T.tocsr()
        self.target_index = PointIndex(self.target) if len(self.target) else None

    def chamfer_terms(self, x):
        w = self.weights
        res = chamfer_pruned(x, self.target, w.prune_threshold, w.squared, index2=self.target_index)
        g = np.zeros_like(x)
        for idx, keep, forward in (
            (res.fwd_idx, res.fwd_keep, True),
            (res.bwd_idx, res.bwd_keep, False),
        ):
            n = int(keep.sum())
            if n == 0:
                continue
            if forward:
                rows = np.flatnonzero(keep)
                diff = x[rows] - self.target[idx[rows]]
            else:
                rows = idx[keep]
                diff = x[rows] - self.target[np.flatnonzero(keep)]
            if w.squared:
                contrib = 2.0 * diff / n
            else:
                d = np.linalg.norm(diff, axis=1, keepdims=True)
                contrib = np.divide(diff, d * n, out=np.zeros_like(diff), where=d > 0)
            # bincount sums in input order, keeping reductions reproducible
            for k in range(3):
                g[:, k] += np.bincount(rows, weights=contrib[:, k], minlength=self.n)
        return res, g

    def __call__(self, x, need_grad=True):
        """Return ``(value, terms, grad)`` with ``terms`` holding unweighted losses."""
        w = self.weights
        x = np.asarray(x, dtype=np.float64)
        grad = np.zeros_like(x) if need_grad else None
        terms = {"chamfer": 0.0, "edge": 0.0, "laplacian": 0.0}

        res, gc = self.chamfer_terms(x)
        terms["chamfer"] = res.value
        terms["empty_direction"] = res.empty_direction
        if need_grad and w.chamfer > 0:
            grad += w.chamfer * gc

        if len(self.edges):
            d = x[self.edges[:, 0]] - x[self.edges[:, 1]]
            terms["edge"] = float(np.sum(d * d) / len(self.edges))
            if need_grad and w.edge > 0:
                ge = (2.0 * w.edge / len(self.edges)) * d
                for k in range(3):
                    grad[:, k] += np.bincount(self.edges[:, 0], weights=ge[:, k], minlength=self.n)
                    grad[:, k] -= np.bincount(self.edges[:, 1], weights=ge[:, k], minlength=self.n)

        lv = self.lap @ x
        norm = float(np.sqrt(np.sum(lv * lv)))
        terms["laplacian"] = norm
        if need_grad and w.laplacian > 0 and norm > 0:
            grad += (w.laplacian / norm) * (self.lap_t @ lv)

        value = w.chamfer * terms["chamfer"] + w.edge * terms["edge"] + w.laplacian * terms["laplacian"]
        return value, terms, grad


def loss_total(displacement, mesh, target, weights: LossWeights):
    """Weighted objective on ``mesh.vertices + displacement``; returns ``(value, terms)``."""
    pts = target.points if hasattr(target, "points") else target
    fn = MeshLoss(mesh.faces, mesh.n_vertices, pts, weights)
    value, terms, _ = fn(mesh.vertices + displacement, need_grad=False)
    return value, terms


def loss_gradients(params, mesh, target, weights: LossWeights, free=None, base=None, normals=None):
    """Gradient of :func:`loss_total` w.r.t. the free parameters.

    With ``normals`` given, ``params`` are per-vertex amplitudes ``alpha`` and
    the displacement is ``base + normals * alpha``; otherwise ``params`` is
    the (n, 3) vector displacement. Rows outside ``free`` get zero gradient.
    """
    pts = target.points if hasattr(target, "points") else target
    fn = MeshLoss(mesh.faces, mesh.n_vertices, pts, weights)
    disp = displacement_from(params, base, normals)
    value, terms, g = fn(mesh.vertices + disp)
    g = reduce_gradient(g, normals)
    if free is not None:
        g[~np.asarray(free, dtype=bool)] = 0.0
    return value, g


def displacement_from(params, base=None, normals=None):
    if normals is None:
        return params if base is None else base + params
    d = normals * params[:, None]
    return d if base is None else base + d


def reduce_gradient(grad_x, normals=None):
    if normals is None:
        return grad_x
    return np.einsum("ij,ij->i", grad_x, normals)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError("parameter shape changed between steps")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# finite differences


def central_differences(f, x, h=1e-4):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """Max relative error over components whose magnitude exceeds ``floor``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    sel = np.maximum(np.abs(a), np.abs(n)) > floor
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(a[sel] - n[sel]) / np.maximum(np.abs(a[sel]), np.abs(n[sel]))))
