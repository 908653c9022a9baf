"""Two-stage displacement registration of a template to a scan.

Stage 1 optimises free per-vertex vector displacements; stage 2 optimises
per-vertex amplitudes along the stage-1 normals on top of them.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import TemplateMesh, ScanCloud, adjacency, vertex_normals, write_obj
from .optim import AdamState, LossWeights, MeshLoss, adam_step, displacement_from, reduce_gradient
from .spatial import PointIndex, build_hull_mask, chamfer_pruned

log = logging.getLogger(__name__)

CLIP_RANGE = 20.0
DISP_MAGIC = b"HCDP"


class RegistrationError(RuntimeError):
    pass


@dataclass
class StageConfig:
    weights: LossWeights
    lr: float
    steps: int = 1000
    free_regions: tuple = ("scalp",)
    mode: str = "vector"
    recompute_normals: bool = False

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("step count must be positive")
        if self.mode not in ("vector", "normal"):
            raise ValueError(f"unknown stage mode {self.mode!r}")


def default_stage1(**kw) -> StageConfig:
    cfg = StageConfig(LossWeights(2e3, 2e5, 1e4, 1.0), lr=3e-2, free_regions=("scalp",), mode="vector")
    return replace(cfg, **kw)


def default_stage2(**kw) -> StageConfig:
    cfg = StageConfig(LossWeights(2e4, 2e4, 1e4, 1.0), lr=3e-4,
                      free_regions=("scalp", "face_skin", "lips"), mode="normal")
    return replace(cfg, **kw)


def partial_stage1(**kw) -> StageConfig:
    return default_stage1(weights=LossWeights(2e3, 8e5, 1e5, 10.0), **kw)


def partial_stage2(**kw) -> StageConfig:
    return default_stage2(weights=LossWeights(2e4, 2e4, 1e4, 0.1), **kw)


@dataclass
class RegistrationResult:
    d_stage1: np.ndarray
    alpha: np.ndarray
    normals: np.ndarray
    d_stage2: np.ndarray
    mask: np.ndarray
    trace: list = field(default_factory=list)
    stage_chamfer: dict = field(default_factory=dict)

    @property
    def displacement(self) -> np.ndarray:
        """Final displacements, clipped per component to [-20, 20]."""
        return np.clip(self.d_stage2, -CLIP_RANGE, CLIP_RANGE)


def boundary_vertices(mask, mesh: TemplateMesh) -> np.ndarray:
    """Indices of masked vertices with at least one unmasked one-ring neighbour."""
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != mesh.n_vertices:
        raise ValueError("mask length must equal vertex count")
    a = adjacency(mesh.faces, mesh.n_vertices)
    outside_nbrs = a @ (~mask).astype(np.float64)
    return np.flatnonzero(mask & (outside_nbrs > 0))


def run_stage(mesh, target_points, cfg: StageConfig, free, base=None, normals=None,
              stage_name="stage", trace=None, target_index=None):
    """Adam loop for one stage; returns the optimised parameters."""
    n = mesh.n_vertices
    loss = MeshLoss(mesh.faces, n, target_points, cfg.weights)
    if target_index is not None:
        loss.target_index = target_index
    free = np.asarray(free, dtype=bool)
    params = np.zeros(n) if cfg.mode == "normal" else np.zeros((n, 3))
    state = AdamState(lr=cfg.lr)
    base_disp = np.zeros((n, 3)) if base is None else base
    for step in range(cfg.steps):
        if cfg.mode == "normal" and cfg.recompute_normals and step > 0:
            normals = vertex_normals(mesh, displacement_from(params, base_disp, normals))
        disp = displacement_from(params, base_disp, normals if cfg.mode == "normal" else None)
        # squared norm also catches magnitudes whose distances would overflow
        if not np.isfinite(np.einsum("ij,ij->", disp, disp)):
            raise RegistrationError(f"{stage_name}: non-finite displacements at step {step}")
        value, terms, g = loss(mesh.vertices + disp)
        if not np.isfinite(value):
            raise RegistrationError(f"{stage_name}: non-finite loss at step {step}")
        if trace is not None:
            trace.append((stage_name, step, value, terms["chamfer"], terms["edge"], terms["laplacian"]))
        g = reduce_gradient(g, normals if cfg.mode == "normal" else None)
        g[~free] = 0.0
        params = adam_step(state, params, g)
    params[~free] = 0.0
    return params, normals


def _free_mask(mesh, cfg: StageConfig, extra=None, frozen=None):
    free = mesh.region_mask(cfg.free_regions)
    if extra is not None:
        free &= extra
    if frozen is not None and len(frozen):
        free[frozen] = False
    return free


def _register(mesh, scan, cfg1, cfg2, allowed=None):
    if isinstance(scan, ScanCloud):
        pts = scan.points
    else:
        pts = ScanCloud(scan).points
    if cfg1.mode != "vector" or cfg2.mode != "normal":
        raise ValueError("stage 1 must be 'vector' and stage 2 'normal'")
    frozen = boundary_vertices(allowed, mesh) if allowed is not None else None
    index = PointIndex(pts)
    trace = []

    free1 = _free_mask(mesh, cfg1, allowed, frozen)
    d1, _ = run_stage(mesh, pts, cfg1, free1, stage_name="stage1", trace=trace, target_index=index)
    ch1 = chamfer_pruned(mesh.vertices + d1, pts, np.inf, index2=index).value

    normals = vertex_normals(mesh, d1)
    free2 = _free_mask(mesh, cfg2, allowed, frozen)
    alpha, normals = run_stage(mesh, pts, cfg2, free2, base=d1, normals=normals,
                               stage_name="stage2", trace=trace, target_index=index)
    d2 = d1 + normals * alpha[:, None]
    ch2 = chamfer_pruned(mesh.vertices + d2, pts, np.inf, index2=index).value
    log.info("registration done: chamfer stage1=%.6g stage2=%.6g", ch1, ch2)
    result = RegistrationResult(d1, alpha, normals, d2, np.ones(mesh.n_vertices, dtype=bool), trace,
                                {"stage1": ch1, "stage2": ch2})
    return result, index


def register_full(mesh: TemplateMesh, scan, cfg1: StageConfig | None = None,
                  cfg2: StageConfig | None = None) -> RegistrationResult:
    result, _ = _register(mesh, scan, cfg1 or default_stage1(), cfg2 or default_stage2())
    return result


def register_partial(mesh: TemplateMesh, cloud, cfg1: StageConfig | None = None,
                     cfg2: StageConfig | None = None, proximity=0.1, expansion=1.5,
                     floor_quantile=0.3, vertical_axis=1) -> RegistrationResult:
    """Register only the template part inside the (expanded) hull of a partial cloud.

    The returned ``mask`` marks vertices that were allowed to move and end up
    within ``proximity`` of the cloud.
    """
    pts = cloud.points if isinstance(cloud, ScanCloud) else ScanCloud(cloud).points
    cfg1 = cfg1 or partial_stage1()
    cfg2 = cfg2 or partial_stage2()
    hull = build_hull_mask(pts, mesh.vertices, expansion, floor_quantile, vertical_axis)
    m = hull & mesh.region_mask(cfg2.free_regions)
    if not (hull & mesh.region_mask(cfg1.free_regions)).any() and not m.any():
        raise RegistrationError("no free vertices inside the hull of the partial cloud")
    result, index = _register(mesh, pts, cfg1, cfg2, allowed=hull)
    _, d2 = index.query(mesh.vertices + result.d_stage2)
    result.mask = m & (np.sqrt(d2) <= proximity)
    return result


# ---------------------------------------------------------------------------
# result files


def write_displacements(path, disp):
    disp = np.asarray(disp, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(DISP_MAGIC)
        fh.write(struct.pack("<I", len(disp)))
        fh.write(disp.tobytes())


def read_displacements(path):
    with open(path, "rb") as fh:
        if fh.read(4) != DISP_MAGIC:
            raise ValueError(f"{path}: bad displacement table magic")
        (n,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(12 * n), dtype="<f4")
    if data.size != 3 * n:
        raise ValueError(f"{path}: truncated displacement table")
    return data.reshape(n, 3).astype(np.float64)


def write_mask(path, mask):
    with open(path, "w") as fh:
        fh.write("".join("1\n" if m else "0\n" for m in mask))


def read_mask(path):
    with open(path) as fh:
        return np.array([ln.strip() == "1" for ln in fh if ln.strip()], dtype=bool)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "loss", "chamfer", "edge", "laplacian"])
        for row in trace:
            w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])


def save_result(prefix, mesh: TemplateMesh, result: RegistrationResult):
    """Write ``<prefix>.obj``, ``.disp``, ``.mask.txt`` and ``.trace.csv``."""
    disp = result.displacement
    write_obj(f"{prefix}.obj", mesh.vertices + disp, mesh.faces, mesh.corner_uvs)
    write_displacements(f"{prefix}.disp", disp)
    write_mask(f"{prefix}.mask.txt", result.mask)
    write_trace(f"{prefix}.trace.csv", result.trace)
