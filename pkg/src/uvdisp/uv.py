"""UV displacement maps: baking, seam post-processing, empty-space fill,
bilinear sampling and 16-bit / raw storage.

Texel ``(row i, col j)`` sits at ``u = j / (W - 1)``, ``v = i / (H - 1)``;
the left half (``u < 0.5``) holds the scalp chart, the right half the face.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

CODE_RANGE = 20.0
CODE_MAX = 65535
QUANT_STEP = 2 * CODE_RANGE / CODE_MAX
RAW_MAGIC = b"HCUV"

FACE_CIRCLE = ((0.75, 0.5), 0.12)  # (center (u, v), radius) of the face-detail mask


def face_circle_mask(height, width, center=FACE_CIRCLE[0], radius=FACE_CIRCLE[1]):
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx / (width - 1)
    v = yy / (height - 1)
    return (u - center[0]) ** 2 + (v - center[1]) ** 2 <= radius ** 2


def left_half(height, width):
    return np.broadcast_to(np.arange(width) / (width - 1) < 0.5, (height, width)).copy()


@dataclass
class UvMap:
    values: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W) bool
    face_mask: np.ndarray | None = None
    seam_processed: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape[:2]:
            raise ValueError("valid mask shape does not match the map")
        if self.face_mask is None:
            self.face_mask = face_circle_mask(*self.shape)

    @property
    def shape(self):
        return self.values.shape[:2]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def copy(self, **kw) -> UvMap:
        base = replace(self, values=self.values.copy(), valid=self.valid.copy(),
                       face_mask=self.face_mask.copy())
        return replace(base, **kw) if kw else base


# ---------------------------------------------------------------------------
# baking


def bake(mesh, values, resolution=256, width=None):
    """Rasterise per-vertex (or per-corner ``(m, 3, C)``) values into UV space.

    Texels whose centres fall inside a UV triangle (edges inclusive) get the
    barycentric interpolation of the corner values. Later faces overwrite
    earlier ones. Returns ``(UvMap, overlap_count)`` where the count is the
    number of texels strictly inside more than one triangle.
    """
    if mesh.corner_uvs is None:
        raise ValueError("mesh has no texture coordinates")
    h = int(resolution)
    w = int(width or resolution)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    corner_vals = values if values.ndim == 3 else values[mesh.faces]
    c = corner_vals.shape[-1]
    out = np.zeros((h, w, c))
    valid = np.zeros((h, w), dtype=bool)
    inside_hits = np.zeros((h, w), dtype=np.int32)
    pix = mesh.corner_uvs * np.array([w - 1, h - 1])
    eps = 1e-9
    for f in range(len(mesh.faces)):
        p = pix[f]
        x0, y0 = np.floor(p.min(axis=0) - eps).astype(int)
        x1, y1 = np.ceil(p.max(axis=0) + eps).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        if x1 < x0 or y1 < y0:
            continue
        (ax, ay), (bx, by), (cx, cy) = p
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(den) < 1e-14:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        l0 = ((by - cy) * (xs - cx) + (cx - bx) * (ys - cy)) / den
        l1 = ((cy - ay) * (xs - cx) + (ax - cx) * (ys - cy)) / den
        l2 = 1.0 - l0 - l1
        tol = 1e-9
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        if not inside.any():
            continue
        strict = (l0 > tol) & (l1 > tol) & (l2 > tol)
        yy, xx = ys[inside], xs[inside]
        lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
        out[yy, xx] = lam @ corner_vals[f]
        valid[yy, xx] = True
        inside_hits[ys[strict], xs[strict]] += 1
    overlaps = int(np.count_nonzero(inside_hits > 1))
    if overlaps:
        log.warning("UV layout overlaps: %d texels covered by more than one triangle", overlaps)
    return UvMap(out, valid), overlaps


# ---------------------------------------------------------------------------
# seams


@dataclass
class SeamTable:
    """Texel correspondences across the scalp/face seam.

    ``pairs`` is (k, 2, 2) of ``[(row, col) scalp side, (row, col) face side]``;
    each texel appears in at most one pair.
    """

    shape: tuple
    pairs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def left(self):
        return self.pairs[:, 0]

    @property
    def right(self):
        return self.pairs[:, 1]

    def sites(self):
        """All seam texels as linear indices, sorted ascending."""
        h, w = self.shape
        lin = np.concatenate([self.left[:, 0] * w + self.left[:, 1], self.right[:, 0] * w + self.right[:, 1]])
        return np.unique(lin)

    def side_field(self, side):
        """``(dist, nearest_linear_index)`` over all texels for one seam side."""
        if side not in self._cache:
            h, w = self.shape
            pts = self.left if side == "left" else self.right
            lin = np.unique(pts[:, 0] * w + pts[:, 1])
            self._cache[side] = nearest_site_field(lin, h, w)
        return self._cache[side]


def nearest_site_field(site_linear, height, width, chunk=8192):
    """Exact Euclidean distance and nearest site for every texel.

    Ties go to the lowest linear site index (integer arithmetic, so exact).
    """
    site_linear = np.asarray(site_linear, dtype=np.int64)
    if len(site_linear) == 0:
        raise ValueError("no seam sites")
    sr, sc = np.divmod(site_linear, width)
    n = height * width
    best = np.empty(n, dtype=np.int64)
    bestd = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        q = np.arange(s, min(s + chunk, n))
        qr, qc = np.divmod(q, width)
        d2 = (qr[:, None] - sr[None, :]) ** 2 + (qc[:, None] - sc[None, :]) ** 2
        k = np.argmin(d2, axis=1)
        best[s:s + len(q)] = site_linear[k]
        bestd[s:s + len(q)] = d2[np.arange(len(q)), k]
    return np.sqrt(bestd).reshape(height, width), best.reshape(height, width)


def build_seam_table(mesh, resolution=256, width=None) -> SeamTable:
    """Derive seam texel pairs from vertices whose corners sit in both UV halves.

    Seam edges (both endpoints on the seam, present in a left and a right
    face) are sampled densely so the pairing covers the seam between vertices.
    Pairs are accepted greedily so each texel is used once.
    """
    h = int(resolution)
    w = int(width or resolution)
    uv = mesh.corner_uvs
    faces = mesh.faces
    face_left = uv[:, :, 0].mean(axis=1) < 0.5
    scale = np.array([w - 1, h - 1])

    # per (vertex, side) the first corner UV in face order
    left_uv, right_uv = {}, {}
    for f in range(len(faces)):
        target = left_uv if face_left[f] else right_uv
        for k in range(3):
            target.setdefault(int(faces[f, k]), uv[f, k])
    seam_vertices = sorted(set(left_uv) & set(right_uv))

    # edge -> UV endpoints per side
    edge_side = {}
    for f in range(len(faces)):
        side = 0 if face_left[f] else 1
        for k in range(3):
            a, b = int(faces[f, k]), int(faces[f, (k + 1) % 3])
            ua, ub = uv[f, k], uv[f, (k + 1) % 3]
            key = (a, b) if a < b else (b, a)
            if a > b:
                ua, ub = ub, ua
            edge_side.setdefault(key, [None, None])
            if edge_side[key][side] is None:
                edge_side[key][side] = (ua, ub)

    samples = []
    for v in seam_vertices:
        samples.append((left_uv[v], right_uv[v]))
    for key in sorted(edge_side):
        lft, rgt = edge_side[key]
        if lft is None or rgt is None:
            continue
        length = max(np.abs((lft[1] - lft[0]) * scale).max(), np.abs((rgt[1] - rgt[0]) * scale).max())
        n = int(np.ceil(length * 2)) + 1
        for t in np.linspace(0.0, 1.0, n + 1)[1:-1]:
            samples.append((lft[0] + t * (lft[1] - lft[0]), rgt[0] + t * (rgt[1] - rgt[0])))

    # seam texels must be covered texels of their own side
    cover, _ = bake(mesh, np.ones((len(faces), 3, 1)), h, w)
    halves = left_half(h, w)
    ok = {0: cover.valid & halves, 1: cover.valid & ~halves}

    def snap(p, side):
        x, y = p[0] * (w - 1), p[1] * (h - 1)
        best = None
        for r in (int(np.floor(y)), int(np.floor(y)) + 1):
            for c in (int(np.floor(x)), int(np.floor(x)) + 1):
                if 0 <= r < h and 0 <= c < w and ok[side][r, c]:
                    d = (r - y) ** 2 + (c - x) ** 2
                    if best is None or d < best[0]:
                        best = (d, (r, c))
        return None if best is None else best[1]

    used_l, used_r, pairs = set(), set(), []
    for ul, ur in samples:
        tl, tr = snap(ul, 0), snap(ur, 1)
        if tl is None or tr is None or tl in used_l or tr in used_r:
            continue
        used_l.add(tl)
        used_r.add(tr)
        pairs.append((tl, tr))
    return SeamTable((h, w), np.array(pairs, dtype=np.int64).reshape(-1, 2, 2))


def process_seam(uvmap: UvMap, seam: SeamTable, blend_radius=10.0) -> UvMap:
    """Equalise seam pairs to their mean, then blend toward the seam inside each side.

    Within ``blend_radius`` texels of its side's seam, a texel at distance
    ``d`` becomes ``(r - d)/r * U[nearest seam] + d/r * U``. A map already
    marked as processed is returned unchanged.
    """
    if len(seam.pairs) == 0:
        raise ValueError("empty seam table")
    if blend_radius < 0:
        raise ValueError("blend_radius must be >= 0")
    if uvmap.seam_processed:
        return uvmap.copy()
    out = uvmap.copy(seam_processed=True)
    vals = out.values
    (lr, lc), (rr, rc) = seam.left.T, seam.right.T
    mean = 0.5 * (vals[lr, lc] + vals[rr, rc])
    vals[lr, lc] = mean
    vals[rr, rc] = mean
    if blend_radius == 0:
        return out
    h, w = out.shape
    halves = {"left": left_half(h, w)}
    halves["right"] = ~halves["left"]
    flat = vals.reshape(h * w, -1)
    seam_vals = flat.copy()
    for side in ("left", "right"):
        dist, nn = seam.side_field(side)
        sel = out.valid & halves[side] & (dist < blend_radius) & (dist > 0)
        if not sel.any():
            continue
        wgt = (blend_radius - dist[sel]) / blend_radius
        vals[sel] = wgt[:, None] * seam_vals[nn[sel]] + (1.0 - wgt)[:, None] * vals[sel]
    return out


def fill_empty(uvmap: UvMap, seam: SeamTable | None) -> UvMap:
    """Give every invalid texel the value of its nearest seam texel.

    Without seam sites the nearest valid texel is used instead. Valid flags
    are left untouched.
    """
    out = uvmap.copy()
    h, w = out.shape
    empty = ~out.valid
    if not empty.any():
        return out
    sites = seam.sites() if seam is not None and len(seam.pairs) else np.flatnonzero(out.valid.ravel())
    if len(sites) == 0:
        raise ValueError("map has no valid texels to fill from")
    _, nn = nearest_site_field(sites, h, w)
    flat = out.values.reshape(h * w, -1)
    src = flat.copy()
    idx = np.flatnonzero(empty.ravel())
    flat[idx] = src[nn.ravel()[idx]]
    return out


def postprocess(uvmap: UvMap, seam: SeamTable, blend_radius=10.0) -> UvMap:
    return fill_empty(process_seam(uvmap, seam, blend_radius), seam)


# ---------------------------------------------------------------------------
# sampling


def sample(uvmap: UvMap, uvs) -> np.ndarray:
    """Bilinear lookup at ``(u (W-1), v (H-1))``; out-of-range UVs are clamped."""
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    if uvs.size and (uvs.min() < 0 or uvs.max() > 1):
        log.warning("clamping %d UV coordinates outside [0, 1]", int(np.sum((uvs < 0) | (uvs > 1))))
        uvs = np.clip(uvs, 0.0, 1.0)
    h, w = uvmap.shape
    x = uvs[:, 0] * (w - 1)
    y = uvs[:, 1] * (h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v = uvmap.values
    top = v[y0, x0] * (1 - fx) + v[y0, x1] * fx
    bot = v[y1, x0] * (1 - fx) + v[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_vertices(uvmap: UvMap, mesh) -> np.ndarray:
    """Per-vertex values: mean of the samples at each vertex's corner UVs."""
    corner = sample(uvmap, mesh.corner_uvs.reshape(-1, 2))
    c = corner.shape[1]
    acc = np.zeros((mesh.n_vertices, c))
    flat_idx = mesh.faces.reshape(-1)
    for k in range(c):
        acc[:, k] = np.bincount(flat_idx, weights=corner[:, k], minlength=mesh.n_vertices)
    cnt = np.bincount(flat_idx, minlength=mesh.n_vertices)
    return acc / np.maximum(cnt, 1)[:, None]


# ---------------------------------------------------------------------------
# storage


def encode_u16(values) -> np.ndarray:
    """Map [-20, 20] linearly onto 0..65535, rounding half away from zero."""
    x = np.asarray(values, dtype=np.float64)
    if x.size and (x.min() < -CODE_RANGE or x.max() > CODE_RANGE):
        log.warning("clipping %d values outside [-20, 20] before encoding",
                    int(np.sum(np.abs(x) > CODE_RANGE)))
    x = np.clip(x, -CODE_RANGE, CODE_RANGE)
    scaled = (x + CODE_RANGE) / (2 * CODE_RANGE) * CODE_MAX
    return np.floor(scaled + 0.5).astype(np.uint16)


def decode_u16(codes) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / CODE_MAX * (2 * CODE_RANGE) - CODE_RANGE


def _valid_path(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".valid.png"


def save_map(path, uvmap: UvMap):
    """``.png``: 3x16-bit PNG plus ``.valid.png`` mask; anything else: raw float32."""
    import cv2

    if os.fspath(path).lower().endswith(".png"):
        codes = encode_u16(uvmap.values[..., :3])
        if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(codes[..., ::-1])):
            raise OSError(f"failed to write {path}")
        cv2.imwrite(_valid_path(path), uvmap.valid.astype(np.uint8) * 255)
        return
    h, w = uvmap.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(uvmap.values[..., :3], dtype="<f4").tobytes())
        fh.write(uvmap.valid.astype(np.uint8).tobytes())


def load_map(path) -> UvMap:
    import cv2

    if os.fspath(path).lower().endswith(".png"):
        codes = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
        if codes is None:
            raise OSError(f"cannot read {path}")
        if codes.dtype != np.uint16 or codes.ndim != 3:
            raise ValueError(f"{path}: expected a 3-channel 16-bit PNG")
        values = decode_u16(codes[..., ::-1])
        vp = _valid_path(path)
        if os.path.exists(vp):
            valid = cv2.imread(vp, cv2.IMREAD_UNCHANGED) > 0
        else:
            valid = np.ones(values.shape[:2], dtype=bool)
        return UvMap(values, valid)
    with open(path, "rb") as fh:
        if fh.read(4) != RAW_MAGIC:
            raise ValueError(f"{path}: bad raw map magic")
        w, h = struct.unpack("<II", fh.read(8))
        vals = np.frombuffer(fh.read(4 * h * w * 3), dtype="<f4")
        valid = np.frombuffer(fh.read(h * w), dtype=np.uint8)
    if vals.size != h * w * 3 or valid.size != h * w:
        raise ValueError(f"{path}: truncated raw map")
    return UvMap(vals.reshape(h, w, 3).astype(np.float64), valid.reshape(h, w) > 0)


def read_mask_image(path, shape=None) -> np.ndarray:
    import cv2

    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read {path}")
    if img.ndim == 3:
        img = img[..., 0]
    mask = img > 0
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"{path}: mask shape {mask.shape} does not match map {tuple(shape)}")
    return mask


def write_mask_image(path, mask):
    import cv2

    cv2.imwrite(os.fspath(path), np.asarray(mask, dtype=np.uint8) * 255)
