import numpy as np
import pytest

from uvdisp import fixtures as fx
from uvdisp import registration as reg
from uvdisp.mesh import load_mesh
from uvdisp.spatial import build_hull_mask, chamfer_pruned


def quick(cfg_fn, steps):
    return cfg_fn(steps=steps)


@pytest.fixture(scope="module")
def small_result(small_sphere):
    tpl = small_sphere[0]
    pts = fx.bumpy_sphere_points(3000, 1.0, 0.12)
    return tpl, pts, reg.register_full(tpl, pts, quick(reg.default_stage1, 150), quick(reg.default_stage2, 150))


def test_default_configs_match_published_values():
    s1, s2 = reg.default_stage1(), reg.default_stage2()
    assert (s1.weights.chamfer, s1.weights.edge, s1.weights.laplacian) == (2e3, 2e5, 1e4)
    assert (s2.weights.chamfer, s2.weights.edge, s2.weights.laplacian) == (2e4, 2e4, 1e4)
    assert (s1.lr, s2.lr) == (3e-2, 3e-4)
    assert s1.weights.prune_threshold == 1.0 and s2.weights.prune_threshold == 1.0
    assert s1.free_regions == ("scalp",) and set(s2.free_regions) == {"scalp", "face_skin", "lips"}
    assert s1.steps == s2.steps == 1000
    p1, p2 = reg.partial_stage1(), reg.partial_stage2()
    assert (p1.weights.chamfer, p1.weights.edge, p1.weights.laplacian) == (2e3, 8e5, 1e5)
    assert p1.weights.prune_threshold == 10.0 and p2.weights.prune_threshold == 0.1


def test_frozen_vertices_exactly_zero(small_result):
    tpl, _, r = small_result
    scalp = tpl.region_mask("scalp")
    free2 = tpl.region_mask(["scalp", "face_skin", "lips"])
    assert np.all(r.d_stage1[~scalp] == 0.0)
    assert np.all(r.alpha[~free2] == 0.0)
    assert np.any(r.d_stage1[scalp] != 0.0) and np.any(r.alpha[free2] != 0.0)


def test_stage2_reconstruction_identity(small_result):
    _, _, r = small_result
    assert np.array_equal(r.d_stage2, r.d_stage1 + r.normals * r.alpha[:, None])


def test_trace_finite_and_non_increasing_per_stage(small_result):
    _, _, r = small_result
    losses = np.array([row[2] for row in r.trace])
    assert np.all(np.isfinite(losses))
    for stage in ("stage1", "stage2"):
        vals = [row[2] for row in r.trace if row[0] == stage]
        assert len(vals) == 150 and vals[-1] <= vals[0]


def test_displacements_clipped():
    d = np.array([[30.0, -25.0, 1.0]])
    r = reg.RegistrationResult(d, np.zeros(1), np.zeros((1, 3)), d, np.ones(1, bool))
    assert r.displacement.tolist() == [[20.0, -20.0, 1.0]]
    assert np.array_equal(r.d_stage2, d)


def test_stage2_improves_on_stage1(small_result):
    _, _, r = small_result
    assert r.stage_chamfer["stage2"] < r.stage_chamfer["stage1"]
    assert np.all(np.abs(r.displacement) <= 20.0)


def test_identity_target_chamfer_only(small_sphere):
    # with the regularisers off, the template's own vertices are a fixed point
    tpl = small_sphere[0]
    w = reg.LossWeights(2e3, 0.0, 0.0, 1.0)
    r = reg.register_full(tpl, tpl.vertices, reg.default_stage1(weights=w, steps=200),
                          reg.default_stage2(weights=w, steps=200))
    final = chamfer_pruned(tpl.vertices + r.displacement, tpl.vertices, 1.0).value
    assert final < 1e-4
    assert np.linalg.norm(r.displacement, axis=1).max() < 1e-2


def test_identity_target_offset_shrinks_with_resolution():
    # edge and Laplacian terms act on V + D and pull a closed surface inward;
    # their balance against the Chamfer term weakens roughly like 1 / n_vertices
    offsets = []
    for level in (1, 2):
        tpl, _, _ = fx.sphere_template(level, 2, 1.0)
        r = reg.register_full(tpl, tpl.vertices, reg.default_stage1(steps=150), reg.default_stage2(steps=2))
        offsets.append(np.median(np.linalg.norm(r.d_stage1, axis=1)[tpl.region_mask("scalp")]))
    assert offsets[1] < 0.5 * offsets[0]


@pytest.mark.xfail(strict=True, reason="regularisers shrink a 2562-vertex sphere by ~5e-2 at default weights")
def test_identity_target_default_weights():
    tpl, _, _ = fx.sphere_template(2, 2, 1.0)
    r = reg.register_full(tpl, tpl.vertices)
    final = chamfer_pruned(tpl.vertices + r.displacement, tpl.vertices, 1.0).value
    assert final < 1e-4
    assert np.linalg.norm(r.displacement, axis=1).max() < 1e-2


@pytest.mark.xfail(strict=True, reason="stronger partial stage-1 regularisation over-shrinks coarse templates")
def test_partial_full_cloud_matches_full_registration():
    tpl, _, _ = fx.sphere_template(2, 2, 1.0)
    pts = fx.bumpy_sphere_points(10000, 1.0, 0.15)
    rp = reg.register_partial(tpl, pts)
    rf = reg.register_full(tpl, pts)
    scalp = tpl.region_mask("scalp")
    cp = chamfer_pruned(tpl.vertices + rp.displacement, pts, np.inf).value
    cf = chamfer_pruned(tpl.vertices + rf.displacement, pts, np.inf).value
    assert (rp.mask & scalp).sum() >= 0.95 * scalp.sum()
    assert cp <= 2.0 * cf


def test_boundary_vertices_examples():
    g = fx.planar_grid(4)
    n = g.n_vertices
    assert len(reg.boundary_vertices(np.ones(n, bool), g)) == 0
    one = np.zeros(n, bool)
    one[12] = True
    assert reg.boundary_vertices(one, g).tolist() == [12]
    half = g.vertices[:, 0] <= 2.0
    got = reg.boundary_vertices(half, g)
    # brute-force frontier: masked vertices with an unmasked one-ring neighbour
    nbrs = {i: set() for i in range(n)}
    for a, b, c in g.faces:
        for i, j in ((a, b), (b, c), (c, a)):
            nbrs[i].add(j)
            nbrs[j].add(i)
    expected = [i for i in range(n) if half[i] and any(not half[j] for j in nbrs[i])]
    assert got.tolist() == expected
    assert np.all(g.vertices[got, 0] == 2.0)


def test_boundary_vertices_length_check():
    g = fx.planar_grid(2)
    with pytest.raises(ValueError):
        reg.boundary_vertices(np.ones(3, bool), g)


def test_partial_infinite_proximity_mask(small_sphere):
    tpl = small_sphere[0]
    pts = fx.bumpy_sphere_points(2000, 1.0, 0.08)
    r = reg.register_partial(tpl, pts, reg.partial_stage1(steps=20), reg.partial_stage2(steps=20),
                             proximity=np.inf)
    expected = build_hull_mask(pts, tpl.vertices) & tpl.region_mask(["scalp", "face_skin", "lips"])
    assert np.array_equal(r.mask, expected)


def test_partial_frozen_outside_hull(small_sphere):
    tpl = small_sphere[0]
    pts = fx.bumpy_sphere_points(2000, 1.0, 0.08)
    front = pts[pts[:, 2] > 0.2]
    r = reg.register_partial(tpl, front, reg.partial_stage1(steps=30), reg.partial_stage2(steps=30))
    hull = build_hull_mask(front, tpl.vertices)
    boundary = reg.boundary_vertices(hull, tpl)
    moved = np.any(r.d_stage2 != 0.0, axis=1)
    assert not np.any(moved & ~hull)
    assert not np.any(moved[boundary])


def test_partial_without_free_vertices_raises(small_sphere):
    tpl = small_sphere[0]
    far = fx.fibonacci_sphere(200) * 0.1 + [50.0, 0, 0]
    with pytest.raises(reg.RegistrationError):
        reg.register_partial(tpl, far, reg.partial_stage1(steps=2), reg.partial_stage2(steps=2))


def test_non_finite_loss_raises(small_sphere):
    tpl = small_sphere[0]
    cfg = reg.default_stage1(steps=5, lr=1e300)
    with pytest.raises(reg.RegistrationError, match="non-finite"):
        reg.register_full(tpl, fx.bumpy_sphere_points(500), cfg, reg.default_stage2(steps=2))


def test_stage_mode_validation():
    with pytest.raises(ValueError):
        reg.default_stage1(mode="sideways")
    with pytest.raises(ValueError):
        reg.default_stage1(steps=0)


def test_result_files_roundtrip(tmp_path, small_result):
    tpl, _, r = small_result
    prefix = str(tmp_path / "res")
    reg.save_result(prefix, tpl, r)
    d = reg.read_displacements(prefix + ".disp")
    np.testing.assert_allclose(d, r.displacement, atol=1e-6)
    assert np.array_equal(reg.read_mask(prefix + ".mask.txt"), r.mask)
    mesh = load_mesh(prefix + ".obj", "scan")
    np.testing.assert_allclose(mesh.points, tpl.vertices + r.displacement, atol=1e-6)
    lines = open(prefix + ".trace.csv").read().splitlines()
    assert lines[0].startswith("stage,step,loss") and len(lines) == 301


def test_bad_displacement_file(tmp_path):
    p = tmp_path / "x.disp"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        reg.read_displacements(p)
