import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from uvdisp import animate as an
from uvdisp import fixtures as fx
from uvdisp import uv
from uvdisp.mesh import MeshError, TemplateMesh, build_subdivision_map, vertex_normals


@pytest.fixture(scope="module")
def rig():
    base = fx.sphere_base(1)
    smap = build_subdivision_map(base, 2)
    tpl = an.prepare_frame(base, smap)
    d = 0.01 * tpl.vertices + 0.02
    raw, _ = uv.bake(tpl, d, 96)
    seam = uv.build_seam_table(tpl, 96)
    return base, smap, tpl, uv.postprocess(raw, seam)


def rotations(n, seed=0):
    return [Rotation.from_rotvec(v).as_matrix() for v in np.random.default_rng(seed).normal(size=(n, 3))]


def check_orthonormal(frame, tol):
    t, b, n = frame.tangent, frame.bitangent, frame.normal
    for a in (t, b, n):
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=tol)
    for a, c in ((t, n), (b, n), (t, b)):
        assert np.abs(np.einsum("ij,ij->i", a, c)).max() < tol
    assert np.all(np.linalg.det(frame.matrices()) > 0)


def test_planar_axis_aligned_frame():
    frame = an.compute_tbn(fx.planar_grid(3))
    np.testing.assert_allclose(frame.tangent, np.tile([1.0, 0, 0], (16, 1)), atol=1e-12)
    np.testing.assert_allclose(frame.bitangent, np.tile([0, 1.0, 0], (16, 1)), atol=1e-12)
    np.testing.assert_allclose(frame.normal, np.tile([0, 0, 1.0], (16, 1)), atol=1e-12)


def test_random_mesh_frames_orthonormal():
    for seed in range(4):
        mesh = fx.random_mesh(6, seed)
        frame = an.compute_tbn(mesh)
        check_orthonormal(frame, 1e-6)
        np.testing.assert_allclose(frame.normal, vertex_normals(mesh), atol=1e-12)


def test_frames_rotate_with_mesh():
    mesh = fx.random_mesh(6, 2)
    ref = an.compute_tbn(mesh)
    for r in rotations(3):
        rot = an.compute_tbn(mesh.copy(mesh.vertices @ r.T))
        for a, b in ((ref.tangent, rot.tangent), (ref.bitangent, rot.bitangent), (ref.normal, rot.normal)):
            assert np.abs(a @ r.T - b).max() < 1e-6


def test_degenerate_uvs_fall_back(caplog):
    mesh = fx.planar_grid(2)
    flat = TemplateMesh(mesh.vertices, mesh.faces, np.zeros_like(mesh.corner_uvs))
    with caplog.at_level(logging.WARNING):
        frame = an.compute_tbn(flat)
    assert "fallback" in caplog.text
    check_orthonormal(frame, 1e-12)


def test_missing_uvs_rejected():
    mesh = fx.planar_grid(2)
    with pytest.raises(MeshError):
        an.compute_tbn(TemplateMesh(mesh.vertices, mesh.faces))


def test_encode_examples():
    frame = an.compute_tbn(fx.random_mesh(5, 0))
    np.testing.assert_allclose(an.encode_tbn(frame.normal, frame), np.tile([0, 0, 1.0], (25, 1)), atol=1e-12)
    assert np.all(an.encode_tbn(np.zeros((25, 3)), frame) == 0)
    with pytest.raises(ValueError):
        an.encode_tbn(np.zeros((3, 3)), frame)
    with pytest.raises(ValueError):
        an.decode_tbn(np.zeros((3, 3)), frame)


@given(st.integers(0, 1000))
def test_encode_decode_roundtrip_and_norm(seed):
    frame = an.compute_tbn(fx.random_mesh(5, seed % 7))
    d = np.random.default_rng(seed).normal(size=(25, 3))
    c = an.encode_tbn(d, frame)
    assert np.abs(an.decode_tbn(c, frame) - d).max() < 1e-9
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), np.linalg.norm(d, axis=1), atol=1e-9)
    other = an.compute_tbn(fx.random_mesh(5, (seed + 1) % 7))
    np.testing.assert_allclose(np.linalg.norm(an.decode_tbn(c, other), axis=1), np.linalg.norm(d, axis=1), atol=1e-9)


def test_decode_in_rotated_frame_rotates():
    mesh = fx.random_mesh(6, 3)
    frame = an.compute_tbn(mesh)
    d = np.random.default_rng(0).normal(size=(mesh.n_vertices, 3))
    r = rotations(1, 5)[0]
    rot = an.compute_tbn(mesh.copy(mesh.vertices @ r.T))
    assert np.abs(an.decode_tbn(an.encode_tbn(d, frame), rot) - d @ r.T).max() < 1e-6


def test_identity_frames(rig):
    base, smap, tpl, m = rig
    outs = an.animate_sequence(base, [base, base], m, smap)
    expect = tpl.vertices + uv.sample_vertices(m, tpl)
    for out in outs:
        np.testing.assert_allclose(out.vertices, expect, atol=1e-12)


def test_rigid_equivariance(rig):
    base, smap, _, m = rig
    rs = rotations(3)
    outs = an.animate_sequence(base, [base.copy(base.vertices @ r.T) for r in rs], m, smap)
    ref = an.animate_sequence(base, [base], m, smap)[0]
    for out, r in zip(outs, rs):
        assert np.abs(out.vertices - ref.vertices @ r.T).max() < 1e-5
        assert np.array_equal(out.faces, ref.faces)


def test_zero_map_gives_smoothed_frames(rig):
    base, smap, _, m = rig
    zero = m.copy()
    zero.values[:] = 0.0
    frame = base.copy(base.vertices * 1.1)
    out = an.animate_sequence(base, [frame], zero, smap)[0]
    np.testing.assert_array_equal(out.vertices, an.prepare_frame(frame, smap).vertices)


def test_topology_mismatch_rejected(rig):
    base, smap, _, m = rig
    other = fx.sphere_base(2)
    with pytest.raises(MeshError, match="topology"):
        an.animate_sequence(base, [other], m, smap)


def test_workers_do_not_change_output(rig):
    base, smap, _, m = rig
    frames = [base.copy(base.vertices @ r.T) for r in rotations(3, 9)]
    a = an.animate_sequence(base, frames, m, smap, workers=1)
    b = an.animate_sequence(base, frames, m, smap, workers=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.vertices, y.vertices)


def test_write_sequence(tmp_path, rig):
    base, smap, _, m = rig
    outs = an.animate_sequence(base, [base], m, smap)
    paths = an.write_sequence(tmp_path / "seq", outs)
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["frame_00000.obj"]
