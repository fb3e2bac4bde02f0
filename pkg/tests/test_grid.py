import numpy as np
import pytest

from voxelast import shapes
from voxelast.grid import (
    CELL_BOUNDARY,
    CELL_EMPTY,
    CELL_FULL,
    SmoothingConfig,
    VoxelGrid,
    cell_corner_values,
    classify_cells,
    extract_isosurface,
    gaussian_precondition,
    load_grid_binary,
    load_grid_text,
    make_grid,
    sample_sdf,
    save_grid_binary,
    save_grid_text,
)


def affine_grid(dims, coeffs, spacing=0.25, origin=(0.1, -0.2, 0.3)):
    g = make_grid(dims, spacing, origin)
    pos = g.node_positions()
    phi = coeffs[0] + pos @ np.asarray(coeffs[1:])
    return g.with_phi(phi)


def test_sample_constant_field():
    g = make_grid((3, 3, 3), 0.5, fill=-1.0)
    pts = np.random.default_rng(0).uniform(0, 1.5, size=(20, 3))
    assert np.allclose(sample_sdf(g, pts), -1.0, atol=1e-14)


def test_sample_affine_plane_zero_at_midplane():
    g = make_grid((4, 4, 4), 0.25, origin=(0, 0, 0))
    phi = g.node_positions()[..., 2] - 0.5
    g = g.with_phi(phi)
    center = np.array([0.5, 0.5, 0.5])
    assert abs(sample_sdf(g, center)) < 1e-14


def test_sample_reproduces_affine_fields():
    rng = np.random.default_rng(1)
    for _ in range(100):
        coeffs = rng.normal(size=4)
        g = affine_grid((3, 4, 2), coeffs)
        pts = g.origin + rng.uniform(0, 1, size=(10, 3)) * (
            np.asarray(g.dims) * g.spacing
        )
        exact = coeffs[0] + pts @ coeffs[1:]
        err = np.abs(sample_sdf(g, pts) - exact)
        scale = np.abs(exact).max() + 1.0
        assert err.max() / scale < 1e-12


def test_sample_at_nodes_returns_stored_values():
    rng = np.random.default_rng(2)
    g = make_grid((3, 3, 3), 0.5)
    g = g.with_phi(rng.normal(size=g.node_shape))
    pos = g.node_positions().reshape(-1, 3)
    vals = sample_sdf(g, pos)
    assert np.abs(vals - g.phi.reshape(-1)).max() < 1e-12


def test_sample_out_of_bounds_raises():
    g = make_grid((2, 2, 2), 1.0)
    with pytest.raises(ValueError):
        sample_sdf(g, np.array([3.0, 0.5, 0.5]))


def test_classify_all_full_all_empty():
    g = make_grid((3, 3, 3), 1.0, fill=-1.0)
    cls = classify_cells(g)
    assert np.all(cls.tags == CELL_FULL)
    g2 = make_grid((3, 3, 3), 1.0, fill=1.0)
    assert np.all(classify_cells(g2).tags == CELL_EMPTY)


def test_classify_plane_single_boundary_layer():
    h = 6
    g = make_grid((4, 4, h), 1.0)
    phi = g.node_positions()[..., 2] - 0.5 * h
    cls = classify_cells(g.with_phi(phi))
    tags = cls.tags.reshape(4, 4, h, order="F")
    for k in range(h):
        expect = CELL_FULL if k < h // 2 - 1 else CELL_BOUNDARY if k == h // 2 - 1 else CELL_EMPTY
        assert np.all(tags[:, :, k] == expect), k


def test_classify_consistent_with_corner_values():
    rng = np.random.default_rng(3)
    g = make_grid((4, 4, 4), 1.0)
    g = g.with_phi(rng.normal(size=g.node_shape))
    cls = classify_cells(g)
    corners = cell_corner_values(g)
    assert np.all(corners[cls.full] < 0)
    assert np.all(corners[cls.empty] >= 0)


def test_blur_sigma_zero_is_identity():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(5, 6, 7))
    out = gaussian_precondition(f, SmoothingConfig(sigma=0.0))
    assert np.abs(out - f).max() == 0.0


def test_blur_preserves_constants():
    f = np.full((6, 6, 6), 3.25)
    out = gaussian_precondition(f, SmoothingConfig(sigma=1.5, kernel_radius=4))
    assert np.abs(out - 3.25).max() < 1e-12


def test_blur_impulse_matches_kernel_stencil():
    cfg = SmoothingConfig(sigma=1.0, kernel_radius=3)
    n = 9
    f = np.zeros((n, n, n))
    f[4, 4, 4] = 1.0
    out = gaussian_precondition(f, cfg)
    off = np.arange(-3, 4)
    k1 = np.exp(-0.5 * off**2)
    k1 /= k1.sum()
    expect = np.zeros_like(f)
    expect[1:8, 1:8, 1:8] = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]
    assert np.abs(out - expect).max() < 1e-14


def test_blur_linearity():
    rng = np.random.default_rng(5)
    cfg = SmoothingConfig(sigma=1.2, kernel_radius=3)
    f, g = rng.normal(size=(2, 5, 5, 5))
    a, b = 2.3, -0.7
    lhs = gaussian_precondition(a * f + b * g, cfg)
    rhs = a * gaussian_precondition(f, cfg) + b * gaussian_precondition(g, cfg)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_blur_transpose_is_adjoint():
    rng = np.random.default_rng(6)
    cfg = SmoothingConfig(sigma=1.0, kernel_radius=2, symmetry_axis=1)
    x = rng.normal(size=(4, 5, 6))
    y = rng.normal(size=(4, 5, 6))
    lhs = np.sum(gaussian_precondition(x, cfg) * y)
    rhs = np.sum(x * gaussian_precondition(y, cfg, transpose=True))
    assert abs(lhs - rhs) < 1e-12


def test_mirror_preconditioner_symmetrizes():
    rng = np.random.default_rng(7)
    cfg = SmoothingConfig(sigma=0.8, kernel_radius=3, symmetry_axis=0)
    f = rng.normal(size=(6, 5, 5))
    out = gaussian_precondition(f, cfg)
    assert np.abs(out - out[::-1]).max() < 1e-12


def test_isosurface_empty_for_uniform_field():
    g = make_grid((4, 4, 4), 0.25, fill=-1.0)
    verts, faces = extract_isosurface(g)
    assert len(verts) == 0 and len(faces) == 0


def mesh_area(verts, faces):
    a = verts[faces[:, 1]] - verts[faces[:, 0]]
    b = verts[faces[:, 2]] - verts[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1).sum()


def test_isosurface_plane_area():
    n = 8
    g = make_grid((n, n, n), 1.0 / n)
    phi = g.node_positions()[..., 2] - 0.5
    verts, faces = extract_isosurface(g.with_phi(phi))
    assert abs(mesh_area(verts, faces) - 1.0) < 0.01
    assert np.abs(verts[:, 2] - 0.5).max() < 1e-12


def test_isosurface_sphere_area():
    n = 32
    r = 0.35
    g = shapes.discretize(shapes.sphere((0.5, 0.5, 0.5), r), (n, n, n))
    verts, faces = extract_isosurface(g)
    assert abs(mesh_area(verts, faces) - 4 * np.pi * r**2) / (4 * np.pi * r**2) < 0.05


def test_grid_file_roundtrips(tmp_path):
    rng = np.random.default_rng(8)
    g = make_grid((3, 4, 5), 0.125, origin=(1.0, 2.0, 3.0))
    g = g.with_phi(rng.normal(size=g.node_shape))
    p_txt = tmp_path / "grid.txt"
    save_grid_text(p_txt, g)
    g2 = load_grid_text(p_txt)
    assert g2.dims == g.dims and g2.spacing == g.spacing
    assert np.array_equal(g2.phi, g.phi) and np.array_equal(g2.origin, g.origin)
    p_bin = tmp_path / "grid.bin"
    save_grid_binary(p_bin, g)
    g3 = load_grid_binary(p_bin)
    assert np.array_equal(g3.phi, g.phi)
    assert g3.dims == g.dims


def test_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid((2, 2, 2), 1.0, np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        VoxelGrid((2, 2, 2), -1.0, np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        VoxelGrid((2, 2, 2), 1.0, np.full((3, 3, 3), np.nan))
