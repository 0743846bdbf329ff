"""
Unit tests for core/mesh module.

Tests:
1. Grid validation and field layout
2. Gradient and Laplacian stencils
3. Divergence-gradient duality and the Leray projector
4. Skew symmetry of the convection form
5. Stream-function fields and the Dirichlet eigenvalue
6. Snapshot reading and writing
"""

import logging

import numpy as np
import pytest

from core.errors import DimensionError
from core.mesh import (
    CellScalar,
    ForceField,
    Grid,
    StaggeredVelocity,
    divergence,
    first_dirichlet_eigenvalue,
    gradient,
    inner_l2,
    laplacian,
    max_divergence,
    norm_h1_semi,
    norm_l2,
    project_divergence_free,
    random_divergence_free,
    read_field,
    read_force,
    trilinear_b,
    write_field,
)
from core.mesh.operators import convection, discrete_curl, vortex_mode


def random_field(grid, rng):
    return StaggeredVelocity(grid, rng.standard_normal(grid.dim))


class TestGrid:
    """Test grid validation and layout."""

    @pytest.mark.parametrize("n", [4, 12, 0, 7])
    def test_rejects_invalid_sizes(self, n):
        with pytest.raises(ValueError, match="n:"):
            Grid(n)

    def test_dimensions(self, grid8):
        assert grid8.h == pytest.approx(1 / 8)
        assert grid8.n_u == 7 * 8
        assert grid8.n_v == 8 * 7
        assert grid8.dim == 112
        assert grid8.weight == pytest.approx(1 / 64)

    def test_full_views_keep_walls_zero(self, grid8, rng):
        field = random_field(grid8, rng)
        assert field.u.shape == (9, 8)
        assert field.v.shape == (8, 9)
        assert np.all(field.u[0] == 0) and np.all(field.u[-1] == 0)
        assert np.all(field.v[:, 0] == 0) and np.all(field.v[:, -1] == 0)
        rebuilt = StaggeredVelocity.from_components(grid8, field.u, field.v)
        assert np.array_equal(rebuilt.values, field.values)

    def test_mixed_grids_rejected(self, grid8, grid16):
        with pytest.raises(DimensionError):
            inner_l2(StaggeredVelocity.zeros(grid8), StaggeredVelocity.zeros(grid16))
        with pytest.raises(DimensionError):
            StaggeredVelocity.zeros(grid8) + StaggeredVelocity.zeros(grid16)

    def test_cell_scalar_mean_removed(self, grid8, rng):
        s = CellScalar(grid8, rng.standard_normal((8, 8)), mean_zero=True)
        assert abs(s.integral()) < 1e-14


class TestOperators:
    """Test gradient and Laplacian stencils."""

    def test_gradient_of_constant_is_zero(self, grid16):
        g = gradient(CellScalar(grid16, np.full((16, 16), 3.0)))
        assert g.max_abs() == 0.0

    def test_gradient_of_linear_function(self, grid16):
        x, _ = grid16.cell_coords()
        g = gradient(CellScalar(grid16, x))
        np.testing.assert_allclose(g.u[1:-1], 1.0, rtol=1e-12)
        assert np.abs(g.v).max() <= 1e-12

    def test_laplacian_symmetric_and_negative(self, grid16, rng):
        for _ in range(20):
            v = random_field(grid16, rng)
            w = random_field(grid16, rng)
            lhs, rhs = inner_l2(laplacian(v), w), inner_l2(v, laplacian(w))
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)
            assert inner_l2(laplacian(v), v) < 0

    def test_laplacian_sine_eigenvalue(self, grid32):
        field = StaggeredVelocity.sample(grid32, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y), lambda x, y: 0.0 * x)
        quotient = inner_l2(laplacian(field), field) / inner_l2(field, field)
        assert quotient == pytest.approx(-2 * np.pi ** 2, rel=5e-3)

    def test_zero_convecting_field(self, grid8, rng):
        v, w = random_field(grid8, rng), random_field(grid8, rng)
        assert trilinear_b(StaggeredVelocity.zeros(grid8), v, w) == 0.0


class TestProjection:
    """Test div-grad duality and the discrete Leray projector."""

    def test_div_grad_duality(self, grid32, rng):
        for _ in range(100):
            x = random_field(grid32, rng)
            p = CellScalar(grid32, rng.standard_normal((32, 32)))
            lhs = grid32.weight * float(np.sum(divergence(x).values * p.values))
            rhs = -inner_l2(x, gradient(p))
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), norm_l2(x) * np.abs(p.values).max())

    def test_projector_idempotent_and_orthogonal(self, grid32, rng):
        for _ in range(100):
            x = random_field(grid32, rng)
            px, _ = project_divergence_free(x)
            ppx, _ = project_divergence_free(px)
            scale = norm_l2(x)
            assert norm_l2(ppx - px) <= 1e-12 * scale
            assert abs(inner_l2(px, x - px)) <= 1e-12 * scale ** 2
            assert max_divergence(px) <= 1e-10 * max(1.0, x.max_abs() / grid32.h)

    def test_gradient_fields_project_to_zero(self, grid16, rng):
        p = CellScalar(grid16, rng.standard_normal((16, 16)))
        g = gradient(p)
        pg, _ = project_divergence_free(g)
        assert norm_l2(pg) <= 1e-11 * norm_l2(g)

    def test_random_divergence_free_norm(self, grid16, rng):
        field = random_divergence_free(grid16, rng, smoothing=grid16.h, amplitude=0.3)
        assert norm_l2(field) == pytest.approx(0.3, rel=1e-12)
        assert max_divergence(field) < 1e-10


class TestConvection:
    """Test the skew-symmetric trilinear form."""

    def test_b_vanishes_on_diagonal(self, grid32, rng):
        for _ in range(100):
            a = random_divergence_free(grid32, rng)
            v = random_field(grid32, rng)
            scale = a.max_abs() * norm_l2(v) * norm_h1_semi(v)
            assert abs(trilinear_b(a, v, v)) <= 1e-12 * scale

    def test_b_antisymmetric(self, grid32, rng):
        for _ in range(100):
            a = random_divergence_free(grid32, rng)
            v = random_field(grid32, rng)
            w = random_field(grid32, rng)
            lhs, rhs = trilinear_b(a, v, w), -trilinear_b(a, w, v)
            scale = a.max_abs() * norm_l2(v) * norm_h1_semi(w) + a.max_abs() * norm_l2(w) * norm_h1_semi(v)
            assert abs(lhs - rhs) <= 1e-12 * scale

    def test_convection_bilinear(self, grid16, rng):
        a = random_divergence_free(grid16, rng)
        v = random_field(grid16, rng)
        w = random_field(grid16, rng)
        combined = convection(a, v * 2.0 + w)
        separate = convection(a, v) * 2.0 + convection(a, w)
        assert norm_l2(combined - separate) <= 1e-12 * norm_l2(combined)


class TestStreamFunctions:
    """Test stream-function fields and the Dirichlet eigenvalue."""

    def test_discrete_curl_is_divergence_free(self, grid16, rng):
        psi = np.zeros((17, 17))
        psi[1:-1, 1:-1] = rng.standard_normal((15, 15))
        field = discrete_curl(grid16, psi)
        assert max_divergence(field) <= 1e-10 * max(1.0, field.max_abs() / grid16.h)

    def test_discrete_curl_shape_checked(self, grid8):
        with pytest.raises(DimensionError):
            discrete_curl(grid8, np.zeros((8, 8)))

    def test_vortex_mode_amplitude(self, grid16):
        mode = vortex_mode(grid16, 0.25)
        assert norm_l2(mode) == pytest.approx(0.25, rel=1e-12)
        assert max_divergence(mode) < 1e-10

    def test_first_eigenvalue_tends_to_two_pi_squared(self):
        assert first_dirichlet_eigenvalue(Grid(64)) == pytest.approx(2 * np.pi ** 2, rel=1e-3)
        assert first_dirichlet_eigenvalue(Grid(8)) < first_dirichlet_eigenvalue(Grid(64))


class TestSnapshots:
    """Test the CSV snapshot format."""

    def test_write_then_read(self, grid8, rng, tmp_path):
        field = random_field(grid8, rng)
        path = write_field(str(tmp_path / "snap.csv"), field, time=0.75)
        loaded, time = read_field(path)
        assert isinstance(loaded, StaggeredVelocity)
        assert time == 0.75
        assert np.array_equal(loaded.values, field.values)

    def test_header_and_force_reader(self, grid8, rng, tmp_path):
        path = write_field(str(tmp_path / "force.csv"), ForceField(grid8, rng.standard_normal(grid8.dim)))
        with open(path) as f:
            head = [next(f).strip() for _ in range(3)]
        assert head == ["# n=8", "# time=0.0", "# component=u shape=9x8"]
        assert isinstance(read_force(path, grid8), ForceField)

    def test_grid_mismatch(self, grid8, tmp_path):
        path = write_field(str(tmp_path / "snap.csv"), StaggeredVelocity.zeros(grid8))
        with pytest.raises(DimensionError):
            read_field(path, grid=Grid(16))

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n")
        with pytest.raises(ValueError):
            read_field(str(path))

    def test_nonzero_boundary_is_dropped_with_warning(self, grid8, rng, tmp_path, caplog):
        field = random_field(grid8, rng)
        path = write_field(str(tmp_path / "snap.csv"), field)
        lines = open(path).read().splitlines()
        lines[3] = ",".join(["1.5"] * grid8.n)  # first u row: the x = 0 wall
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        with caplog.at_level(logging.WARNING, logger="core.mesh.loader"):
            loaded, _ = read_field(path)
        assert np.array_equal(loaded.values, field.values)
        assert any("boundary faces" in r.getMessage() for r in caplog.records)

    def test_clean_snapshot_does_not_warn(self, grid8, rng, tmp_path, caplog):
        path = write_field(str(tmp_path / "snap.csv"), random_field(grid8, rng))
        with caplog.at_level(logging.WARNING, logger="core.mesh.loader"):
            read_field(path)
        assert not caplog.records
