"""Registration: basis construction, energy, descent, and phase distance."""

import numpy as np
import pytest

from warpcal.grid import (
    Diffeomorphism,
    GridImage,
    l2_norm,
    node_coordinates,
    qmap,
    trapezoid_weights,
)
from warpcal.registration import (
    RegistrationConfig,
    build_basis,
    phase_distance,
    register,
    register_batch,
    registration_energy,
    worker_count,
)

from helpers import bilinear_reference, smooth_image


def bump_image(nx, ny, centers, width=0.08):
    """Analytic image made of Gaussian bumps; evaluable on any grid."""
    s1, s2 = node_coordinates(nx, ny)
    values = np.zeros((nx, ny))
    for (c1, c2) in centers:
        values += np.exp(-((s1 - c1) ** 2 + (s2 - c2) ** 2) / (2 * width**2))
    return GridImage(values[:, :, np.newaxis])


def basis_warp(nx, ny, coefficients):
    """Warp id + sum of basis fields with the given {index: coefficient} map."""
    basis = build_basis(2, (nx, ny))
    v = np.zeros((nx, ny, 2))
    for idx, coef in coefficients.items():
        v += coef * basis.fields[idx]
    s1, s2 = node_coordinates(nx, ny)
    return Diffeomorphism.from_coords(s1 + v[:, :, 0], s2 + v[:, :, 1])


class TestBasis:
    def test_k1_gives_two_boundary_zero_fields(self):
        basis = build_basis(1, (32, 32))
        assert basis.size == 2
        for field in basis.fields:
            assert np.abs(field[0]).max() == 0.0
            assert np.abs(field[-1]).max() == 0.0
            assert np.abs(field[:, 0]).max() == 0.0
            assert np.abs(field[:, -1]).max() == 0.0

    def test_orthonormality(self):
        basis = build_basis(3, (48, 48))
        weights = trapezoid_weights(48, 48)
        gram = np.einsum("aijc,bijc,ij->ab", basis.fields, basis.fields, weights)
        assert np.abs(gram - np.eye(basis.size)).max() < 1e-8

    def test_unit_norms(self):
        basis = build_basis(2, (32, 40))
        weights = trapezoid_weights(32, 40)
        for field in basis.fields:
            norm = np.sqrt(np.einsum("ijc,ijc,ij->", field, field, weights))
            assert norm == pytest.approx(1.0, abs=1e-8)

    def test_oversized_basis_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_basis(6, (8, 8))  # 72 fields > 64 nodes

    def test_frequencies_recorded(self):
        basis = build_basis(2, (32, 32))
        assert basis.frequencies.shape == (8, 2)
        assert basis.frequencies.min() == 1 and basis.frequencies.max() == 2


class TestEnergy:
    def test_zero_at_identity_for_identical_qmaps(self):
        q = qmap(smooth_image(32, 32, channels=2, seed=1))
        ident = Diffeomorphism.identity(32, 32)
        assert registration_energy(q, q, ident) == pytest.approx(0.0, abs=1e-28)

    def test_zero_qmap_energy_is_reference_norm(self):
        q1 = qmap(smooth_image(32, 32, seed=2))
        q2 = qmap(GridImage(np.full((32, 32, 1), 4.0)))  # constant: q == 0
        g = basis_warp(32, 32, {0: 0.02, 3: -0.01})
        expected = l2_norm(q1) ** 2
        assert registration_energy(q1, q2, g) == pytest.approx(expected, rel=1e-12)

    def test_invalid_warp_rejected(self):
        q = qmap(smooth_image(16, 16, seed=3))
        s1, s2 = node_coordinates(16, 16)
        folded = Diffeomorphism.from_coords(s1 - 0.9 * np.sin(np.pi * s1) ** 2, s2)
        with pytest.raises(ValueError, match="group element"):
            registration_energy(q, q, folded)

    def test_two_bump_pair_matches_refined_quadrature_oracle(self):
        # oracle: same integrand assembled on a 4x finer grid, with the warp
        # given analytically so both resolutions see the same map
        def analytic_warp(n):
            s1, s2 = node_coordinates(n, n)
            g1 = s1 + 0.02 * np.sin(np.pi * s1) * np.sin(2 * np.pi * s2)
            g2 = s2 - 0.015 * np.sin(2 * np.pi * s1) * np.sin(np.pi * s2)
            return Diffeomorphism.from_coords(g1, g2)

        nx = 256
        fine = 1024
        width = 0.2
        centers1 = [(0.35, 0.45), (0.6, 0.62)]
        centers2 = [(0.4, 0.5), (0.63, 0.55)]

        ours = registration_energy(
            qmap(bump_image(nx, nx, centers1, width)),
            qmap(bump_image(nx, nx, centers2, width)),
            analytic_warp(nx),
        )
        oracle = registration_energy(
            qmap(bump_image(fine, fine, centers1, width)),
            qmap(bump_image(fine, fine, centers2, width)),
            analytic_warp(fine),
        )
        assert ours == pytest.approx(oracle, rel=1e-3)


class TestPhaseDistance:
    def test_identity_is_zero(self):
        assert phase_distance(Diffeomorphism.identity(32, 32)) == 0.0

    def test_positive_for_nonidentity(self):
        g = basis_warp(48, 48, {0: 0.05})
        assert phase_distance(g) > 0.0

    def test_single_coefficient_warp_matches_definition_oracle(self):
        # oracle: the definition coded directly with explicit loops
        nx = ny = 48
        g = basis_warp(nx, ny, {0: 0.05})
        ours = phase_distance(g)

        def fd(arr, axis, h):
            out = np.empty_like(arr)
            if axis == 0:
                out[1:-1] = (arr[2:] - arr[:-2]) / (2 * h)
                out[0] = (arr[1] - arr[0]) / h
                out[-1] = (arr[-1] - arr[-2]) / h
            else:
                out[:, 1:-1] = (arr[:, 2:] - arr[:, :-2]) / (2 * h)
                out[:, 0] = (arr[:, 1] - arr[:, 0]) / h
                out[:, -1] = (arr[:, -1] - arr[:, -2]) / h
            return out

        def qmap_of_coords(c1, c2):
            h1, h2 = 1.0 / (nx - 1), 1.0 / (ny - 1)
            jac_sq = (
                fd(c1, 0, h1) ** 2 + fd(c1, 1, h2) ** 2
                + fd(c2, 0, h1) ** 2 + fd(c2, 1, h2) ** 2
            )
            area = np.sqrt(np.sqrt(jac_sq))  # sqrt of the Frobenius norm
            return area[:, :, None] * np.stack([c1, c2], axis=-1)

        s1, s2 = node_coordinates(nx, ny)
        q_id = qmap_of_coords(s1, s2)
        q_g = qmap_of_coords(g.coords[..., 0], g.coords[..., 1])
        weights = trapezoid_weights(nx, ny)
        oracle = np.sqrt(np.einsum("ijc,ij->", (q_id - q_g) ** 2, weights))
        assert ours == pytest.approx(oracle, abs=1e-6)


class TestRegister:
    CFG = RegistrationConfig(basis_resolution=3, max_iters=120, rel_tol=1e-7)

    def test_self_registration(self):
        img = smooth_image(48, 48, channels=2, seed=6)
        result = register(img, img, self.CFG)
        q_norm = l2_norm(qmap(img))
        assert result.d_amp <= 1e-6 * q_norm
        assert result.d_phase <= 1e-6
        assert result.converged
        ident = Diffeomorphism.identity(48, 48)
        assert np.allclose(result.gamma.coords, ident.coords, atol=1e-9)

    def test_known_basis_warp_recovered(self):
        # f2 = f1 o gamma_true with coefficients <= 0.05
        nx = 48
        f1 = bump_image(nx, nx, [(0.4, 0.5), (0.62, 0.55)], width=0.1)
        gamma_true = basis_warp(nx, nx, {0: 0.05, 1: -0.04, 2: 0.03})
        from warpcal.grid import apply_warp

        f2 = apply_warp(f1, gamma_true)
        result = register(f1, f2, self.CFG)
        assert result.energy_trace[-1] <= 0.10 * result.energy_trace[0]
        assert result.d_phase > 0.0
        # composition check: gamma_true o gamma* should be close to the identity
        from warpcal.grid import compose

        composed = compose(gamma_true, result.gamma)
        ident = Diffeomorphism.identity(nx, nx)
        rms = np.sqrt(np.mean(np.sum((composed.coords - ident.coords) ** 2, axis=2)))
        assert rms <= 2.0 / (nx - 1)

    def test_energy_trace_non_increasing(self):
        f1 = smooth_image(48, 48, seed=20, modes=2)
        f2 = smooth_image(48, 48, seed=21, modes=2)
        result = register(f1, f2, self.CFG)
        assert np.all(np.diff(result.energy_trace) <= 0.0)
        assert result.d_amp <= result.initial_qmap_distance

    def test_final_warp_is_valid(self):
        f1 = smooth_image(48, 48, seed=22, modes=2)
        f2 = smooth_image(48, 48, seed=23, modes=2)
        result = register(f1, f2, self.CFG)
        assert result.gamma.is_valid
        assert result.d_amp == pytest.approx(np.sqrt(result.energy_trace[-1]), rel=1e-12)

    def test_degenerate_target_returns_identity(self):
        f1 = smooth_image(32, 32, seed=24)
        constant = GridImage(np.full((32, 32, 1), 2.0))
        result = register(f1, constant, self.CFG)
        assert result.degenerate
        assert result.converged
        assert result.d_phase == 0.0
        ident = Diffeomorphism.identity(32, 32)
        assert np.array_equal(result.gamma.coords, ident.coords)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="cannot be registered"):
            register(smooth_image(32, 32, seed=0), smooth_image(32, 48, seed=0))

    def test_batch_matches_sequential_and_preserves_order(self, monkeypatch):
        reference = smooth_image(32, 32, seed=30, modes=2)
        runs = [smooth_image(32, 32, seed=31 + k, modes=2) for k in range(3)]
        cfg = RegistrationConfig(basis_resolution=2, max_iters=30)
        sequential = [register(reference, run, cfg) for run in runs]
        monkeypatch.setenv("WARPCAL_THREADS", "2")
        parallel = register_batch(reference, runs, cfg)
        for a, b in zip(sequential, parallel):
            assert a.d_amp == b.d_amp
            assert a.d_phase == b.d_phase
            assert np.array_equal(a.energy_trace, b.energy_trace)

    def test_worker_count_env_cap(self, monkeypatch):
        monkeypatch.setenv("WARPCAL_THREADS", "3")
        assert worker_count(8) == 3
        assert worker_count(2) == 2
        assert worker_count(8, jobs=1) == 1
        monkeypatch.setenv("WARPCAL_THREADS", "zero")
        with pytest.raises(ValueError, match="WARPCAL_THREADS"):
            worker_count(4)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="step0"):
            RegistrationConfig(step0=0.0)
        with pytest.raises(ValueError, match="max_iters"):
            RegistrationConfig(max_iters=0)
        with pytest.raises(ValueError, match="grad_damping"):
            RegistrationConfig(grad_damping=-1.0)
