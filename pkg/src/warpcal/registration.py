"""Diffeomorphic registration of q-maps by gradient descent over a sine field basis.

The optimal warp solves ``arginf_gamma ||q1 - (q2, gamma)||`` over
boundary-preserving diffeomorphisms of the unit square. The search direction
at each step is the negative directional derivative of the energy along an
orthonormal basis of tangent vector fields, estimated by central finite
differences on the basis coefficients; the warp is updated by composition
``gamma <- gamma o (id + delta * v)`` with backtracking on ``delta`` so that
the energy decreases and the Jacobian determinant stays positive.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .grid import (
    Diffeomorphism,
    GridImage,
    QMapImage,
    group_action,
    l2_distance,
    l2_norm,
    node_coordinates,
    qmap,
    trapezoid_weights,
    warp_jacobian_det,
    weighted_sumsq,
)

MAX_BACKTRACK_HALVINGS = 20
_ZERO_ENERGY = 1e-30


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Orthonormal tangent vector fields on the grid, zero on the boundary.

    ``fields`` has shape (2*K^2, nx, ny, 2): for every frequency pair
    (i, j) with 1 <= i, j <= K there is one field per component built from
    sin(pi*i*s1)*sin(pi*j*s2), orthonormalized in L2 by the trapezoidal
    inner product. ``frequencies`` records (i, j) per field.
    """

    resolution: int
    fields: np.ndarray
    frequencies: np.ndarray

    @property
    def size(self) -> int:
        return self.fields.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.fields.shape[1:3]


@dataclass(frozen=True)
class RegistrationConfig:
    """Tuning knobs for the gradient descent.

    basis_resolution is the per-axis frequency count K (2*K^2 fields);
    step0 the initial backtracking step; fd_eps the coefficient perturbation
    used for directional derivatives. grad_damping preconditions the search
    direction by scaling the coefficient of frequency (i, j) with
    1/(i^2+j^2)^grad_damping, so low-frequency alignment leads and
    high-frequency detail follows; 0 uses the raw gradient.
    """

    basis_resolution: int = 8
    step0: float = 0.1
    max_iters: int = 200
    rel_tol: float = 1e-6
    fd_eps: float = 1e-4
    grad_damping: float = 1.0

    def __post_init__(self):
        if self.basis_resolution < 1:
            raise ValueError("basis_resolution must be >= 1")
        if self.step0 <= 0:
            raise ValueError("step0 must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.fd_eps <= 0:
            raise ValueError("fd_eps must be positive")
        if self.grad_damping < 0:
            raise ValueError("grad_damping must be nonnegative")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Outcome of one registration: optimal warp, distances, and the energy trace."""

    gamma: Diffeomorphism
    d_amp: float
    d_phase: float
    d_euclid: float
    energy_trace: np.ndarray
    converged: bool
    degenerate: bool = False

    @property
    def iterations(self) -> int:
        return len(self.energy_trace) - 1

    @property
    def initial_qmap_distance(self) -> float:
        """L2 distance of the q-maps before any warping."""
        return float(np.sqrt(self.energy_trace[0]))


def build_basis(resolution: int, grid_shape: tuple[int, int]) -> BasisSet:
    """Build the orthonormal sine field basis for a grid.

    Rejects resolutions whose 2*K^2 fields exceed the node count.
    """
    nx, ny = grid_shape
    if resolution < 1:
        raise ValueError("basis resolution must be >= 1")
    if 2 * resolution * resolution > nx * ny:
        raise ValueError(
            f"basis of size {2 * resolution * resolution} exceeds the {nx * ny} grid nodes"
        )
    return _build_basis_cached(int(resolution), int(nx), int(ny))


@lru_cache(maxsize=8)
def _build_basis_cached(resolution: int, nx: int, ny: int) -> BasisSet:
    s1, s2 = node_coordinates(nx, ny)
    raw = []
    frequencies = []
    for i in range(1, resolution + 1):
        for j in range(1, resolution + 1):
            scalar = np.sin(np.pi * i * s1) * np.sin(np.pi * j * s2)
            # pin the boundary to exact zeros (sin(k*pi) only rounds to ~1e-16)
            scalar[0, :] = scalar[-1, :] = 0.0
            scalar[:, 0] = scalar[:, -1] = 0.0
            for comp in (0, 1):
                f = np.zeros((nx, ny, 2))
                f[:, :, comp] = scalar
                raw.append(f)
                frequencies.append((i, j))
    fields = np.stack(raw)
    frequencies = np.array(frequencies)
    frequencies.setflags(write=False)

    # Orthonormalize under the trapezoidal inner product: scale by sqrt(W),
    # take a thin QR, and scale back.
    weights = trapezoid_weights(nx, ny)
    sqrt_w = np.sqrt(weights)[:, :, np.newaxis]
    flat = (fields * sqrt_w).reshape(len(fields), -1).T
    q, r = np.linalg.qr(flat)
    diag = np.diag(r)
    if np.any(np.abs(diag) < 1e-10):
        raise ValueError("degenerate basis: grid cannot resolve the requested frequencies")
    q = q * np.sign(diag)
    ortho = q.T.reshape(len(fields), nx, ny, 2) / sqrt_w[np.newaxis]
    ortho.setflags(write=False)
    return BasisSet(resolution=resolution, fields=ortho, frequencies=frequencies)


def basis_inner_product(basis: BasisSet, a: int, b: int) -> float:
    """Trapezoidal L2 inner product of two basis fields."""
    weights = trapezoid_weights(*basis.grid_shape)
    return float(np.einsum("ijc,ijc,ij->", basis.fields[a], basis.fields[b], weights))


def registration_energy(q1: QMapImage, q2: QMapImage, g: Diffeomorphism) -> float:
    """Squared L2 distance ||q1 - (q2, g)||^2 by trapezoidal quadrature."""
    if q1.values.shape != q2.values.shape:
        raise ValueError(
            f"q-maps of shape {q1.values.shape} and {q2.values.shape} are not comparable"
        )
    acted = group_action(q2, g)
    diff = q1.values - acted.values
    return weighted_sumsq(diff, trapezoid_weights(*q1.grid_shape))


def phase_distance(g: Diffeomorphism) -> float:
    """Deformation size of a warp: L2 distance between the q-maps of the
    identity map and of ``g``, both viewed as two-channel coordinate images."""
    s1, s2 = node_coordinates(*g.grid_shape)
    ident = GridImage(np.stack([s1, s2], axis=-1))
    warped = GridImage(np.asarray(g.coords))
    return l2_distance(qmap(ident), qmap(warped))


@numba.njit(cache=True)
def _nb_sample_pair(plane_a, plane_b, x_idx, y_idx, out_a, out_b):
    """Bilinear sample of two planes at index-space points (pre-clamped)."""
    nx, ny = plane_a.shape
    for k in range(x_idx.size):
        i0 = int(x_idx[k])
        j0 = int(y_idx[k])
        if i0 > nx - 2:
            i0 = nx - 2
        if j0 > ny - 2:
            j0 = ny - 2
        dx = x_idx[k] - i0
        dy = y_idx[k] - j0
        w00 = (1.0 - dx) * (1.0 - dy)
        w10 = dx * (1.0 - dy)
        w01 = (1.0 - dx) * dy
        w11 = dx * dy
        out_a[k] = (
            plane_a[i0, j0] * w00
            + plane_a[i0 + 1, j0] * w10
            + plane_a[i0, j0 + 1] * w01
            + plane_a[i0 + 1, j0 + 1] * w11
        )
        out_b[k] = (
            plane_b[i0, j0] * w00
            + plane_b[i0 + 1, j0] * w10
            + plane_b[i0, j0 + 1] * w01
            + plane_b[i0 + 1, j0 + 1] * w11
        )


@numba.njit(cache=True)
def _nb_batch_energy(c1, c2, q1, q2, weights, guard_det):
    """Energies for a batch of candidate warp coordinates c1, c2 of shape
    (p, nx, ny): finite-difference Jacobian determinant, bilinear pullback of
    q2, and the weighted squared residual against q1, fused per probe.

    With guard_det a candidate whose determinant is not positive everywhere
    gets +inf (it leaves the group); derivative probes instead clamp the
    determinant so finite differences stay finite.
    """
    n_probes, nx, ny = c1.shape
    n_channels = q2.shape[2]
    hx = 1.0 / (nx - 1)
    hy = 1.0 / (ny - 1)
    energies = np.empty(n_probes)
    for p in range(n_probes):
        total = 0.0
        valid = True
        for i in range(nx):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < nx - 1 else nx - 1
            dsi = (ip - im) * hx
            for j in range(ny):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < ny - 1 else ny - 1
                dsj = (jp - jm) * hy
                d11 = (c1[p, ip, j] - c1[p, im, j]) / dsi
                d21 = (c2[p, ip, j] - c2[p, im, j]) / dsi
                d12 = (c1[p, i, jp] - c1[p, i, jm]) / dsj
                d22 = (c2[p, i, jp] - c2[p, i, jm]) / dsj
                det = d11 * d22 - d12 * d21
                if det <= 0.0:
                    if guard_det:
                        valid = False
                        break
                    det = 0.0
                scale = np.sqrt(det)
                x = c1[p, i, j]
                y = c2[p, i, j]
                if x < 0.0:
                    x = 0.0
                elif x > 1.0:
                    x = 1.0
                if y < 0.0:
                    y = 0.0
                elif y > 1.0:
                    y = 1.0
                xi = x * (nx - 1)
                yj = y * (ny - 1)
                i0 = int(xi)
                j0 = int(yj)
                if i0 > nx - 2:
                    i0 = nx - 2
                if j0 > ny - 2:
                    j0 = ny - 2
                dx = xi - i0
                dy = yj - j0
                w00 = (1.0 - dx) * (1.0 - dy)
                w10 = dx * (1.0 - dy)
                w01 = (1.0 - dx) * dy
                w11 = dx * dy
                cell = 0.0
                for c in range(n_channels):
                    warped = (
                        q2[i0, j0, c] * w00
                        + q2[i0 + 1, j0, c] * w10
                        + q2[i0, j0 + 1, c] * w01
                        + q2[i0 + 1, j0 + 1, c] * w11
                    )
                    diff = q1[i, j, c] - scale * warped
                    cell += diff * diff
                total += weights[i, j] * cell
            if not valid:
                break
        energies[p] = total if valid else np.inf
    return energies


class _Descent:
    """Energy/derivative engine for one registration problem.

    All 4*K^2 coefficient probes share one batched sampling pass and one
    fused energy kernel per iteration instead of per-field calls.
    """

    def __init__(self, q1: QMapImage, q2: QMapImage, basis: BasisSet, cfg: RegistrationConfig):
        self.nx, self.ny = q1.grid_shape
        self.q1 = np.ascontiguousarray(q1.values)
        self.q2 = np.ascontiguousarray(q2.values)
        self.weights = trapezoid_weights(self.nx, self.ny)
        self.basis = basis.fields
        self.cfg = cfg
        self.s1, self.s2 = node_coordinates(self.nx, self.ny)
        self._probe_cache = {}

    def _probes(self, eps: float):
        """Index-space coordinates of all probe points s +- eps*b (cached per eps)."""
        if eps not in self._probe_cache:
            plus1 = np.clip(self.s1[np.newaxis] + eps * self.basis[:, :, :, 0], 0.0, 1.0)
            plus2 = np.clip(self.s2[np.newaxis] + eps * self.basis[:, :, :, 1], 0.0, 1.0)
            minus1 = np.clip(self.s1[np.newaxis] - eps * self.basis[:, :, :, 0], 0.0, 1.0)
            minus2 = np.clip(self.s2[np.newaxis] - eps * self.basis[:, :, :, 1], 0.0, 1.0)
            probe1 = np.concatenate([plus1, minus1])
            probe2 = np.concatenate([plus2, minus2])
            idx = (probe1.ravel() * (self.nx - 1), probe2.ravel() * (self.ny - 1))
            self._probe_cache[eps] = (idx, probe1.shape[0])
        return self._probe_cache[eps]

    def _sample_warp(self, g1, g2, x_idx, y_idx, shape):
        out1 = np.empty(x_idx.size)
        out2 = np.empty(x_idx.size)
        _nb_sample_pair(g1, g2, x_idx, y_idx, out1, out2)
        return out1.reshape(shape), out2.reshape(shape)

    def energy(self, g1: np.ndarray, g2: np.ndarray) -> float:
        return float(
            _nb_batch_energy(g1[np.newaxis], g2[np.newaxis], self.q1, self.q2, self.weights, True)[0]
        )

    def directional_derivatives(self, g1: np.ndarray, g2: np.ndarray, eps: float) -> np.ndarray:
        """Central-difference energy derivative along every basis coefficient,
        with coefficient perturbation ``eps``."""
        (x_idx, y_idx), n_probes = self._probes(eps)
        shape = (n_probes, self.nx, self.ny)
        c1, c2 = self._sample_warp(g1, g2, x_idx, y_idx, shape)
        energies = _nb_batch_energy(c1, c2, self.q1, self.q2, self.weights, False)
        half = n_probes // 2
        return (energies[:half] - energies[half:]) / (2.0 * eps)

    def compose_step(self, g1, g2, v, delta):
        """Coordinates of gamma o (id + delta*v)."""
        p1 = np.clip(self.s1 + delta * v[:, :, 0], 0.0, 1.0)
        p2 = np.clip(self.s2 + delta * v[:, :, 1], 0.0, 1.0)
        return self._sample_warp(
            g1, g2, p1.ravel() * (self.nx - 1), p2.ravel() * (self.ny - 1), p1.shape
        )


def register(f1: GridImage, f2: GridImage, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Register f2 onto f1 and report amplitude, phase, and Euclidean distances.

    Parameters
    ----------
    f1, f2 : GridImage
        Images on the same grid with the same channel count; f1 is the
        reference.
    cfg : RegistrationConfig, optional
        Descent settings; defaults require inputs roughly on unit scale
        (see the image recipes, which rescale channels).

    Returns
    -------
    RegistrationResult
        Optimal warp gamma*, d_amp = sqrt(final energy), d_phase of gamma*,
        the plain L2 image distance, the energy trace (non-increasing), and
        convergence/degeneracy flags. Registering against an image whose
        q-map vanishes (e.g. a constant image) returns the identity warp
        with ``degenerate=True``.
    """
    cfg = cfg or RegistrationConfig()
    if f1.values.shape != f2.values.shape:
        raise ValueError(
            f"images of shape {f1.values.shape} and {f2.values.shape} cannot be registered"
        )
    nx, ny = f1.grid_shape
    q1 = qmap(f1)
    q2 = qmap(f2)
    d_euclid = l2_distance(f1, f2)
    weights = trapezoid_weights(nx, ny)
    initial_energy = weighted_sumsq(q1.values - q2.values, weights)
    if not np.isfinite(initial_energy):
        raise ValueError("non-finite registration energy; check input images")

    identity = Diffeomorphism.identity(nx, ny)
    if l2_norm(q1) <= _ZERO_ENERGY or l2_norm(q2) <= _ZERO_ENERGY:
        return RegistrationResult(
            gamma=identity,
            d_amp=float(np.sqrt(initial_energy)),
            d_phase=0.0,
            d_euclid=d_euclid,
            energy_trace=np.array([initial_energy]),
            converged=True,
            degenerate=True,
        )

    basis = build_basis(cfg.basis_resolution, (nx, ny))
    engine = _Descent(q1, q2, basis, cfg)
    g1 = engine.s1.copy()
    g2 = engine.s2.copy()
    energy = initial_energy
    trace = [energy]
    converged = False
    damping = 1.0 / np.sum(basis.frequencies**2, axis=1).astype(float) ** cfg.grad_damping

    # Coarse-to-fine coefficient perturbations: a large probe sees past the
    # support of narrow features (capture range), the final level is the
    # configured fd_eps for local accuracy. Shrink when backtracking stalls.
    eps_levels = sorted({max(cfg.fd_eps, 1e-2), max(cfg.fd_eps, 1e-3), cfg.fd_eps}, reverse=True)
    level = 0

    for iteration in range(1, cfg.max_iters + 1):
        if energy <= _ZERO_ENERGY:
            converged = True
            break
        coeffs = -engine.directional_derivatives(g1, g2, eps_levels[level]) * damping
        accepted = False
        if np.max(np.abs(coeffs)) > 0.0:
            v = np.einsum("k,kijc->ijc", coeffs, basis.fields)
            # normalize so that delta is the maximum nodal displacement; keeps
            # the backtracking range meaningful whatever the energy scale
            v = v / np.sqrt(v[:, :, 0] ** 2 + v[:, :, 1] ** 2).max()
            delta = cfg.step0
            for _ in range(MAX_BACKTRACK_HALVINGS + 1):
                cand1, cand2 = engine.compose_step(g1, g2, v, delta)
                new_energy = engine.energy(cand1, cand2)
                if new_energy < energy:
                    accepted = True
                    break
                delta *= 0.5
        if not accepted:
            if level + 1 < len(eps_levels):
                level += 1
                continue
            if np.max(np.abs(coeffs)) == 0.0:
                converged = True
            # otherwise no descent direction survives the guards at any level
            break
        g1, g2 = cand1, cand2
        trace.append(new_energy)
        if energy - new_energy <= cfg.rel_tol * max(energy, _ZERO_ENERGY):
            energy = new_energy
            converged = True
            break
        energy = new_energy

    gamma = Diffeomorphism.from_coords(g1, g2)
    return RegistrationResult(
        gamma=gamma,
        d_amp=float(np.sqrt(trace[-1])),
        d_phase=phase_distance(gamma),
        d_euclid=d_euclid,
        energy_trace=np.asarray(trace),
        converged=converged,
    )


def worker_count(requested: int | None = None, jobs: int | None = None) -> int:
    """Worker count capped by the WARPCAL_THREADS environment variable."""
    count = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get("WARPCAL_THREADS")
    if env:
        try:
            count = min(count, max(1, int(env)))
        except ValueError:
            raise ValueError(f"WARPCAL_THREADS must be an integer, got {env!r}")
    if jobs is not None:
        count = min(count, jobs)
    return max(1, count)


def _register_pair(args) -> RegistrationResult:
    reference, run, cfg = args
    return register(reference, run, cfg)


def register_batch(
    reference: GridImage,
    runs: list[GridImage],
    cfg: RegistrationConfig | None = None,
    workers: int | None = None,
) -> list[RegistrationResult]:
    """Register every run onto the reference, in parallel across processes.

    Registration is a pure function, so results are independent of worker
    count and ordering; output order matches the input order.
    """
    cfg = cfg or RegistrationConfig()
    n_workers = worker_count(workers, jobs=len(runs))
    if n_workers <= 1 or len(runs) <= 1:
        return [register(reference, run, cfg) for run in runs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_register_pair, [(reference, run, cfg) for run in runs]))
