"""Grid-sampled multichannel images on the unit square and their q-map geometry.

Images live on a regular (nx, ny) node grid over [0,1]^2 with node coordinates
s1_i = i/(nx-1), s2_j = j/(ny-1). Arrays are indexed ``values[i, j, c]``, so
axis 0 runs along s1 and axis 1 along s2. All integrals use the trapezoidal
rule on the grid; all resampling is bilinear with coordinates clamped to the
unit square.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

MIN_GRID = 8
BOUNDARY_TOL = 1e-12


def _frozen_array(values, dtype=float):
    out = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    out.setflags(write=False)
    return out


def node_coordinates(nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    """Node coordinate grids (S1, S2) over [0,1]^2, each of shape (nx, ny)."""
    s1 = np.linspace(0.0, 1.0, nx)
    s2 = np.linspace(0.0, 1.0, ny)
    return np.meshgrid(s1, s2, indexing="ij")


def trapezoid_weights(nx: int, ny: int) -> np.ndarray:
    """2-D trapezoidal quadrature weights for the unit square, shape (nx, ny)."""
    w1 = np.full(nx, 1.0 / (nx - 1))
    w1[[0, -1]] *= 0.5
    w2 = np.full(ny, 1.0 / (ny - 1))
    w2[[0, -1]] *= 0.5
    return np.outer(w1, w2)


@dataclass(frozen=True, eq=False)
class GridImage:
    """Multichannel field f: [0,1]^2 -> R^n sampled on a regular grid.

    Parameters
    ----------
    values : ndarray
        Array of shape (nx, ny, channels); a 2-D array is promoted to one
        channel. Values must be finite and nx, ny >= 8.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[:, :, np.newaxis]
        if vals.ndim != 3:
            raise ValueError(f"image values must be (nx, ny, channels), got shape {vals.shape}")
        nx, ny, nc = vals.shape
        if nx < MIN_GRID or ny < MIN_GRID:
            raise ValueError(f"grid must be at least {MIN_GRID}x{MIN_GRID}, got {nx}x{ny}")
        if nc < 1:
            raise ValueError("image must have at least one channel")
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise ValueError(f"non-finite image value at node (i={bad[0]}, j={bad[1]}, channel={bad[2]})")
        object.__setattr__(self, "values", _frozen_array(vals))

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True, eq=False)
class QMapImage:
    """q-map of an image: q(s) = sqrt(a(s)) * f(s) with area factor a(s) = ||Jf(s)||_F."""

    values: np.ndarray
    area_factor: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        area = np.asarray(self.area_factor, dtype=float)
        if vals.ndim != 3 or area.shape != vals.shape[:2]:
            raise ValueError(
                f"q-map values must be (nx, ny, channels) with matching area factor; "
                f"got {vals.shape} and {area.shape}"
            )
        if np.any(area < 0):
            raise ValueError("area factor must be nonnegative everywhere")
        object.__setattr__(self, "values", _frozen_array(vals))
        object.__setattr__(self, "area_factor", _frozen_array(area))

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True, eq=False)
class Diffeomorphism:
    """Boundary-preserving coordinate map of the unit square on the node grid.

    ``coords[..., 0]`` and ``coords[..., 1]`` hold the mapped coordinates
    (gamma1, gamma2) per node; ``jac_det`` holds the finite-difference
    Jacobian determinant. Each edge of the square must map to itself: the
    normal coordinate is fixed on every boundary edge to within 1e-12.
    A positive Jacobian determinant everywhere makes the map a valid group
    element; use :attr:`is_valid` to check.
    """

    coords: np.ndarray
    jac_det: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        det = np.asarray(self.jac_det, dtype=float)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError(f"coords must have shape (nx, ny, 2), got {coords.shape}")
        if det.shape != coords.shape[:2]:
            raise ValueError(f"jac_det shape {det.shape} does not match grid {coords.shape[:2]}")
        nx, ny = coords.shape[:2]
        if nx < MIN_GRID or ny < MIN_GRID:
            raise ValueError(f"grid must be at least {MIN_GRID}x{MIN_GRID}, got {nx}x{ny}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite warp coordinates")
        edges = (
            np.abs(coords[0, :, 0]).max(),
            np.abs(coords[-1, :, 0] - 1.0).max(),
            np.abs(coords[:, 0, 1]).max(),
            np.abs(coords[:, -1, 1] - 1.0).max(),
        )
        if max(edges) > BOUNDARY_TOL:
            raise ValueError(
                f"warp does not preserve the boundary: max normal-coordinate deviation {max(edges):.3e}"
            )
        object.__setattr__(self, "coords", _frozen_array(coords))
        object.__setattr__(self, "jac_det", _frozen_array(det))

    @classmethod
    def from_coords(cls, gamma1: np.ndarray, gamma2: np.ndarray) -> "Diffeomorphism":
        """Build from the two coordinate arrays, computing the Jacobian determinant."""
        gamma1 = np.asarray(gamma1, dtype=float)
        gamma2 = np.asarray(gamma2, dtype=float)
        if gamma1.shape != gamma2.shape or gamma1.ndim != 2:
            raise ValueError("gamma1 and gamma2 must be equal-shape 2-D arrays")
        det = warp_jacobian_det(gamma1, gamma2)
        return cls(coords=np.stack([gamma1, gamma2], axis=-1), jac_det=det)

    @classmethod
    def identity(cls, nx: int, ny: int) -> "Diffeomorphism":
        s1, s2 = node_coordinates(nx, ny)
        return cls(coords=np.stack([s1, s2], axis=-1), jac_det=np.ones((nx, ny)))

    @property
    def nx(self) -> int:
        return self.coords.shape[0]

    @property
    def ny(self) -> int:
        return self.coords.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    @property
    def is_valid(self) -> bool:
        """True when the Jacobian determinant is positive at every node."""
        return bool(self.jac_det.min() > 0.0)


def warp_jacobian_det(gamma1: np.ndarray, gamma2: np.ndarray) -> np.ndarray:
    """Finite-difference Jacobian determinant of a coordinate map."""
    nx, ny = gamma1.shape
    hx = 1.0 / (nx - 1)
    hy = 1.0 / (ny - 1)
    d11 = np.gradient(gamma1, hx, axis=0)
    d12 = np.gradient(gamma1, hy, axis=1)
    d21 = np.gradient(gamma2, hx, axis=0)
    d22 = np.gradient(gamma2, hy, axis=1)
    return d11 * d22 - d12 * d21


def finite_diff_jacobian(f: GridImage) -> np.ndarray:
    """Per-node Jacobian of a multichannel image.

    Central differences at interior nodes, first-order one-sided differences
    at the boundary, with grid spacing 1/(nx-1) and 1/(ny-1).

    Returns
    -------
    ndarray
        Shape (nx, ny, channels, 2); ``[..., c, k]`` is the derivative of
        channel c along coordinate s_{k+1}.
    """
    hx = 1.0 / (f.nx - 1)
    hy = 1.0 / (f.ny - 1)
    d1 = np.gradient(f.values, hx, axis=0)
    d2 = np.gradient(f.values, hy, axis=1)
    return np.stack([d1, d2], axis=-1)


def qmap(f: GridImage) -> QMapImage:
    """Map an image to its q-map q(s) = sqrt(a(s)) f(s).

    The generalized area multiplication factor a(s) is the Frobenius norm of
    the finite-difference Jacobian of f at s, so constant images map to the
    zero q-map.
    """
    jac = finite_diff_jacobian(f)
    area = np.sqrt(np.einsum("ijck,ijck->ij", jac, jac))
    values = np.sqrt(area)[:, :, np.newaxis] * f.values
    return QMapImage(values=values, area_factor=area)


def _sample_channels(values: np.ndarray, gamma1: np.ndarray, gamma2: np.ndarray) -> np.ndarray:
    """Bilinear sample of (nx, ny, c) values at unit-square coordinates (clamped)."""
    nx, ny = values.shape[:2]
    idx = np.stack(
        [
            np.clip(gamma1, 0.0, 1.0) * (nx - 1),
            np.clip(gamma2, 0.0, 1.0) * (ny - 1),
        ]
    )
    out = np.empty(gamma1.shape + (values.shape[2],))
    for c in range(values.shape[2]):
        out[..., c] = map_coordinates(values[:, :, c], idx, order=1, mode="nearest")
    return out


def apply_warp(f: GridImage, g: Diffeomorphism) -> GridImage:
    """Resample an image through a warp: output(s) = f(gamma(s)) by bilinear interpolation."""
    if f.grid_shape != g.grid_shape:
        raise ValueError(f"image grid {f.grid_shape} does not match warp grid {g.grid_shape}")
    return GridImage(_sample_channels(f.values, g.coords[..., 0], g.coords[..., 1]))


def group_action(q: QMapImage, g: Diffeomorphism) -> QMapImage:
    """Act on a q-map by a warp: (q, gamma) = sqrt(det J gamma) * (q o gamma)."""
    if q.grid_shape != g.grid_shape:
        raise ValueError(f"q-map grid {q.grid_shape} does not match warp grid {g.grid_shape}")
    if not g.is_valid:
        raise ValueError(
            f"warp is not a valid group element: min Jacobian determinant {g.jac_det.min():.3e} <= 0"
        )
    warped = _sample_channels(q.values, g.coords[..., 0], g.coords[..., 1])
    scale = np.sqrt(g.jac_det)
    area = _sample_channels(q.area_factor[:, :, np.newaxis], g.coords[..., 0], g.coords[..., 1])[..., 0]
    return QMapImage(values=scale[:, :, np.newaxis] * warped, area_factor=g.jac_det * area)


def compose(outer: Diffeomorphism, inner: Diffeomorphism) -> Diffeomorphism:
    """Compose two warps: (outer o inner)(s) = outer(inner(s))."""
    if outer.grid_shape != inner.grid_shape:
        raise ValueError("cannot compose warps on different grids")
    g1 = inner.coords[..., 0]
    g2 = inner.coords[..., 1]
    sampled = _sample_channels(outer.coords, g1, g2)
    return Diffeomorphism.from_coords(sampled[..., 0], sampled[..., 1])


def weighted_sumsq(values: np.ndarray, weights: np.ndarray) -> float:
    """Trapezoidal integral of |values|^2 over the unit square (summing channels)."""
    return float(np.einsum("ijc,ijc,ij->", values, values, weights))


def l2_norm(f) -> float:
    """L2 norm of a GridImage or QMapImage by trapezoidal quadrature."""
    return float(np.sqrt(weighted_sumsq(f.values, trapezoid_weights(*f.grid_shape))))


def l2_distance(f1, f2) -> float:
    """L2 distance between two same-grid images (or q-maps) by trapezoidal quadrature."""
    if f1.values.shape != f2.values.shape:
        raise ValueError(
            f"cannot compare images of shape {f1.values.shape} and {f2.values.shape}"
        )
    diff = f1.values - f2.values
    return float(np.sqrt(weighted_sumsq(diff, trapezoid_weights(*f1.grid_shape))))
