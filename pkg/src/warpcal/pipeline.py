"""Ingestion of simulator/observation jump fields, image recipes, and the toy dataset.

A jump field describes per-cell crack openings: normal jump, tangential jump
(both km), the crack-normal angle, and an ice/land mask. Image recipes turn a
jump field (or a plain scalar intensity image) into the multichannel field
fed to registration, thresholding small fractures and rescaling channels so
the reference image has unit L2 norm per channel.
"""

from dataclasses import dataclass

import numpy as np

from . import fileformat
from .grid import (
    Diffeomorphism,
    GridImage,
    apply_warp,
    finite_diff_jacobian,
    node_coordinates,
    trapezoid_weights,
)

RECIPE_MAG_ANGLE = "mag-angle"
RECIPE_GRAD = "grad"
RECIPE_GRAD_ANGLE = "grad-angle"
RECIPE_VARIANTS = (RECIPE_MAG_ANGLE, RECIPE_GRAD, RECIPE_GRAD_ANGLE)

JUMP_CHANNELS = ("un", "ut", "alpha", "mask")
DEFAULT_THRESHOLD_KM = 0.4

TOY_BOUNDS = ((-0.5, 0.5), (-0.5, 0.5))
TEMPLATE_KINDS = ("branching_crack",)


@dataclass(frozen=True, eq=False)
class JumpField:
    """Per-cell crack descriptor on the unit-square grid.

    ``normal_jump`` and ``tangent_jump`` are in km; ``angle`` is the
    crack-normal angle in radians; ``mask`` is True on ice cells and False on
    land/invalid cells, whose values are zeroed.
    """

    normal_jump: np.ndarray
    tangent_jump: np.ndarray
    angle: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        un = np.asarray(self.normal_jump, dtype=float)
        ut = np.asarray(self.tangent_jump, dtype=float)
        ang = np.asarray(self.angle, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if not (un.shape == ut.shape == ang.shape == mask.shape) or un.ndim != 2:
            raise ValueError("jump field channels must share one 2-D shape")
        if not mask.any():
            raise ValueError("jump field is entirely masked out: no ice cells to build an image from")
        for name, arr in (("un", un), ("ut", ut), ("alpha", ang)):
            bad = ~np.isfinite(arr) & mask
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise ValueError(f"non-finite {name} on masked-in cell (i={i}, j={j})")
        # land/invalid cells carry zeros so the grid stays rectangular
        un = np.where(mask, un, 0.0)
        ut = np.where(mask, ut, 0.0)
        ang = np.where(mask, ang, 0.0)
        for field, arr in (("normal_jump", un), ("tangent_jump", ut), ("angle", ang), ("mask", mask)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, field, arr)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.normal_jump.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.normal_jump, self.tangent_jump)


@dataclass(frozen=True)
class ImageRecipe:
    """Which channels to build from a jump field, and the km threshold below
    which fractures are dropped."""

    variant: str = RECIPE_GRAD_ANGLE
    threshold: float = DEFAULT_THRESHOLD_KM

    def __post_init__(self):
        if self.variant not in RECIPE_VARIANTS:
            raise ValueError(f"unknown recipe variant {self.variant!r}; choose from {RECIPE_VARIANTS}")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")


@dataclass(frozen=True)
class ToyParams:
    """Input parameters of the toy warp model, each in [-0.5, 0.5]."""

    theta1: float
    theta2: float

    def __post_init__(self):
        for name, value, (lo, hi) in zip(("theta1", "theta2"), (self.theta1, self.theta2), TOY_BOUNDS):
            if not (lo <= value <= hi):
                raise ValueError(f"{name}={value} outside toy bounds [{lo}, {hi}]")


def apply_threshold(field: JumpField, threshold: float) -> JumpField:
    """Zero out cells whose jump magnitude falls below the threshold (idempotent)."""
    keep = field.mask & (field.magnitude >= threshold)
    return JumpField(
        normal_jump=np.where(keep, field.normal_jump, 0.0),
        tangent_jump=np.where(keep, field.tangent_jump, 0.0),
        angle=np.where(keep, field.angle, 0.0),
        mask=field.mask,
    )


def _rescale_channels(values: np.ndarray, scales: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Divide each channel by its scale; scales default to the channel L2 norms."""
    weights = trapezoid_weights(values.shape[0], values.shape[1])
    if scales is None:
        norms = np.sqrt(np.einsum("ijc,ijc,ij->c", values, values, weights))
        scales = np.where(norms > 0, norms, 1.0)
    scales = np.asarray(scales, dtype=float)
    if scales.shape != (values.shape[2],):
        raise ValueError(f"expected {values.shape[2]} channel scales, got shape {scales.shape}")
    return values / scales, scales


def build_image(
    field: JumpField, recipe: ImageRecipe, scales: np.ndarray | None = None
) -> tuple[GridImage, np.ndarray]:
    """Build the registration image for a jump field.

    The jump magnitude |[u]| = sqrt(un^2 + ut^2) is thresholded, then the
    recipe selects the channels: ``mag-angle`` -> (|[u]|, alpha), ``grad`` ->
    (d|[u]|/ds1, d|[u]|/ds2), ``grad-angle`` -> both gradients plus alpha.

    Parameters
    ----------
    field : JumpField
    recipe : ImageRecipe
    scales : ndarray, optional
        Per-channel divisors. When omitted they are computed from this field
        so that every channel has unit L2 norm; pass the scales returned for
        the reference image to put a batch on the reference's scale.

    Returns
    -------
    (GridImage, ndarray)
        The built image and the channel scales that were applied.
    """
    thresholded = apply_threshold(field, recipe.threshold)
    magnitude = thresholded.magnitude
    angle = thresholded.angle
    if recipe.variant == RECIPE_MAG_ANGLE:
        channels = [magnitude, angle]
    else:
        jac = finite_diff_jacobian(GridImage(magnitude))
        channels = [jac[:, :, 0, 0], jac[:, :, 0, 1]]
        if recipe.variant == RECIPE_GRAD_ANGLE:
            channels.append(angle)
    values, scales = _rescale_channels(np.stack(channels, axis=-1), scales)
    return GridImage(values), scales


def build_scalar_image(
    intensity: GridImage, recipe: ImageRecipe, scales: np.ndarray | None = None
) -> tuple[GridImage, np.ndarray]:
    """Build the registration image for a single-channel intensity field.

    Only the ``grad`` recipe applies: the image is the intensity gradient
    (d f/ds1, d f/ds2). Angle-bearing recipes need a jump field.
    """
    if intensity.channels != 1:
        raise ValueError(f"expected a single-channel intensity image, got {intensity.channels} channels")
    if recipe.variant != RECIPE_GRAD:
        raise ValueError(
            f"recipe {recipe.variant!r} needs jump-field channels; "
            "scalar intensity fields support only 'grad'"
        )
    jac = finite_diff_jacobian(intensity)
    values, scales = _rescale_channels(np.stack([jac[:, :, 0, 0], jac[:, :, 0, 1]], axis=-1), scales)
    return GridImage(values), scales


def ingest_jump_field(path) -> JumpField:
    """Read a jump field from a field file with channels un, ut, alpha, mask.

    Land/invalid cells may hold NaN; a NaN on a masked-in cell is rejected
    with its grid location. The grid is taken to span the unit square
    regardless of the physical extent or aspect of the source data.
    """
    channels, _ = fileformat.read_channels(path)
    missing = [name for name in JUMP_CHANNELS if name not in channels]
    if missing:
        raise ValueError(f"jump field {path} is missing channels: {missing}")
    mask = channels["mask"]
    if not np.all(np.isfinite(mask)):
        i, j = np.argwhere(~np.isfinite(mask))[0]
        raise ValueError(f"non-finite mask value in {path} at cell (i={i}, j={j})")
    mask = mask != 0.0
    for name in ("un", "ut", "alpha"):
        bad = ~np.isfinite(channels[name]) & mask
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"non-finite {name} in {path} on masked-in cell (i={i}, j={j})")
    cleaned = {name: np.where(mask, channels[name], 0.0) for name in ("un", "ut", "alpha")}
    return JumpField(
        normal_jump=cleaned["un"], tangent_jump=cleaned["ut"], angle=cleaned["alpha"], mask=mask
    )


def write_jump_field(path, field: JumpField):
    """Write a jump field in the shared field format."""
    return fileformat.write_channels(
        path,
        {
            "un": field.normal_jump,
            "ut": field.tangent_jump,
            "alpha": field.angle,
            "mask": field.mask.astype(float),
        },
    )


def load_field_source(path):
    """Read a field file as either a JumpField (channels un, ut, alpha, mask)
    or a single-channel intensity GridImage."""
    _, manifest = fileformat.read_channels(path)
    names = set(manifest["channel_names"])
    if set(JUMP_CHANNELS) <= names:
        return ingest_jump_field(path)
    image, _ = fileformat.read_field(path)
    if image.channels != 1:
        raise ValueError(
            f"{path}: expected a jump field ({', '.join(JUMP_CHANNELS)}) or a "
            f"single-channel intensity field, got channels {sorted(names)}"
        )
    return image


def build_recipe_image(source, recipe: ImageRecipe, scales: np.ndarray | None = None):
    """Apply a recipe to a loaded field source (jump field or intensity image)."""
    if isinstance(source, JumpField):
        return build_image(source, recipe, scales)
    return build_scalar_image(source, recipe, scales)


def toy_warp_point(s1, s2, params: ToyParams):
    """Toy boundary-preserving warp of a unit-square point (vectorized).

    s1' = s1 - 2*t1*s2*sin(s1)*sin(s2)*(cos(pi*s1)+1)*(cos(pi*s2)+1)
    s2' = s2 + 2*t2*s1*sin(s1)*sin(s2)*cos(pi/2*s1)*cos(3/2*pi*s2)
    """
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    shared = np.sin(s1) * np.sin(s2)
    out1 = s1 - 2.0 * params.theta1 * s2 * shared * (np.cos(np.pi * s1) + 1.0) * (np.cos(np.pi * s2) + 1.0)
    out2 = s2 + 2.0 * params.theta2 * s1 * shared * np.cos(np.pi / 2.0 * s1) * np.cos(1.5 * np.pi * s2)
    return out1, out2


def toy_warp(nx: int, ny: int, params: ToyParams) -> Diffeomorphism:
    """The toy warp sampled on the node grid."""
    s1, s2 = node_coordinates(nx, ny)
    g1, g2 = toy_warp_point(s1, s2, params)
    return Diffeomorphism.from_coords(g1, g2)


def generate_toy_run(template: GridImage, params: ToyParams) -> GridImage:
    """Model output for the toy experiment: the template pulled back through the warp."""
    return apply_warp(template, toy_warp(template.nx, template.ny, params))


def _polyline_distance(s1: np.ndarray, s2: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance from every grid node to a polyline given as (m, 2) vertices."""
    p = np.stack([s1.ravel(), s2.ravel()], axis=1)
    a = points[:-1]
    b = points[1:]
    ab = b - a
    length_sq = np.einsum("kc,kc->k", ab, ab)
    length_sq[length_sq == 0] = 1.0
    best = np.full(len(p), np.inf)
    # chunk over segments to bound the (nodes x segments) distance matrix
    chunk = max(1, int(2e6) // max(1, len(p)))
    for start in range(0, len(a), chunk):
        seg_a = a[start : start + chunk]
        seg_ab = ab[start : start + chunk]
        seg_len = length_sq[start : start + chunk]
        rel = p[:, np.newaxis, :] - seg_a[np.newaxis, :, :]
        t = np.clip(np.einsum("pkc,kc->pk", rel, seg_ab) / seg_len, 0.0, 1.0)
        closest = seg_a[np.newaxis] + t[:, :, np.newaxis] * seg_ab[np.newaxis]
        d = np.linalg.norm(p[:, np.newaxis, :] - closest, axis=2)
        best = np.minimum(best, d.min(axis=1))
    return best.reshape(s1.shape)


def _bezier(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, np.newaxis]
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def make_template(kind: str, grid: tuple[int, int]) -> GridImage:
    """Deterministic synthetic crack template.

    ``branching_crack`` draws a smooth arc crossing the domain through the
    central band (where the toy warp moves points the most) with one branch
    into the lower-right quadrant, rasterized as Gaussian ridges (blur radius
    2 cells). The profile is shifted to reach zero continuously at the
    support radius and normalized to peak 1.
    """
    if kind not in TEMPLATE_KINDS:
        raise ValueError(f"unknown template kind {kind!r}; choose from {TEMPLATE_KINDS}")
    nx, ny = grid
    s1, s2 = node_coordinates(nx, ny)

    t = np.linspace(0.0, 1.0, 400)
    main = np.stack([0.04 + 0.92 * t, 0.50 + 0.22 * np.sin(np.pi * t)], axis=1)
    t_branch = 0.68
    start = np.array([0.04 + 0.92 * t_branch, 0.50 + 0.22 * np.sin(np.pi * t_branch)])
    branch = _bezier(start, (0.78, 0.45), (0.86, 0.28), 200)

    distance = np.minimum(
        _polyline_distance(s1, s2, main), _polyline_distance(s1, s2, branch)
    )
    cell = 0.5 * (1.0 / (nx - 1) + 1.0 / (ny - 1))
    sigma = 2.0 * cell
    support = 3.5 * cell
    floor = np.exp(-(support**2) / (2.0 * sigma**2))
    values = np.clip((np.exp(-(distance**2) / (2.0 * sigma**2)) - floor) / (1.0 - floor), 0.0, None)
    values = values / values.max()
    return GridImage(values[:, :, np.newaxis])
