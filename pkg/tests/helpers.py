"""Shared test utilities: smooth synthetic fields, analytic warps, MCSE."""

import numpy as np

from warpcal.grid import Diffeomorphism, GridImage, node_coordinates


def smooth_image(nx, ny, channels=1, seed=0, modes=3, amplitude=1.0):
    """Random band-limited image: a low-order Fourier sum, analytic and smooth."""
    rng = np.random.default_rng(seed)
    s1, s2 = node_coordinates(nx, ny)
    values = np.zeros((nx, ny, channels))
    for c in range(channels):
        for i in range(1, modes + 1):
            for j in range(1, modes + 1):
                a, b = rng.normal(0, amplitude / (i + j), size=2)
                values[:, :, c] += a * np.sin(np.pi * i * s1) * np.sin(np.pi * j * s2)
                values[:, :, c] += b * np.cos(np.pi * i * s1) * np.cos(np.pi * j * s2)
    return GridImage(values)


def sine_warp(nx, ny, c1=0.03, c2=-0.02, i1=1, j1=2, i2=2, j2=1):
    """Analytic boundary-preserving warp: id + sine displacements.

    The displacement of each coordinate vanishes on the edges where that
    coordinate is 0 or 1, so the square's boundary maps to itself.
    """
    s1, s2 = node_coordinates(nx, ny)
    g1 = s1 + c1 * np.sin(np.pi * i1 * s1) * np.sin(np.pi * j1 * s2)
    g2 = s2 + c2 * np.sin(np.pi * i2 * s1) * np.sin(np.pi * j2 * s2)
    return Diffeomorphism.from_coords(g1, g2)


def sine_warp_at(points1, points2, c1=0.03, c2=-0.02, i1=1, j1=2, i2=2, j2=1):
    """The same warp evaluated analytically at arbitrary coordinates."""
    g1 = points1 + c1 * np.sin(np.pi * i1 * points1) * np.sin(np.pi * j1 * points2)
    g2 = points2 + c2 * np.sin(np.pi * i2 * points1) * np.sin(np.pi * j2 * points2)
    return g1, g2


def bilinear_reference(values, x, y):
    """Plain bilinear interpolation on the unit square, written independently
    of the package internals. ``values`` is (nx, ny); x, y are clamped."""
    nx, ny = values.shape
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0) * (nx - 1)
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0) * (ny - 1)
    i0 = np.minimum(x.astype(int), nx - 2)
    j0 = np.minimum(y.astype(int), ny - 2)
    dx = x - i0
    dy = y - j0
    return (
        values[i0, j0] * (1 - dx) * (1 - dy)
        + values[i0 + 1, j0] * dx * (1 - dy)
        + values[i0, j0 + 1] * (1 - dx) * dy
        + values[i0 + 1, j0 + 1] * dx * dy
    )


def batch_means_mcse(samples, n_batches=30):
    """Monte Carlo standard error of the mean by batch means."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples) // n_batches
    batches = samples[: n * n_batches].reshape(n_batches, n).mean(axis=1)
    return batches.std(ddof=1) / np.sqrt(n_batches)
