"""Latin hypercube designs for simulator input parameters."""

from dataclasses import dataclass

import numpy as np

# recorded in design manifests so a design can be regenerated exactly
LHS_ALGORITHM = "stratified-lhs-jittered/numpy-pcg64"


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """N x d parameter design with per-dimension bounds and the seed that built it."""

    values: np.ndarray
    bounds: tuple[tuple[float, float], ...]
    seed: int

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def stratum_indices(self) -> np.ndarray:
        """Equal-width stratum index of every sample per column (for LHS checks)."""
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        idx = np.floor((self.values - lo) / (hi - lo) * self.n).astype(int)
        return np.clip(idx, 0, self.n - 1)


def lhs_sample(n: int, bounds, seed: int) -> DesignMatrix:
    """Jittered Latin hypercube sample.

    Each column gets a seeded random permutation of the n equal-width strata
    and one uniform draw inside each stratum, so every 1-D projection covers
    all strata exactly once. The same (n, bounds, seed) always reproduces the
    same matrix.
    """
    if n < 1:
        raise ValueError("design size must be >= 1")
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    for lo, hi in bounds:
        if not lo < hi:
            raise ValueError(f"degenerate bounds ({lo}, {hi}): lower bound must be below upper")
    rng = np.random.default_rng(seed)
    columns = []
    for lo, hi in bounds:
        strata = rng.permutation(n)
        jitter = rng.random(n)
        columns.append(lo + (strata + jitter) * (hi - lo) / n)
    return DesignMatrix(values=np.stack(columns, axis=1), bounds=bounds, seed=int(seed))
