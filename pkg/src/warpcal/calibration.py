"""Bayesian calibration of simulator inputs against the zero-distance observation.

Registering the reference image to itself gives zero amplitude and phase
distance, so the observed metric vector is (0, 0). The data model puts a
truncated-at-zero (half-normal) discrepancy around the emulated distances;
each discrepancy variance gets an informative inverse-gamma prior anchored at
the 10th percentile of the training metrics, and the inputs get a uniform
prior over their physical box. Sampling is component-wise Gaussian
random-walk Metropolis-Hastings on (theta, log psi^2) with burn-in adaptation
of the proposal scales.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import gaussian_kde

from .emulator import METRIC_AMPLITUDE, METRIC_EUCLIDEAN, METRIC_PHASE, gp_predict

MODE_BOTH = "both"
MODE_AMPLITUDE = "amplitude"
MODE_PHASE = "phase"
MODE_EUCLIDEAN = "euclidean"
METRIC_MODES = (MODE_BOTH, MODE_AMPLITUDE, MODE_PHASE, MODE_EUCLIDEAN)

_MODE_METRICS = {
    MODE_BOTH: (METRIC_AMPLITUDE, METRIC_PHASE),
    MODE_AMPLITUDE: (METRIC_AMPLITUDE,),
    MODE_PHASE: (METRIC_PHASE,),
    MODE_EUCLIDEAN: (METRIC_EUCLIDEAN,),
}

_PSI2_SUFFIX = {METRIC_AMPLITUDE: "a", METRIC_PHASE: "p", METRIC_EUCLIDEAN: "e"}

_LOG_2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def mode_metrics(metric_mode: str) -> tuple:
    if metric_mode not in _MODE_METRICS:
        raise ValueError(f"unknown metric mode {metric_mode!r}; choose from {METRIC_MODES}")
    return _MODE_METRICS[metric_mode]


def psi2_param_name(metric: str) -> str:
    return f"psi2_{_PSI2_SUFFIX[metric]}"


@dataclass(frozen=True)
class Priors:
    """Uniform box prior on the inputs plus per-metric IG(shape, scale) priors
    on the discrepancy variances."""

    theta_bounds: tuple
    ig_scales: dict
    ig_shape: float = 20.0

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.theta_bounds)
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"degenerate input bounds ({lo}, {hi})")
        if self.ig_shape <= 0:
            raise ValueError("inverse-gamma shape must be positive")
        scales = {k: float(v) for k, v in self.ig_scales.items()}
        for metric, scale in scales.items():
            if scale <= 0:
                raise ValueError(f"inverse-gamma scale for {metric!r} must be positive, got {scale}")
        object.__setattr__(self, "theta_bounds", bounds)
        object.__setattr__(self, "ig_scales", scales)

    @classmethod
    def from_training(cls, metrics: dict, theta_bounds, ig_shape: float = 20.0) -> "Priors":
        """Anchor each discrepancy prior at the 10th percentile of the training
        metrics: scale = shape * d_10th^2, putting the psi mode near d_10th."""
        scales = {}
        for metric, values in metrics.items():
            d10 = float(np.percentile(np.asarray(values, dtype=float), 10))
            if d10 <= 0:
                raise ValueError(
                    f"10th percentile of {metric!r} metrics is {d10}; cannot form an informative prior"
                )
            scales[metric] = ig_shape * d10 * d10
        return cls(theta_bounds=theta_bounds, ig_scales=scales, ig_shape=ig_shape)

    def psi2_prior_mode(self, metric: str) -> float:
        return self.ig_scales[metric] / (self.ig_shape + 1.0)


def log_inv_gamma(x: float, shape: float, scale: float) -> float:
    """Inverse-gamma log density; -inf for x <= 0."""
    if x <= 0:
        return -math.inf
    return shape * math.log(scale) - gammaln(shape) - (shape + 1.0) * math.log(x) - scale / x


def log_prior(theta, psi2: dict, priors: Priors) -> float:
    """Log prior of (theta, psi^2): 0 inside the input box (-inf outside) plus
    the inverse-gamma log densities of the discrepancy variances."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape != (len(priors.theta_bounds),):
        raise ValueError(f"theta has shape {theta.shape}, expected ({len(priors.theta_bounds)},)")
    for value, (lo, hi) in zip(theta, priors.theta_bounds):
        if not (lo <= value <= hi):
            return -math.inf
    total = 0.0
    for metric, value in psi2.items():
        total += log_inv_gamma(value, priors.ig_shape, priors.ig_scales[metric])
    return total


def _half_normal_at_zero(distance_mean: float, total_var: float) -> float:
    """Log density of the zero observation under a half-normal discrepancy
    centered on the emulated distance with the emulator variance folded in."""
    if total_var <= 0:
        raise ValueError(f"nonpositive total variance {total_var}")
    w = math.sqrt(total_var)
    return _LOG_2 - _HALF_LOG_2PI - 0.5 * distance_mean * distance_mean / total_var - math.log(w)


def log_likelihood(theta, psi2: dict, models: dict, include_emulator_var: bool = True) -> float:
    """Log likelihood of the zero-distance observation.

    Per metric k the emulator supplies (m_k, v_k) on the original distance
    scale; the contribution is log[2 phi(m_k / w_k) / w_k] with
    w_k^2 = psi2_k + v_k (v_k dropped when include_emulator_var is False).
    Metrics are independent, so contributions add.
    """
    total = 0.0
    for metric, psi2_value in psi2.items():
        if metric not in models:
            raise ValueError(f"no emulator for metric {metric!r}")
        pred = gp_predict(models[metric], theta)
        variance = psi2_value + (pred.var if include_emulator_var else 0.0)
        total += _half_normal_at_zero(pred.mean, variance)
    return total


@dataclass(frozen=True)
class ChainConfig:
    """MCMC settings: chain count, lengths, proposal scales, adaptation, seed.

    ``proposal_scales`` overrides the per-parameter random-walk standard
    deviations (inputs on their own scale, discrepancy variances on the log
    scale); defaults are 10% of each input range and 0.5 for log psi^2.
    """

    n_chains: int = 3
    n_iters: int = 30000
    burn_in: int = 15000
    seed: int = 0
    adapt: bool = True
    adapt_window: int = 100
    proposal_scales: tuple | None = None
    record_decisions: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if not 0 <= self.burn_in < self.n_iters:
            raise ValueError(f"burn-in {self.burn_in} must be below the iteration count {self.n_iters}")
        if self.proposal_scales is not None:
            scales = tuple(float(s) for s in self.proposal_scales)
            if any(s <= 0 for s in scales):
                raise ValueError("proposal scales must be positive")
            object.__setattr__(self, "proposal_scales", scales)


@dataclass(frozen=True, eq=False)
class PosteriorChain:
    """Post burn-in samples of (theta, psi^2) with acceptance and convergence
    statistics. ``by_chain`` has shape (n_chains, n_kept, n_params); psi^2
    columns are on the original (not log) scale."""

    param_names: tuple
    by_chain: np.ndarray
    log_posts: np.ndarray
    acceptance_rate: float
    acceptance_by_param: np.ndarray
    rhat: np.ndarray
    metric_mode: str
    decisions: tuple = ()

    @property
    def samples(self) -> np.ndarray:
        """All chains merged, shape (n_chains * n_kept, n_params)."""
        return self.by_chain.reshape(-1, self.by_chain.shape[2])

    @property
    def n_theta(self) -> int:
        return sum(1 for name in self.param_names if name.startswith("theta_"))


def gelman_rubin(chains: np.ndarray) -> np.ndarray:
    """Potential scale reduction factor per parameter.

    ``chains`` has shape (n_chains, n_iters, n_params) with at least two
    chains of equal length. Constant chains have an undefined factor and are
    reported as NaN.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[:, :, np.newaxis]
    if chains.ndim != 3 or chains.shape[0] < 2:
        raise ValueError(f"need (n_chains >= 2, n_iters, n_params) chains, got shape {chains.shape}")
    m, n, p = chains.shape
    if n < 2:
        raise ValueError("chains must have at least two iterations")
    within = np.mean(np.var(chains, axis=1, ddof=1), axis=0)
    means = np.mean(chains, axis=1)
    between = n * np.var(means, axis=0, ddof=1)
    out = np.full(p, np.nan)
    ok = within > 0
    pooled = (n - 1) / n * within[ok] + between[ok] / n
    out[ok] = np.sqrt(pooled / within[ok])
    return out


def _run_chain(log_post, start, scales, cfg: ChainConfig, rng, record_decisions=False):
    """One component-wise random-walk MH chain; returns kept samples on the
    sampled scale, log posteriors, post burn-in acceptance counts, decisions."""
    n_params = len(start)
    current = np.asarray(start, dtype=float).copy()
    current_lp = log_post(current)
    if not np.isfinite(current_lp):
        raise ValueError("chain started at a point of zero posterior density")
    scales = np.asarray(scales, dtype=float).copy()
    kept = np.empty((cfg.n_iters - cfg.burn_in, n_params))
    kept_lp = np.empty(cfg.n_iters - cfg.burn_in)
    accepted = np.zeros(n_params, dtype=int)
    proposed = np.zeros(n_params, dtype=int)
    window_accepted = np.zeros(n_params, dtype=int)
    window_count = 0
    decisions = []

    for iteration in range(cfg.n_iters):
        in_burn = iteration < cfg.burn_in
        for k in range(n_params):
            candidate = current.copy()
            candidate[k] += scales[k] * rng.standard_normal()
            candidate_lp = log_post(candidate)
            log_ratio = candidate_lp - current_lp
            accept_prob = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
            accept = rng.random() < accept_prob
            if record_decisions and len(decisions) < 2000:
                decisions.append((float(current_lp), float(candidate_lp), float(accept_prob), bool(accept)))
            if accept:
                current = candidate
                current_lp = candidate_lp
                if in_burn:
                    window_accepted[k] += 1
                else:
                    accepted[k] += 1
            if not in_burn:
                proposed[k] += 1
        if in_burn and cfg.adapt:
            window_count += 1
            if window_count == cfg.adapt_window:
                rates = window_accepted / cfg.adapt_window
                scales[rates < 0.20] *= 0.8
                scales[rates > 0.30] *= 1.2
                window_accepted[:] = 0
                window_count = 0
        if not in_burn:
            kept[iteration - cfg.burn_in] = current
            kept_lp[iteration - cfg.burn_in] = current_lp
    return kept, kept_lp, accepted, proposed, decisions


def run_mcmc(
    models: dict,
    priors: Priors,
    cfg: ChainConfig | None = None,
    metric_mode: str = MODE_BOTH,
    include_emulator_var: bool = True,
    loglik=None,
) -> PosteriorChain:
    """Sample the calibration posterior with Metropolis-Hastings.

    The sampled vector is (theta, log psi^2_k ...) for the metrics of the
    requested mode, with the log-scale Jacobian folded into the target.
    During burn-in each component's proposal scale adapts toward a 20-30%
    acceptance rate, then freezes. Chains are independently seeded and run
    sequentially; the same config and seed always reproduce the same chains.

    Parameters
    ----------
    models : dict
        Fitted emulators keyed by metric name (unused when ``loglik`` is given
        for oracle targets).
    priors : Priors
    cfg : ChainConfig, optional
    metric_mode : str
        One of both, amplitude, phase, euclidean.
    include_emulator_var : bool
        Fold the emulator predictive variance into the discrepancy scale.
    loglik : callable, optional
        Replacement log likelihood ``f(theta, psi2_dict) -> float``.

    Raises
    ------
    RuntimeError
        If a chain accepts nothing after adaptation.
    """
    cfg = cfg or ChainConfig()
    metrics = mode_metrics(metric_mode)
    dim = len(priors.theta_bounds)
    param_names = tuple(f"theta_{j + 1}" for j in range(dim)) + tuple(
        psi2_param_name(metric) for metric in metrics
    )
    bounds_lo = np.array([b[0] for b in priors.theta_bounds])
    bounds_hi = np.array([b[1] for b in priors.theta_bounds])

    if loglik is None:
        for metric in metrics:
            if metric not in models:
                raise ValueError(f"metric mode {metric_mode!r} needs an emulator for {metric!r}")
        loglik = lambda theta, psi2: log_likelihood(theta, psi2, models, include_emulator_var)

    def log_post(u):
        theta = u[:dim]
        if np.any(theta < bounds_lo) or np.any(theta > bounds_hi):
            return -math.inf
        log_psi2 = u[dim:]
        psi2 = {metric: math.exp(v) for metric, v in zip(metrics, log_psi2)}
        lp = log_prior(theta, psi2, priors)
        if not np.isfinite(lp):
            return lp
        # Jacobian of the log-variance reparameterization
        return lp + float(np.sum(log_psi2)) + loglik(theta, psi2)

    if cfg.proposal_scales is not None:
        if len(cfg.proposal_scales) != len(param_names):
            raise ValueError(
                f"{len(cfg.proposal_scales)} proposal scales given for {len(param_names)} parameters"
            )
        base_scales = np.asarray(cfg.proposal_scales, dtype=float)
    else:
        base_scales = np.concatenate([0.1 * (bounds_hi - bounds_lo), np.full(len(metrics), 0.5)])

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    all_kept = []
    all_lp = []
    accepted = np.zeros(len(param_names), dtype=int)
    proposed = np.zeros(len(param_names), dtype=int)
    decisions = []
    for chain_idx in range(cfg.n_chains):
        rng = np.random.default_rng(seeds[chain_idx])
        start_theta = bounds_lo + rng.random(dim) * (bounds_hi - bounds_lo)
        start_psi2 = [math.log(priors.psi2_prior_mode(metric)) for metric in metrics]
        start = np.concatenate([start_theta, start_psi2])
        kept, kept_lp, acc, prop, dec = _run_chain(
            log_post, start, base_scales, cfg, rng,
            record_decisions=cfg.record_decisions and chain_idx == 0,
        )
        if acc.sum() == 0:
            raise RuntimeError(
                f"chain {chain_idx} accepted no proposals after adaptation; "
                f"check the likelihood scale and proposal settings"
            )
        # report psi^2 on the original scale
        kept[:, dim:] = np.exp(kept[:, dim:])
        all_kept.append(kept)
        all_lp.append(kept_lp)
        accepted += acc
        proposed += prop
        decisions.extend(dec)

    by_chain = np.stack(all_kept)
    rhat = gelman_rubin(by_chain) if cfg.n_chains >= 2 else np.full(len(param_names), np.nan)
    return PosteriorChain(
        param_names=param_names,
        by_chain=by_chain,
        log_posts=np.stack(all_lp),
        acceptance_rate=float(accepted.sum() / proposed.sum()),
        acceptance_by_param=accepted / np.maximum(proposed, 1),
        rhat=rhat,
        metric_mode=metric_mode,
        decisions=tuple(decisions),
    )


@dataclass(frozen=True, eq=False)
class ParamSummary:
    name: str
    mode: float
    ci_low: float
    ci_high: float
    grid: np.ndarray
    density: np.ndarray


@dataclass(frozen=True, eq=False)
class JointDensity:
    x_name: str
    y_name: str
    x_grid: np.ndarray
    y_grid: np.ndarray
    density: np.ndarray

    @property
    def peak_to_mean(self) -> float:
        """How concentrated the posterior is over the grid (1 for flat)."""
        return float(self.density.max() / self.density.mean())


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    params: tuple
    joint: JointDensity | None

    def param(self, name: str) -> ParamSummary:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


_KDE_GRID = 512
_JOINT_GRID = 128
_MAX_JOINT_SAMPLES = 5000


def _marginal_summary(name: str, samples: np.ndarray, bounds=None) -> ParamSummary:
    samples = np.asarray(samples, dtype=float)
    if np.ptp(samples) == 0.0:
        value = float(samples[0])
        grid = np.linspace(value - 0.5, value + 0.5, _KDE_GRID)
        density = np.zeros(_KDE_GRID)
        density[int(np.argmin(np.abs(grid - value)))] = 1.0
        return ParamSummary(name, value, value, value, grid, density)
    kde = gaussian_kde(samples, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    if bounds is not None:
        lo, hi = bounds
    else:
        lo, hi = samples.min() - 3 * bw, samples.max() + 3 * bw
    grid = np.linspace(lo, hi, _KDE_GRID)
    density = kde(grid)
    ci_low, ci_high = np.quantile(samples, [0.025, 0.975])
    # ties break toward the lower grid value (argmax returns the first max)
    mode = float(grid[int(np.argmax(density))])
    return ParamSummary(name, mode, float(ci_low), float(ci_high), grid, density)


def _thin(samples: np.ndarray, limit: int) -> np.ndarray:
    if len(samples) <= limit:
        return samples
    idx = np.unique(np.linspace(0, len(samples) - 1, limit).astype(int))
    return samples[idx]


def posterior_summary(chain: PosteriorChain, theta_bounds=None) -> PosteriorSummary:
    """Marginal modes, 95% equal-tailed intervals, and density grids.

    Marginals use a Silverman-bandwidth KDE on a 512-point grid (input
    parameters span their prior bounds when given); the joint density of the
    first two inputs is a 128x128 KDE grid for the posterior heatmaps.
    """
    merged = chain.samples
    if merged.size == 0:
        raise ValueError("posterior chain has no retained samples")
    params = []
    for idx, name in enumerate(chain.param_names):
        bounds = None
        if theta_bounds is not None and name.startswith("theta_"):
            bounds = theta_bounds[int(name.split("_")[1]) - 1]
        params.append(_marginal_summary(name, merged[:, idx], bounds))

    joint = None
    if chain.n_theta >= 2:
        pair = _thin(merged[:, :2], _MAX_JOINT_SAMPLES)
        if np.ptp(pair[:, 0]) > 0 and np.ptp(pair[:, 1]) > 0:
            if theta_bounds is not None:
                (x_lo, x_hi), (y_lo, y_hi) = theta_bounds[0], theta_bounds[1]
            else:
                x_lo, x_hi = pair[:, 0].min(), pair[:, 0].max()
                y_lo, y_hi = pair[:, 1].min(), pair[:, 1].max()
            x_grid = np.linspace(x_lo, x_hi, _JOINT_GRID)
            y_grid = np.linspace(y_lo, y_hi, _JOINT_GRID)
            mesh = np.meshgrid(x_grid, y_grid, indexing="ij")
            kde = gaussian_kde(pair.T, bw_method="silverman")
            density = kde(np.vstack([m.ravel() for m in mesh])).reshape(_JOINT_GRID, _JOINT_GRID)
            joint = JointDensity(
                x_name=chain.param_names[0],
                y_name=chain.param_names[1],
                x_grid=x_grid,
                y_grid=y_grid,
                density=density,
            )
    return PosteriorSummary(params=tuple(params), joint=joint)
