"""Gaussian-process emulation of registration distances over simulator inputs.

Each metric (amplitude, phase, and optionally the Euclidean baseline) gets its
own independent GP with a linear mean in the inputs plus intercept and an
exponential covariance with per-dimension ranges, a partial sill, and a
nugget. Inputs are standardized to [0,1]^d internally; ranges are reported on
that scale. The regression coefficients are profiled out by generalized least
squares and the covariance parameters are maximized by a seeded multi-start
simplex search on the log scale. Metrics may be emulated on the log scale,
with predictions mapped back through the lognormal moments.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

METRIC_AMPLITUDE = "amplitude"
METRIC_PHASE = "phase"
METRIC_EUCLIDEAN = "euclidean"
METRIC_KEYS = (METRIC_AMPLITUDE, METRIC_PHASE, METRIC_EUCLIDEAN)

TRANSFORM_IDENTITY = "identity"
TRANSFORM_LOG = "log"
TRANSFORMS = (TRANSFORM_IDENTITY, TRANSFORM_LOG)

# relative nugget floor enforced during optimization, for numerical PD
NUGGET_FLOOR_RATIO = 1e-8

MODEL_FORMAT = "warpcal-gp-models/1"


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Design inputs and the metric vectors observed at them.

    ``metrics`` maps metric names to length-N nonnegative vectors. ``bounds``
    give the per-dimension input box used for standardization; they default
    to the data range.
    """

    theta: np.ndarray
    metrics: dict
    bounds: tuple = None

    def __post_init__(self):
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if theta.ndim != 2:
            raise ValueError("theta must be an (N, d) matrix")
        metrics = {}
        for name, values in self.metrics.items():
            values = np.asarray(values, dtype=float).ravel()
            if values.shape[0] != theta.shape[0]:
                raise ValueError(
                    f"metric {name!r} has {values.shape[0]} values for {theta.shape[0]} design points"
                )
            if not np.all(np.isfinite(values)):
                raise ValueError(f"metric {name!r} contains non-finite values")
            if np.any(values < 0):
                raise ValueError(f"metric {name!r} must be nonnegative before any transform")
            values.setflags(write=False)
            metrics[name] = values
        bounds = self.bounds
        if bounds is None:
            bounds = tuple((float(c.min()), float(c.max())) for c in theta.T)
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        if len(bounds) != theta.shape[1]:
            raise ValueError(f"{len(bounds)} bounds given for {theta.shape[1]} input dimensions")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"degenerate input bounds ({lo}, {hi})")
        theta = np.ascontiguousarray(theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "metrics", metrics)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def standardize(self, theta: np.ndarray) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return (np.asarray(theta, dtype=float) - lo) / (hi - lo)

    def covariates(self, theta_std: np.ndarray) -> np.ndarray:
        theta_std = np.atleast_2d(theta_std)
        return np.column_stack([np.ones(len(theta_std)), theta_std])


@dataclass(frozen=True)
class GPHyperParams:
    """Exponential-covariance parameters: ranges, partial sill, nugget."""

    rho: tuple
    sigma2: float
    tau2: float

    def __post_init__(self):
        rho = tuple(float(r) for r in np.atleast_1d(self.rho))
        if any(r <= 0 for r in rho):
            raise ValueError("range parameters must be positive")
        if self.sigma2 <= 0:
            raise ValueError("partial sill must be positive")
        if self.tau2 < 0:
            raise ValueError("nugget must be nonnegative")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "tau2", float(self.tau2))


@dataclass(frozen=True)
class GPPrediction:
    """Predictive mean/variance on the metric's original scale, plus the
    latent Gaussian moments (identical under the identity transform)."""

    mean: float
    var: float
    latent_mean: float
    latent_var: float
    extrapolated: bool = False


def cov_exponential(t1, t2, hyper: GPHyperParams) -> float:
    """sigma^2 * exp(-sum_j |t1_j - t2_j| / rho_j), plus the nugget iff t1 == t2 exactly."""
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    if t1.shape != t2.shape or t1.shape != (len(hyper.rho),):
        raise ValueError(f"points of shape {t1.shape} and {t2.shape} do not match {len(hyper.rho)} ranges")
    value = hyper.sigma2 * math.exp(-float(np.sum(np.abs(t1 - t2) / np.array(hyper.rho))))
    if np.array_equal(t1, t2):
        value += hyper.tau2
    return value


def _cov_matrix(theta_std: np.ndarray, hyper: GPHyperParams) -> np.ndarray:
    rho = np.array(hyper.rho)
    delta = np.abs(theta_std[:, np.newaxis, :] - theta_std[np.newaxis, :, :])
    cov = hyper.sigma2 * np.exp(-np.sum(delta / rho, axis=2))
    equal = np.all(theta_std[:, np.newaxis, :] == theta_std[np.newaxis, :, :], axis=2)
    return cov + hyper.tau2 * equal


def _transformed_metric(ts: TrainingSet, metric: str, transform: str) -> np.ndarray:
    if metric not in ts.metrics:
        raise ValueError(f"training set has no metric {metric!r}; available: {sorted(ts.metrics)}")
    y = ts.metrics[metric]
    if transform == TRANSFORM_IDENTITY:
        return y
    if transform == TRANSFORM_LOG:
        if np.any(y <= 0):
            raise ValueError(f"log transform requires strictly positive {metric!r} metrics")
        return np.log(y)
    raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")


def gp_neg_log_lik(
    ts: TrainingSet, metric: str, beta, hyper: GPHyperParams, transform: str = TRANSFORM_IDENTITY
) -> float:
    """Multivariate-normal negative log likelihood of one metric's GP.

    Raises ValueError when the covariance matrix is not positive definite
    (the MLE search treats that as +inf).
    """
    y = _transformed_metric(ts, metric, transform)
    theta_std = ts.standardize(ts.theta)
    x = ts.covariates(theta_std)
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape != (ts.dim + 1,):
        raise ValueError(f"beta must have length {ts.dim + 1}, got {beta.shape}")
    cov = _cov_matrix(theta_std, hyper)
    try:
        chol = cho_factor(cov, lower=True)
    except LinAlgError as exc:
        raise ValueError(f"covariance matrix is not positive definite: {exc}") from exc
    resid = y - x @ beta
    alpha = cho_solve(chol, resid)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return 0.5 * (len(y) * math.log(2.0 * math.pi) + logdet + float(resid @ alpha))


def _profiled_fit(y: np.ndarray, x: np.ndarray, cov: np.ndarray):
    """GLS beta and the profiled negative log likelihood for a fixed covariance."""
    chol = cho_factor(cov, lower=True)
    cov_inv_x = cho_solve(chol, x)
    gram = x.T @ cov_inv_x
    beta = np.linalg.solve(gram, cov_inv_x.T @ y)
    resid = y - x @ beta
    alpha = cho_solve(chol, resid)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    nll = 0.5 * (len(y) * math.log(2.0 * math.pi) + logdet + float(resid @ alpha))
    return nll, beta


class EmulatorFitError(RuntimeError):
    """Raised when every MLE restart fails; carries the best diagnostics found."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, eq=False)
class GPModel:
    """Fitted GP for one metric: regression coefficients, covariance
    hyperparameters (on the standardized input scale), and the transform;
    holds a Cholesky cache of the training covariance for prediction."""

    beta: np.ndarray
    hyper: GPHyperParams
    transform: str
    metric: str
    training: TrainingSet

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel()
        if beta.shape != (self.training.dim + 1,):
            raise ValueError(f"beta must have length {self.training.dim + 1}, got {beta.shape}")
        if len(self.hyper.rho) != self.training.dim:
            raise ValueError("one range parameter per input dimension is required")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        theta_std = self.training.standardize(self.training.theta)
        y = _transformed_metric(self.training, self.metric, self.transform)
        x = self.training.covariates(theta_std)
        cov = _cov_matrix(theta_std, self.hyper)
        try:
            chol = cho_factor(cov, lower=True)
        except LinAlgError as exc:
            raise ValueError(f"fitted covariance is not positive definite: {exc}") from exc
        object.__setattr__(self, "_theta_std", theta_std)
        object.__setattr__(self, "_y", y)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_alpha", cho_solve(chol, y - x @ beta))

    @property
    def dim(self) -> int:
        return self.training.dim


def _heuristic_start(y: np.ndarray, x: np.ndarray, dim: int):
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid_var = float(np.var(y - x @ coef))
    return np.array([0.5] * dim + [max(resid_var, 1e-10), 1e-2])


def gp_fit_mle(
    ts: TrainingSet,
    metric: str,
    transform: str = TRANSFORM_IDENTITY,
    n_restarts: int = 8,
    seed: int = 0,
    fix_tau2: float | None = None,
) -> GPModel:
    """Fit one metric's GP by maximum likelihood.

    The regression coefficients are profiled out analytically; the covariance
    parameters are optimized on the log scale by Nelder-Mead from
    ``n_restarts`` seeded starts (the first start is a data-driven heuristic).
    The nugget is kept above ``NUGGET_FLOOR_RATIO * sigma2`` unless
    ``fix_tau2`` pins it.

    Raises
    ------
    EmulatorFitError
        If no restart produces a finite likelihood.
    """
    if ts.n < ts.dim + 2:
        raise ValueError(f"need at least d+2 = {ts.dim + 2} design points to fit, got {ts.n}")
    y = _transformed_metric(ts, metric, transform)
    theta_std = ts.standardize(ts.theta)
    x = ts.covariates(theta_std)
    dim = ts.dim

    def unpack(z):
        rho = np.exp(z[:dim])
        sigma2 = math.exp(z[dim])
        tau2 = fix_tau2 if fix_tau2 is not None else sigma2 * (NUGGET_FLOOR_RATIO + math.exp(z[dim + 1]))
        return GPHyperParams(rho=rho, sigma2=sigma2, tau2=tau2)

    def objective(z):
        if np.any(np.abs(z) > 45.0):
            return np.inf
        try:
            hyper = unpack(z)
            cov = _cov_matrix(theta_std, hyper)
            nll, _ = _profiled_fit(y, x, cov)
        except (LinAlgError, ValueError, OverflowError):
            return np.inf
        return nll if np.isfinite(nll) else np.inf

    start = _heuristic_start(y, x, dim)
    rng = np.random.default_rng(seed)
    n_free = dim + 1 if fix_tau2 is not None else dim + 2
    best = None
    failures = []
    for restart in range(n_restarts):
        z0 = np.log(np.concatenate([start[:dim], [start[dim]], [start[dim + 1]]]))
        if restart > 0:
            jitter = rng.normal(0.0, 1.0, size=dim + 2)
            jitter[dim] *= 0.5
            jitter[dim + 1] *= 2.0
            z0 = z0 + jitter
        z0 = z0[:n_free]
        if not np.isfinite(objective(z0)):
            failures.append({"restart": restart, "start": z0.tolist(), "reason": "non-finite start"})
            continue
        res = minimize(
            objective,
            z0,
            method="Nelder-Mead",
            options={"maxiter": 600, "xatol": 1e-4, "fatol": 1e-8},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best[0]):
            best = (float(res.fun), res.x.copy())
    if best is None:
        raise EmulatorFitError(
            f"all {n_restarts} MLE restarts failed for metric {metric!r}",
            diagnostics={"failures": failures, "n": ts.n, "dim": dim},
        )
    hyper = unpack(np.concatenate([best[1], np.zeros(dim + 2 - n_free)]))
    _, beta = _profiled_fit(y, x, _cov_matrix(theta_std, hyper))
    return GPModel(beta=beta, hyper=hyper, transform=transform, metric=metric, training=ts)


def gp_predict(model: GPModel, theta) -> GPPrediction:
    """Plug-in kriging prediction at a new input point.

    Returns the conditional mean and variance of the metric given the
    training data, with the fitted coefficients and covariance parameters
    plugged in. Under the log transform the latent Gaussian moments are
    mapped back to the original scale through the lognormal mean/variance.
    Points more than 10% outside the training box (per standardized
    dimension) are flagged as extrapolations.
    """
    ts = model.training
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape != (ts.dim,):
        raise ValueError(f"expected a point of dimension {ts.dim}, got shape {theta.shape}")
    t_std = ts.standardize(theta)
    x = np.concatenate([[1.0], t_std])
    delta = np.abs(model._theta_std - t_std)
    cvec = model.hyper.sigma2 * np.exp(-np.sum(delta / np.array(model.hyper.rho), axis=1))
    exact = np.all(model._theta_std == t_std, axis=1)
    cvec = cvec + model.hyper.tau2 * exact
    latent_mean = float(x @ model.beta + cvec @ model._alpha)
    latent_var = model.hyper.sigma2 + model.hyper.tau2 - float(cvec @ cho_solve(model._chol, cvec))
    latent_var = max(latent_var, 0.0)
    extrapolated = bool(np.any((t_std < -0.1) | (t_std > 1.1)))
    if model.transform == TRANSFORM_LOG:
        mean = math.exp(latent_mean + 0.5 * latent_var)
        var = math.expm1(latent_var) * math.exp(2.0 * latent_mean + latent_var)
        return GPPrediction(mean, var, latent_mean, latent_var, extrapolated)
    return GPPrediction(latent_mean, latent_var, latent_mean, latent_var, extrapolated)


def crps_normal(mu: float, var: float, y: float) -> float:
    """Continuous ranked probability score of a normal forecast."""
    sd = math.sqrt(var)
    if sd == 0.0:
        return abs(y - mu)
    w = (y - mu) / sd
    return sd * (w * (2.0 * norm.cdf(w) - 1.0) + 2.0 * norm.pdf(w) - 1.0 / math.sqrt(math.pi))


def crps_lognormal(mu: float, var: float, y: float) -> float:
    """CRPS of a lognormal forecast with latent moments (mu, var), at y > 0."""
    sd = math.sqrt(var)
    if y <= 0:
        raise ValueError("lognormal CRPS needs a positive observation")
    if sd == 0.0:
        return abs(y - math.exp(mu))
    w = (math.log(y) - mu) / sd
    point_mass = math.exp(mu + 0.5 * var)
    return y * (2.0 * norm.cdf(w) - 1.0) - 2.0 * point_mass * (
        norm.cdf(w - sd) + norm.cdf(sd / math.sqrt(2.0)) - 1.0
    )


@dataclass(frozen=True)
class TransformCV:
    """Leave-one-out scores of one transform candidate (original metric scale)."""

    transform: str
    rmse: float
    mean_crps: float
    coverage: float


@dataclass(frozen=True)
class CVReport:
    metric: str
    candidates: tuple
    selected: str
    skipped: dict
    baseline_rmse: float

    def candidate(self, transform: str) -> TransformCV:
        for cand in self.candidates:
            if cand.transform == transform:
                return cand
        raise KeyError(transform)


def _loo_latent(model: GPModel):
    """Refit-free leave-one-out latent means/variances via the kriging identity."""
    n = model.training.n
    kinv = cho_solve(model._chol, np.eye(n))
    diag = np.diag(kinv).copy()
    x = model.training.covariates(model._theta_std)
    resid = model._y - x @ model.beta
    errors = (kinv @ resid) / diag
    return model._y - errors, 1.0 / diag


def loo_cv(
    ts: TrainingSet,
    metric: str,
    transforms=(TRANSFORM_IDENTITY, TRANSFORM_LOG),
    n_restarts: int = 8,
    seed: int = 0,
) -> CVReport:
    """Leave-one-out cross-validation over transform candidates for one metric.

    Fits each candidate once, scores the held-out points through the standard
    kriging identity (no refits), and reports RMSE, mean CRPS, and empirical
    95% coverage on the original metric scale. The selected transform has the
    coverage closest to 95%, with RMSE breaking ties. A log candidate is
    skipped (with a notice) when the metric is not strictly positive.
    """
    if ts.n < 5:
        raise ValueError(f"leave-one-out CV needs at least 5 design points, got {ts.n}")
    y = _transformed_metric(ts, metric, TRANSFORM_IDENTITY)
    candidates = []
    skipped = {}
    for transform in transforms:
        if transform == TRANSFORM_LOG and np.any(y <= 0):
            skipped[transform] = "metric contains nonpositive values; log transform skipped"
            continue
        model = gp_fit_mle(ts, metric, transform=transform, n_restarts=n_restarts, seed=seed)
        latent_mean, latent_var = _loo_latent(model)
        sd = np.sqrt(np.clip(latent_var, 0.0, None))
        if transform == TRANSFORM_LOG:
            pred = np.exp(latent_mean + 0.5 * latent_var)
            low = np.exp(latent_mean - 1.959963984540054 * sd)
            high = np.exp(latent_mean + 1.959963984540054 * sd)
            crps = [crps_lognormal(m, v, obs) for m, v, obs in zip(latent_mean, latent_var, y)]
        else:
            pred = latent_mean
            low = latent_mean - 1.959963984540054 * sd
            high = latent_mean + 1.959963984540054 * sd
            crps = [crps_normal(m, v, obs) for m, v, obs in zip(latent_mean, latent_var, y)]
        candidates.append(
            TransformCV(
                transform=transform,
                rmse=float(np.sqrt(np.mean((pred - y) ** 2))),
                mean_crps=float(np.mean(crps)),
                coverage=float(np.mean((y >= low) & (y <= high))),
            )
        )
    if not candidates:
        raise ValueError(f"no usable transform candidate for metric {metric!r}: {skipped}")
    ranked = sorted(candidates, key=lambda c: (abs(c.coverage - 0.95), c.rmse, c.transform))
    loo_mean = (np.sum(y) - y) / (ts.n - 1)
    return CVReport(
        metric=metric,
        candidates=tuple(candidates),
        selected=ranked[0].transform,
        skipped=skipped,
        baseline_rmse=float(np.sqrt(np.mean((loo_mean - y) ** 2))),
    )


def save_models(path, models: dict, metrics_table: str | None = None) -> Path:
    """Serialize fitted models (with their training data) to JSON.

    The file is self-contained: reloading reproduces predictions exactly.
    ``metrics_table`` records where the training metrics came from.
    """
    path = Path(path)
    trainings = {id(m.training): m.training for m in models.values()}
    if len(trainings) != 1:
        raise ValueError("all serialized models must share one training set")
    ts = next(iter(trainings.values()))
    payload = {
        "format": MODEL_FORMAT,
        "metrics_table": metrics_table,
        "bounds": [list(b) for b in ts.bounds],
        "theta": ts.theta.tolist(),
        "metrics": {name: values.tolist() for name, values in ts.metrics.items()},
        "models": {
            name: {
                "beta": model.beta.tolist(),
                "rho": list(model.hyper.rho),
                "sigma2": model.hyper.sigma2,
                "tau2": model.hyper.tau2,
                "transform": model.transform,
                "metric": model.metric,
            }
            for name, model in models.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_models(path) -> dict:
    """Reload models saved by :func:`save_models`."""
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a model file (format {payload.get('format')!r})")
    ts = TrainingSet(
        theta=np.array(payload["theta"], dtype=float),
        metrics={name: np.array(vals, dtype=float) for name, vals in payload["metrics"].items()},
        bounds=tuple(tuple(b) for b in payload["bounds"]),
    )
    models = {}
    for name, spec in payload["models"].items():
        models[name] = GPModel(
            beta=np.array(spec["beta"], dtype=float),
            hyper=GPHyperParams(rho=spec["rho"], sigma2=spec["sigma2"], tau2=spec["tau2"]),
            transform=spec["transform"],
            metric=spec["metric"],
            training=ts,
        )
    return models
