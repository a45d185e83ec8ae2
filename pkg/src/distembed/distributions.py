"""Synthetic meta-distribution samplers and parametric fits.

A meta-distribution is a prior over distributions: each draw is a parameter
object (Gaussian, Gaussian mixture, or multinomial) from which finite sample
sets are then generated. The fitting routines go the other way, recovering
parameters from observed sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, FitError, InsufficientDataError, NumericError

__all__ = [
    "GaussianParams",
    "GMMParams",
    "MultinomialParams",
    "MetaDistributionSpec",
    "SampleSet",
    "sample_meta",
    "sample_set",
    "fit_gaussian",
    "fit_gmm",
    "multinomial_gaussian_approx",
]

_SYM_TOL = 1e-8
_EIG_TOL = -1e-10


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name}: entries must be finite")
    return arr


@dataclass(frozen=True)
class GaussianParams:
    """Mean vector and symmetric PSD covariance of a multivariate normal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_float_array(self.mean, "mean")
        cov = _as_float_array(self.cov, "cov")
        if mean.ndim != 1:
            raise ConfigurationError("mean: expected a 1-d vector")
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("cov: shape must be (d, d) matching mean")
        if np.max(np.abs(cov - cov.T)) > _SYM_TOL:
            raise NumericError("cov: not symmetric within 1e-8")
        cov = 0.5 * (cov + cov.T)
        evals = np.linalg.eigvalsh(cov)
        if evals.min() < _EIG_TOL:
            raise NumericError(f"cov: negative eigenvalue {evals.min():.3e} below tolerance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GMMParams:
    """Finite Gaussian mixture: component weights plus per-component params."""

    weights: np.ndarray
    components: tuple[GaussianParams, ...]

    def __post_init__(self):
        w = _as_float_array(self.weights, "weights")
        comps = tuple(self.components)
        if len(comps) < 1:
            raise ConfigurationError("components: need K >= 1")
        if w.shape != (len(comps),):
            raise ConfigurationError("weights: length must equal number of components")
        if np.any(w < -1e-12):
            raise ConfigurationError("weights: must be nonnegative")
        if abs(w.sum() - 1.0) > _SYM_TOL:
            raise ConfigurationError("weights: must sum to 1 within 1e-8")
        object.__setattr__(self, "weights", np.clip(w, 0.0, None))
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass(frozen=True)
class MultinomialParams:
    """Point on the probability simplex, with an optional trials count."""

    probs: np.ndarray
    trials: int = 1

    def __post_init__(self):
        p = _as_float_array(self.probs, "probs")
        if p.ndim != 1:
            raise ConfigurationError("probs: expected a 1-d vector")
        if np.any(p < -1e-12):
            raise ConfigurationError("probs: must be nonnegative")
        if abs(p.sum() - 1.0) > _SYM_TOL:
            raise ConfigurationError("probs: must sum to 1 within 1e-8")
        if self.trials < 1:
            raise ConfigurationError("trials: must be a positive integer")
        object.__setattr__(self, "probs", np.clip(p, 0.0, None))

    @property
    def n_categories(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class MetaDistributionSpec:
    """Description of the prior over distributions.

    family "gaussian": cov ~ Wishart(nu=dim, V=wishart_scale*I), mean uniform
    over mean_range per coordinate. family "gmm": n_components such Gaussians
    with Dirichlet(1,...,1) weights. family "multinomial": probs ~
    Dirichlet(dirichlet_alpha).
    """

    family: str
    dim: int
    wishart_scale: float | None = None
    mean_range: tuple[float, float] | None = None
    dirichlet_alpha: np.ndarray | None = None
    n_components: int | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "gmm", "multinomial"):
            raise ConfigurationError(
                f"family: unknown family {self.family!r} (expected gaussian|gmm|multinomial)"
            )
        if self.dim < 1:
            raise ConfigurationError("dim: must be a positive integer")
        if self.family in ("gaussian", "gmm"):
            if self.wishart_scale is None or self.wishart_scale <= 0:
                raise ConfigurationError("wishart_scale: must be > 0 for gaussian/gmm family")
            if self.mean_range is None:
                raise ConfigurationError("mean_range: required for gaussian/gmm family")
            lo, hi = self.mean_range
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ConfigurationError("mean_range: expected a finite interval (lo, hi)")
            object.__setattr__(self, "mean_range", (float(lo), float(hi)))
        if self.family == "gmm":
            if self.n_components is None or self.n_components < 1:
                raise ConfigurationError("n_components: must be >= 1 for gmm family")
        if self.family == "multinomial":
            if self.dirichlet_alpha is None:
                raise ConfigurationError("dirichlet_alpha: required for multinomial family")
            alpha = _as_float_array(self.dirichlet_alpha, "dirichlet_alpha")
            if alpha.shape != (self.dim,):
                raise ConfigurationError("dirichlet_alpha: length must equal dim")
            if np.any(alpha <= 0):
                raise ConfigurationError("dirichlet_alpha: entries must be strictly positive")
            object.__setattr__(self, "dirichlet_alpha", alpha)


@dataclass(frozen=True)
class SampleSet:
    """An unordered finite collection of vectors: one empirical measure.

    points has shape (m, d); ordering carries no meaning by contract.
    """

    points: np.ndarray
    source_id: object = field(default=None, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ConfigurationError("points: expected a nonempty (m, d) matrix")
        if not np.all(np.isfinite(pts)):
            raise NumericError("points: entries must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _wishart(rng: np.random.Generator, dim: int, scale: float) -> np.ndarray:
    # Wishart(nu=d, V=scale*I) via the outer-product construction: with
    # integer degrees of freedom, sum of nu Gaussian outer products.
    g = rng.standard_normal((dim, dim))
    return scale * (g.T @ g)


def sample_meta(spec: MetaDistributionSpec, n_dists: int, seed: int) -> list:
    """Draw n_dists parameter objects from the meta-distribution.

    Deterministic given (spec, seed).
    """
    if n_dists < 1:
        raise ConfigurationError("n_dists: must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_dists):
        if spec.family == "gaussian":
            out.append(_draw_gaussian(rng, spec))
        elif spec.family == "gmm":
            k = spec.n_components
            weights = rng.dirichlet(np.ones(k))
            comps = tuple(_draw_gaussian(rng, spec) for _ in range(k))
            out.append(GMMParams(weights=weights, components=comps))
        else:
            probs = rng.dirichlet(spec.dirichlet_alpha)
            # Guard against exact zeros from extreme alphas.
            probs = np.clip(probs, 1e-300, None)
            probs = probs / probs.sum()
            out.append(MultinomialParams(probs=probs))
    return out


def _draw_gaussian(rng: np.random.Generator, spec: MetaDistributionSpec) -> GaussianParams:
    lo, hi = spec.mean_range
    mean = rng.uniform(lo, hi, size=spec.dim)
    cov = _wishart(rng, spec.dim, spec.wishart_scale)
    return GaussianParams(mean=mean, cov=cov)


def psd_sqrt(matrix: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition with clamping at 0."""
    sym = 0.5 * (matrix + matrix.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() < -max(tol, tol * max(abs(evals.max()), 1.0)):
        raise NumericError(f"matrix has negative eigenvalue {evals.min():.3e}")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def sample_set(params, m: int, seed: int) -> SampleSet:
    """Draw m i.i.d. points from a parametric distribution.

    Multinomial params emit one-hot vectors (or count vectors for trials > 1)
    of dimension n_categories.
    """
    if m < 1:
        raise ConfigurationError("m: must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _sample_points(params, m, rng)
    return SampleSet(points=pts, source_id=None)


def _sample_points(params, m: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(params, GaussianParams):
        root = psd_sqrt(params.cov)
        z = rng.standard_normal((m, params.dim))
        return params.mean + z @ root.T
    if isinstance(params, GMMParams):
        if params.n_components == 1:
            return _sample_points(params.components[0], m, rng)
        comp_idx = rng.choice(params.n_components, size=m, p=params.weights / params.weights.sum())
        pts = np.empty((m, params.dim))
        for k, comp in enumerate(params.components):
            mask = comp_idx == k
            n_k = int(mask.sum())
            if n_k == 0:
                continue
            root = psd_sqrt(comp.cov)
            pts[mask] = comp.mean + rng.standard_normal((n_k, comp.dim)) @ root.T
        return pts
    if isinstance(params, MultinomialParams):
        if params.trials == 1:
            idx = rng.choice(params.n_categories, size=m, p=params.probs)
            return np.eye(params.n_categories)[idx]
        return rng.multinomial(params.trials, params.probs, size=m).astype(float)
    raise ConfigurationError(f"unsupported params type {type(params).__name__}")


def fit_gaussian(s: SampleSet, ridge: float = 1e-6) -> GaussianParams:
    """Sample mean and biased (1/m) covariance plus ridge*I."""
    if s.size < 2:
        raise InsufficientDataError(f"fit_gaussian needs m >= 2, got {s.size}")
    if ridge < 0:
        raise ConfigurationError("ridge: must be nonnegative")
    x = s.points
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / x.shape[0] + ridge * np.eye(x.shape[1])
    return GaussianParams(mean=mean, cov=cov)


def multinomial_gaussian_approx(p: MultinomialParams) -> GaussianParams:
    """Gaussian moment-match of a multinomial: mean t*p, cov t*(diag(p) - p p^T).

    The covariance is rank-deficient (zero along the all-ones direction);
    downstream matrix square roots clamp eigenvalues at zero.
    """
    probs = p.probs
    t = float(p.trials)
    cov = t * (np.diag(probs) - np.outer(probs, probs))
    return GaussianParams(mean=t * probs, cov=cov)


# ---------------------------------------------------------------------------
# GMM fitting by EM
# ---------------------------------------------------------------------------


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _log_gaussian_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.size
    chol = np.linalg.cholesky(cov)
    diff = x - mean
    y = np.linalg.solve(chol, diff.T)
    maha = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)


def _em_once(x: np.ndarray, k: int, rng: np.random.Generator, ridge: float,
             max_iters: int, tol: float):
    n, d = x.shape
    means = _kmeanspp_centers(x, k, rng)
    # Hard-assignment initialisation from the k-means++ seeds.
    dists = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2)
    assign = dists.argmin(axis=1)
    weights = np.full(k, 1.0 / k)
    covs = np.empty((k, d, d))
    global_cov = np.cov(x, rowvar=False, bias=True).reshape(d, d) + ridge * np.eye(d)
    for j in range(k):
        mask = assign == j
        if mask.sum() >= 2:
            c = np.cov(x[mask], rowvar=False, bias=True).reshape(d, d)
            covs[j] = c + ridge * np.eye(d)
            means[j] = x[mask].mean(axis=0)
            weights[j] = mask.mean()
        else:
            covs[j] = global_cov
    weights = weights / weights.sum()

    ll_trace = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        # E step
        log_resp = np.empty((n, k))
        for j in range(k):
            log_resp[:, j] = np.log(max(weights[j], 1e-300)) + _log_gaussian_pdf(
                x, means[j], covs[j]
            )
        log_norm = logsumexp(log_resp, axis=1)
        ll = float(log_norm.mean())
        if ll < prev_ll - 1e-6 * max(1.0, abs(prev_ll)):
            raise FitError(f"EM log-likelihood decreased: {prev_ll:.6f} -> {ll:.6f}")
        ll_trace.append(ll)
        resp = np.exp(log_resp - log_norm[:, None])

        # M step
        nk = resp.sum(axis=0)
        for j in range(k):
            if nk[j] < 1e-10:
                # Re-seed a starved component from the farthest point.
                far = np.argmax(np.min(
                    np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2), axis=1))
                means[j] = x[far]
                covs[j] = global_cov
                resp[:, j] = 1e-6
                nk[j] = resp[:, j].sum()
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        for j in range(k):
            means[j] = resp[:, j] @ x / nk[j]
            diff = x - means[j]
            covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j] + ridge * np.eye(d)

        if ll - prev_ll < tol * max(1.0, abs(ll)) and np.isfinite(prev_ll):
            prev_ll = ll
            break
        prev_ll = ll

    params = GMMParams(
        weights=weights / weights.sum(),
        components=tuple(GaussianParams(mean=means[j], cov=covs[j]) for j in range(k)),
    )
    return params, prev_ll, ll_trace


def fit_gmm(s: SampleSet, k: int, restarts: int = 3, seed: int = 0,
            max_iters: int = 200, tol: float = 1e-7, return_trace: bool = False):
    """EM fit with k-means++ initialisation and multiple restarts.

    Keeps the restart with the best mean log-likelihood. Covariances are
    ridge-regularised by 1e-6*I. Deterministic given seed.
    """
    if k < 1:
        raise ConfigurationError("k: must be >= 1")
    if restarts < 1:
        raise ConfigurationError("restarts: must be >= 1")
    if s.size < k * (s.dim + 1):
        raise InsufficientDataError(
            f"fit_gmm needs m >= k*(d+1) = {k * (s.dim + 1)}, got {s.size}")
    rng = np.random.default_rng(seed)
    best = None
    last_err = None
    for _ in range(restarts):
        child = np.random.default_rng(rng.integers(2**63))
        try:
            params, ll, trace = _em_once(s.points, k, child, ridge=1e-6,
                                         max_iters=max_iters, tol=tol)
        except (FitError, np.linalg.LinAlgError) as exc:
            last_err = exc
            continue
        if best is None or ll > best[1]:
            best = (params, ll, trace)
    if best is None:
        raise FitError(f"all {restarts} EM restarts failed: {last_err}")
    if return_trace:
        return best[0], best[2]
    return best[0]
