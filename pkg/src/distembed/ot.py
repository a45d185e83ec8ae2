"""Optimal-transport distances, divergences, and geodesics.

Closed-form Gaussian W2 and its displacement geodesic, exact discrete OT
between Gaussian mixtures, entropic (Sinkhorn) divergence, sliced W2, and an
exact assignment oracle for point clouds. The Sinkhorn and sliced routines
accept torch tensors and are differentiable in the point coordinates, which
is how the generators use them as losses.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .distributions import GaussianParams, GMMParams, SampleSet, psd_sqrt
from .errors import NumericError

__all__ = [
    "Coupling",
    "SinkhornConfig",
    "w2_gaussian",
    "bures_geodesic",
    "mw2_gmm",
    "gmm_geodesic",
    "sinkhorn_divergence",
    "sliced_w2",
    "empirical_w2",
]


@dataclass(frozen=True)
class Coupling:
    """Nonnegative transport plan with prescribed marginals."""

    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        a = np.asarray(self.row_marginal, dtype=float)
        b = np.asarray(self.col_marginal, dtype=float)
        if np.max(np.abs(m.sum(axis=1) - a)) > 1e-6:
            raise NumericError("coupling row sums violate the row marginal")
        if np.max(np.abs(m.sum(axis=0) - b)) > 1e-6:
            raise NumericError("coupling column sums violate the column marginal")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "row_marginal", a)
        object.__setattr__(self, "col_marginal", b)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6
    debiased: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise NumericError("epsilon must be > 0")
        if self.max_iters < 1:
            raise NumericError("max_iters must be >= 1")


def w2_gaussian(a: GaussianParams, b: GaussianParams) -> float:
    """Closed-form 2-Wasserstein distance between Gaussians.

    sqrt(||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^{1/2} Sb Sa^{1/2})^{1/2})),
    with matrix square roots taken by symmetric eigendecomposition, eigenvalue
    clamping at 0, and the trace term clamped at 0 before the final sqrt.
    """
    if np.max(np.abs(a.cov - a.cov.T)) > 1e-8 or np.max(np.abs(b.cov - b.cov.T)) > 1e-8:
        raise NumericError("covariances must be symmetric within 1e-8")
    root_a = psd_sqrt(a.cov)
    cross = root_a @ b.cov @ root_a
    cross_evals = np.clip(np.linalg.eigvalsh(0.5 * (cross + cross.T)), 0.0, None)
    trace_term = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(cross_evals))
    delta = a.mean - b.mean
    return float(np.sqrt(max(delta @ delta + trace_term, 0.0)))


def bures_geodesic(a: GaussianParams, b: GaussianParams, t: float) -> GaussianParams:
    """Displacement interpolation between Gaussians at time t in [0, 1].

    mu_t = (1-t) mu_a + t mu_b and S_t = M S_a M with
    M = (1-t) I + t T, T = Sa^{-1/2} (Sa^{1/2} Sb Sa^{1/2})^{1/2} Sa^{-1/2}.
    S_a is ridge-lifted by 1e-9*I when near singular.
    """
    if not 0.0 <= t <= 1.0:
        raise NumericError("t must lie in [0, 1]")
    d = a.dim
    cov_a = a.cov
    evals, evecs = np.linalg.eigh(cov_a)
    if evals.min() < 1e-9:
        cov_a = cov_a + 1e-9 * np.eye(d)
        evals, evecs = np.linalg.eigh(cov_a)
    if evals.min() <= 0:
        raise NumericError("source covariance singular beyond the ridge lift")
    root_a = (evecs * np.sqrt(evals)) @ evecs.T
    inv_root_a = (evecs / np.sqrt(evals)) @ evecs.T
    cross_root = psd_sqrt(root_a @ b.cov @ root_a)
    transport = inv_root_a @ cross_root @ inv_root_a
    mix = (1.0 - t) * np.eye(d) + t * transport
    cov_t = mix @ cov_a @ mix
    cov_t = 0.5 * (cov_t + cov_t.T)
    mean_t = (1.0 - t) * a.mean + t * b.mean
    return GaussianParams(mean=mean_t, cov=cov_t)


def _discrete_ot(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Exact transportation plan via LP (HiGHS). Small problems only."""
    ka, kb = cost.shape
    a_eq = np.zeros((ka + kb - 1, ka * kb))
    for i in range(ka):
        a_eq[i, i * kb:(i + 1) * kb] = 1.0
    for j in range(kb - 1):
        a_eq[ka + j, j::kb] = 1.0
    b_eq = np.concatenate([a, b[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise NumericError(f"discrete OT LP failed: {res.message}")
    plan = np.clip(res.x.reshape(ka, kb), 0.0, None)
    # Clean tiny LP residuals so the Coupling invariants hold exactly enough.
    plan *= (a / np.maximum(plan.sum(axis=1), 1e-300))[:, None]
    return plan


def _normalized_weights(p: GMMParams) -> np.ndarray:
    w = p.weights
    s = w.sum()
    if abs(s - 1.0) > 1e-9:
        warnings.warn("mixture weights renormalized to sum to 1", stacklevel=3)
    return w / s


def mw2_gmm(a: GMMParams, b: GMMParams) -> tuple[float, Coupling]:
    """Mixture-restricted W2: exact discrete OT between components.

    Ground cost C[i, j] = w2_gaussian(a_i, b_j)^2; the returned distance is
    sqrt(<C, plan>) for the optimal plan.
    """
    wa = _normalized_weights(a)
    wb = _normalized_weights(b)
    cost = np.array([[w2_gaussian(ca, cb) ** 2 for cb in b.components] for ca in a.components])
    plan = _discrete_ot(wa, wb, cost)
    value = float(np.sqrt(max(np.sum(cost * plan), 0.0)))
    return value, Coupling(matrix=plan, row_marginal=wa, col_marginal=wb)


def gmm_geodesic(a: GMMParams, b: GMMParams, t: float) -> GMMParams:
    """Geodesic in the mixture-restricted W2 geometry.

    Each coupling atom contributes the Bures geodesic between its paired
    components, weighted by the transported mass.
    """
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    _, coupling = mw2_gmm(a, b)
    weights = []
    comps = []
    for i, ca in enumerate(a.components):
        for j, cb in enumerate(b.components):
            mass = coupling.matrix[i, j]
            if mass > 1e-12:
                weights.append(mass)
                comps.append(bures_geodesic(ca, cb, t))
    w = np.asarray(weights)
    return GMMParams(weights=w / w.sum(), components=tuple(comps))


# ---------------------------------------------------------------------------
# Entropic OT
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.cdist(x, y, p=2) ** 2


def _sinkhorn_potentials(cost: torch.Tensor, log_a: torch.Tensor, log_b: torch.Tensor,
                         eps: float, max_iters: int, tol: float):
    """Log-domain Sinkhorn iterations with an annealing warm start.

    Returns (f, g, converged, marginal_error); the potentials solve the
    KL-regularized problem min <C, P> + eps*KL(P | a x b).
    """
    f = torch.zeros_like(log_a)
    g = torch.zeros_like(log_b)
    a = torch.exp(log_a)

    def _update(eps_cur, f, g):
        f = -eps_cur * torch.logsumexp((g[None, :] - cost) / eps_cur + log_b[None, :], dim=1)
        g = -eps_cur * torch.logsumexp((f[:, None] - cost) / eps_cur + log_a[:, None], dim=0)
        return f, g

    # Annealed warm start: halve epsilon from the cost scale down to target.
    eps_cur = max(float(cost.max()), eps)
    while eps_cur > eps * 1.001:
        for _ in range(5):
            f, g = _update(eps_cur, f, g)
        eps_cur = max(eps, eps_cur / 2.0)

    converged = False
    err = float("inf")
    for it in range(max_iters):
        f, g = _update(eps, f, g)
        if it % 5 == 4 or it == max_iters - 1:
            log_plan = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
            row = torch.exp(torch.logsumexp(log_plan, dim=1))
            err = float((row - a).abs().sum())
            if err < tol:
                converged = True
                break
    return f, g, converged, err


def _entropic_cost(x: torch.Tensor, y: torch.Tensor, wx: torch.Tensor, wy: torch.Tensor,
                   cfg: SinkhornConfig):
    """Differentiable entropic OT cost via the envelope theorem.

    Potentials are solved without gradient tracking; the value is then
    re-expressed as <P*, C(x, y)> plus the (constant) entropy term so that
    gradients flow only through the cost matrix evaluated at the fixed
    optimal plan.
    """
    log_a = torch.log(wx)
    log_b = torch.log(wy)
    with torch.no_grad():
        cost_d = _pairwise_sq_dists(x, y)
        f, g, converged, err = _sinkhorn_potentials(
            cost_d, log_a, log_b, cfg.epsilon, cfg.max_iters, cfg.tol)
        log_plan = (f[:, None] + g[None, :] - cost_d) / cfg.epsilon \
            + log_a[:, None] + log_b[None, :]
        plan = torch.exp(log_plan)
        kl = torch.sum(plan * (log_plan - log_a[:, None] - log_b[None, :])) \
            - plan.sum() + 1.0
    cost = _pairwise_sq_dists(x, y)
    value = torch.sum(plan * cost) + cfg.epsilon * kl
    return value, converged, err


def _as_tensor_set(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, SampleSet):
        x = x.points
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def sinkhorn_divergence(x, y, cfg: SinkhornConfig = SinkhornConfig(), return_info: bool = False,
                        warn: bool = True):
    """Entropic OT divergence with squared-Euclidean cost.

    With cfg.debiased, returns OT_eps(x, y) - (OT_eps(x, x) + OT_eps(y, y))/2,
    which is nonnegative and zero iff the two empirical measures coincide.
    Accepts SampleSets, arrays, or torch tensors; tensor inputs keep gradients
    with respect to the point coordinates.
    """
    xt = _as_tensor_set(x)
    yt = _as_tensor_set(y)
    if xt.shape[1] != yt.shape[1]:
        raise NumericError("sinkhorn_divergence: dimension mismatch")
    tensor_in = isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor)
    wx = torch.full((xt.shape[0],), 1.0 / xt.shape[0], dtype=xt.dtype, device=xt.device)
    wy = torch.full((yt.shape[0],), 1.0 / yt.shape[0], dtype=yt.dtype, device=yt.device)

    value_xy, conv_xy, err = _entropic_cost(xt, yt, wx, wy, cfg)
    converged = conv_xy
    if cfg.debiased:
        value_xx, conv_xx, _ = _entropic_cost(xt, xt, wx, wx, cfg)
        value_yy, conv_yy, _ = _entropic_cost(yt, yt, wy, wy, cfg)
        converged = conv_xy and conv_xx and conv_yy
        value = value_xy - 0.5 * (value_xx + value_yy)
    else:
        value = value_xy

    if not converged and warn:
        warnings.warn(
            f"sinkhorn did not reach tol={cfg.tol} in {cfg.max_iters} iterations "
            f"(marginal error {err:.2e}); returning best value", stacklevel=2)
    if tensor_in:
        out = value
    else:
        out = float(value)
    if return_info:
        return out, {"converged": converged, "marginal_error": err}
    return out


def _batched_potentials(cost: torch.Tensor, eps: float, iters: int):
    """Uniform-marginal Sinkhorn potentials for a batch of cost matrices."""
    bsz, n, m = cost.shape
    log_a = -np.log(n)
    log_b = -np.log(m)
    f = torch.zeros(bsz, n, dtype=cost.dtype, device=cost.device)
    g = torch.zeros(bsz, m, dtype=cost.dtype, device=cost.device)
    eps_cur = max(float(cost.max()), eps)
    schedule = []
    while eps_cur > eps * 1.001:
        schedule.extend([eps_cur] * 3)
        eps_cur = max(eps, eps_cur / 2.0)
    schedule.extend([eps] * iters)
    for e in schedule:
        f = -e * torch.logsumexp((g[:, None, :] - cost) / e + log_b, dim=2)
        g = -e * torch.logsumexp((f[:, :, None] - cost) / e + log_a, dim=1)
    return f, g, log_a, log_b


def sinkhorn_loss_batch(x: torch.Tensor, y: torch.Tensor, eps: float = 0.05,
                        iters: int = 50, debiased: bool = True) -> torch.Tensor:
    """Mean debiased entropic OT cost over a batch of set pairs (loss use).

    x has shape (B, n, d), y has shape (B, m, d); uniform weights. Gradients
    flow through the cost matrices at the converged plans (envelope theorem).
    """

    def ot_term(u, v):
        with torch.no_grad():
            cost_d = torch.cdist(u, v, p=2) ** 2
            f, g, log_a, log_b = _batched_potentials(cost_d, eps, iters)
            log_plan = (f[:, :, None] + g[:, None, :] - cost_d) / eps + log_a + log_b
            plan = torch.exp(log_plan)
            kl = (plan * (log_plan - log_a - log_b)).sum(dim=(1, 2)) - plan.sum(dim=(1, 2)) + 1.0
        cost = torch.cdist(u, v, p=2) ** 2
        return (plan * cost).sum(dim=(1, 2)) + eps * kl

    value = ot_term(x, y)
    if debiased:
        value = value - 0.5 * (ot_term(x, x) + ot_term(y, y))
    return value.mean()


# ---------------------------------------------------------------------------
# Sliced W2 and the assignment oracle
# ---------------------------------------------------------------------------


def _sliced_sq_torch(x: torch.Tensor, y: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Mean over directions of d * squared 1-d W2 between projections.

    The dimension factor d makes the value match the true squared W2 for pure
    translations (E[(theta . c)^2] = ||c||^2 / d for uniform directions).
    """
    px = torch.sort(x @ dirs.T, dim=0).values
    py = torch.sort(y @ dirs.T, dim=0).values
    return x.shape[1] * torch.mean((px - py) ** 2)


def _uniform_directions(n_proj: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def sliced_w2(x, y, n_proj: int = 128, seed: int = 0):
    """Sliced 2-Wasserstein distance over random projection directions.

    Projections of both sets are sorted and compared in 1-d; mismatched set
    sizes are quantile-matched. Deterministic given seed. Torch tensor inputs
    (equal sizes) return a tensor differentiable in the point coordinates.
    """
    if isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor):
        xt = _as_tensor_set(x)
        yt = _as_tensor_set(y)
        if xt.shape != yt.shape:
            raise NumericError("sliced_w2: tensor path needs equal-size sets")
        dirs = torch.as_tensor(_uniform_directions(n_proj, xt.shape[1], seed), dtype=xt.dtype)
        return torch.sqrt(_sliced_sq_torch(xt, yt, dirs))
    xp = x.points if isinstance(x, SampleSet) else np.asarray(x, dtype=float)
    yp = y.points if isinstance(y, SampleSet) else np.asarray(y, dtype=float)
    if xp.shape[1] != yp.shape[1]:
        raise NumericError("sliced_w2: dimension mismatch")
    d = xp.shape[1]
    dirs = _uniform_directions(n_proj, d, seed)
    proj_x = xp @ dirs.T
    proj_y = yp @ dirs.T
    if xp.shape[0] == yp.shape[0]:
        qx = np.sort(proj_x, axis=0)
        qy = np.sort(proj_y, axis=0)
    else:
        n = max(xp.shape[0], yp.shape[0])
        grid = (np.arange(n) + 0.5) / n
        qx = np.quantile(proj_x, grid, axis=0)
        qy = np.quantile(proj_y, grid, axis=0)
    return float(np.sqrt(d * np.mean((qx - qy) ** 2)))


def empirical_w2(x, y) -> float:
    """Exact empirical W2 between equal-size point clouds (assignment oracle).

    Solves the squared-cost assignment problem and returns the square root of
    the mean matched cost. Cubic in the set size; intended as ground truth
    for the approximate losses.
    """
    xp = x.points if isinstance(x, SampleSet) else np.asarray(x, dtype=float)
    yp = y.points if isinstance(y, SampleSet) else np.asarray(y, dtype=float)
    if xp.shape[0] != yp.shape[0]:
        raise NumericError("empirical_w2: set sizes must match")
    if xp.shape[1] != yp.shape[1]:
        raise NumericError("empirical_w2: dimension mismatch")
    cost = cdist(xp, yp, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
