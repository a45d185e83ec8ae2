"""Turning labeled datasets into sets that look like draws from a prior.

Each construction picks points from a dataset D = {(x_k, y_k)} with weights
derived from the label structure (exact label match, kernel neighborhood,
noise-model inversion, or an explicit prior over labels), so the empirical
distributions of the resulting sets approximate draws from a chosen
meta-distribution. Sampling is with replacement everywhere.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .distributions import MultinomialParams, SampleSet
from .errors import ConfigurationError, NumericError

__all__ = [
    "LabeledDataset",
    "SetSpec",
    "group_discrete",
    "kernel_sample",
    "noise_inversion_sample",
    "prior_weighted_sample",
    "categorical_mixture_sets",
    "GaussianNoiseModel",
    "onehot_dataset",
    "load_labeled_dataset",
    "save_labeled_dataset",
]


@dataclass(frozen=True)
class LabeledDataset:
    """Points with aligned labels; labels may be discrete symbols or vectors."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        labels = np.asarray(self.labels)
        if pts.shape[0] < 1:
            raise ConfigurationError("points: dataset must be nonempty")
        if labels.shape[0] != pts.shape[0]:
            raise ConfigurationError("labels: must align with points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def discrete_labels(self) -> bool:
        return not np.issubdtype(self.labels.dtype, np.floating)


@dataclass(frozen=True)
class SetSpec:
    """Config-side description of a set construction."""

    mode: str
    set_size: int
    kernel_sigma: float | None = None
    noise_sigma: float | None = None
    label_prior: object = None

    def __post_init__(self):
        modes = ("discrete", "kernel", "noise_inversion", "prior_weighted", "categorical_mixture")
        if self.mode not in modes:
            raise ConfigurationError(f"mode: unknown mode {self.mode!r}")
        if self.set_size < 1:
            raise ConfigurationError("set_size: must be >= 1")
        if self.mode == "kernel" and (self.kernel_sigma is None or self.kernel_sigma <= 0):
            raise ConfigurationError("kernel_sigma: must be > 0 for kernel mode")
        if self.mode == "noise_inversion" and (self.noise_sigma is None or self.noise_sigma <= 0):
            raise ConfigurationError("noise_sigma: must be > 0 for noise_inversion mode")
        if self.mode in ("prior_weighted", "categorical_mixture") and self.label_prior is None:
            raise ConfigurationError(f"label_prior: required for {self.mode} mode")


def group_discrete(d: LabeledDataset) -> list[SampleSet]:
    """One SampleSet per distinct label; their union is the dataset."""
    sets = []
    for label in np.unique(d.labels):
        mask = d.labels == label
        sets.append(SampleSet(points=d.points[mask], source_id=label))
    return sets


def _label_sq_dists(labels: np.ndarray, y_star) -> np.ndarray:
    y = np.asarray(y_star, dtype=float)
    lab = labels.astype(float)
    if lab.ndim == 1:
        lab = lab[:, None]
        y = np.atleast_1d(y)
    return np.sum((lab - y) ** 2, axis=1)


def _weighted_draw(d: LabeledDataset, weights: np.ndarray, m: int,
                   rng: np.random.Generator, source_id=None) -> SampleSet:
    w = weights / weights.sum()
    idx = rng.choice(d.size, size=m, replace=True, p=w)
    return SampleSet(points=d.points[idx], source_id=source_id)


def kernel_sample(d: LabeledDataset, y_star, sigma: float, m: int, seed: int) -> SampleSet:
    """Sample m points with probability proportional to a Gaussian kernel in label space.

    w_k = exp(-dist(y_k, y_star)^2 / (2 sigma^2)); falls back to the nearest
    label if every weight underflows.
    """
    if sigma <= 0:
        raise ConfigurationError("sigma: must be > 0")
    rng = np.random.default_rng(seed)
    sq = _label_sq_dists(d.labels, y_star)
    weights = np.exp(-sq / (2.0 * sigma**2))
    if weights.sum() <= 0 or not np.isfinite(weights.sum()):
        warnings.warn("kernel weights underflowed; falling back to the nearest label")
        weights = (sq == sq.min()).astype(float)
    return _weighted_draw(d, weights, m, rng, source_id=np.asarray(y_star))


class GaussianNoiseModel:
    """Additive Gaussian label noise y = y* + eps with a uniform prior on y*.

    The prior draws targets uniformly from [low, high]; a degenerate interval
    is a point mass.
    """

    def __init__(self, sigma: float, prior_low, prior_high):
        if sigma <= 0:
            raise ConfigurationError("sigma: must be > 0")
        self.sigma = float(sigma)
        self.prior_low = np.atleast_1d(np.asarray(prior_low, dtype=float))
        self.prior_high = np.atleast_1d(np.asarray(prior_high, dtype=float))

    def sample_target(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.prior_low, self.prior_high)

    def log_density(self, labels: np.ndarray, y_star) -> np.ndarray:
        return -_label_sq_dists(labels, y_star) / (2.0 * self.sigma**2)


def noise_inversion_sample(d: LabeledDataset, noise_model, m: int, seed: int):
    """Draw a latent target from the noise model's prior, then sample by likelihood.

    Returns (SampleSet, y_star). Weights are w_k = p(y_k | y_star).
    """
    rng = np.random.default_rng(seed)
    y_star = noise_model.sample_target(rng)
    logw = noise_model.log_density(d.labels, y_star)
    logw = logw - logw.max()
    weights = np.exp(logw)
    total = weights.sum()
    if total <= 0 or not np.isfinite(total):
        raise NumericError(f"zero total likelihood for target {y_star}")
    return _weighted_draw(d, weights, m, rng, source_id=y_star), y_star


def prior_weighted_sample(d: LabeledDataset, label_dist, m: int, seed: int) -> SampleSet:
    """Importance-weight points by target label density over empirical frequency.

    For discrete labels, label_dist is a mapping or callable giving the target
    pmf; weights are pmf(y_k) / freq(y_k). For continuous labels, label_dist
    is a density callable and the weights are self-normalized (the empirical
    reference cancels against the uniform atom mass).
    """
    rng = np.random.default_rng(seed)
    if d.discrete_labels:
        uniq, inverse, counts = np.unique(d.labels, return_inverse=True, return_counts=True)
        if callable(label_dist):
            target = np.array([float(label_dist(u)) for u in uniq])
        else:
            target = np.array([float(label_dist.get(u, 0.0)) for u in uniq])
        if target.sum() <= 0:
            raise ConfigurationError("label_dist: support disjoint from observed labels")
        target = target / target.sum()
        freq = counts / d.size
        weights = (target / freq)[inverse]
    else:
        dens = np.asarray([float(label_dist(y)) for y in d.labels])
        if dens.sum() <= 0:
            raise ConfigurationError("label_dist: support disjoint from observed labels")
        weights = dens
    return _weighted_draw(d, weights, m, rng)


def categorical_mixture_sets(d: LabeledDataset, alpha, n_sets: int, m: int, seed: int,
                             probs: list | None = None):
    """Compose sets by drawing class proportions from a Dirichlet prior.

    For each set: p ~ Dirichlet(alpha) (or the provided probs), m class labels
    ~ Categorical(p), one point per drawn label sampled uniformly from that
    class pool with replacement. Returns (sets, list of MultinomialParams)
    where the params carry the true p of each set.
    """
    if not d.discrete_labels:
        raise ConfigurationError("labels: categorical_mixture_sets needs discrete labels")
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ConfigurationError("alpha: entries must be strictly positive")
    classes = np.unique(d.labels)
    if alpha.size != classes.size:
        raise ConfigurationError(
            f"alpha: length {alpha.size} must match the {classes.size} observed classes")
    pools = [np.flatnonzero(d.labels == c) for c in classes]
    rng = np.random.default_rng(seed)
    sets, params = [], []
    for i in range(n_sets):
        if probs is not None:
            p = np.asarray(probs[i], dtype=float)
        else:
            p = rng.dirichlet(alpha)
            p = np.clip(p, 1e-300, None)
            p = p / p.sum()
        drawn = rng.choice(classes.size, size=m, p=p)
        idx = np.empty(m, dtype=int)
        for c in range(classes.size):
            mask = drawn == c
            n_c = int(mask.sum())
            if n_c:
                idx[mask] = rng.choice(pools[c], size=n_c, replace=True)
        sets.append(SampleSet(points=d.points[idx], source_id=i))
        params.append(MultinomialParams(probs=p))
    return sets, params


def onehot_dataset(n_classes: int) -> LabeledDataset:
    """The degenerate dataset whose class pools are the one-hot corners."""
    return LabeledDataset(points=np.eye(n_classes), labels=np.arange(n_classes))


def load_labeled_dataset(path) -> LabeledDataset:
    """Read the columnar text format: header 'dim N', then one point+label per row."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ConfigurationError(f"{path}: header must be 'dim N'")
        dim, n = int(header[0]), int(header[1])
        pts = np.empty((n, dim))
        labels = []
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ConfigurationError(f"{path}: row {i} has {len(parts)} fields, expected {dim + 1}")
            pts[i] = [float(v) for v in parts[:dim]]
            labels.append(parts[dim])
    lab = np.asarray(labels)
    try:
        as_int = lab.astype(int)
        if np.all(as_int.astype(str) == lab):
            lab = as_int
    except ValueError:
        try:
            lab = lab.astype(float)
        except ValueError:
            pass
    return LabeledDataset(points=pts, labels=lab)


def save_labeled_dataset(path, d: LabeledDataset) -> None:
    with open(path, "w") as fh:
        fh.write(f"{d.points.shape[1]} {d.size}\n")
        for pt, label in zip(d.points, d.labels):
            coords = " ".join(f"{v:.17g}" for v in pt)
            fh.write(f"{coords} {label}\n")
