"""Geometry and benchmark probes over trained encoder-generator pairs.

The probes compare learned latent geometry against ground-truth optimal
transport: pairwise distance correlations, simplex distance fields for
categorical mixtures, prior-warping curves, latent interpolation against
Bures geodesics, and the reconstruction-error benchmark table.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import stats as sps

from .distributions import (GaussianParams, GMMParams, MultinomialParams, fit_gaussian,
                            fit_gmm, multinomial_gaussian_approx, sample_meta, sample_set)
from .errors import ConfigurationError
from .generators import OracleReplay, reconstruction_error
from .ot import bures_geodesic, gmm_geodesic, mw2_gmm, w2_gaussian
from .setconstruct import LabeledDataset, categorical_mixture_sets

__all__ = [
    "GeometryReport",
    "SimplexReport",
    "PriorWarpReport",
    "InterpolationReport",
    "BenchmarkTable",
    "true_distance",
    "geometry_correlations",
    "latent_geometry_probe",
    "simplex_grid",
    "simplex_geometry_probe",
    "prior_warp_probe",
    "interpolation_probe",
    "benchmark",
]


def true_distance(a, b) -> float:
    """Family-appropriate ground-truth metric between parameter objects."""
    if isinstance(a, GaussianParams):
        return w2_gaussian(a, b)
    if isinstance(a, GMMParams):
        return mw2_gmm(a, b)[0]
    if isinstance(a, MultinomialParams):
        return w2_gaussian(multinomial_gaussian_approx(a), multinomial_gaussian_approx(b))
    raise ConfigurationError(f"no ground-truth metric for {type(a).__name__}")


def _encode_batch(encoder, sets_points: np.ndarray, chunk: int = 64) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    out = []
    with torch.no_grad():
        for lo in range(0, sets_points.shape[0], chunk):
            batch = torch.as_tensor(sets_points[lo:lo + chunk], dtype=dtype)
            out.append(encoder(batch).double().numpy())
    return np.concatenate(out, axis=0)


def geometry_correlations(pairwise_latent: np.ndarray, pairwise_true: np.ndarray):
    """Spearman and Pearson over the condensed upper triangle of two distance matrices."""
    iu = np.triu_indices(pairwise_latent.shape[0], k=1)
    lat = pairwise_latent[iu]
    tru = pairwise_true[iu]
    if np.allclose(tru, 0.0):
        return None, None
    spearman = float(sps.spearmanr(lat, tru).statistic)
    pearson = float(sps.pearsonr(lat, tru).statistic)
    return spearman, pearson


@dataclass
class GeometryReport:
    pairwise_latent: np.ndarray
    pairwise_true: np.ndarray
    spearman: float | None
    pearson: float | None
    degenerate: bool = False

    def to_dict(self):
        return {"pairwise_latent": self.pairwise_latent.tolist(),
                "pairwise_true": self.pairwise_true.tolist(),
                "spearman": self.spearman, "pearson": self.pearson,
                "degenerate": self.degenerate}


def latent_geometry_probe(encoder, test_params: list, m_enc: int = 4096,
                          seed: int = 0) -> GeometryReport:
    """Pairwise latent L2 against pairwise true OT distance over test distributions."""
    if len(test_params) < 10:
        raise ConfigurationError("need at least 10 test distributions")
    n = len(test_params)
    dim = encoder.cfg.input_dim
    sets = np.empty((n, m_enc, dim))
    for i, p in enumerate(test_params):
        sets[i] = sample_set(p, m_enc, seed=[seed, i]).points
    z = _encode_batch(encoder, sets)
    lat = np.sqrt(np.maximum(
        np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1), 0.0))
    tru = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            tru[i, j] = tru[j, i] = true_distance(test_params[i], test_params[j])
    spearman, pearson = geometry_correlations(lat, tru)
    return GeometryReport(pairwise_latent=lat, pairwise_true=tru,
                          spearman=spearman, pearson=pearson,
                          degenerate=spearman is None)


def simplex_grid(resolution: int) -> np.ndarray:
    """All probability vectors (i, j, k)/resolution on the 3-class simplex."""
    pts = []
    for i in range(resolution + 1):
        for j in range(resolution + 1 - i):
            pts.append((i, j, resolution - i - j))
    return np.asarray(pts, dtype=float) / resolution


@dataclass
class SimplexReport:
    grid: np.ndarray
    latent_field: np.ndarray
    w2_field: np.ndarray
    spearman: float | None
    center: np.ndarray

    def to_dict(self):
        return {"grid": self.grid.tolist(), "latent_field": self.latent_field.tolist(),
                "w2_field": self.w2_field.tolist(), "spearman": self.spearman,
                "center": self.center.tolist()}


def _simplex_fields(encoder, dataset: LabeledDataset, grid: np.ndarray, m_enc: int, seed: int):
    center = np.full(3, 1.0 / 3.0)
    probs = np.vstack([grid, center])
    sets, _ = categorical_mixture_sets(dataset, np.ones(3), n_sets=probs.shape[0],
                                       m=m_enc, seed=seed, probs=probs)
    pts = np.stack([s.points for s in sets])
    z = _encode_batch(encoder, pts)
    z_center = z[-1]
    latent_field = np.linalg.norm(z[:-1] - z_center, axis=1)
    center_g = multinomial_gaussian_approx(MultinomialParams(probs=center))
    w2_field = np.array([
        w2_gaussian(multinomial_gaussian_approx(MultinomialParams(probs=p)), center_g)
        for p in grid])
    return latent_field, w2_field, z


def _normalize_field(f: np.ndarray) -> np.ndarray:
    top = f.max()
    return f / top if top > 0 else f


def simplex_geometry_probe(encoder, dataset: LabeledDataset, grid_resolution: int = 15,
                           m_enc: int = 1024, seed: int = 0, alpha=None) -> SimplexReport:
    """Distance-from-center fields over a triangular grid of class proportions.

    Both fields (latent L2 and Gaussian-approximation W2) are normalized by
    their grid maximum; the report carries their Spearman correlation.
    """
    grid = simplex_grid(grid_resolution)
    latent_field, w2_field, _ = _simplex_fields(encoder, dataset, grid, m_enc, seed)
    latent_field = _normalize_field(latent_field)
    w2_field = _normalize_field(w2_field)
    if np.allclose(w2_field, 0.0):
        spearman = None
    else:
        spearman = float(sps.spearmanr(latent_field, w2_field).statistic)
    return SimplexReport(grid=grid, latent_field=latent_field, w2_field=w2_field,
                         spearman=spearman, center=np.full(3, 1.0 / 3.0))


@dataclass
class PriorWarpReport:
    alpha1_values: list
    pearsons: list
    stretch_stats: list
    grid_resolution: int

    def to_dict(self):
        return asdict(self)


def prior_warp_probe(encoders: list, alphas: list, dataset: LabeledDataset,
                     grid_resolution: int = 15, m_enc: int = 1024, seed: int = 0,
                     high_p1: float = 0.6) -> PriorWarpReport:
    """Correlation-vs-prior-skew curve over models trained under different priors.

    For each trained model the probe computes the Pearson correlation between
    the latent and approximate-W2 distance fields on a shared simplex grid,
    plus a stretch statistic: the mean normalized latent distance among grid
    pairs concentrated in the high-p1 corner.
    """
    if len(encoders) != len(alphas):
        raise ConfigurationError("need one trained model per alpha")
    grid = simplex_grid(grid_resolution)
    high_idx = np.flatnonzero(grid[:, 0] >= high_p1)
    alpha1s, pearsons, stretches = [], [], []
    for enc, alpha in zip(encoders, alphas):
        latent_field, w2_field, z = _simplex_fields(enc, dataset, grid, m_enc, seed)
        lat_n = _normalize_field(latent_field)
        w2_n = _normalize_field(w2_field)
        pearson = float(sps.pearsonr(lat_n, w2_n).statistic)
        z_grid = z[:-1]
        pd = np.sqrt(np.maximum(np.sum(
            (z_grid[:, None, :] - z_grid[None, :, :]) ** 2, axis=-1), 0.0))
        top = pd.max()
        if len(high_idx) >= 2 and top > 0:
            sub = pd[np.ix_(high_idx, high_idx)]
            iu = np.triu_indices(len(high_idx), k=1)
            stretch = float(sub[iu].mean() / top)
        else:
            stretch = float("nan")
        alpha1s.append(float(np.asarray(alpha, dtype=float)[0]))
        pearsons.append(pearson)
        stretches.append(stretch)
    return PriorWarpReport(alpha1_values=alpha1s, pearsons=pearsons,
                           stretch_stats=stretches, grid_resolution=grid_resolution)


@dataclass
class InterpolationReport:
    t_grid: list
    decoded_params: list
    geodesic_params: list
    deviations: list
    endpoint_recon: tuple

    def to_dict(self):
        return {"t_grid": self.t_grid, "deviations": self.deviations,
                "endpoint_recon": list(self.endpoint_recon)}


def interpolation_probe(encoder, generator, pair, t_grid=(0.0, 0.25, 0.5, 0.75, 1.0),
                        n_gen: int = 8192, seed: int = 0, m_enc: int = 4096,
                        gmm_restarts: int = 3) -> InterpolationReport:
    """Decode linear latent interpolants and compare against the OT geodesic.

    z_t = (1 - t) z_a + t z_b is decoded, the family parameters are refit from
    the decoded points, and the deviation at t is the family OT distance to
    the true displacement interpolation between the endpoint parameters.
    """
    from .encoders import encode
    from .generators import sample

    a, b = pair
    gaussian = isinstance(a, GaussianParams)
    z_a = encode(encoder, sample_set(a, m_enc, seed=[seed, 0])).vector
    z_b = encode(encoder, sample_set(b, m_enc, seed=[seed, 1])).vector
    decoded, geodesics, deviations = [], [], []
    for i, t in enumerate(t_grid):
        z_t = (1.0 - t) * z_a + t * z_b
        out = sample(generator, z_t, n_gen, seed=seed + 10 + i)
        if gaussian:
            fitted = fit_gaussian(out)
            geo = bures_geodesic(a, b, t)
            dev = w2_gaussian(fitted, geo)
        else:
            fitted = fit_gmm(out, k=a.n_components, restarts=gmm_restarts, seed=seed + 50 + i)
            geo = gmm_geodesic(a, b, t)
            dev = mw2_gmm(fitted, geo)[0]
        decoded.append(fitted)
        geodesics.append(geo)
        deviations.append(float(dev))
    # At t = 0 or 1 the geodesic is the endpoint itself, so the deviation IS the
    # endpoint reconstruction error for that decoded draw; reuse it when present.
    t_list = list(t_grid)
    if 0.0 in t_list:
        recon_a = deviations[t_list.index(0.0)]
    else:
        recon_a = reconstruction_error(encoder, generator, a, m_enc, n_gen, seed=seed + 100)
    if 1.0 in t_list:
        recon_b = deviations[t_list.index(1.0)]
    else:
        recon_b = reconstruction_error(encoder, generator, b, m_enc, n_gen, seed=seed + 200)
    return InterpolationReport(t_grid=list(t_grid), decoded_params=decoded,
                               geodesic_params=geodesics, deviations=deviations,
                               endpoint_recon=(recon_a, recon_b))


@dataclass
class BenchmarkTable:
    rows: list = field(default_factory=list)  # dicts: encoder, generator, mean, sem, n_test

    def ranked(self):
        return sorted(self.rows, key=lambda r: r["mean_error"])

    def cell(self, encoder_name: str, generator_name: str) -> float:
        for r in self.rows:
            if r["encoder"] == encoder_name and r["generator"] == generator_name:
                return r["mean_error"]
        raise KeyError((encoder_name, generator_name))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["encoder", "generator", "mean_error", "sem", "n_test"])
            writer.writeheader()
            for row in self.ranked():
                writer.writerow(row)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"rows": self.ranked()}, fh, indent=2)


def benchmark(models: dict, spec, n_test: int = 100, m_enc: int = 16384, n_gen: int = 16384,
              seed: int = 0, include_oracle: bool = True, gmm_restarts: int = 3) -> BenchmarkTable:
    """Mean reconstruction error per (encoder, generator) cell on held-out draws.

    models maps (encoder_name, generator_name) to a trained (encoder,
    generator) pair. Held-out distributions are fresh draws from the same
    meta-distribution spec. An oracle-replay floor row is appended by default.
    """
    held_out = sample_meta(spec, n_test, seed=seed)
    table = BenchmarkTable()
    for (enc_name, gen_name), (enc, gen) in models.items():
        errs = np.array([
            reconstruction_error(enc, gen, p, m_enc, n_gen, seed=seed + 1000 + i,
                                 gmm_restarts=gmm_restarts)
            for i, p in enumerate(held_out)])
        table.rows.append({"encoder": enc_name, "generator": gen_name,
                           "mean_error": float(errs.mean()),
                           "sem": float(errs.std(ddof=1) / np.sqrt(n_test)),
                           "n_test": n_test})
    if include_oracle:
        oracle = OracleReplay()
        errs = np.array([
            reconstruction_error(None, oracle, p, m_enc, n_gen, seed=seed + 1000 + i,
                                 gmm_restarts=gmm_restarts)
            for i, p in enumerate(held_out)])
        table.rows.append({"encoder": "oracle", "generator": "replay",
                           "mean_error": float(errs.mean()),
                           "sem": float(errs.std(ddof=1) / np.sqrt(n_test)),
                           "n_test": n_test})
    return table
