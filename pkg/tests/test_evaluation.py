import numpy as np
import pytest

from distembed.distributions import (GaussianParams, MetaDistributionSpec, sample_meta)
from distembed.encoders import EncoderConfig, build_encoder
from distembed.errors import ConfigurationError
from distembed.evaluation import (BenchmarkTable, benchmark, geometry_correlations,
                                  interpolation_probe, latent_geometry_probe,
                                  prior_warp_probe, simplex_geometry_probe, simplex_grid,
                                  true_distance)
from distembed.generators import GeneratorConfig, build_generator
from distembed.ot import w2_gaussian
from distembed.setconstruct import onehot_dataset
from distembed.training import MetaSetSource, TrainConfig, train

SPEC = MetaDistributionSpec(family="gaussian", dim=2, wishart_scale=0.5, mean_range=(0, 3))


def quick_model(seed=0, steps=250):
    enc = build_encoder(EncoderConfig(arch="resnet_gnn", input_dim=2, hidden_dim=32,
                                      n_blocks=2, latent_dim=12), seed=seed)
    gen = build_generator(GeneratorConfig(kind="ddpm", data_dim=2, latent_dim=12,
                                          hidden_dim=48, diffusion_steps=60,
                                          beta_end=0.1), seed=seed + 1)
    train(enc, gen, MetaSetSource(SPEC, 16, 64, seed=seed + 2),
          TrainConfig(steps=steps, batch_sets=16, set_size=64, learning_rate=2e-3,
                      lr_schedule="cosine", seed=seed + 3))
    return enc, gen


@pytest.fixture(scope="module")
def model():
    return quick_model()


class TestTrueDistance:
    def test_dispatch(self):
        a, b = sample_meta(SPEC, 2, seed=0)
        assert true_distance(a, b) == pytest.approx(w2_gaussian(a, b))

    def test_unsupported(self):
        with pytest.raises(ConfigurationError):
            true_distance(1.0, 2.0)


class TestLatentGeometry:
    def test_requires_ten_distributions(self, model):
        enc, _ = model
        with pytest.raises(ConfigurationError):
            latent_geometry_probe(enc, sample_meta(SPEC, 5, seed=1))

    def test_degenerate_flag(self, model):
        enc, _ = model
        (p,) = sample_meta(SPEC, 1, seed=2)
        report = latent_geometry_probe(enc, [p] * 12, m_enc=128, seed=3)
        assert report.degenerate and report.spearman is None

    def test_matrices_symmetric_zero_diagonal(self, model):
        enc, _ = model
        params = sample_meta(SPEC, 12, seed=4)
        report = latent_geometry_probe(enc, params, m_enc=256, seed=5)
        for mat in (report.pairwise_latent, report.pairwise_true):
            assert np.allclose(mat, mat.T)
            assert np.allclose(np.diag(mat), 0.0)

    def test_trained_model_correlates(self, model):
        enc, _ = model
        params = sample_meta(SPEC, 20, seed=6)
        report = latent_geometry_probe(enc, params, m_enc=1024, seed=7)
        assert report.spearman is not None and report.spearman > 0.5

    def test_monotone_rescaling_invariance(self, model):
        enc, _ = model
        params = sample_meta(SPEC, 12, seed=8)
        report = latent_geometry_probe(enc, params, m_enc=256, seed=9)
        s0, _ = geometry_correlations(report.pairwise_latent, report.pairwise_true)
        s1, _ = geometry_correlations(3.7 * report.pairwise_latent, report.pairwise_true)
        assert s0 == pytest.approx(s1, abs=1e-12)


class TestSimplexProbe:
    def test_grid_size(self):
        assert simplex_grid(15).shape == ((16 * 17) // 2, 3)
        assert np.allclose(simplex_grid(15).sum(axis=1), 1.0)

    def test_center_distance_zero_and_fields_normalized(self):
        enc = build_encoder(EncoderConfig(arch="mean_gnn", input_dim=3, hidden_dim=16,
                                          n_blocks=1, latent_dim=4), seed=10)
        report = simplex_geometry_probe(enc, onehot_dataset(3), grid_resolution=6,
                                        m_enc=256, seed=11)
        center_idx = np.argmin(np.abs(report.grid - 1 / 3).sum(axis=1))
        assert report.w2_field[center_idx] == pytest.approx(0.0, abs=1e-12)
        assert report.latent_field.max() == pytest.approx(1.0)
        assert report.w2_field.max() == pytest.approx(1.0)

    def test_vertices_are_field_maxima(self):
        enc = build_encoder(EncoderConfig(arch="mean_gnn", input_dim=3, hidden_dim=16,
                                          n_blocks=1, latent_dim=4), seed=12)
        report = simplex_geometry_probe(enc, onehot_dataset(3), grid_resolution=6,
                                        m_enc=128, seed=13)
        vertex_mask = np.isclose(report.grid, 1.0).any(axis=1)
        top3 = np.argsort(report.w2_field)[-3:]
        assert set(top3) == set(np.flatnonzero(vertex_mask))


class TestPriorWarp:
    def test_requires_matching_lengths(self):
        enc = build_encoder(EncoderConfig(arch="mean_gnn", input_dim=3, hidden_dim=16,
                                          n_blocks=1, latent_dim=4), seed=14)
        with pytest.raises(ConfigurationError):
            prior_warp_probe([enc], [np.ones(3), np.ones(3)], onehot_dataset(3))

    def test_curve_defined_everywhere(self):
        encoders = [build_encoder(EncoderConfig(arch="mean_gnn", input_dim=3, hidden_dim=16,
                                                n_blocks=1, latent_dim=4), seed=s)
                    for s in (15, 16)]
        alphas = [np.array([0.5, 1.0, 1.0]), np.array([2.0, 1.0, 1.0])]
        report = prior_warp_probe(encoders, alphas, onehot_dataset(3), grid_resolution=5,
                                  m_enc=128, seed=17)
        assert report.alpha1_values == [0.5, 2.0]
        assert all(np.isfinite(p) for p in report.pearsons)
        assert all(np.isfinite(s) for s in report.stretch_stats)


class TestInterpolation:
    def test_endpoint_deviation_equals_recon(self, model):
        enc, gen = model
        a, b = sample_meta(SPEC, 2, seed=18)
        report = interpolation_probe(enc, gen, (a, b), t_grid=(0.0, 0.5, 1.0),
                                     n_gen=1024, seed=19, m_enc=1024)
        assert report.deviations[0] <= report.endpoint_recon[0] + 1e-6
        assert report.deviations[-1] <= report.endpoint_recon[1] + 1e-6
        assert all(d >= 0 for d in report.deviations)

    def test_identical_endpoints_constant(self, model):
        enc, gen = model
        (a,) = sample_meta(SPEC, 1, seed=20)
        report = interpolation_probe(enc, gen, (a, a), t_grid=(0.0, 0.5, 1.0),
                                     n_gen=1024, seed=21, m_enc=1024)
        spread = max(report.deviations) - min(report.deviations)
        assert spread < 0.25  # fluctuates only by resampling noise


class TestBenchmark:
    def test_table_with_oracle_floor(self, model, tmp_path):
        enc, gen = model
        table = benchmark({("resnet_gnn", "ddpm"): (enc, gen)}, SPEC, n_test=6,
                          m_enc=1024, n_gen=1024, seed=22)
        assert len(table.rows) == 2
        oracle = table.cell("oracle", "replay")
        learned = table.cell("resnet_gnn", "ddpm")
        assert oracle <= learned
        table.to_csv(tmp_path / "bench.csv")
        table.to_json(tmp_path / "bench.json")
        lines = (tmp_path / "bench.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 rows

    def test_ranked_order(self):
        table = BenchmarkTable(rows=[
            {"encoder": "a", "generator": "x", "mean_error": 2.0, "sem": 0.1, "n_test": 4},
            {"encoder": "b", "generator": "y", "mean_error": 1.0, "sem": 0.1, "n_test": 4},
        ])
        assert [r["encoder"] for r in table.ranked()] == ["b", "a"]
