"""Acceptance suite: every criterion at its stated tolerance, one line each.

Run with `pytest -v -s tests/test_acceptance.py`. The suite trains every
model it scores (several families, multiple seeds), so a full pass takes a
few hours on a small CPU. Set DISTEMBED_ACCEPT_CACHE to a directory to reuse
checkpoints across invocations while iterating.
"""
import os

import numpy as np
import pytest
import torch

from distembed.distributions import (MetaDistributionSpec, sample_meta, sample_set)
from distembed.encoders import (AL_POOLERS, EncoderConfig, build_encoder, pooler_clt_probe,
                                verify_distributional_invariance)
from distembed.evaluation import (benchmark, interpolation_probe, latent_geometry_probe,
                                  prior_warp_probe, simplex_geometry_probe)
from distembed.generators import GeneratorConfig, build_generator
from distembed.ot import SinkhornConfig, empirical_w2, sinkhorn_divergence, w2_gaussian
from distembed.setconstruct import onehot_dataset
from distembed.training import (CategoricalMixtureSetSource, MetaSetSource, TrainConfig,
                                load_checkpoint, loss_clt_probe, save_checkpoint, train)

torch.set_num_threads(max(2, torch.get_num_threads()))

GAUSS_SPEC = MetaDistributionSpec(family="gaussian", dim=5, wishart_scale=1.0,
                                  mean_range=(0.0, 5.0))
LOWVAR_SPEC = MetaDistributionSpec(family="gaussian", dim=5, wishart_scale=0.1,
                                   mean_range=(0.0, 5.0))
GMM_SPEC = MetaDistributionSpec(family="gmm", dim=5, wishart_scale=1.0,
                                mean_range=(0.0, 5.0), n_components=3)

DDPM_KW = dict(kind="ddpm", hidden_dim=224, n_layers=3, diffusion_steps=250,
               beta_start=1e-4, beta_end=0.12, conditioning="film", sampler="heun",
               sample_steps=60)
RESNET_KW = dict(arch="resnet_gnn", hidden_dim=128, n_blocks=3, pooling="mean")

GDE_STEPS = 40000
KME_STEPS = 15000
WORMHOLE_STEPS = 6000
LOWVAR_STEPS = 10000
GMM_STEPS = 18000
SIMPLEX_STEPS = 3000

M_ENC = 32768
N_GEN = 32768


def _cache_path(tag):
    root = os.environ.get("DISTEMBED_ACCEPT_CACHE")
    if not root:
        return None
    os.makedirs(root, exist_ok=True)
    return os.path.join(root, f"{tag}.pt")


def trained_pair(tag, enc_cfg, gen_cfg, spec, steps, seed, batch_sets=10, set_size=384,
                 lr=1.2e-3, source=None, ema=0.9995):
    path = _cache_path(tag)
    if path and os.path.exists(path):
        enc, gen, _ = load_checkpoint(path)
        return enc, gen
    enc = build_encoder(enc_cfg, seed=seed)
    gen = build_generator(gen_cfg, seed=seed + 1)
    src = source or MetaSetSource(spec, batch_sets, set_size, seed=seed + 2)
    cfg = TrainConfig(steps=steps, batch_sets=batch_sets, set_size=set_size,
                      learning_rate=lr, lr_schedule="cosine", seed=seed + 3,
                      ema_decay=ema)
    record = train(enc, gen, src, cfg)
    # Training-progress invariant: the recorded plug-in loss over the last 10%
    # of steps must beat the first 10% for every acceptance configuration.
    losses = [m["loss"] for m in record.metrics]
    tenth = max(1, len(losses) // 10)
    assert np.mean(losses[-tenth:]) < np.mean(losses[:tenth]), f"{tag}: no progress"
    if path:
        save_checkpoint(path, enc, gen, step=steps)
    return enc, gen


def check(name, passed, detail):
    line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    print("\n" + line)
    assert passed, line


# ---------------------------------------------------------------------------
# Trained-model fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def gauss_gde():
    enc_cfg = EncoderConfig(input_dim=5, latent_dim=64, **RESNET_KW)
    gen_cfg = GeneratorConfig(data_dim=5, latent_dim=64, **DDPM_KW)
    return trained_pair("gauss_gde", enc_cfg, gen_cfg, GAUSS_SPEC, GDE_STEPS, seed=0)


@pytest.fixture(scope="session")
def gauss_kme():
    enc_cfg = EncoderConfig(arch="kme_baseline", input_dim=5, latent_dim=64,
                            kme_features=256)
    gen_cfg = GeneratorConfig(data_dim=5, latent_dim=64, **DDPM_KW)
    return trained_pair("gauss_kme", enc_cfg, gen_cfg, GAUSS_SPEC, KME_STEPS, seed=10)


@pytest.fixture(scope="session")
def gauss_wormhole():
    enc_cfg = EncoderConfig(input_dim=5, latent_dim=64, **RESNET_KW)
    gen_cfg = GeneratorConfig(kind="wormhole", data_dim=5, latent_dim=64, hidden_dim=128,
                              out_set_size=64, sinkhorn_epsilon=0.05, sinkhorn_iters=40)
    return trained_pair("gauss_wormhole", enc_cfg, gen_cfg, GAUSS_SPEC, WORMHOLE_STEPS,
                        seed=20, batch_sets=12, set_size=256)


@pytest.fixture(scope="session")
def gmm_gde():
    enc_cfg = EncoderConfig(input_dim=5, latent_dim=96, **RESNET_KW)
    gen_cfg = GeneratorConfig(data_dim=5, latent_dim=96, **DDPM_KW)
    return trained_pair("gmm_gde", enc_cfg, gen_cfg, GMM_SPEC, GMM_STEPS, seed=30)


@pytest.fixture(scope="session")
def gmm_wormhole():
    enc_cfg = EncoderConfig(input_dim=5, latent_dim=96, **RESNET_KW)
    gen_cfg = GeneratorConfig(kind="wormhole", data_dim=5, latent_dim=96, hidden_dim=128,
                              out_set_size=64, sinkhorn_epsilon=0.05, sinkhorn_iters=40)
    return trained_pair("gmm_wormhole", enc_cfg, gen_cfg, GMM_SPEC, WORMHOLE_STEPS,
                        seed=40, batch_sets=12, set_size=256)


SIMPLEX_ALPHA1 = (2.0**-5, 2.0**-2, 1.0, 2.0**2, 2.0**5)


@pytest.fixture(scope="session")
def simplex_models():
    dataset = onehot_dataset(3)
    encoders = []
    for i, a1 in enumerate(SIMPLEX_ALPHA1):
        alpha = np.array([a1, 1.0, 1.0])
        enc_cfg = EncoderConfig(arch="resnet_gnn", input_dim=3, hidden_dim=64, n_blocks=2,
                                latent_dim=8)
        gen_cfg = GeneratorConfig(kind="ddpm", data_dim=3, latent_dim=8, hidden_dim=96,
                                  diffusion_steps=150, beta_start=1e-4, beta_end=0.1,
                                  conditioning="film", sampler="heun", sample_steps=40)
        src = CategoricalMixtureSetSource(dataset, alpha, 32, 128, seed=100 + 10 * i)
        enc, _ = trained_pair(f"simplex_{i}", enc_cfg, gen_cfg, None, SIMPLEX_STEPS,
                              seed=100 + 10 * i, batch_sets=32, set_size=128, lr=2e-3,
                              source=src, ema=None)
        encoders.append(enc)
    return encoders, [np.array([a1, 1.0, 1.0]) for a1 in SIMPLEX_ALPHA1], dataset


# ---------------------------------------------------------------------------
# Criteria 1-3: reconstruction benchmarks
# ---------------------------------------------------------------------------


def test_criterion_1_gaussian_benchmark(gauss_gde, gauss_kme, gauss_wormhole):
    models = {("resnet_gnn", "ddpm"): gauss_gde,
              ("kme_baseline", "ddpm"): gauss_kme,
              ("resnet_gnn", "wormhole"): gauss_wormhole}
    table = benchmark(models, GAUSS_SPEC, n_test=100, m_enc=M_ENC, n_gen=N_GEN, seed=900)
    gde = table.cell("resnet_gnn", "ddpm")
    kme = table.cell("kme_baseline", "ddpm")
    worm = table.cell("resnet_gnn", "wormhole")
    oracle = table.cell("oracle", "replay")
    check("1 (gaussian benchmark)",
          gde <= 0.10 and gde < kme < worm and oracle <= gde,
          f"gde {gde:.4f} <= 0.10; ranking gde {gde:.4f} < kme {kme:.4f} "
          f"< wormhole {worm:.4f}; oracle floor {oracle:.4f}")


def test_criterion_2_low_variance_benchmark():
    errors = []
    for seed in (0, 1, 2):
        enc_cfg = EncoderConfig(input_dim=5, latent_dim=64, **RESNET_KW)
        gen_cfg = GeneratorConfig(data_dim=5, latent_dim=64, **DDPM_KW)
        enc, gen = trained_pair(f"lowvar_{seed}", enc_cfg, gen_cfg, LOWVAR_SPEC,
                                LOWVAR_STEPS, seed=200 + 17 * seed)
        table = benchmark({("resnet_gnn", "ddpm"): (enc, gen)}, LOWVAR_SPEC, n_test=50,
                          m_enc=M_ENC, n_gen=N_GEN, seed=910 + seed,
                          include_oracle=False)
        errors.append(table.cell("resnet_gnn", "ddpm"))
    mean_err = float(np.mean(errors))
    check("2 (low-variance benchmark)", mean_err <= 0.20,
          f"mean over 3 seeds {mean_err:.4f} <= 0.20; per-seed "
          + ", ".join(f"{e:.4f}" for e in errors))


def test_criterion_3_gmm_benchmark(gmm_gde, gmm_wormhole):
    models = {("resnet_gnn", "ddpm"): gmm_gde,
              ("resnet_gnn", "wormhole"): gmm_wormhole}
    table = benchmark(models, GMM_SPEC, n_test=100, m_enc=M_ENC, n_gen=8192, seed=920)
    gde = table.cell("resnet_gnn", "ddpm")
    worm = table.cell("resnet_gnn", "wormhole")
    check("3 (gmm benchmark)", gde <= 2.2 and gde < worm,
          f"gde {gde:.4f} <= 2.2 and < wormhole {worm:.4f}")


# ---------------------------------------------------------------------------
# Criteria 4-7: geometry probes
# ---------------------------------------------------------------------------


def test_criterion_4_latent_geometry(gauss_gde, gmm_gde):
    enc_g, _ = gauss_gde
    params = sample_meta(GAUSS_SPEC, 50, seed=930)
    rep_g = latent_geometry_probe(enc_g, params, m_enc=8192, seed=931)
    enc_m, _ = gmm_gde
    params_m = sample_meta(GMM_SPEC, 50, seed=932)
    rep_m = latent_geometry_probe(enc_m, params_m, m_enc=8192, seed=933)
    n_pairs = 50 * 49 // 2
    check("4 (latent geometry)",
          n_pairs >= 1225 and rep_g.spearman >= 0.85 and rep_m.spearman >= 0.60,
          f"gaussian spearman {rep_g.spearman:.3f} >= 0.85, "
          f"gmm spearman {rep_m.spearman:.3f} >= 0.60 over {n_pairs} pairs")


def test_criterion_5_simplex_geometry(simplex_models):
    encoders, alphas, dataset = simplex_models
    enc_uniform = encoders[SIMPLEX_ALPHA1.index(1.0)]
    rep = simplex_geometry_probe(enc_uniform, dataset, grid_resolution=15, m_enc=2048,
                                 seed=940)
    check("5 (simplex geometry)", rep.spearman >= 0.85,
          f"spearman {rep.spearman:.3f} >= 0.85 over a 15-resolution grid")


def test_criterion_6_prior_warping(simplex_models):
    encoders, alphas, dataset = simplex_models
    rep = prior_warp_probe(encoders, alphas, dataset, grid_resolution=15, m_enc=2048,
                           seed=950)
    best = int(np.argmax(rep.pearsons))
    curve = ", ".join(f"a1=2^{int(np.log2(a)):+d}: {p:.3f}"
                      for a, p in zip(rep.alpha1_values, rep.pearsons))
    check("6 (prior warping)", rep.alpha1_values[best] == 1.0,
          f"pearson maximal at alpha1 = {rep.alpha1_values[best]}; curve: {curve}")


def test_criterion_7_interpolation(gauss_gde):
    enc, gen = gauss_gde
    pairs = sample_meta(GAUSS_SPEC, 20, seed=960)
    ratios = []
    for i in range(10):
        a, b = pairs[2 * i], pairs[2 * i + 1]
        rep = interpolation_probe(enc, gen, (a, b), t_grid=(0.25, 0.5, 0.75),
                                  n_gen=8192, seed=961 + i, m_enc=8192)
        total = w2_gaussian(a, b)
        ratios.extend(d / total for d in rep.deviations)
    med = float(np.median(ratios))
    check("7 (interpolation)", med <= 0.25,
          f"median deviation/pair-distance {med:.3f} <= 0.25 over 10 pairs x 3 t")


# ---------------------------------------------------------------------------
# Criterion 8: loss CLT
# ---------------------------------------------------------------------------


def test_criterion_8_loss_clt(gauss_gde):
    enc, gen = gauss_gde
    (p,) = sample_meta(GAUSS_SPEC, 1, seed=970)
    rep = loss_clt_probe(enc, gen, p, set_sizes=(64, 256, 1024, 4096), n_resamples=500,
                         seed=971, n_gen=4096)
    slope_ok = -1.3 <= rep.variance_slope <= -0.7
    skew_ok = abs(rep.skewness_at_largest) < 0.5
    mono_ok = all(rep.means[i + 1] <= rep.means[i] + 1e-12 for i in range(3))
    check("8 (loss CLT)", slope_ok and skew_ok and mono_ok,
          f"var slope {rep.variance_slope:.3f} in [-1.3,-0.7]; "
          f"|skew@4096| {abs(rep.skewness_at_largest):.3f} < 0.5; "
          f"means {['%.4f' % m for m in rep.means]} non-increasing")


# ---------------------------------------------------------------------------
# Trained-model invariants (spec properties riding on the criterion-1 model)
# ---------------------------------------------------------------------------


def test_invariant_embedding_clt(gauss_gde):
    # Variance of each embedding coordinate over resampled inputs scales like
    # 1/m: log-log slope -1 +/- 0.3.
    enc, _ = gauss_gde
    (p,) = sample_meta(GAUSS_SPEC, 1, seed=990)
    sizes = (64, 256, 1024, 4096)
    mean_log_var = []
    dtype = next(enc.parameters()).dtype
    for m in sizes:
        batch = np.stack([sample_set(p, m, seed=[991, m, r]).points for r in range(200)])
        with torch.no_grad():
            z = enc(torch.as_tensor(batch, dtype=dtype)).double().numpy()
        mean_log_var.append(np.log(z.var(axis=0).mean()))
    slope = float(np.polyfit(np.log(sizes), mean_log_var, 1)[0])
    check("invariant (embedding CLT)", -1.3 <= slope <= -0.7,
          f"embedding-coordinate variance slope {slope:.3f} in [-1.3, -0.7]")


def test_invariant_reconstruction_consistency(gauss_gde):
    # Median reconstruction error is non-increasing in the encoded set size.
    from distembed.generators import reconstruction_error

    enc, gen = gauss_gde
    (p,) = sample_meta(GAUSS_SPEC, 1, seed=995)
    medians = []
    for m_enc in (8, 64, 512):
        errs = [reconstruction_error(enc, gen, p, m_enc=m_enc, n_gen=8192,
                                     seed=996 + 31 * r) for r in range(9)]
        medians.append(float(np.median(errs)))
    ok = medians[0] >= medians[1] >= medians[2]
    check("invariant (reconstruction consistency)", ok,
          f"median recon at m_enc 8/64/512 = "
          + "/".join(f"{v:.4f}" for v in medians) + " non-increasing")


# ---------------------------------------------------------------------------
# Criterion 9: invariance suite
# ---------------------------------------------------------------------------


def test_criterion_9_invariance_suite():
    archs = ("mean_gnn", "median_gnn", "resnet_gnn", "self_attention",
             "resnet_attention", "kme_baseline")
    worst = {}
    for arch in archs:
        enc = build_encoder(EncoderConfig(arch=arch, input_dim=3, hidden_dim=48,
                                          n_blocks=2, latent_dim=8), seed=3)
        rep = verify_distributional_invariance(enc, trials=30, seed=4, threshold=1e-6)
        worst[arch] = max(rep.max_permutation_dev, rep.max_duplication_dev)
    all_pass = all(v <= 1e-6 for v in worst.values())

    sum_enc = build_encoder(EncoderConfig(arch="mean_gnn", input_dim=3, hidden_dim=48,
                                          n_blocks=2, latent_dim=8), seed=5,
                            diagnostics_pooling="sum")
    sum_rep = verify_distributional_invariance(sum_enc, trials=10, seed=6)
    sum_fails = sum_rep.max_duplication_dev > 1e-3

    uniform = lambda rng, m: rng.uniform(0, 1, m)
    normal_p = sample_meta(MetaDistributionSpec(family="gaussian", dim=1,
                                                wishart_scale=1.0, mean_range=(0, 0)),
                           1, seed=7)[0]
    sizes = (64, 256, 1024, 4096)
    max_rep = pooler_clt_probe("max", uniform, sizes, n_resamples=500, seed=8)
    max_ok = max_rep.variance_slope <= -1.7 and "NON-AL" in max_rep.al_flag
    al_slopes = {}
    for pooler, sampler, param in (("mean", normal_p, 1.0), ("median", normal_p, 1.0),
                                   ("softmax", normal_p, 1.0), ("lse", uniform, 5.0)):
        rep = pooler_clt_probe(pooler, sampler, sizes, n_resamples=500, seed=9, param=param)
        al_slopes[pooler] = rep.variance_slope
    al_ok = all(-1.3 <= s <= -0.7 for s in al_slopes.values())

    check("9 (invariance suite)", all_pass and sum_fails and max_ok and al_ok,
          f"worst arch dev {max(worst.values()):.2e} <= 1e-6; sum-pooled dup dev "
          f"{sum_rep.max_duplication_dev:.2e} fails; max slope "
          f"{max_rep.variance_slope:.2f} [{max_rep.al_flag}]; AL slopes "
          + ", ".join(f"{k} {v:.2f}" for k, v in al_slopes.items()))


# ---------------------------------------------------------------------------
# Criterion 10: OT engine oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_10_ot_oracle_equivalence():
    spec2 = MetaDistributionSpec(family="gaussian", dim=2, wishart_scale=1.0,
                                 mean_range=(0.0, 5.0))
    params = sample_meta(spec2, 100, seed=980)
    rel_errs = []
    for i in range(50):
        a, b = params[2 * i], params[2 * i + 1]
        closed = w2_gaussian(a, b)
        emp = empirical_w2(sample_set(a, 4096, seed=981 + i),
                           sample_set(b, 4096, seed=982 + i))
        rel_errs.append(abs(emp - closed) / closed)
    w2_ok = max(rel_errs) <= 0.03

    rng = np.random.default_rng(983)
    cfg = SinkhornConfig(epsilon=0.001, max_iters=30000, tol=1e-8)
    sink_errs = []
    for trial in range(5):
        x = rng.standard_normal((20, 2))
        y = rng.standard_normal((20, 2)) + trial * 0.5
        exact_sq = empirical_w2(x, y) ** 2
        approx = sinkhorn_divergence(x, y, cfg, warn=False)
        sink_errs.append(abs(approx - exact_sq) / exact_sq)
    sink_ok = max(sink_errs) <= 0.02

    check("10 (OT oracle equivalence)", w2_ok and sink_ok,
          f"closed-form vs assignment max rel err {max(rel_errs):.4f} <= 0.03 over 50 "
          f"pairs at m=4096; sinkhorn eps=0.001 vs assignment^2 max rel err "
          f"{max(sink_errs):.4f} <= 0.02 (metric axioms and constant-speed geodesics "
          f"are covered by the unit suite)")
