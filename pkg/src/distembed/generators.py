"""Conditional generators: latent code in, distribution over points out.

Every generator exposes a differentiable loss against a target set (gradients
reach both its own parameters and the conditioning code, hence the encoder)
and a seeded sampler. A shared affine normalizer, fitted from the first
training batch, maps data to roughly unit scale for the neural parts and is
inverted on the way out.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .distributions import (GaussianParams, GMMParams, SampleSet, fit_gaussian, fit_gmm,
                            sample_set)
from .encoders import Embedding, encode
from .errors import ConfigurationError, TrainingError
from .ot import mw2_gmm, sinkhorn_loss_batch, w2_gaussian

__all__ = [
    "GeneratorConfig",
    "LossValue",
    "build_generator",
    "loss",
    "sample",
    "reconstruction_error",
    "OracleReplay",
]

KINDS = ("cvae", "ddpm", "direct_sinkhorn", "direct_sliced", "wormhole")


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "ddpm"
    data_dim: int = 2
    latent_dim: int = 16
    hidden_dim: int = 128
    n_layers: int = 2
    latent_noise_dim: int = 16
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1
    sampler: str = "ancestral"
    sample_steps: int | None = None
    out_set_size: int = 64
    conditioning: str = "concat"
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 50
    n_projections: int = 128

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind: unknown generator kind {self.kind!r}")
        if self.conditioning not in ("concat", "film"):
            raise ConfigurationError("conditioning: must be 'concat' or 'film'")
        if self.kind == "ddpm":
            if self.diffusion_steps < 1:
                raise ConfigurationError("diffusion_steps: must be >= 1")
            if not 0 < self.beta_start <= self.beta_end < 1:
                raise ConfigurationError("beta schedule: need 0 < beta_start <= beta_end < 1")
            if self.sampler not in ("ancestral", "ddim", "heun"):
                raise ConfigurationError("sampler: must be ancestral, ddim, or heun")
        if self.kind in ("cvae", "direct_sinkhorn", "direct_sliced"):
            if self.latent_noise_dim < 1:
                raise ConfigurationError("latent_noise_dim: must be >= 1")
        if self.kind == "wormhole" and self.out_set_size < 1:
            raise ConfigurationError("out_set_size: must be >= 1 for wormhole")


@dataclass
class LossValue:
    scalar: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.scalar):
            raise TrainingError(f"non-finite loss {self.scalar}")


class _CondNet(nn.Module):
    """MLP conditioned on a context vector by concatenation or FiLM."""

    def __init__(self, in_dim, ctx_dim, out_dim, hidden_dim, mode, n_hidden=2):
        super().__init__()
        self.mode = mode
        first = in_dim + ctx_dim if mode == "concat" else in_dim
        dims = [first] + [hidden_dim] * n_hidden
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(hidden_dim, out_dim)
        if mode == "film":
            self.film = nn.Linear(ctx_dim, 2 * hidden_dim * n_hidden)
            self.n_hidden = n_hidden
            self.hidden_dim = hidden_dim

    def forward(self, x, ctx):
        if self.mode == "concat":
            h = torch.cat([x, ctx], dim=-1)
            for layer in self.layers:
                h = torch.selu(layer(h))
        else:
            mods = self.film(ctx).chunk(2 * self.n_hidden, dim=-1)
            h = x
            for i, layer in enumerate(self.layers):
                h = torch.selu(layer(h) * (1.0 + mods[2 * i]) + mods[2 * i + 1])
        return self.out(h)


class GeneratorBase(nn.Module):
    """Shared normalizer plumbing and the public loss/sample surface."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("norm_mean", torch.zeros(cfg.data_dim))
        self.register_buffer("norm_std", torch.ones(cfg.data_dim))
        self.register_buffer("norm_fitted", torch.zeros(1))

    @property
    def kind(self):
        return self.cfg.kind

    def fit_normalizer(self, points: torch.Tensor):
        flat = points.reshape(-1, self.cfg.data_dim)
        self.norm_mean.copy_(flat.mean(dim=0))
        self.norm_std.copy_(flat.std(dim=0).clamp_min(1e-6))
        self.norm_fitted.fill_(1.0)

    def _norm(self, x):
        return (x - self.norm_mean) / self.norm_std

    def _denorm(self, x):
        return x * self.norm_std + self.norm_mean

    def loss_batch(self, z, targets, torch_gen=None):
        raise NotImplementedError

    def sample_batch(self, z, n, torch_gen):
        raise NotImplementedError


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class DDPMGenerator(GeneratorBase):
    """Denoising diffusion with epsilon prediction and an MLP score net."""

    TIME_EMB = 64

    def __init__(self, cfg: GeneratorConfig):
        super().__init__(cfg)
        t_steps = cfg.diffusion_steps
        betas = torch.linspace(cfg.beta_start, cfg.beta_end, t_steps)
        alphas = 1.0 - betas
        abar = torch.cumprod(alphas, dim=0)
        self.register_buffer("betas", betas)
        self.register_buffer("alphas", alphas)
        self.register_buffer("abar", abar)
        self.net = _CondNet(cfg.data_dim + self.TIME_EMB, cfg.latent_dim, cfg.data_dim,
                            cfg.hidden_dim, cfg.conditioning, n_hidden=cfg.n_layers)

    def _eps_hat(self, x_t, t_idx, z):
        t_emb = _timestep_embedding(t_idx.to(x_t.dtype) / self.cfg.diffusion_steps * 1000.0,
                                    self.TIME_EMB)
        return self.net(torch.cat([x_t, t_emb], dim=-1), z)

    def loss_batch(self, z, targets, torch_gen=None):
        bsz, m, d = targets.shape
        x0 = self._norm(targets)
        t_idx = torch.randint(0, self.cfg.diffusion_steps, (bsz, m), generator=torch_gen)
        eps = torch.randn(bsz, m, d, dtype=x0.dtype, generator=torch_gen)
        ab = self.abar[t_idx][..., None]
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        z_b = z[:, None, :].expand(bsz, m, z.shape[-1])
        eps_hat = self._eps_hat(x_t, t_idx, z_b)
        mse = torch.mean((eps_hat - eps) ** 2)
        return mse, {"eps_mse": float(mse.detach())}

    def forward_diffuse(self, x0, t, eps):
        """Jump to noise level t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        ab = self.abar[t]
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps

    def reverse_step_deterministic(self, x_t, t_hi, t_lo, eps_hat):
        """Noise-free reverse update (DDIM form): inverts forward_diffuse exactly
        when eps_hat equals the true total noise."""
        ab_hi = self.abar[t_hi]
        ab_lo = self.abar[t_lo] if t_lo >= 0 else torch.ones_like(ab_hi)
        x0_hat = (x_t - torch.sqrt(1.0 - ab_hi) * eps_hat) / torch.sqrt(ab_hi)
        return torch.sqrt(ab_lo) * x0_hat + torch.sqrt(1.0 - ab_lo) * eps_hat

    @torch.no_grad()
    def sample_batch(self, z, n, torch_gen):
        bsz = z.shape[0]
        d = self.cfg.data_dim
        dtype = z.dtype
        x = torch.randn(bsz, n, d, dtype=dtype, generator=torch_gen)
        z_b = z[:, None, :].expand(bsz, n, z.shape[-1])
        t_total = self.cfg.diffusion_steps
        if self.cfg.sampler == "ancestral":
            for t in reversed(range(t_total)):
                t_idx = torch.full((bsz, n), t, dtype=torch.long)
                eps_hat = self._eps_hat(x, t_idx, z_b)
                beta = self.betas[t]
                alpha = self.alphas[t]
                ab = self.abar[t]
                mean = (x - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)
                if t > 0:
                    ab_prev = self.abar[t - 1]
                    sigma = torch.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
                    mean = mean + sigma * torch.randn(bsz, n, d, dtype=dtype, generator=torch_gen)
                x = mean
            return self._denorm(x)
        # Strided deterministic schedules; heun adds a second-order correction
        # that removes most of the coarse-grid variance bias.
        steps = self.cfg.sample_steps or t_total
        t_grid = torch.linspace(t_total - 1, 0, steps).round().long().unique(sorted=True)
        t_grid = t_grid.flip(0)
        for i, t in enumerate(t_grid):
            t_hi = int(t)
            t_lo = int(t_grid[i + 1]) if i + 1 < len(t_grid) else -1
            t_idx = torch.full((bsz, n), t_hi, dtype=torch.long)
            eps1 = self._eps_hat(x, t_idx, z_b)
            x_pred = self.reverse_step_deterministic(x, t_hi, t_lo, eps1)
            if self.cfg.sampler == "heun" and t_lo >= 0:
                t_idx_lo = torch.full((bsz, n), t_lo, dtype=torch.long)
                eps2 = self._eps_hat(x_pred, t_idx_lo, z_b)
                x = self.reverse_step_deterministic(x, t_hi, t_lo, 0.5 * (eps1 + eps2))
            else:
                x = x_pred
        return self._denorm(x)


class CVAEGenerator(GeneratorBase):
    """Per-point conditional VAE with Gaussian recognition and decoder."""

    LOGVAR_CLAMP = 7.0

    def __init__(self, cfg: GeneratorConfig):
        super().__init__(cfg)
        u = cfg.latent_noise_dim
        self.recog = _CondNet(cfg.data_dim, cfg.latent_dim, 2 * u, cfg.hidden_dim,
                              cfg.conditioning, n_hidden=cfg.n_layers)
        self.decoder = _CondNet(u, cfg.latent_dim, 2 * cfg.data_dim, cfg.hidden_dim,
                                cfg.conditioning, n_hidden=cfg.n_layers)

    def _decode_params(self, u, z):
        out = self.decoder(u, z)
        mu, logvar = out.chunk(2, dim=-1)
        return mu, logvar.clamp(-self.LOGVAR_CLAMP, self.LOGVAR_CLAMP)

    def loss_batch(self, z, targets, torch_gen=None):
        bsz, m, d = targets.shape
        x = self._norm(targets)
        z_b = z[:, None, :].expand(bsz, m, z.shape[-1])
        mu_u, logvar_u = self.recog(x, z_b).chunk(2, dim=-1)
        logvar_u = logvar_u.clamp(-self.LOGVAR_CLAMP, self.LOGVAR_CLAMP)
        noise = torch.randn(mu_u.shape, dtype=x.dtype, generator=torch_gen)
        u = mu_u + torch.exp(0.5 * logvar_u) * noise
        mu_x, logvar_x = self._decode_params(u, z_b)
        recon = 0.5 * torch.sum(
            (x - mu_x) ** 2 / torch.exp(logvar_x) + logvar_x + math.log(2.0 * math.pi), dim=-1)
        kl = -0.5 * torch.sum(1.0 + logvar_u - mu_u**2 - torch.exp(logvar_u), dim=-1)
        total = torch.mean(recon + kl)
        return total, {"recon": float(recon.mean().detach()), "kl": float(kl.mean().detach())}

    @torch.no_grad()
    def sample_batch(self, z, n, torch_gen):
        bsz = z.shape[0]
        u = torch.randn(bsz, n, self.cfg.latent_noise_dim, dtype=z.dtype, generator=torch_gen)
        z_b = z[:, None, :].expand(bsz, n, z.shape[-1])
        mu_x, logvar_x = self._decode_params(u, z_b)
        eps = torch.randn(mu_x.shape, dtype=z.dtype, generator=torch_gen)
        return self._denorm(mu_x + torch.exp(0.5 * logvar_x) * eps)


class DirectSetGenerator(GeneratorBase):
    """Noise-to-point MLP trained end to end with an OT loss on the whole set."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__(cfg)
        self.net = _CondNet(cfg.latent_noise_dim, cfg.latent_dim, cfg.data_dim,
                            cfg.hidden_dim, cfg.conditioning, n_hidden=cfg.n_layers)

    def _generate(self, z, n, torch_gen):
        bsz = z.shape[0]
        noise = torch.randn(bsz, n, self.cfg.latent_noise_dim, dtype=z.dtype,
                            generator=torch_gen)
        z_b = z[:, None, :].expand(bsz, n, z.shape[-1])
        return self.net(noise, z_b)

    def loss_batch(self, z, targets, torch_gen=None):
        x = self._norm(targets)
        gen = self._generate(z, targets.shape[1], torch_gen)
        if self.cfg.kind == "direct_sinkhorn":
            value = sinkhorn_loss_batch(gen, x, eps=self.cfg.sinkhorn_epsilon,
                                        iters=self.cfg.sinkhorn_iters, debiased=True)
            return value, {"sinkhorn": float(value.detach())}
        value = _sliced_sq_batch(gen, x, self.cfg.n_projections, torch_gen)
        return value, {"sliced_sq": float(value.detach())}

    @torch.no_grad()
    def sample_batch(self, z, n, torch_gen):
        return self._denorm(self._generate(z, n, torch_gen))


def _sliced_sq_batch(x: torch.Tensor, y: torch.Tensor, n_proj: int, torch_gen) -> torch.Tensor:
    d = x.shape[-1]
    dirs = torch.randn(n_proj, d, dtype=x.dtype, generator=torch_gen)
    dirs = dirs / dirs.norm(dim=1, keepdim=True)
    px = torch.sort(x @ dirs.T, dim=1).values
    py = torch.sort(y @ dirs.T, dim=1).values
    return d * torch.mean((px - py) ** 2)


class _CrossAttentionBlock(nn.Module):
    def __init__(self, hidden_dim, n_heads=4):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden_dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.ff = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.SELU(),
                                nn.Linear(hidden_dim, hidden_dim))
        self.norm2 = nn.LayerNorm(hidden_dim)

    def forward(self, tokens, ctx):
        a, _ = self.attn(tokens, ctx, ctx, need_weights=False)
        tokens = self.norm1(tokens + a)
        return self.norm2(tokens + self.ff(tokens))


class WormholeGenerator(GeneratorBase):
    """Attention decoder mapping the latent code to a fixed-size token set.

    The tokens cross-attend to a small context expanded from z; the decoded
    set is matched to targets with a Sinkhorn loss. Sampling a different size
    than out_set_size resamples the decoded tokens with replacement.
    """

    N_CTX = 4

    def __init__(self, cfg: GeneratorConfig):
        super().__init__(cfg)
        h = cfg.hidden_dim
        self.tokens = nn.Parameter(torch.randn(cfg.out_set_size, h) * 0.02)
        self.ctx_proj = nn.Linear(cfg.latent_dim, self.N_CTX * h)
        self.blocks = nn.ModuleList([_CrossAttentionBlock(h) for _ in range(2)])
        self.out = nn.Linear(h, cfg.data_dim)

    def decode(self, z):
        bsz = z.shape[0]
        h = self.cfg.hidden_dim
        ctx = self.ctx_proj(z).reshape(bsz, self.N_CTX, h)
        tokens = self.tokens[None].expand(bsz, -1, -1)
        for block in self.blocks:
            tokens = block(tokens, ctx)
        return self.out(tokens)

    def loss_batch(self, z, targets, torch_gen=None):
        x = self._norm(targets)
        decoded = self.decode(z)
        value = sinkhorn_loss_batch(decoded, x, eps=self.cfg.sinkhorn_epsilon,
                                    iters=self.cfg.sinkhorn_iters, debiased=True)
        return value, {"sinkhorn": float(value.detach())}

    @torch.no_grad()
    def sample_batch(self, z, n, torch_gen):
        decoded = self._denorm(self.decode(z))
        k = decoded.shape[1]
        if n == k:
            return decoded
        idx = torch.randint(0, k, (decoded.shape[0], n), generator=torch_gen)
        return torch.gather(decoded, 1, idx[..., None].expand(-1, -1, decoded.shape[-1]))


_KIND_TO_CLASS = {
    "ddpm": DDPMGenerator,
    "cvae": CVAEGenerator,
    "direct_sinkhorn": DirectSetGenerator,
    "direct_sliced": DirectSetGenerator,
    "wormhole": WormholeGenerator,
}


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> GeneratorBase:
    torch.manual_seed(seed)
    return _KIND_TO_CLASS[cfg.kind](cfg)


def _z_tensor(gen: GeneratorBase, z) -> torch.Tensor:
    vec = z.vector if isinstance(z, Embedding) else np.asarray(z, dtype=float)
    dtype = next(gen.parameters()).dtype
    return torch.as_tensor(vec, dtype=dtype)[None, :]


def loss(gen: GeneratorBase, z, target: SampleSet, seed: int = 0) -> LossValue:
    """Evaluate the per-set training loss at a fixed conditioning code."""
    torch_gen = torch.Generator().manual_seed(seed)
    dtype = next(gen.parameters()).dtype
    targets = torch.as_tensor(target.points, dtype=dtype)[None]
    with torch.no_grad():
        value, diag = gen.loss_batch(_z_tensor(gen, z), targets, torch_gen)
    return LossValue(scalar=float(value), diagnostics=diag)


def sample(gen: GeneratorBase, z, n: int, seed: int = 0) -> SampleSet:
    """Draw n points from the conditional model; bit-deterministic given seed."""
    if n < 1:
        raise ConfigurationError("n: must be >= 1")
    if gen.kind == "wormhole" and n != gen.cfg.out_set_size:
        warnings.warn(
            f"wormhole decodes {gen.cfg.out_set_size} tokens; resampling to n={n} "
            "with replacement")
    torch_gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        pts = gen.sample_batch(_z_tensor(gen, z), n, torch_gen)
    return SampleSet(points=pts[0].double().numpy())


class OracleReplay:
    """Floor model: 'generation' bootstrap-resamples the encoder's input set."""

    kind = "oracle_replay"

    def reconstruct(self, s: SampleSet, n: int, seed: int) -> SampleSet:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, s.size, size=n)
        return SampleSet(points=s.points[idx])


def reconstruction_error(encoder, gen, true_params, m_enc: int, n_gen: int,
                         seed: int = 0, gmm_restarts: int = 3) -> float:
    """Sample, encode, regenerate, refit, and measure the family OT distance.

    For Gaussian truths the metric is the closed-form W2 against a Gaussian
    fit of the generated points; for mixtures it is the mixture-restricted W2
    against an EM fit with the true component count.
    """
    s = sample_set(true_params, m_enc, seed)
    if hasattr(gen, "reconstruct"):  # oracle-style models bypass the encoder
        out = gen.reconstruct(s, n_gen, seed + 1)
    else:
        z = encode(encoder, s)
        out = sample(gen, z, n_gen, seed + 1)
    if isinstance(true_params, GaussianParams):
        fitted = fit_gaussian(out)
        return w2_gaussian(fitted, true_params)
    if isinstance(true_params, GMMParams):
        fitted = fit_gmm(out, k=true_params.n_components, restarts=gmm_restarts, seed=seed + 2)
        return mw2_gmm(fitted, true_params)[0]
    raise ConfigurationError("reconstruction_error supports gaussian or gmm families")
