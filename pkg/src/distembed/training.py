"""Joint optimization of an encoder-generator pair on streams of sets.

Each step encodes a batch of sets and scores the generator against the same
sets (the plug-in objective), so gradients reach both halves. Set sources are
stateless: the batch for step i is a pure function of (seed, i), which makes
runs resumable and bit-reproducible.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .distributions import (GaussianParams, GMMParams, MetaDistributionSpec, SampleSet,
                            fit_gaussian, fit_gmm, sample_meta, sample_set)
from .encoders import EncoderConfig, build_encoder
from .errors import ConfigurationError, TrainingError
from .generators import GeneratorConfig, build_generator
from .ot import mw2_gmm, w2_gaussian
from .setconstruct import LabeledDataset, categorical_mixture_sets

__all__ = [
    "TrainConfig",
    "RunRecord",
    "MetaSetSource",
    "CategoricalMixtureSetSource",
    "FixedSetsSource",
    "train",
    "lr_at_step",
    "save_checkpoint",
    "load_checkpoint",
    "load_run_record",
    "loss_clt_probe",
    "LossCLTReport",
]

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_sets: int = 32
    set_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = 1.0
    ema_decay: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps: must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate: must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError("lr_schedule: must be 'constant' or 'cosine'")
        if self.batch_sets < 1 or self.set_size < 1:
            raise ConfigurationError("batch_sets/set_size: must be >= 1")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay: must lie in (0, 1)")


@dataclass
class RunRecord:
    config: dict
    seed: int
    metrics: list
    checkpoint_paths: list
    wall_clock: float
    final_probes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


class MetaSetSource:
    """Fresh draws from a meta-distribution for every batch.

    Batch i samples batch_sets distributions from the prior and one set of
    set_size points from each; deterministic in (seed, i) alone.
    """

    def __init__(self, spec: MetaDistributionSpec, batch_sets: int, set_size: int, seed: int):
        self.spec = spec
        self.batch_sets = batch_sets
        self.set_size = set_size
        self.seed = seed

    def __call__(self, step: int) -> np.ndarray:
        params = sample_meta(self.spec, self.batch_sets, seed=[self.seed, step])
        dim = params[0].mean.size if hasattr(params[0], "mean") else self.spec.dim
        out = np.empty((self.batch_sets, self.set_size, dim))
        for i, p in enumerate(params):
            out[i] = sample_set(p, self.set_size, seed=[self.seed, step, i]).points
        return out


class CategoricalMixtureSetSource:
    """Dirichlet-weighted class mixtures over a labeled dataset."""

    def __init__(self, dataset: LabeledDataset, alpha, batch_sets: int, set_size: int, seed: int):
        self.dataset = dataset
        self.alpha = np.asarray(alpha, dtype=float)
        self.batch_sets = batch_sets
        self.set_size = set_size
        self.seed = seed

    def __call__(self, step: int) -> np.ndarray:
        sets, _ = categorical_mixture_sets(self.dataset, self.alpha, self.batch_sets,
                                           self.set_size, seed=[self.seed, step])
        return np.stack([s.points for s in sets])


class FixedSetsSource:
    """Batches drawn (with replacement) from a fixed collection of sets."""

    def __init__(self, sets: list[SampleSet], batch_sets: int, seed: int):
        if not sets:
            raise ConfigurationError("sets: need at least one set")
        sizes = {s.size for s in sets}
        if len(sizes) != 1:
            raise ConfigurationError("sets: all sets must share the same size for batching")
        self.points = np.stack([s.points for s in sets])
        self.batch_sets = batch_sets
        self.seed = seed

    def __call__(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, step])
        idx = rng.integers(0, self.points.shape[0], size=self.batch_sets)
        return self.points[idx]


def _encoder_grad_norm(encoder) -> float:
    total = 0.0
    for p in encoder.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _named_pair_params(encoder, generator):
    for name, p in encoder.named_parameters():
        yield f"enc.{name}", p
    for name, p in generator.named_parameters():
        yield f"gen.{name}", p


def save_checkpoint(path, encoder, generator, optimizer=None, torch_gen=None,
                    step: int = 0, train_config: TrainConfig | None = None,
                    extra: dict | None = None):
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "encoder_config": asdict(encoder.cfg),
        "generator_config": asdict(generator.cfg),
        "encoder_state": encoder.state_dict(),
        "generator_state": generator.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_gen_state": torch_gen.get_state() if torch_gen is not None else None,
        "step": step,
        "train_config": asdict(train_config) if train_config is not None else None,
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild the encoder/generator pair stored at path.

    Returns (encoder, generator, payload); the payload keeps optimizer and RNG
    state for resumption.
    """
    payload = torch.load(path, weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigurationError(f"checkpoint schema version {version} unsupported")
    encoder = build_encoder(EncoderConfig(**payload["encoder_config"]))
    generator = build_generator(GeneratorConfig(**payload["generator_config"]))
    encoder.load_state_dict(payload["encoder_state"])
    generator.load_state_dict(payload["generator_state"])
    return encoder, generator, payload


def train(encoder, generator, set_source, cfg: TrainConfig, run_dir=None,
          resume_from=None, until_step: int | None = None) -> RunRecord:
    """Run cfg.steps optimizer steps of the plug-in objective.

    Persists metrics.jsonl, checkpoints, and a run record when run_dir is
    given. Deterministic given cfg.seed up to platform reduction order. On a
    non-finite loss the run aborts with the last-good checkpoint retained.
    until_step pauses a run early while keeping the full-horizon schedule, so
    that resuming from its checkpoint reproduces the uninterrupted loss log.
    With cfg.ema_decay set, an exponential moving average of the weights is
    tracked and handed back (and stored in the final checkpoint) when the run
    finishes; per-step checkpoints keep the raw trajectory for resumption.
    """
    t_start = time.time()
    params = list(encoder.parameters()) + list(generator.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(cfg.seed)
    start_step = 0

    ema = None
    if cfg.ema_decay is not None:
        ema = {k: p.detach().clone() for k, p in _named_pair_params(encoder, generator)}

    if resume_from is not None:
        payload = torch.load(resume_from, weights_only=False)
        encoder.load_state_dict(payload["encoder_state"])
        generator.load_state_dict(payload["generator_state"])
        if payload.get("optimizer_state") is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        if payload.get("torch_gen_state") is not None:
            torch_gen.set_state(payload["torch_gen_state"])
        if ema is not None and payload.get("extra", {}).get("ema_state") is not None:
            ema = payload["extra"]["ema_state"]
        start_step = payload["step"]

    metrics_fh = None
    ckpt_dir = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), mode)

    dtype = next(encoder.parameters()).dtype
    metrics = []
    checkpoint_paths = []
    stop_step = cfg.steps if until_step is None else min(until_step, cfg.steps)
    try:
        for step in range(start_step, stop_step):
            lr = lr_at_step(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_np = set_source(step)
            batch = torch.as_tensor(batch_np, dtype=dtype)
            if float(generator.norm_fitted) == 0.0:
                generator.fit_normalizer(batch)

            optimizer.zero_grad(set_to_none=True)
            z = encoder(batch)
            value, diag = generator.loss_batch(z, batch, torch_gen)
            if not torch.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at step {step}; last-good checkpoint retained")
            value.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            enc_grad = _encoder_grad_norm(encoder)
            optimizer.step()
            if ema is not None:
                decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
                with torch.no_grad():
                    for k, p in _named_pair_params(encoder, generator):
                        ema[k].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

            record = {"step": step, "loss": float(value.detach()), "lr": lr,
                      "enc_grad_norm": enc_grad, **diag}
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")

            is_last = step == stop_step - 1
            if ckpt_dir is not None and (
                    (cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0) or is_last):
                path = os.path.join(ckpt_dir, f"step-{step + 1}.pt")
                save_checkpoint(path, encoder, generator, optimizer, torch_gen,
                                step=step + 1, train_config=cfg,
                                extra={"ema_state": ema} if ema is not None else None)
                checkpoint_paths.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if ema is not None:
        # Hand back the averaged weights; the raw trajectory stays in the
        # per-step checkpoints for resumption.
        with torch.no_grad():
            for k, p in _named_pair_params(encoder, generator):
                p.copy_(ema[k])
        if ckpt_dir is not None and checkpoint_paths:
            save_checkpoint(checkpoint_paths[-1], encoder, generator, optimizer, torch_gen,
                            step=stop_step, train_config=cfg,
                            extra={"ema_state": ema, "ema_applied": True})

    record = RunRecord(
        config={"train": asdict(cfg), "encoder": asdict(encoder.cfg),
                "generator": asdict(generator.cfg)},
        seed=cfg.seed,
        metrics=metrics,
        checkpoint_paths=checkpoint_paths,
        wall_clock=time.time() - t_start,
    )
    if run_dir is not None:
        with open(os.path.join(run_dir, "record.json"), "w") as fh:
            summary = record.to_dict()
            summary["metrics"] = {"n_steps": len(metrics),
                                  "first_loss": metrics[0]["loss"] if metrics else None,
                                  "last_loss": metrics[-1]["loss"] if metrics else None}
            json.dump(summary, fh, indent=2)
    return record


def load_run_record(run_dir) -> dict:
    """Reload a persisted run record and revalidate its shape."""
    path = os.path.join(run_dir, "record.json")
    with open(path) as fh:
        data = json.load(fh)
    for key in ("config", "seed", "metrics", "checkpoint_paths", "wall_clock"):
        if key not in data:
            raise ConfigurationError(f"run record missing key {key!r}")
    for section in ("train", "encoder", "generator"):
        if section not in data["config"]:
            raise ConfigurationError(f"run record config missing section {section!r}")
    TrainConfig(**data["config"]["train"])
    EncoderConfig(**data["config"]["encoder"])
    GeneratorConfig(**data["config"]["generator"])
    return data


# ---------------------------------------------------------------------------
# Loss CLT probe
# ---------------------------------------------------------------------------


@dataclass
class LossCLTReport:
    set_sizes: list
    means: list
    variances: list
    variance_slope: float
    skewness_at_largest: float
    kurtosis_at_largest: float
    n_resamples: int
    n_gen: int

    def to_dict(self):
        return asdict(self)


def _family_loss(points: np.ndarray, p, seed: int) -> float:
    out = SampleSet(points)
    if isinstance(p, GaussianParams):
        return w2_gaussian(fit_gaussian(out), p)
    if isinstance(p, GMMParams):
        return mw2_gmm(fit_gmm(out, k=p.n_components, restarts=2, seed=seed), p)[0]
    raise ConfigurationError("loss_clt_probe supports gaussian or gmm families")


def loss_clt_probe(encoder, generator, p, set_sizes=(64, 256, 1024, 4096),
                   n_resamples: int = 500, seed: int = 0, n_gen: int = 4096,
                   z_chunk: int = 64) -> LossCLTReport:
    """Distribution of the evaluation loss over resampled encoder inputs.

    For each set size m the probe resamples S_m from the fixed distribution p,
    re-encodes, regenerates n_gen points, refits, and measures the family OT
    distance to p. Reports per-m mean/variance and the log-log slope of the
    variance against m.
    """
    from scipy import stats as sps

    dtype = next(encoder.parameters()).dtype
    torch_gen = torch.Generator()
    torch_gen.manual_seed(seed)
    means, variances = [], []
    last_values = None
    for m in set_sizes:
        batch = np.empty((n_resamples, m, encoder.cfg.input_dim))
        for r in range(n_resamples):
            batch[r] = sample_set(p, m, seed=[seed, m, r]).points
        values = np.empty(n_resamples)
        with torch.no_grad():
            for lo in range(0, n_resamples, z_chunk):
                hi = min(lo + z_chunk, n_resamples)
                chunk = torch.as_tensor(batch[lo:hi], dtype=dtype)
                z = encoder(chunk)
                out = generator.sample_batch(z, n_gen, torch_gen).double().numpy()
                for i in range(hi - lo):
                    values[lo + i] = _family_loss(out[i], p, seed=seed + lo + i)
        means.append(float(values.mean()))
        variances.append(float(values.var()))
        last_values = values
    slope = float(np.polyfit(np.log(np.asarray(set_sizes, float)), np.log(variances), 1)[0])
    return LossCLTReport(
        set_sizes=list(set_sizes), means=means, variances=variances, variance_slope=slope,
        skewness_at_largest=float(sps.skew(last_values)),
        kurtosis_at_largest=float(sps.kurtosis(last_values)),
        n_resamples=n_resamples, n_gen=n_gen)
