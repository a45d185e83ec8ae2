"""Experiment configuration: schema, validation, and dotted-path overrides.

Configs are nested YAML. Validation is strict: unknown keys are rejected,
required fields (including every seed) must be explicit, and cross-field
rules are enforced before anything runs. Errors carry dotted field paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .distributions import MetaDistributionSpec
from .encoders import EncoderConfig
from .errors import ConfigurationError
from .generators import GeneratorConfig
from .training import TrainConfig

__all__ = [
    "ExperimentConfig",
    "load_raw_config",
    "apply_overrides",
    "validate_config",
    "build_experiment_config",
    "snapshot_config",
]

_TOP_KEYS = {"meta_distribution", "set_spec", "encoder", "generator", "train",
             "probes", "output_dir", "benchmark"}
_META_KEYS = {"family", "dim", "wishart_scale", "mean_range", "dirichlet_alpha", "n_components"}
_SET_KEYS = {"mode", "set_size", "kernel_sigma", "noise_sigma", "dataset"}
_ENC_KEYS = {"arch", "hidden_dim", "n_blocks", "latent_dim", "pooling", "tau_or_lambda",
             "kme_features", "kme_bandwidth"}
_GEN_KEYS = {"kind", "hidden_dim", "n_layers", "latent_noise_dim", "diffusion_steps", "beta_start",
             "beta_end", "sampler", "sample_steps", "out_set_size", "conditioning",
             "sinkhorn_epsilon", "sinkhorn_iters", "n_projections"}
_TRAIN_KEYS = {"steps", "batch_sets", "set_size", "learning_rate", "weight_decay",
               "lr_schedule", "seed", "checkpoint_every", "grad_clip", "ema_decay"}
_PROBE_KEYS = {"kind", "seed", "n_test", "m_enc", "n_gen", "set_sizes", "n_resamples",
               "grid_resolution", "n_pairs", "t_grid", "trials", "runs", "alphas"}
_BENCH_KEYS = {"grid", "n_test", "m_enc", "n_gen", "seed", "include_oracle"}
_PROBE_KINDS = {"latent_geometry", "simplex_geometry", "prior_warp", "interpolation",
                "loss_clt", "invariance"}


@dataclass
class ExperimentConfig:
    meta_distribution: MetaDistributionSpec
    encoder: EncoderConfig
    generator: GeneratorConfig
    train: TrainConfig
    probes: list = field(default_factory=list)
    output_dir: str = "runs/run"
    set_spec: dict | None = None
    benchmark: dict | None = None
    raw: dict = field(default_factory=dict)


def load_raw_config(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return data


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted-path key=value overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r}: expected dotted.path=value")
        dotted, value = item.split("=", 1)
        keys = dotted.split(".")
        node = raw
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = yaml.safe_load(value)
    return raw


def _check_keys(section: dict, allowed: set, prefix: str, errors: list):
    for key in section:
        if key not in allowed:
            errors.append(f"{prefix}{key}: unknown key")


def validate_config(raw: dict) -> list[str]:
    """Full schema plus cross-field validation; returns error strings."""
    errors: list[str] = []
    _check_keys(raw, _TOP_KEYS, "", errors)
    for required in ("meta_distribution", "encoder", "generator", "train", "output_dir"):
        if required not in raw:
            errors.append(f"{required}: required section missing")
    if errors:
        return errors

    meta = raw["meta_distribution"]
    _check_keys(meta, _META_KEYS, "meta_distribution.", errors)
    try:
        spec = _build_meta(meta)
    except (ConfigurationError, TypeError, ValueError) as exc:
        errors.append(f"meta_distribution.{exc}")
        spec = None

    enc = raw["encoder"]
    _check_keys(enc, _ENC_KEYS, "encoder.", errors)
    if enc.get("pooling") in ("max", "sum"):
        errors.append(
            f"encoder.pooling: {enc['pooling']!r} is diagnostics-only; it breaks the "
            "sample-size limit guarantees and cannot be selected for training")
    elif spec is not None:
        try:
            EncoderConfig(input_dim=spec.dim, **enc)
        except (ConfigurationError, TypeError) as exc:
            errors.append(f"encoder.{exc}")

    gen = raw["generator"]
    _check_keys(gen, _GEN_KEYS, "generator.", errors)
    if gen.get("kind") == "wormhole" and "out_set_size" not in gen:
        errors.append("generator.out_set_size: required for the wormhole kind")
    if spec is not None and not errors:
        try:
            latent = enc.get("latent_dim", 16)
            GeneratorConfig(data_dim=spec.dim, latent_dim=latent, **gen)
        except (ConfigurationError, TypeError) as exc:
            errors.append(f"generator.{exc}")

    train = raw["train"]
    _check_keys(train, _TRAIN_KEYS, "train.", errors)
    if "seed" not in train:
        errors.append("train.seed: seeds must be explicit")
    else:
        try:
            TrainConfig(**train)
        except (ConfigurationError, TypeError) as exc:
            errors.append(f"train.{exc}")

    if "set_spec" in raw and raw["set_spec"] is not None:
        _check_keys(raw["set_spec"], _SET_KEYS, "set_spec.", errors)

    for i, probe in enumerate(raw.get("probes", []) or []):
        prefix = f"probes[{i}]."
        _check_keys(probe, _PROBE_KEYS, prefix, errors)
        kind = probe.get("kind")
        if kind not in _PROBE_KINDS:
            errors.append(f"{prefix}kind: unknown probe kind {kind!r}")
        if "seed" not in probe:
            errors.append(f"{prefix}seed: seeds must be explicit")

    if "benchmark" in raw and raw["benchmark"] is not None:
        bench = raw["benchmark"]
        _check_keys(bench, _BENCH_KEYS, "benchmark.", errors)
        if "seed" not in bench:
            errors.append("benchmark.seed: seeds must be explicit")
        if not isinstance(bench.get("grid", []), list):
            errors.append("benchmark.grid: must be a list of encoder/generator cells")
    return errors


def _build_meta(meta: dict) -> MetaDistributionSpec:
    kwargs = dict(meta)
    if "mean_range" in kwargs and kwargs["mean_range"] is not None:
        kwargs["mean_range"] = tuple(kwargs["mean_range"])
    if "dirichlet_alpha" in kwargs and kwargs["dirichlet_alpha"] is not None:
        kwargs["dirichlet_alpha"] = np.asarray(kwargs["dirichlet_alpha"], dtype=float)
    return MetaDistributionSpec(**kwargs)


def build_experiment_config(raw: dict) -> ExperimentConfig:
    """Turn a validated raw mapping into typed configuration objects.

    Derived dimensions (encoder input, generator data/conditioning dims) come
    from the meta-distribution and encoder sections and are not part of the
    file format.
    """
    errors = validate_config(raw)
    if errors:
        raise ConfigurationError("; ".join(errors))
    spec = _build_meta(raw["meta_distribution"])
    encoder = EncoderConfig(input_dim=spec.dim, **raw["encoder"])
    generator = GeneratorConfig(data_dim=spec.dim, latent_dim=encoder.latent_dim,
                                **raw["generator"])
    train = TrainConfig(**raw["train"])
    return ExperimentConfig(
        meta_distribution=spec, encoder=encoder, generator=generator, train=train,
        probes=list(raw.get("probes", []) or []), output_dir=raw["output_dir"],
        set_spec=raw.get("set_spec"), benchmark=raw.get("benchmark"), raw=raw)


def snapshot_config(raw: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(raw, fh, sort_keys=False)
