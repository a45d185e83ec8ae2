"""Reproducible experiment runner.

Subcommands: train, eval, probe, benchmark, report, validate. Every run
writes a self-contained directory (config snapshot, metrics.jsonl,
checkpoints, probe reports) guarded by a lock file. Exit codes: 0 ok,
2 config error, 3 runtime/numeric error.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .config import (apply_overrides, build_experiment_config, load_raw_config,
                     snapshot_config, validate_config)
from .distributions import sample_meta
from .encoders import build_encoder, verify_distributional_invariance
from .errors import ConfigurationError, DistembedError
from .evaluation import (benchmark, interpolation_probe, latent_geometry_probe,
                         prior_warp_probe, simplex_geometry_probe)
from .generators import build_generator
from .setconstruct import load_labeled_dataset, onehot_dataset
from .training import (CategoricalMixtureSetSource, MetaSetSource, load_checkpoint,
                       loss_clt_probe, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUTPUT_ROOT_ENV = "DISTEMBED_OUTPUT_ROOT"


def _resolve_output_dir(output_dir: str) -> str:
    if os.path.isabs(output_dir):
        return output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    return os.path.join(root, output_dir)


class _RunLock:
    """One writer per run directory."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, ".lock")

    def __enter__(self):
        if os.path.exists(self.path):
            with open(self.path) as fh:
                pid = int(fh.read().strip() or 0)
            alive = pid and _pid_alive(pid)
            if alive:
                raise DistembedError(f"run directory locked by live pid {pid}")
        with open(self.path, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def _load(config_path, overrides):
    raw = load_raw_config(config_path)
    raw = apply_overrides(raw, overrides or [])
    errors = validate_config(raw)
    if errors:
        raise ConfigurationError("\n".join(errors))
    return build_experiment_config(raw)


def _make_set_source(cfg):
    spec = cfg.meta_distribution
    tcfg = cfg.train
    if spec.family == "multinomial":
        dataset = _dataset_for(cfg)
        return CategoricalMixtureSetSource(dataset, spec.dirichlet_alpha,
                                           tcfg.batch_sets, tcfg.set_size, tcfg.seed)
    return MetaSetSource(spec, tcfg.batch_sets, tcfg.set_size, tcfg.seed)


def _dataset_for(cfg):
    set_spec = cfg.set_spec or {}
    source = set_spec.get("dataset", "onehot")
    if source == "onehot":
        return onehot_dataset(cfg.meta_distribution.dim)
    return load_labeled_dataset(source)


def _latest_checkpoint(run_dir):
    paths = glob.glob(os.path.join(run_dir, "checkpoints", "step-*.pt"))
    if not paths:
        raise DistembedError(f"no checkpoint found under {run_dir}/checkpoints")
    return max(paths, key=lambda p: int(os.path.basename(p)[5:-3]))


def _cmd_validate(args):
    raw = load_raw_config(args.config)
    raw = apply_overrides(raw, args.override)
    errors = validate_config(raw)
    if errors:
        for err in errors:
            print(f"error: {err}")
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def _cmd_train(args):
    cfg = _load(args.config, args.override)
    run_dir = _resolve_output_dir(cfg.output_dir)
    os.makedirs(run_dir, exist_ok=True)
    with _RunLock(run_dir):
        snapshot_config(cfg.raw, os.path.join(run_dir, "config.snapshot"))
        encoder = build_encoder(cfg.encoder, seed=cfg.train.seed)
        generator = build_generator(cfg.generator, seed=cfg.train.seed + 1)
        source = _make_set_source(cfg)
        record = train(encoder, generator, source, cfg.train, run_dir=run_dir)
        print(f"trained {cfg.train.steps} steps -> {run_dir} "
              f"(final loss {record.metrics[-1]['loss']:.4f})")
    return EXIT_OK


def _run_probe(probe, cfg, encoder, generator, run_dir):
    spec = cfg.meta_distribution
    kind = probe["kind"]
    seed = probe["seed"]
    if kind == "latent_geometry":
        params = sample_meta(spec, probe.get("n_test", 50), seed=seed)
        report = latent_geometry_probe(encoder, params, m_enc=probe.get("m_enc", 4096),
                                       seed=seed)
        out = report.to_dict()
    elif kind == "simplex_geometry":
        report = simplex_geometry_probe(encoder, _dataset_for(cfg),
                                        grid_resolution=probe.get("grid_resolution", 15),
                                        m_enc=probe.get("m_enc", 1024), seed=seed)
        out = report.to_dict()
    elif kind == "prior_warp":
        encoders, alphas = [], []
        for entry in probe["runs"]:
            enc_i, _, _ = load_checkpoint(_latest_checkpoint(_resolve_output_dir(entry)))
            encoders.append(enc_i)
        for alpha in probe["alphas"]:
            alphas.append(np.asarray(alpha, dtype=float))
        report = prior_warp_probe(encoders, alphas, _dataset_for(cfg),
                                  grid_resolution=probe.get("grid_resolution", 15),
                                  m_enc=probe.get("m_enc", 1024), seed=seed)
        out = report.to_dict()
    elif kind == "interpolation":
        n_pairs = probe.get("n_pairs", 10)
        params = sample_meta(spec, 2 * n_pairs, seed=seed)
        reports = []
        for i in range(n_pairs):
            rep = interpolation_probe(encoder, generator, (params[2 * i], params[2 * i + 1]),
                                      t_grid=tuple(probe.get("t_grid", (0.25, 0.5, 0.75))),
                                      n_gen=probe.get("n_gen", 8192), seed=seed + i,
                                      m_enc=probe.get("m_enc", 4096))
            reports.append(rep.to_dict())
        out = {"pairs": reports}
    elif kind == "loss_clt":
        p = sample_meta(spec, 1, seed=seed)[0]
        report = loss_clt_probe(encoder, generator, p,
                                set_sizes=tuple(probe.get("set_sizes", (64, 256, 1024, 4096))),
                                n_resamples=probe.get("n_resamples", 200),
                                n_gen=probe.get("n_gen", 4096), seed=seed)
        out = report.to_dict()
    elif kind == "invariance":
        report = verify_distributional_invariance(encoder, trials=probe.get("trials", 20),
                                                  seed=seed)
        out = {"max_permutation_dev": report.max_permutation_dev,
               "max_duplication_dev": report.max_duplication_dev,
               "passed": report.passed, "trials": report.trials}
    else:
        raise ConfigurationError(f"unknown probe kind {kind!r}")
    os.makedirs(os.path.join(run_dir, "probes"), exist_ok=True)
    path = os.path.join(run_dir, "probes", f"{kind}.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
    return path


def _cmd_eval(args, only: str | None = None):
    cfg = _load(args.config, args.override)
    run_dir = _resolve_output_dir(cfg.output_dir)
    encoder, generator, _ = load_checkpoint(_latest_checkpoint(run_dir))
    probes = cfg.probes
    if only is not None:
        probes = [p for p in probes if p["kind"] == only]
        if not probes:
            raise ConfigurationError(f"probe {only!r} not present in config.probes")
    for probe in probes:
        path = _run_probe(probe, cfg, encoder, generator, run_dir)
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_benchmark(args):
    cfg = _load(args.config, args.override)
    if not cfg.benchmark:
        raise ConfigurationError("benchmark: section missing from config")
    bench = cfg.benchmark
    run_dir = _resolve_output_dir(cfg.output_dir)
    os.makedirs(run_dir, exist_ok=True)
    with _RunLock(run_dir):
        snapshot_config(cfg.raw, os.path.join(run_dir, "config.snapshot"))
        models = {}
        for cell in bench["grid"]:
            raw_cell = json.loads(json.dumps(cfg.raw))  # deep copy
            raw_cell["encoder"].update(cell.get("encoder", {}))
            raw_cell["generator"].update(cell.get("generator", {}))
            cell_cfg = build_experiment_config(raw_cell)
            name = (cell_cfg.encoder.arch, cell_cfg.generator.kind)
            encoder = build_encoder(cell_cfg.encoder, seed=cell_cfg.train.seed)
            generator = build_generator(cell_cfg.generator, seed=cell_cfg.train.seed + 1)
            source = _make_set_source(cell_cfg)
            train(encoder, generator, source, cell_cfg.train,
                  run_dir=os.path.join(run_dir, f"cell-{name[0]}-{name[1]}"))
            models[name] = (encoder, generator)
        table = benchmark(models, cfg.meta_distribution,
                          n_test=bench.get("n_test", 50), m_enc=bench.get("m_enc", 8192),
                          n_gen=bench.get("n_gen", 8192), seed=bench["seed"],
                          include_oracle=bench.get("include_oracle", True))
        table.to_csv(os.path.join(run_dir, "benchmark.csv"))
        table.to_json(os.path.join(run_dir, "benchmark.json"))
        for row in table.ranked():
            print(f"{row['encoder']}+{row['generator']}: "
                  f"{row['mean_error']:.4f} +/- {row['sem']:.4f}")
    return EXIT_OK


def _cmd_report(args):
    lines = []
    for run_dir in args.run_dir:
        run_dir = _resolve_output_dir(run_dir)
        lines.append(f"== {run_dir} ==")
        snap = os.path.join(run_dir, "config.snapshot")
        if os.path.exists(snap):
            lines.append(f"config: {snap}")
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        if os.path.exists(metrics_path):
            with open(metrics_path) as fh:
                rows = [json.loads(line) for line in fh if line.strip()]
            if rows:
                lines.append(f"steps: {len(rows)}; first loss {rows[0]['loss']:.4f}; "
                             f"last loss {rows[-1]['loss']:.4f}")
        for probe_path in sorted(glob.glob(os.path.join(run_dir, "probes", "*.json"))):
            with open(probe_path) as fh:
                data = json.load(fh)
            kind = os.path.basename(probe_path)[:-5]
            keys = ("spearman", "pearson", "variance_slope", "passed", "pearsons",
                    "deviations")
            digest = {k: data[k] for k in keys if k in data}
            lines.append(f"probe {kind}: {json.dumps(digest)}")
        bench_path = os.path.join(run_dir, "benchmark.json")
        if os.path.exists(bench_path):
            with open(bench_path) as fh:
                data = json.load(fh)
            for row in data["rows"]:
                lines.append(f"benchmark {row['encoder']}+{row['generator']}: "
                             f"{row['mean_error']:.4f}")
    text = "\n".join(lines)
    print(text)
    out = os.path.join(_resolve_output_dir(args.run_dir[0]), "report.txt")
    with open(out, "w") as fh:
        fh.write(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distembed",
                                     description="distribution-embedding experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "probe", "benchmark", "validate"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("-o", "--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
        if name == "probe":
            p.add_argument("--probe", required=True, help="probe kind to run")
    p = sub.add_parser("report")
    p.add_argument("run_dir", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "probe":
            return _cmd_eval(args, only=args.probe)
        if args.command == "benchmark":
            return _cmd_benchmark(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigurationError(f"unknown command {args.command}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DistembedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
