"""Command-line front end for the attack/detection bench.

Each subcommand reads an optional JSON config, shares one output directory,
and reuses artifacts already present there (model checkpoint, paired attack
datasets), so the commands compose: `train-model` then `attack` then
`detect`, or any later command standalone.

Exit codes: 0 on success, 1 on configuration errors, 2 when some experiment
cells failed while the rest of the grid completed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import pipeline as pipe

log = logging.getLogger("advspec")


def _load_config(args) -> pipe.ExperimentConfig:
    config = pipe.load_config(args.config) if args.config else pipe.ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    return config


def _prepare_bench(config: pipe.ExperimentConfig) -> pipe.Bench:
    """Bench with the model loaded from the output dir when compatible."""
    bench = pipe.Bench(config)
    out = Path(config.out_dir)
    ckpt = out / "model.sdck"
    if ckpt.exists():
        params = model_mod.load_checkpoint(ckpt)
        if params.config == config.model_config():
            log.info("reusing checkpoint %s", ckpt)
            bench.use_params(params)
        else:
            log.info("checkpoint %s does not match config; retraining", ckpt)
    for attack in config.attacks:
        cached = out / f"paired_{attack}.npz"
        if cached.exists():
            bench.set_paired(attack, pipe.load_paired(cached))
    return bench


def _save_model(bench: pipe.Bench) -> Path:
    out = Path(bench.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.sdck"
    model_mod.save_checkpoint(bench.params, path)
    return path


def _write(config, reports, name) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    pipe.write_report(reports, path, master_seed=config.master_seed,
                      config_hash=config.config_hash())
    return path


def _grid_exit(reports) -> int:
    return 2 if any("failed" in r.flags for r in reports) else 0


def cmd_train_model(args) -> int:
    config = _load_config(args)
    bench = _prepare_bench(config)
    train_set, test_set = bench.datasets()
    path = _save_model(bench)
    train_acc = float(np.mean(
        model_mod.predict_batch(bench.params, train_set.images) == train_set.labels))
    test_acc = float(np.mean(
        model_mod.predict_batch(bench.params, test_set.images) == test_set.labels))
    print(f"model saved to {path}")
    print(f"train accuracy {train_acc:.4f}  test accuracy {test_acc:.4f}")
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    bench = _prepare_bench(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_model(bench)
    for attack in config.attacks:
        paired = bench.paired(attack)
        path = out / f"paired_{attack}.npz"
        pipe.save_paired(paired, path)
        rate = "n/a" if paired.success_rate is None else f"{paired.success_rate:.3f}"
        print(f"{attack}: {len(paired)} pairs from {paired.attempts} attempts "
              f"(success rate {rate}) -> {path}")
    return 0


def cmd_extract(args) -> int:
    config = _load_config(args)
    bench = _prepare_bench(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wanted = [d for d in config.detectors if d.startswith(("input_", "layer_"))]
    for attack in config.attacks:
        for detector in wanted:
            train_x, train_y, test_x, test_y, _ = pipe.detector_features(
                bench, attack, detector)
            mode = detector.split("_")[1]
            x = np.concatenate([train_x, test_x], axis=0)
            path = out / f"features_{attack}_{detector}.sdf1"
            pipe.save_features(x, mode, path)
            print(f"{attack}/{detector}: {x.shape[0]} rows x {x.shape[1]} -> {path}")
    return 0


def cmd_detect(args) -> int:
    config = _load_config(args)
    reports = pipe.run_detection_experiment(config, _prepare_bench(config))
    path = _write(config, reports, "detection.report")
    for r in reports:
        print(f"{r.provenance['attack']:>9} {r.provenance['detector']:>10} "
              f"auc={r.auc:.3f} acc={r.accuracy:.3f}")
    print(f"report written to {path}")
    return _grid_exit(reports)


def cmd_ablate_bands(args) -> int:
    config = _load_config(args)
    reports = pipe.run_band_ablation(config, _prepare_bench(config))
    path = _write(config, reports, "bands.report")
    for r in reports:
        print(f"band [{r.provenance['band_lo']:>2},{r.provenance['band_hi']:>2}) "
              f"auc={r.auc:.3f}")
    print(f"report written to {path}")
    return _grid_exit(reports)


def cmd_ablate_layers(args) -> int:
    config = _load_config(args)
    reports = pipe.run_layer_ablation(config, _prepare_bench(config))
    path = _write(config, reports, "layers.report")
    for r in reports:
        print(f"layer {r.provenance.get('ordinal', '?'):>2} "
              f"{r.provenance['detector']:>9} auc={r.auc:.3f} "
              f"dim={r.provenance.get('dim', '?')}")
    print(f"report written to {path}")
    return _grid_exit(reports)


def cmd_sweep_epsilon(args) -> int:
    config = _load_config(args)
    reports = pipe.run_epsilon_sweep(config, _prepare_bench(config))
    path = _write(config, reports, "sweep.report")
    for r in reports:
        print(f"{r.provenance['attack']:>5} eps={r.provenance['epsilon']:<6} "
              f"success={r.provenance.get('success_rate', 'n/a')} auc={r.auc:.3f}")
    print(f"report written to {path}")
    return _grid_exit(reports)


def cmd_transfer(args) -> int:
    config = _load_config(args)
    reports = pipe.run_transfer(config, _prepare_bench(config))
    path = _write(config, reports, "transfer.report")
    for r in reports:
        print(f"{r.provenance['detector']:>10} {r.provenance['attack']:>9} -> "
              f"{r.provenance['eval_attack']:>9} auc={r.auc:.3f}")
    print(f"report written to {path}")
    return _grid_exit(reports)


def cmd_report(args) -> int:
    header, reports = pipe.read_report(args.path)
    print(f"master_seed={header.get('master_seed')} "
          f"config_hash={header.get('config_hash', '')[:12]} "
          f"reports={len(reports)}")
    for r in reports:
        cell = " ".join(f"{k}={v}" for k, v in sorted(r.provenance.items())
                        if k not in ("seed", "config_hash"))
        status = " FAILED" if "failed" in r.flags else ""
        print(f"auc={r.auc:.3f} acc={r.accuracy:.3f} prec={r.precision:.3f} "
              f"rec={r.recall:.3f}  {cell}{status}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advspec",
        description="Adversarial attack generation and Fourier-spectrum detection bench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("train-model", cmd_train_model, "train the CNN and save a checkpoint")
    add("attack", cmd_attack, "build paired benign/adversarial datasets")
    add("extract", cmd_extract, "extract spectral feature matrices")
    add("detect", cmd_detect, "run the attack x detector grid")
    add("ablate-bands", cmd_ablate_bands, "detection AUC per frequency band")
    add("ablate-layers", cmd_ablate_layers, "detection AUC per activation layer")
    add("sweep-epsilon", cmd_sweep_epsilon, "success rate and AUC over epsilon")
    add("transfer", cmd_transfer, "cross-attack detector transfer")
    rep = sub.add_parser("report", help="print a report file")
    rep.add_argument("path", type=str)
    rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
