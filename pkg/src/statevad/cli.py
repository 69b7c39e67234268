"""Command line entry point: gen, train, eval, sweep-eta.

Every command resolves its configuration (defaults < JSON file < flags),
writes it next to its outputs as ``resolved_config.json`` and exits with
0 on success, 2 on a configuration error, 3 when an input artifact is
missing and 4 when training hits a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import detector, pipeline, synth, trainer
from .model import ModelConfig
from .synth import GenConfig
from .trainer import TrainConfig

log = logging.getLogger("statevad")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class CubeConfig:
    """How context cubes are cut from clips."""

    train_frame_stride: int = 4
    test_frame_stride: int = 1

    def __post_init__(self):
        if self.train_frame_stride < 1 or self.test_frame_stride < 1:
            raise ValueError("frame strides must be >= 1")


@dataclass
class Paths:
    data: str = "data"
    run: str = "run"


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    perturb: detector.PerturbConfig = field(default_factory=detector.PerturbConfig)
    cubes: CubeConfig = field(default_factory=CubeConfig)
    sweep_etas: list = field(default_factory=lambda: [0.0, 0.001, 0.002, 0.005])
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "threads": self.threads,
            "gen": self.gen.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict(),
            "perturb": self.perturb.to_dict(), "cubes": asdict(self.cubes),
            "sweep_etas": list(self.sweep_etas), "paths": asdict(self.paths),
        }


_SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig,
             "perturb": detector.PerturbConfig, "cubes": CubeConfig, "paths": Paths}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from None


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - {"seed", "threads", "sweep_etas", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _section(cls, data[name], name))
    for key in ("seed", "threads", "sweep_etas"):
        if key in data:
            setattr(cfg, key, data[key])
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "eta":
            cfg.perturb = _section(detector.PerturbConfig, {**cfg.perturb.to_dict(), "eta": value}, "perturb")
        elif key in ("data", "run"):
            setattr(cfg.paths, key, value)
        else:
            setattr(cfg, key, value)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg.seed!r}")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError(f"threads must be a positive integer, got {cfg.threads!r}")
    if not isinstance(cfg.sweep_etas, list) or any(not isinstance(e, (int, float)) or e < 0 for e in cfg.sweep_etas):
        raise ConfigError("sweep_etas must be a list of non-negative numbers")
    cfg.sweep_etas = [float(e) for e in cfg.sweep_etas]
    return cfg


def write_resolved(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_json(out / "resolved_config.json", {"command": command, **cfg.to_dict()})


# -- commands ---------------------------------------------------------------------
def cmd_gen(cfg: RunConfig, force: bool = False) -> int:
    out = Path(cfg.paths.data)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    train, test = synth.generate_dataset(cfg.gen, cfg.seed)
    manifest = synth.save_dataset(out, cfg.gen, cfg.seed, train, test)
    write_resolved(cfg, out, "gen")
    for split, info in manifest["splits"].items():
        print(f"{split}: {len(info['clips'])} clips, {info['frames']} frames, "
              f"{info['anomalous_frames']} anomalous ({info['anomalous_frames'] / info['frames']:.3f})")
    return EXIT_OK


def _load_clips(cfg: RunConfig, split: str):
    data = Path(cfg.paths.data)
    if not (data / "manifest.json").exists():
        raise MissingArtifact(f"no dataset at {data} (run 'gen' first)")
    try:
        return synth.load_split(data, split)
    except FileNotFoundError as exc:
        raise MissingArtifact(f"dataset {data} is incomplete: {exc}") from None


def _check_patch_config(cfg: RunConfig) -> None:
    if cfg.model.C != 3:
        raise ConfigError("synthetic clips are RGB; model.C must be 3")
    if cfg.model.H != cfg.model.W:
        raise ConfigError("context cubes are square; model.H must equal model.W")


def _train_cubes(cfg: RunConfig, clips):
    return synth.extract_cubes(clips, cfg.model.T, cfg.model.H, cfg.gen.box_margin, cfg.cubes.train_frame_stride)


def cmd_train(cfg: RunConfig) -> int:
    _check_patch_config(cfg)
    clips = _load_clips(cfg, "train")
    cubes = _train_cubes(cfg, clips)
    log.info("training on %d cubes from %d clips", len(cubes), len(clips))
    ckpt = trainer.train(cubes.cubes, cubes.flows, cfg.model, cfg.train, cfg.seed,
                         progress=lambda e, lr, lm: print(f"epoch {e:3d}  loss_r {lr:.4f}  loss_m {lm:.4f}", flush=True))
    run = Path(cfg.paths.run)
    trainer.save_checkpoint(ckpt, run / "checkpoint")
    trainer.write_loss_csv(run / "loss.csv", ckpt.metadata["loss_curve"])
    write_resolved(cfg, run, "train")
    print(f"checkpoint written to {run / 'checkpoint'}")
    return EXIT_OK


def _load_ckpt(cfg: RunConfig):
    path = Path(cfg.paths.run) / "checkpoint"
    if not (path / "manifest.json").exists() or not (path / "tensors.bin").exists():
        raise MissingArtifact(f"no checkpoint at {path} (run 'train' first)")
    return trainer.load_checkpoint(path)


def _test_inputs(cfg: RunConfig, ckpt):
    m = ckpt.config
    clips = _load_clips(cfg, "test")
    stride = cfg.cubes.test_frame_stride
    cubes = synth.extract_cubes(clips, m.T, m.H, cfg.gen.box_margin, stride)
    frames = pipeline.FrameTable.from_clips(clips, stride)
    return cubes, frames


def cmd_eval(cfg: RunConfig, eta_compare: bool = False) -> int:
    ckpt = _load_ckpt(cfg)
    cubes, frames = _test_inputs(cfg, ckpt)
    eta = cfg.perturb.eta
    etas = [0.0, eta] if eta_compare else [eta]
    ev = pipeline.evaluate(ckpt, cubes, frames, etas, cfg.perturb.w_r, cfg.perturb.w_m)
    out = Path(cfg.paths.run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    main = ev.result(eta)
    pipeline.write_scores_csv(out / "scores.csv", ev, main)
    summary = {"eta": eta, "w_r": cfg.perturb.w_r, "w_m": cfg.perturb.w_m,
               "n_frames": len(frames), "n_anomalous_frames": int(frames.labels.sum()), "n_cubes": len(cubes),
               "auroc": main.auroc}
    if eta_compare:
        pipeline.write_scores_csv(out / "scores_plain.csv", ev, ev.plain)
        summary["auroc_plain"] = ev.plain.auroc
        summary["auroc_perturbed"] = main.auroc
    fpr, tpr = detector.roc_curve(main.frame_scores, frames.labels)
    (out / "roc.svg").write_text(detector.roc_svg(fpr, tpr, f"eta = {eta:g}", main.auroc))
    pipeline.write_json(out / "summary.json", summary)
    write_resolved(cfg, out, "eval")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep_eta(cfg: RunConfig) -> int:
    if not cfg.sweep_etas:
        raise ConfigError("sweep needs a non-empty eta list")
    ckpt = _load_ckpt(cfg)
    cubes, frames = _test_inputs(cfg, ckpt)
    ev = pipeline.evaluate(ckpt, cubes, frames, cfg.sweep_etas, cfg.perturb.w_r, cfg.perturb.w_m)
    out = Path(cfg.paths.run) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for res in ev.results:
        normal, anomalous = pipeline.class_means(ev, res.eta)
        rows.append([repr(res.eta), repr(res.auroc), repr(normal), repr(anomalous)])
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eta", "auroc", "reduction_normal", "reduction_anomalous"])
        w.writerows(rows)
    write_resolved(cfg, out, "sweep-eta")
    for row in rows:
        print(",".join(row))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------
def _parse_etas(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eta list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--out", help="output directory (dataset for gen, run directory otherwise)")
    common.add_argument("--data", help="dataset directory (default from config)")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="statevad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train both branches")
    ev = sub.add_parser("eval", parents=[common], help="score the test split")
    ev.add_argument("--eta", type=float, help="perturbation magnitude")
    ev.add_argument("--eta-compare", action="store_true", help="also report the unperturbed AUROC")
    sw = sub.add_parser("sweep-eta", parents=[common], help="AUROC and error reduction per eta")
    sw.add_argument("--eta", type=_parse_etas, dest="etas", help="comma-separated eta list")
    return parser


def _set_threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "threads": args.threads, "data": args.data}
    if args.command == "gen":
        overrides["data"] = args.out or args.data
    else:
        overrides["run"] = args.out
    if args.command == "eval":
        overrides["eta"] = args.eta
    if args.command == "sweep-eta":
        overrides["sweep_etas"] = args.etas
    try:
        cfg = load_run_config(args.config, overrides)
        with _set_threads(cfg.threads):
            if args.command == "gen":
                return cmd_gen(cfg, args.force)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.eta_compare)
            return cmd_sweep_eta(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, trainer.CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except trainer.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
