#!/usr/bin/env python3
"""
dualshift command-line entry point

Commands:
    make-synthetic  write a procedural 10-class texture dataset (train/test)
    train-gallery   train the surrogate checkpoint gallery
    generate        build the unlearnable copy of the training set
    evaluate        train victims under defenses and write the accuracy report
    sweep           evaluate one dataset over adaptive-defense noise grids
    describe        print a summary of a dataset directory

Usage Examples:
    # Desk-scale data without downloads
    python cli.py make-synthetic --out data/textures

    # Gallery, generation and evaluation from one config
    python cli.py train-gallery --config run.yaml
    python cli.py generate --config run.yaml --jobs 1
    python cli.py evaluate --config run.yaml --defense none --defense jpeg:quality=10

    # Ablation: colour branch only, single surrogate
    python cli.py generate --config run.yaml --no-sb --no-uee

Exit status is 0 on success, 1 on a runtime failure and 2 on a
configuration or validation error.
"""

import logging
import os
import sys
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import torch
import yaml
from prettytable import PrettyTable
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dualshift import config
from dualshift.data_io import (DatasetManifest, LabeledDataset, export_unlearnable_dataset, load_dataset,
                               make_synthetic_dataset, read_manifest)
from dualshift.defenses import DefenseConfig, parse_defense
from dualshift.errors import ErrorCode, ToolkitError
from dualshift.eval_harness import run_matrix
from dualshift.generator import GeneratorConfig, build_manifest, generate_unlearnable_dataset
from dualshift.model_zoo import TrainSpec, build_gallery, load_gallery, save_gallery

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

SCALE_PRESETS = {
    "desk": config.DESK_TRAIN,
    "paper": config.PAPER_TRAIN,
}


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                  RUN CONFIG                                  #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: str
    test: Optional[str] = None
    limit_per_class: Optional[int] = Field(None, ge=1)
    test_limit_per_class: Optional[int] = Field(None, ge=1)


class GallerySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    size: int = Field(config.DEFAULT_GALLERY_SIZE, ge=1)
    diversity: Literal["seeds", "epochs"] = "seeds"
    dir: str = "gallery"


def _as_defense(value: Union[str, Dict[str, Any], DefenseConfig]) -> DefenseConfig:
    if isinstance(value, str):
        return parse_defense(value)
    if isinstance(value, dict):
        return DefenseConfig.model_validate(value)
    return value


class EvaluateSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # variant name -> dataset directory; "clean" is the configured training set
    variants: Dict[str, str] = {"clean": "@train", "unlearnable": "@output"}
    defenses: List[DefenseConfig] = [DefenseConfig()]
    archs: List[str] = ["cnn"]
    seeds: List[int] = [0]
    victim: TrainSpec = TrainSpec()
    out_dir: str = "report"

    @field_validator("defenses", mode="before")
    @classmethod
    def _parse_defenses(cls, v):
        return [_as_defense(d) for d in v]


class SweepSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str = "@output"
    random_grid: List[Tuple[float, float]] = [(0.0, 0.0), (0.05, 0.0), (0.0, 0.05), (0.05, 0.05)]
    channel_at_grid: List[Tuple[float, float]] = []
    spatial_noise: Literal["gaussian", "uniform"] = "gaussian"
    out_dir: str = "sweep"


class RunConfig(BaseModel):
    """The YAML run document. Relative paths resolve against ``work_dir``,
    except ``data`` paths, which resolve against ``data_dir``."""
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = config.SCHEMA_VERSION
    work_dir: str = "."
    data_dir: str = "."
    seed: Optional[int] = None
    data: DataSection
    surrogate: TrainSpec = TrainSpec()
    gallery: GallerySection = GallerySection()
    generator: GeneratorConfig = GeneratorConfig()
    output_dir: str = "unlearnable"
    evaluate: EvaluateSection = EvaluateSection()
    sweep: SweepSection = SweepSection()

    def work_path(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.work_dir, path)

    def data_path(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.data_dir, path)

    def dataset_path(self, ref: str) -> str:
        """Resolve ``@train``, ``@output`` or a data directory path."""
        if ref == "@train":
            return self.data_path(self.data.train)
        if ref == "@output":
            return self.work_path(self.output_dir)
        return self.data_path(ref)


def load_run_config(path: str, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """Read the YAML document and apply environment overrides (paths and seed only)."""
    environ = os.environ if environ is None else environ
    try:
        with open(path) as f:
            document = yaml.safe_load(f)
    except OSError as e:
        raise ToolkitError(f"Cannot read config {path}: {e}", ErrorCode.CONFIG_INVALID) from e
    except yaml.YAMLError as e:
        raise ToolkitError(f"Malformed YAML in {path}: {e}", ErrorCode.CONFIG_INVALID) from e
    if not isinstance(document, dict):
        raise ToolkitError(f"{path} must contain a mapping at the top level", ErrorCode.CONFIG_INVALID)

    if environ.get(config.ENV_WORK_DIR):
        document["work_dir"] = environ[config.ENV_WORK_DIR]
    if environ.get(config.ENV_DATA_DIR):
        document["data_dir"] = environ[config.ENV_DATA_DIR]
    if environ.get(config.ENV_SEED):
        try:
            document["seed"] = int(environ[config.ENV_SEED])
        except ValueError as e:
            raise ToolkitError(f"{config.ENV_SEED} must be an integer, got '{environ[config.ENV_SEED]}'",
                               ErrorCode.CONFIG_INVALID) from e
    return RunConfig.model_validate(document)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line flags into the run config, re-validating every section touched."""
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.seed
    surrogate = cfg.surrogate.model_dump()
    generator = cfg.generator.model_dump()
    evaluate = cfg.evaluate.model_dump()

    if seed is not None:
        surrogate["seed"] = seed
        generator["master_seed"] = seed
    if getattr(args, "scale", None):
        surrogate.update(SCALE_PRESETS[args.scale])
        evaluate["victim"].update(SCALE_PRESETS[args.scale])
    if getattr(args, "jobs", None) is not None:
        generator["jobs"] = args.jobs
    if getattr(args, "no_sb", False):
        generator["enable_spatial"] = False
    if getattr(args, "no_cb", False):
        generator["enable_color"] = False
    if getattr(args, "no_uee", False):
        generator["enable_ensemble"] = False
    if getattr(args, "defenses", None):
        evaluate["defenses"] = [parse_defense(d) for d in args.defenses]

    return RunConfig.model_validate({
        **cfg.model_dump(exclude={"surrogate", "generator", "evaluate"}),
        "seed": seed,
        "surrogate": surrogate,
        "generator": generator,
        "evaluate": evaluate,
    })


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                   COMMANDS                                   #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def _train_set(cfg: RunConfig) -> LabeledDataset:
    return load_dataset(cfg.data_path(cfg.data.train), cfg.data.limit_per_class, split="train")


def _test_set(cfg: RunConfig) -> LabeledDataset:
    if not cfg.data.test:
        raise ToolkitError("data.test is required for evaluation", ErrorCode.CONFIG_INVALID)
    return load_dataset(cfg.data_path(cfg.data.test), cfg.data.test_limit_per_class, split="test")


def cmd_train_gallery(cfg: RunConfig, args) -> int:
    dataset = _train_set(cfg)
    gallery = build_gallery(dataset, cfg.surrogate, cfg.gallery.size, cfg.gallery.diversity)
    directory = cfg.work_path(cfg.gallery.dir)
    paths = save_gallery(gallery, directory)
    LOG.info(f"Wrote {len(paths)} checkpoints to {directory}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    dataset = _train_set(cfg)
    gallery = load_gallery(cfg.work_path(cfg.gallery.dir))
    generator = cfg.generator
    if generator.rule.k != dataset.k:
        generator = GeneratorConfig.model_validate(
            {**generator.model_dump(), "rule": {**generator.rule.model_dump(), "k": dataset.k}})

    unlearnable, record = generate_unlearnable_dataset(dataset, generator, gallery)
    dest = cfg.work_path(cfg.output_dir)
    export_unlearnable_dataset(unlearnable, build_manifest(unlearnable, record, generator), dest)
    with open(os.path.join(dest, config.RECORD_NAME), "w") as f:
        f.write(record.model_dump_json(indent=2))
    LOG.info(f"Unlearnable dataset written to {dest}")
    return EXIT_OK


def _report(report, out_dir: str) -> int:
    report.write(out_dir)
    print(report.summary_table())
    if report.failures:
        LOG.warning(f"{len(report.failures)} cell(s) failed; see {os.path.join(out_dir, config.AGGREGATE_NAME)}")
    return EXIT_OK if report.succeeded >= 1 else EXIT_RUNTIME


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ev = cfg.evaluate
    variants = {name: load_dataset(cfg.dataset_path(ref), cfg.data.limit_per_class)
                for name, ref in ev.variants.items()}
    report = run_matrix(variants, _test_set(cfg), ev.defenses, ev.victim, ev.seeds, ev.archs,
                        out_dir=cfg.work_path(ev.out_dir))
    return _report(report, cfg.work_path(ev.out_dir))


def sweep_defenses(sweep: SweepSection) -> List[DefenseConfig]:
    defenses = [DefenseConfig(kind="adaptive_random", r_c=r_c, r_s=r_s, spatial_noise=sweep.spatial_noise)
                for r_c, r_s in sweep.random_grid]
    defenses += [DefenseConfig(kind="adaptive_channel_at", q_c=q_c, q_s=q_s)
                 for q_c, q_s in sweep.channel_at_grid]
    if not defenses:
        raise ToolkitError("sweep needs a non-empty random_grid or channel_at_grid", ErrorCode.CONFIG_INVALID)
    return defenses


def cmd_sweep(cfg: RunConfig, args) -> int:
    ev, sw = cfg.evaluate, cfg.sweep
    name = os.path.basename(os.path.normpath(cfg.dataset_path(sw.variant)))
    variants = {name: load_dataset(cfg.dataset_path(sw.variant), cfg.data.limit_per_class)}
    report = run_matrix(variants, _test_set(cfg), sweep_defenses(sw), ev.victim, ev.seeds, ev.archs,
                        out_dir=cfg.work_path(sw.out_dir))
    return _report(report, cfg.work_path(sw.out_dir))


def cmd_make_synthetic(args) -> int:
    for split, per_class, seed in (("train", args.per_class, args.seed), ("test", args.test_per_class, args.seed + 1)):
        dataset = make_synthetic_dataset(args.k, per_class, args.size, seed, name=f"textures-{split}")
        export_unlearnable_dataset(dataset, DatasetManifest.for_dataset(dataset), os.path.join(args.out, split))
    LOG.info(f"Synthetic dataset written to {args.out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    manifest = read_manifest(args.path)
    table = PrettyTable(["Field", "Value"])
    table.align = "l"
    table.add_row(["name", manifest.name])
    table.add_row(["classes", manifest.k])
    table.add_row(["samples", manifest.sample_count])
    table.add_row(["image shape", "x".join(map(str, manifest.image_shape))])
    table.add_row(["raw sidecar", manifest.raw_sidecar or "-"])
    counts: Dict[int, int] = {}
    for s in manifest.samples:
        counts[s.label] = counts.get(s.label, 0) + 1
    table.add_row(["per class", ", ".join(f"{p}:{counts.get(p, 0)}" for p in range(manifest.k))])
    if manifest.perturbation is not None:
        p = manifest.perturbation
        table.add_row(["epsilon", f"{p.epsilon:.6f} ({p.epsilon * 255:.2f}/255)"])
        table.add_row(["delta_y", p.delta_y])
        for cls_id, (dr, dg, db) in sorted(p.color_offsets.items()):
            table.add_row([f"offset[{cls_id}]", f"({dr:+.4f}, {dg:+.4f}, {db:+.4f})"])
    print(table)
    return EXIT_OK


# Command name: (handler, needs run config)
COMMANDS: Dict[str, Tuple[Callable, bool]] = {
    "train-gallery": (cmd_train_gallery, True),
    "generate": (cmd_generate, True),
    "evaluate": (cmd_evaluate, True),
    "sweep": (cmd_sweep, True),
    "make-synthetic": (cmd_make_synthetic, False),
    "describe": (cmd_describe, False),
}


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                     MAIN                                     #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def _add_run_flags(parser) -> None:
    parser.add_argument("-c", "--config", action="store", dest="config", required=True,
                        help="YAML run config")
    parser.add_argument("-j", "--jobs", action="store", dest="jobs", type=int, default=None,
                        help="Worker count; 1 pins torch to one thread for bit-exact reruns")
    parser.add_argument("--seed", action="store", dest="seed", type=int, default=None,
                        help="Master seed (overrides the config and DUALSHIFT_SEED)")
    parser.add_argument("--no-sb", action="store_true", dest="no_sb", help="Disable the spatial branch")
    parser.add_argument("--no-cb", action="store_true", dest="no_cb", help="Disable the colour branch")
    parser.add_argument("--no-uee", action="store_true", dest="no_uee",
                        help="Use only the first gallery member instead of the ensemble")
    parser.add_argument("--defense", action="append", dest="defenses", default=None,
                        help="Defense as kind[:key=value,...]; repeatable")
    scale = parser.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_const", const="desk", dest="scale",
                       help="Training preset: 20 epochs, lr 0.01")
    scale.add_argument("--paper-scale", action="store_const", const="paper", dest="scale",
                       help="Training preset: 80 epochs, lr 0.1")


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog=config.APP_NAME)
    parser.add_argument("-d", "--debug", action="store_true", dest="debug", help="Enable debug output")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train-gallery", "generate", "evaluate", "sweep"):
        _add_run_flags(sub.add_parser(name))

    synth = sub.add_parser("make-synthetic")
    synth.add_argument("-o", "--out", action="store", dest="out", required=True, help="Output directory")
    synth.add_argument("--k", action="store", dest="k", type=int, default=10)
    synth.add_argument("--per-class", action="store", dest="per_class", type=int, default=500)
    synth.add_argument("--test-per-class", action="store", dest="test_per_class", type=int, default=100)
    synth.add_argument("--size", action="store", dest="size", type=int, default=32)
    synth.add_argument("--seed", action="store", dest="seed", type=int, default=0)

    describe = sub.add_parser("describe")
    describe.add_argument("path", help="Dataset directory containing manifest.json")
    return parser


def run_command(args) -> int:
    """Dispatch one command and map failures to exit codes."""
    handler, needs_config = COMMANDS[args.command]
    try:
        if getattr(args, "jobs", None) == 1:
            torch.set_num_threads(1)
        if needs_config:
            cfg = apply_overrides(load_run_config(args.config), args)
            return handler(cfg, args)
        return handler(args)
    except ValidationError as e:
        LOG.error(f"Invalid configuration for '{args.command}': {e}")
        return EXIT_CONFIG
    except ToolkitError as e:
        LOG.error(f"{e.error_code} in '{args.command}': {e}")
        return EXIT_CONFIG if e.error_code in ErrorCode.CONFIG_CODES else EXIT_RUNTIME
    except Exception as e:
        LOG.error(f"Error executing '{args.command}': {e}")
        LOG.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.debug:
        logging.basicConfig(level=logging.DEBUG)
    else:
        logging.basicConfig(level=logging.INFO)

    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
