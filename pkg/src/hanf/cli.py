"""``hanf`` command line: run the search stage, the evaluation stage, or both.

    hanf search --config exp.json [--seed N] [--out DIR]
    hanf eval   --config exp.json --genotype genotype.json [--seed N] [--out DIR]
    hanf both   --config exp.json [--seed N] [--out DIR]

Artifacts written to the output directory:

    config.json                  resolved configuration (all defaults filled in)
    genotype.json                best genotype of the search stage
    search_round_trace.csv       per (round, client) records plus a server row per round
    search_reward_trace.csv      one row per probe round
    eval_round_trace.csv, eval_reward_trace.csv
    metrics.json                 final / best accuracies per stage
    hanf.log                     progress log (timings; not part of the determinism contract)
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig, IdxData
from .data import Dataset, IdxFormatError, SynthSpec, downsample, load_idx, synth_dataset
from .fedsim import StageSettings, partition_iid, partition_label_skew, run_eval_stage, run_search_stage
from .supernet import CellSpec, Genotype, NetworkSpec

log = logging.getLogger("hanf")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hanf", description="Joint hyperparameter and architecture search over "
                                                          "simulated federated clients.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("search", "run the architecture search stage"),
        ("eval", "train an evaluation network from a genotype"),
        ("both", "search, then evaluate the best genotype"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("-q", "--quiet", action="store_true", help="only log warnings to stderr")
        if name == "eval":
            p.add_argument("--genotype", help="genotype JSON produced by the search stage")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    changes = {"stage": args.command}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if getattr(args, "genotype", None) is not None:
        changes["genotype"] = args.genotype
    elif args.command != "eval":
        changes["genotype"] = None
    cfg = cfg.replace(**changes)
    if cfg.genotype:
        try:
            Genotype.load(cfg.genotype).validate()
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigError("genotype", f"{cfg.genotype} is not a valid genotype ({err})") from None
    return cfg


# -- data -----------------------------------------------------------------------------


def _subset(ds: Dataset, count: int | None, rng: np.random.Generator) -> Dataset:
    if count is None or count >= len(ds):
        return ds
    return ds.subset(np.sort(rng.permutation(len(ds))[:count]))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    """The pool the clients split, and an optional held-out test set."""
    d = cfg.dataset
    if isinstance(d, IdxData):
        rng = np.random.default_rng([cfg.seed, 11])
        train = load_idx(d.train_images, d.train_labels, d.num_classes)
        test = load_idx(d.test_images, d.test_labels, d.num_classes) if d.test_images else None
        train = _subset(train, d.train_samples, rng)
        if test is not None:
            test = _subset(test, d.test_samples, rng)
        if d.downsample:
            train = downsample(train, d.downsample)
            test = downsample(test, d.downsample) if test is not None else None
        return train, test
    spec = SynthSpec(d.samples + d.test_samples, d.classes, d.size, d.channels, d.sigma)
    full = synth_dataset(spec, cfg.seed)
    if d.test_samples == 0:
        return full, None
    return full.subset(np.arange(d.samples)), full.subset(np.arange(d.samples, len(full)))


def make_shards(cfg: ExperimentConfig, ds: Dataset):
    p = cfg.partition
    if p.mode == "iid":
        return partition_iid(ds, cfg.clients, cfg.seed, cfg.val_fraction)
    return partition_label_skew(ds, cfg.clients, p.fraction, p.label, cfg.seed, cfg.val_fraction)


def stage_settings(cfg: ExperimentConfig, stage) -> StageSettings:
    b = cfg.bandit
    return StageSettings(
        rounds=stage.rounds,
        exploit_rounds=stage.exploit_rounds,
        batch_size=stage.batch_size,
        space_size=b.space_size,
        alpha=b.alpha,
        beta=b.beta,
        literal_unsampled=b.literal_unsampled,
        max_ho_rounds=b.max_ho_rounds,
        clip_norm=cfg.clip_norm,
        seed=cfg.seed,
    )


# -- stages -----------------------------------------------------------------------------


def _clean(metrics: dict) -> dict:
    # wall-clock time goes to the log only, so metrics files are reproducible
    out = {k: v for k, v in metrics.items() if k != "seconds"}
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}


def run(cfg: ExperimentConfig) -> dict:
    """Execute the configured stage(s) and write every artifact; returns the metrics."""
    out = Path(cfg.output_dir)
    ds, test = load_data(cfg)
    shards = make_shards(cfg, ds)
    in_ch = ds.images.shape[1]
    log.info(
        "data: %d samples, %d classes, %s per image; %d clients (%s), val sizes %s",
        len(ds), ds.num_classes, ds.images.shape[1:], len(shards), cfg.partition.mode,
        [s.n_val for s in shards],
    )
    metrics: dict = {}
    (out / "config.json").write_text(cfg.to_json())

    genotype = Genotype.load(cfg.genotype) if cfg.genotype else None
    if cfg.stage in ("search", "both"):
        s = cfg.search
        net = NetworkSpec(s.cells, s.channels, ds.num_classes, in_ch)
        t0 = time.perf_counter()
        res = run_search_stage(shards, stage_settings(cfg, s), net, CellSpec(nodes=s.nodes), k=s.k)
        log.info("search stage: %d rounds in %.1fs", res.state.round, time.perf_counter() - t0)
        genotype = res.genotype
        genotype.save(out / "genotype.json")
        res.round_trace.write(out / "search_round_trace.csv")
        res.reward_trace.write(out / "search_reward_trace.csv")
        metrics["search"] = _clean(res.metrics)
    if cfg.stage in ("eval", "both"):
        e = cfg.eval
        net = NetworkSpec(e.cells, e.channels, ds.num_classes, in_ch)
        xy = (test.images, test.labels) if test is not None else None
        t0 = time.perf_counter()
        res = run_eval_stage(genotype, shards, stage_settings(cfg, e), net, test=xy)
        log.info("eval stage: %d rounds in %.1fs", res.state.round, time.perf_counter() - t0)
        res.round_trace.write(out / "eval_round_trace.csv")
        res.reward_trace.write(out / "eval_reward_trace.csv")
        metrics["eval"] = _clean(res.metrics)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def _setup_logging(out: Path | None, quiet: bool) -> None:
    root = logging.getLogger("hanf")
    root.setLevel(logging.INFO)
    root.handlers.clear()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING if quiet else logging.INFO)
    console.setFormatter(fmt)
    root.addHandler(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "hanf.log", mode="w")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_hint = Path(args.out) if args.out else None
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        _setup_logging(out_hint, args.quiet)
        log.error("invalid configuration: %s", err)
        return 2
    _setup_logging(Path(cfg.output_dir), args.quiet)
    log.info("stage %s, seed %d, output %s", cfg.stage, cfg.seed, cfg.output_dir)
    try:
        metrics = run(cfg)
    except (IdxFormatError, FileNotFoundError) as err:
        log.error("data error: %s", err)
        return 2
    except ValueError as err:
        log.error("run failed: %s", err)
        return 1
    for stage, m in metrics.items():
        log.info("%s: %s", stage, json.dumps(m, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
