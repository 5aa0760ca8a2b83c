"""Command-line surface: ``python -m sfpp <synth|train|track|eval|gradcheck|ablate>``.

Every config key is also a flag (``--section.key VALUE``); flags override the
``--config`` file and ``SFPP_SEED`` overrides both for the seed.  Failures
print one line ``sfpp-error category=<name> exit=<code> message="..."`` on
stderr and exit with the category's code.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence as Seq

from . import __version__
from .config import ConfigError, RunConfig, config_json, format_value, keys, load_config, write_resolved
from .evaluation import (VARIANTS, AblationSetup, ablation_table, aggregate, eval_sequence, run_variant,
                         write_summary, write_table_csv, write_variant_artifacts)
from .gradcheck import run_gradcheck
from .model import init_model
from .synth import load_sequence, make_world, save_sequence, scale_ratio_stats, write_stats_csv
from .tracker import ModelPredictor, dump_score_map, read_results_csv, track_sequence, write_results_csv
from .train import (CheckpointError, TrainingDiverged, load_checkpoint, make_sampler, model_from_checkpoint,
                    save_checkpoint, train)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5
EXIT_FORMAT = 6
EXIT_CHECK_FAILED = 7

log = logging.getLogger("sfpp")


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def error_line(category: str, code: int, message: str) -> str:
    msg = " ".join(str(message).split()).replace('"', "'")
    return f'sfpp-error category={category} exit={code} message="{msg}"'


# ----------------------------------------------------------------------------- helpers


def _resolve(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if args.config and not os.path.exists(args.config):
        raise CliError("missing_file", EXIT_MISSING, f"config file not found: {args.config}")
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, ValueError) as exc:
        raise CliError("bad_config", EXIT_CONFIG, str(exc)) from exc
    return cfg.resolved()


def _need(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise CliError("missing_file", EXIT_MISSING, f"{what} not found: {path}")


def _sequence_dirs(path: str) -> List[str]:
    """A sequence directory itself, or the sorted sequence directories inside it."""
    _need(path, "sequence path")
    if os.path.exists(os.path.join(path, "groundtruth.csv")):
        return [path]
    subs = sorted(d for d in os.listdir(path) if os.path.exists(os.path.join(path, d, "groundtruth.csv")))
    if not subs:
        raise CliError("missing_file", EXIT_MISSING, f"no sequence directories under {path}")
    return [os.path.join(path, d) for d in subs]


def _load_model(path: str):
    _need(path, "checkpoint")
    try:
        ckpt = load_checkpoint(path)
        return model_from_checkpoint(ckpt), ckpt
    except CheckpointError as exc:
        raise CliError("bad_checkpoint", EXIT_FORMAT, str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("bad_checkpoint", EXIT_FORMAT, f"checkpoint does not match its config: {exc}") from exc


# ----------------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out_dir: str, split: str = "train") -> List[str]:
    seed = cfg.run.world_seed if split == "train" else cfg.run.test_seed
    n = cfg.run.train_sequences if split == "train" else cfg.run.test_sequences
    seqs = make_world(seed, n, cfg.world)
    paths = []
    for k, seq in enumerate(seqs):
        p = os.path.join(out_dir, f"seq_{k:03d}")
        save_sequence(seq, p)
        paths.append(p)
    write_stats_csv(scale_ratio_stats(seqs), os.path.join(out_dir, "scale_ratio_stats.csv"))
    write_resolved(cfg, out_dir)
    return paths


def cmd_train(cfg: RunConfig, out_checkpoint: str, data: Optional[str] = None,
              log_path: Optional[str] = None) -> str:
    if data:
        seqs = [load_sequence(d) for d in _sequence_dirs(data)]
    else:
        seqs = make_world(cfg.run.world_seed, cfg.run.train_sequences, cfg.world)
    out_dir = os.path.dirname(os.path.abspath(out_checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    model = init_model(cfg.model, cfg.run.seed)
    sampler = make_sampler(seqs, cfg.world, cfg.run.seed)
    velocity: Dict = {}
    log_path = log_path or os.path.join(out_dir, "loss_log.csv")
    try:
        history = train(model, sampler, cfg.train, cfg.loss, log_path=log_path,
                        dump_dir=os.path.join(out_dir, "diverged"), velocity=velocity)
    except TrainingDiverged as exc:
        where = f" (batch dumped to {exc.dump_path})" if exc.dump_path else ""
        raise CliError("diverged", EXIT_DIVERGED, f"{exc}{where}") from exc
    save_checkpoint(out_checkpoint, model, velocity, step=len(history),
                    config={"model": dataclasses.asdict(cfg.model), "run": config_json(cfg)})
    write_resolved(cfg, out_dir)
    return out_checkpoint


def _track_job(job):
    model, seq_dir, out_dir, postproc, context, dump = job
    seq = load_sequence(seq_dir)
    res = track_sequence(ModelPredictor(model, context), seq, postproc, keep_maps=dump)
    os.makedirs(out_dir, exist_ok=True)
    write_results_csv(os.path.join(out_dir, "results.csv"), res)
    if dump:
        for tel in res.telemetry:
            dump_score_map(os.path.join(out_dir, "maps"), tel.frame, tel.scores)
    return out_dir


def cmd_track(cfg: RunConfig, checkpoint: str, sequences: str, out_dir: str,
              dump_maps: bool = False, jobs: int = 1) -> List[str]:
    model, _ = _load_model(checkpoint)
    dirs = _sequence_dirs(sequences)
    single = len(dirs) == 1 and os.path.abspath(dirs[0]) == os.path.abspath(sequences)
    jobs_list = [(model, d, out_dir if single else os.path.join(out_dir, os.path.basename(d)),
                  cfg.postproc, cfg.world.context, dump_maps) for d in dirs]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_track_job, jobs_list))
    else:
        outs = [_track_job(j) for j in jobs_list]
    write_resolved(cfg, out_dir)
    return outs


def _pairs(results: str, groundtruth: str):
    _need(results, "results path")
    _need(groundtruth, "groundtruth path")
    if os.path.isfile(results):
        gt = groundtruth if os.path.isfile(groundtruth) else os.path.join(groundtruth, "groundtruth.csv")
        _need(gt, "groundtruth file")
        return [("sequence", results, gt)]
    if os.path.exists(os.path.join(results, "results.csv")):
        gt = groundtruth if os.path.isfile(groundtruth) else os.path.join(groundtruth, "groundtruth.csv")
        _need(gt, "groundtruth file")
        return [(os.path.basename(os.path.normpath(results)), os.path.join(results, "results.csv"), gt)]
    out = []
    for name in sorted(os.listdir(results)):
        r = os.path.join(results, name, "results.csv")
        if os.path.exists(r):
            g = os.path.join(groundtruth, name, "groundtruth.csv")
            _need(g, "groundtruth file")
            out.append((name, r, g))
    if not out:
        raise CliError("missing_file", EXIT_MISSING, f"no results.csv files under {results}")
    return out


def cmd_eval(results: str, groundtruth: str, out_dir: str, cfg: Optional[RunConfig] = None):
    from .synth import read_groundtruth
    reports = []
    rows = []
    for name, r, g in _pairs(results, groundtruth):
        try:
            rep = eval_sequence(read_results_csv(r), read_groundtruth(g))
        except ValueError as exc:
            raise CliError("bad_input", EXIT_FORMAT, f"{name}: {exc}") from exc
        reports.append(rep)
        rows.append({"sequence": name, **rep.summary()})
    total = aggregate(reports)
    os.makedirs(out_dir, exist_ok=True)
    write_table_csv(os.path.join(out_dir, "per_sequence.csv"), rows)
    write_summary(os.path.join(out_dir, "summary.txt"),
                  {"sequences": len(reports), **total.summary(),
                   "note": "first frame excluded; failures are frames with IoU 0"})
    if cfg is not None:
        write_resolved(cfg, out_dir)
    return total


def cmd_gradcheck(cfg: RunConfig, out=None) -> bool:
    out = out or sys.stdout
    checks = run_gradcheck(cfg.run.grad_instances, cfg.run.seed)
    worst = max(c.max_rel_err for c in checks)
    ok = all(c.passed for c in checks)
    for c in checks:
        print(f"{c.op}: {'pass' if c.passed else 'FAIL'} max_rel_err={c.max_rel_err:.3e} "
              f"instances={c.instances}", file=out)
    print(f"{'pass' if ok else 'FAIL'} max_rel_err={worst:.3e}", file=out)
    return ok


def cmd_ablate(cfg: RunConfig, out_dir: str, variants: Seq[str] = tuple(VARIANTS), jobs: int = 1):
    setup = AblationSetup(world=cfg.world, model=cfg.model, loss=cfg.loss, train=cfg.train,
                          postproc=cfg.postproc, train_sequences=cfg.run.train_sequences,
                          test_sequences=cfg.run.test_sequences, world_seed=cfg.run.world_seed,
                          test_seed=cfg.run.test_seed, model_seed=cfg.run.seed)
    train_seqs = make_world(setup.world_seed, setup.train_sequences, setup.world)
    test_seqs = make_world(setup.test_seed, setup.test_sequences, setup.world)
    rows = []
    os.makedirs(out_dir, exist_ok=True)
    for name in variants:
        if name not in VARIANTS:
            raise CliError("bad_config", EXIT_CONFIG, f"unknown variant {name!r}")
        res = run_variant(name, setup, train_seqs, test_seqs, jobs)
        write_variant_artifacts(out_dir, res)
        rows.append(res)
    table = ablation_table(rows)
    write_table_csv(os.path.join(out_dir, "ablation.csv"), table)
    summary: Dict[str, object] = {}
    for r, row in zip(rows, table):
        for k, v in row.items():
            if k != "variant":
                summary[f"{r.name}.{k}"] = v
        if r.anchor is not None:
            summary[f"{r.name}.mean_iou_pred_gt"] = r.anchor.mean_pred_gt
            summary[f"{r.name}.mean_iou_anchor_gt"] = r.anchor.mean_anchor_gt
            summary[f"{r.name}.mean_iou_pred_anchor"] = r.anchor.pred_vs_anchor_mean
    write_summary(os.path.join(out_dir, "summary.txt"), summary)
    write_resolved(cfg, out_dir)
    return table


# ----------------------------------------------------------------------------- parser


def _key_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("config keys (override the --config file)")
    for sec, key, val in keys(RunConfig()):
        g.add_argument(f"--{sec}.{key}", dest=f"{sec}.{key}", metavar="V", default=None,
                       help=f"(default: {format_value(val)})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m sfpp", description="Desk-scale anchor-free siamese tracker.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", default=None, help="INI-style config file (default: none)")
        return sp

    sp = add("synth", "render a synthetic world to sequence directories")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--split", choices=("train", "test"), default="train",
                    help="which seed/count pair to use (default: train)")
    _key_flags(sp)

    sp = add("train", "train a model and write a checkpoint plus loss log")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--data", default=None, help="sequence directory (default: generate from run.world_seed)")
    sp.add_argument("--log", default=None, help="loss CSV (default: loss_log.csv next to the checkpoint)")
    _key_flags(sp)

    sp = add("track", "track sequences with a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint path")
    sp.add_argument("--sequences", required=True, help="a sequence directory or a directory of them")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--dump-maps", action="store_true", help="write per-frame score maps (CSV + PGM)")
    sp.add_argument("--jobs", type=int, default=None, help="parallel sequences (default: run.jobs)")
    _key_flags(sp)

    sp = add("eval", "score results against ground truth")
    sp.add_argument("--results", required=True, help="results.csv or a directory of per-sequence results")
    sp.add_argument("--groundtruth", required=True, help="groundtruth.csv or a directory of sequences")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--jobs", type=int, default=None, help="accepted for symmetry; evaluation is cheap")
    _key_flags(sp)

    sp = add("gradcheck", "finite-difference check of every op and the full objective")
    _key_flags(sp)

    sp = add("ablate", "train and compare head variants under shared seeds")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--variants", default=",".join(VARIANTS),
                    help=f"comma-separated subset (default: {','.join(VARIANTS)})")
    sp.add_argument("--jobs", type=int, default=None, help="parallel sequences during evaluation")
    _key_flags(sp)
    return p


def run(argv: Optional[Seq[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve(args)
    jobs = getattr(args, "jobs", None) or cfg.run.jobs
    if args.command == "synth":
        paths = cmd_synth(cfg, args.out, args.split)
        print(f"wrote {len(paths)} sequences to {args.out}")
    elif args.command == "train":
        cmd_train(cfg, args.out, args.data, args.log)
        print(f"wrote checkpoint {args.out}")
    elif args.command == "track":
        outs = cmd_track(cfg, args.checkpoint, args.sequences, args.out, args.dump_maps, jobs)
        print(f"tracked {len(outs)} sequences into {args.out}")
    elif args.command == "eval":
        rep = cmd_eval(args.results, args.groundtruth, args.out, cfg)
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in rep.summary().items()))
    elif args.command == "gradcheck":
        if not cmd_gradcheck(cfg):
            raise CliError("gradcheck_failed", EXIT_CHECK_FAILED, "finite-difference check failed")
    elif args.command == "ablate":
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        table = cmd_ablate(cfg, args.out, variants, jobs)
        for row in table:
            print(f"{row['variant']}: AO={row['AO']:.4f} SR@0.5={row['SR@0.5']:.4f} "
                  f"KS={row['ks_success_failure']:.4f}")
    return EXIT_OK


def main(argv: Optional[Seq[str]] = None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(error_line(exc.category, exc.code, str(exc)), file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(error_line("missing_file", EXIT_MISSING, str(exc)), file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(error_line("bad_checkpoint", EXIT_FORMAT, str(exc)), file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        print(error_line("diverged", EXIT_DIVERGED, str(exc)), file=sys.stderr)
        return EXIT_DIVERGED
