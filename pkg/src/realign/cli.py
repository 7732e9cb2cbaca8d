"""Command-line entry point: ``realign <command> [options]``.

Commands: curate, train, eval, ablate, sweep, perturb, gradcheck.

Exit codes
  0  success
  2  configuration error (bad/missing config, bad flags, unusable inputs)
  3  empty pipeline (a curation stage removed every item)
  4  numeric failure (non-finite loss or gradient; a failure dump is written)
  5  tolerance failure (gradient check, or an unmet expectation under --strict)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from realign import __version__
from realign.config import PRESETS, ConfigError, Pipeline, PipelineConfig, dataset_from_result, dump_config, load_config
from realign.curation import EmptyPipelineError, ManifestError, load_manifest, manifest_hash, write_manifest
from realign.diffusion import NonFiniteError, load_denoiser
from realign.evaluation import (AblationGrid, EvalReport, data_size_sweep, distribution_alignment, plot_report,
                                perturbation_ablation, run_ablation, sliced_wasserstein, win_rate)
from realign.io import ContainerError, sha256_file, write_json
from realign.training import Checkpoint, gradient_check, run_stage1, run_stage2

log = logging.getLogger("realign")

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4, 5


class ToleranceFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Run directories and manifests
# --------------------------------------------------------------------------


class Run:
    """A run directory with its ``run.json`` manifest.

    The manifest is written atomically when the run starts (status "running",
    planned outputs) and rewritten when it ends, with the SHA-256 of every
    produced output. A planned output that is missing fails the run.
    """

    def __init__(self, command: str, args, cfg: PipelineConfig):
        root = args.out or os.path.join(os.environ.get("REALIGN_OUT_DIR", "runs"), command)
        self.dir = Path(root)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.doc = {
            "command": command,
            "tool_version": __version__,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "inputs": {},
            "outputs": [],
            "volatile_outputs": [],
            "status": "running",
        }
        (self.dir / "config.yaml").write_text(dump_config(cfg))
        self.plan("config.yaml")

    def input(self, name: str, path):
        path = Path(path)
        digest = manifest_hash(path) if path.is_dir() else sha256_file(path)
        self.doc["inputs"][name] = {"path": str(path), "sha256": digest}

    def plan(self, *names, volatile: bool = False):
        key = "volatile_outputs" if volatile else "outputs"
        for n in names:
            if n not in self.doc[key]:
                self.doc[key].append(n)

    def write(self):
        write_json(self.dir / "run.json", self.doc)

    def finish(self, status: str = "ok"):
        missing = [n for n in self.doc["outputs"] + self.doc["volatile_outputs"] if not (self.dir / n).exists()]
        if missing and status == "ok":
            status = "missing outputs: " + ", ".join(missing)
        self.doc["status"] = status
        self.doc["output_sha256"] = {n: sha256_file(self.dir / n) for n in self.doc["outputs"]
                                     if (self.dir / n).is_file()}
        self.write()
        if missing:
            raise RuntimeError(f"run did not produce {missing}")


def _resolve(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, args.preset, overrides)
    if args.cache_dir is not None:
        cfg.cache_dir = args.cache_dir
    return cfg


def _save_report(run: Run, report: EvalReport, no_plots: bool, x_values=None) -> Path:
    path = report.save(run.dir)
    run.plan("report.json", "report.raws.bin")
    run.plan("report.timestamps.json", volatile=True)
    if not no_plots:
        for metric in report.metrics:
            plot = plot_report(report, run.dir, metric, x_values)
            run.plan(plot.name)
    print(report.format_table())
    return path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _write_curation(run: Run, pipe: Pipeline, mode: str):
    result = pipe.curate(mode)
    out = run.dir / "curation"
    write_manifest(out, result, pipe.curation_config(mode), pipe.world.curation_scorer.name,
                   {"mode": mode, "world": pipe.cfg.world.digest()})
    run.plan("curation/manifest.json", "curation/pairs.bin")
    return result, out


def cmd_curate(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    run.write()
    result, out = _write_curation(run, pipe, args.mode)
    print("stage counts: " + ", ".join(f"{k}={v}" for k, v in result.stage_counts.items()))
    print(f"tau={result.tau:.6g} ({result.tau_source})")
    for w in result.warnings:
        print(f"warning: {w}")
    print(f"manifest: {out / 'manifest.json'}  sha256={manifest_hash(out)}")
    return EXIT_OK


def _training_data(args, pipe: Pipeline, run: Run, stage: int):
    """Stage 1 trains on real samples (curated winners for images); stage 2 needs pairs."""
    if pipe.cfg.world.kind == "points":
        if stage == 2:
            raise ConfigError("stage 2 needs preference pairs; the points world has none")
        x, c = pipe.world.real_samples(4096, seed=2000 + pipe.cfg.seed)
        return x, None, c
    if args.manifest:
        ds = load_manifest(args.manifest, pipe.world.curation_scorer)
        run.input("manifest", Path(args.manifest) if Path(args.manifest).is_dir() else Path(args.manifest).parent)
    else:
        result, out = _write_curation(run, pipe, "inpainting")
        ds = dataset_from_result(result)
    return ds.winners, ds.losers, ds.conds


def _distance(pipe: Pipeline, model) -> float:
    exp = pipe.experiment()
    ref, _ = pipe.world.real_samples(len(exp.eval_conditions()), seed=1000 + pipe.cfg.seed,
                                     labels=np.repeat(np.arange(pipe.world.real.cond_dim), pipe.cfg.eval.per_condition))
    return float(np.mean([sliced_wasserstein(x, ref, pipe.cfg.eval.sw_projections, 0) for x in exp.samples(model)]))


def cmd_train(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    stage = int(args.stage)
    tcfg = cfg.stage1 if stage == 1 else cfg.stage2
    tcfg = replace(tcfg, seed=cfg.seed if args.seed is not None else tcfg.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        run.input("resume", args.resume)
        if resume.stage != tcfg.stage:
            raise ConfigError(f"--resume checkpoint is from {resume.stage}, not {tcfg.stage}")
    if stage == 1:
        start = pipe.world.base
        if args.init:
            start = Checkpoint.load(args.init).params
            run.input("init", args.init)
    else:
        if args.init:
            start = Checkpoint.load(args.init).params
            run.input("init", args.init)
        elif args.from_base:
            start = pipe.world.base
        elif resume is None:
            raise ConfigError("stage 2 starts from a stage-1 checkpoint (--init); pass --from-base to skip stage 1")
        else:
            start = resume.params
    final = f"checkpoints/stage{stage}_final.ckpt"
    run.plan(final, f"logs/stage{stage}.jsonl", "train_summary.json")
    run.write()
    x_w, x_l, c = _training_data(args, pipe, run, stage)
    if stage == 1:
        result = run_stage1(start, x_w, c, tcfg, pipe.schedule, run_dir=run.dir, resume=resume)
    else:
        result = run_stage2(start, x_w, x_l, c, tcfg, pipe.schedule, run_dir=run.dir, resume=resume)
    result.checkpoint(tcfg, pipe.schedule).save(run.dir / final)
    log_path = run.dir / "logs" / f"stage{stage}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.touch()
    summary = {"stage": tcfg.stage, "steps": result.step, "final_checkpoint": final}
    if result.history:
        summary["final_loss"] = result.history[-1]["loss"]
    if stage == 1:
        before, after = _distance(pipe, start), _distance(pipe, result.params)
        summary["sliced_wasserstein"] = {"before": before, "after": after,
                                         "relative_drop": 1.0 - after / before if before > 0 else 0.0}
        print(f"sliced Wasserstein to held-out real: {before:.4f} -> {after:.4f} "
              f"({100 * summary['sliced_wasserstein']['relative_drop']:.1f}% drop)")
    write_json(run.dir / "train_summary.json", summary)
    print(f"checkpoint: {run.dir / final}")
    return EXIT_OK


def _load_model(path, pipe: Pipeline):
    if path is None:
        return pipe.world.base, "base"
    try:
        return Checkpoint.load(path).params, Path(path).stem
    except KeyError:
        return load_denoiser(path)[0], Path(path).stem


def cmd_eval(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    model, name = _load_model(args.model, pipe)
    other, other_name = _load_model(args.against, pipe)
    for key, path in (("model", args.model), ("against", args.against)):
        if path:
            run.input(key, path)
    run.write()
    exp = pipe.experiment()
    ids = [name, other_name] if name != other_name else [name, f"{other_name} (again)"]
    report = EvalReport("eval", ids, ["preference", "win_rate"], list(exp.eval.generation_seeds))
    samples = {ids[0]: exp.samples(model), ids[1]: exp.samples(other)}
    for k, seed in enumerate(exp.eval.generation_seeds):
        for row, m, o in ((ids[0], model, other), (ids[1], other, model)):
            x = samples[row][k]
            report.record(row, "preference", float(exp.scorer.score(x, exp.eval_conditions()).mean()))
            report.record(row, "win_rate", win_rate(m, o, exp.conditions, exp.scorer, exp.eval.per_condition, seed,
                                                    exp.schedule, exp.eval.sampling_steps, exp.eval.guidance_scale,
                                                    exp.clip_x0))
    _save_report(run, report, args.no_plots)
    return EXIT_OK


def _strict(args, report: EvalReport) -> int:
    exp = report.metadata.get("expectation", {})
    print(f"expectation: {exp.get('expected')} -> {'met' if exp.get('satisfied') else 'NOT met'}")
    if args.strict and exp.get("satisfied") is False:
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    run.write()
    result, out = _write_curation(run, pipe, "inpainting")
    grid = AblationGrid(dataset_from_result(result), cfg.ablation_seeds, manifest_hash=manifest_hash(out))
    report = run_ablation(grid, pipe.experiment(run.dir))
    _save_report(run, report, args.no_plots)
    return _strict(args, report)


def cmd_sweep(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    run.write()
    result, _ = _write_curation(run, pipe, "inpainting")
    report = data_size_sweep(cfg.sweep_sizes, pipe.experiment(run.dir), dataset_from_result(result),
                             cfg.ablation_seeds)
    for g in report.metadata["gains"]:
        print(f"gain {g['from']} -> {g['to']}: {g['gain']:+.5f}")
    _save_report(run, report, args.no_plots)
    return _strict(args, report)


def cmd_perturb(args, cfg: PipelineConfig, run: Run) -> int:
    pipe = Pipeline(cfg)
    run.write()
    report = perturbation_ablation(cfg.perturb_modes, pipe.experiment(run.dir),
                                   lambda mode: dataset_from_result(pipe.curate(mode)), cfg.ablation_seeds)
    _save_report(run, report, args.no_plots)
    return _strict(args, report)


def cmd_align(args, cfg: PipelineConfig, run: Run) -> int:
    """Stage-1 distribution alignment: sliced-Wasserstein distance before and after, per seed."""
    pipe = Pipeline(cfg)
    run.write()
    exp = pipe.experiment(run.dir)
    if exp.real_reference is None:
        n = len(exp.eval_conditions())
        labels = np.repeat(np.arange(pipe.world.real.cond_dim), cfg.eval.per_condition)
        exp.real_reference, _ = pipe.world.real_samples(n, seed=1000 + cfg.seed, labels=labels)
    if cfg.world.kind == "points":
        x, c = pipe.world.real_samples(4096, seed=2000 + cfg.seed)
    else:
        ds = dataset_from_result(_write_curation(run, pipe, "inpainting")[0])
        x, c = ds.winners, ds.conds
    report = distribution_alignment(exp, x, c, cfg.ablation_seeds)
    print("relative drop per seed: " + ", ".join(f"{d:.3f}" for d in report.metadata["relative_drop"]))
    _save_report(run, report, args.no_plots)
    return EXIT_OK


def cmd_gradcheck(args, cfg: PipelineConfig, run: Run) -> int:
    if args.trials < 1 or not args.tol > 0:
        raise ConfigError("gradcheck needs --trials >= 1 and --tol > 0")
    run.plan("gradcheck.json")
    run.write()
    kinds = ["stage1", "stage2"] if args.kind == "both" else [args.kind]
    reports = {k: gradient_check(k, trials=args.trials, tol=args.tol, seed=cfg.seed) for k in kinds}
    write_json(run.dir / "gradcheck.json", {k: r.to_dict() for k, r in reports.items()})
    failed = False
    for k, r in reports.items():
        worst = max(t.max_rel_error for t in r.trials)
        print(f"{k}: {len(r.trials)} trials, max relative error {worst:.3e} (tol {r.tol:g}) "
              f"{'PASS' if r.passed else 'FAIL'}")
        failed |= not r.passed
    if failed:
        raise ToleranceFailure("gradient check exceeded tolerance")
    return EXIT_OK


COMMANDS = {"curate": cmd_curate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep,
            "perturb": cmd_perturb, "align": cmd_align, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file overriding the preset")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: toy, or the config's preset)")
    common.add_argument("--seed", type=int, help="pipeline seed (corpus, curation and the train command)")
    common.add_argument("--out", help="run directory (default: $REALIGN_OUT_DIR/<command> or runs/<command>)")
    common.add_argument("--no-plots", action="store_true", help="write data files only")
    common.add_argument("--cache-dir", help="where pretrained world models are cached")
    common.add_argument("--strict", action="store_true", help="exit 5 when a report's expectation is not met")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="realign", description="Two-stage real-data preference alignment (toy scale).")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("curate", parents=[common], help="build the preference-pair dataset")
    p.add_argument("--mode", choices=["inpainting", "inpainting_strong", "text_to_image"], default="inpainting")
    p = sub.add_parser("train", parents=[common], help="run stage 1 or stage 2")
    p.add_argument("--stage", choices=["1", "2"], required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--init", help="starting model (stage 2: the stage-1 checkpoint)")
    p.add_argument("--from-base", action="store_true", help="stage 2 directly from the base model")
    p.add_argument("--manifest", help="curated dataset (default: curate in the run directory)")
    p.add_argument("--steps", type=int, help="override the step budget")
    p = sub.add_parser("eval", parents=[common], help="compare a model against another (default: base)")
    p.add_argument("--model", help="checkpoint to evaluate (default: base)")
    p.add_argument("--against", help="checkpoint to compare with (default: base)")
    sub.add_parser("ablate", parents=[common], help="base / stage1_only / stage2_only / both grid")
    sub.add_parser("sweep", parents=[common], help="data-size sweep")
    sub.add_parser("perturb", parents=[common], help="negative-construction mode ablation")
    sub.add_parser("align", parents=[common], help="stage-1 distribution alignment (sliced Wasserstein)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of both losses")
    p.add_argument("--kind", choices=["stage1", "stage2", "both"], default="both")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = _resolve(args)
        run = Run(args.command, args, cfg)
        code = COMMANDS[args.command](args, cfg, run)
        run.finish("ok" if code == EXIT_OK else f"exit {code}")
        return code
    except (ConfigError, ManifestError, ContainerError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        code, status = EXIT_CONFIG, "config error"
    except EmptyPipelineError as err:
        print(f"empty pipeline: {err}", file=sys.stderr)
        code, status = EXIT_EMPTY, "empty pipeline"
    except NonFiniteError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        code, status = EXIT_NUMERIC, "numeric failure"
    except ToleranceFailure as err:
        print(f"tolerance failure: {err}", file=sys.stderr)
        code, status = EXIT_TOLERANCE, "tolerance failure"
    if run is not None:
        try:
            run.finish(status)
        except RuntimeError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
