"""``nase`` command line: gen | train | run | bench.

Exit codes: 0 ok, 1 usage or configuration error, 2 runtime error (including
clips that faulted into HARD_RESET).
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from .audio_io import build_corpus, load_corpus, write_corpus
from .defense import KEY_ENV, load_key
from .errors import ConfigError, NaseError
from .pipeline import calibrate_epsilon, make_denoiser, run_experiment
from .report import summary_line, write_csv, write_json, write_plot_data
from .snn import init_net, save_checkpoint, train

log = logging.getLogger("nase")

FPGA_LATENCY_MS = 72.81
STAGES = ("stft", "denoise", "attack", "detect", "encrypt")


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="TOML config file.")
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                  help="Override one config value (repeatable; wins over the file).")
    @click.option("-v", "--verbose", count=True, help="Log progress to stderr.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, verbose, **kwargs):
        logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return fn(config_path=config_path, overrides=overrides, **kwargs)

    return wrapper


def resolve(config_path, overrides, flags: dict) -> config_mod.CliConfig:
    """File, then ``--set`` pairs, then dedicated flags (only those actually given)."""
    doc = config_mod.read_toml(config_path) if config_path else {}
    doc = config_mod.merge(doc, config_mod.parse_overrides(overrides))
    given = {}
    for dotted, value in flags.items():
        if value is not None:
            section, key = dotted.split(".")
            given.setdefault(section, {})[key] = value
    return config_mod.build(config_mod.merge(doc, given))


def _key(cfg: config_mod.CliConfig) -> bytes:
    try:
        return load_key(cfg.pipeline.key_file)
    except ConfigError:
        click.echo(f"warning: no AES key ({KEY_ENV} unset); sealing with an ephemeral key", err=True)
        return os.urandom(32)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact", prog_name="nase")
def cli():
    """Secure spiking audio denoising: corpus, training, attack campaigns, reports."""


@cli.command("gen")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--num-clips", type=int, default=None)
@click.option("--clip-seconds", type=float, default=None)
@click.option("--seed", type=int, default=None)
@common_options
def cmd_gen(out_dir, num_clips, clip_seconds, seed, config_path, overrides):
    """Write a seeded synthetic corpus (WAV pairs plus manifest.json)."""
    cfg = resolve(config_path, overrides, {"synth.num_clips": num_clips, "synth.clip_seconds": clip_seconds,
                                           "corpus.seed": seed})
    corpus = build_corpus(cfg.synth, cfg.corpus.seed)
    path = write_corpus(corpus, out_dir)
    click.echo(str(path))


@cli.command("train")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--epochs", type=int, default=None)
@click.option("--summary", "summary_path", type=click.Path(dir_okay=False), default=None,
              help="Summary JSON path (default: <out>.json).")
@common_options
def cmd_train(corpus_path, out_path, epochs, summary_path, config_path, overrides):
    """Train the spiking denoiser and write a checkpoint."""
    cfg = resolve(config_path, overrides, {"train.epochs": epochs})
    corpus = load_corpus(corpus_path)
    net = init_net(cfg.stft.n_bins, list(cfg.snn.hidden), lif=cfg.lif, seed=cfg.snn.init_seed)
    trained = train(net, corpus, cfg.stft, cfg.train, log=log.info)
    save_checkpoint(trained, out_path)
    summary = {
        "checkpoint": str(out_path),
        "seed": cfg.train.seed,
        "epochs": cfg.train.epochs,
        "layer_sizes": trained.layer_sizes,
        "initial_loss": trained.initial_loss,
        "final_loss": trained.final_loss,
        "effective_config": cfg.to_dict(),
    }
    write_json(summary, summary_path or f"{out_path}.json")
    click.echo(f"initial_loss={_loss(trained.initial_loss)} final_loss={_loss(trained.final_loss)}")
    click.echo(json.dumps({"seed": summary["seed"], "final_loss": summary["final_loss"]}))


def _loss(x):
    return "n/a" if x is None else f"{x:.6g}"


def _prepare_run(cfg: config_mod.CliConfig, corpus, checkpoint, attack, epsilon):
    if checkpoint:
        cfg = replace(cfg, pipeline=replace(cfg.pipeline, denoiser="snn", checkpoint=str(checkpoint)))
    kinds = list(cfg.run.attack_kinds)
    if attack == "pooled":
        kinds = ["fgsm", "pgd"]
        cfg = replace(cfg, attack=replace(cfg.attack, kind="fgsm"))
    elif attack is not None:
        kinds = []
        cfg = replace(cfg, attack=replace(cfg.attack, kind=attack))
    if epsilon is not None:
        if epsilon.strip().lower() == "auto":
            cfg = replace(cfg, epsilon_auto=True)
        else:
            try:
                cfg = replace(cfg, attack=cfg.attack.with_epsilon(float(epsilon)), epsilon_auto=False)
            except ValueError as exc:
                raise click.BadParameter(f"{epsilon!r} is neither a number nor 'auto'",
                                         param_hint="--epsilon") from exc
    pcfg = cfg.pipeline_config()
    denoiser = make_denoiser(pcfg)
    calibrated = None
    if cfg.epsilon_auto and pcfg.attack.kind != "none":
        cal_kinds = tuple(kinds) if kinds else (pcfg.attack.kind,)
        calibrated = calibrate_epsilon(corpus.pairs, pcfg, denoiser, cfg.run.calibrate_target_db, cal_kinds,
                                       n_clips=cfg.run.calibrate_clips)
        log.info("calibrated epsilon %.6g", calibrated)
        pcfg = replace(pcfg, attack=pcfg.attack.with_epsilon(calibrated))
        cfg = replace(cfg, attack=pcfg.attack)
    return cfg, pcfg, denoiser, kinds, calibrated


def _progress(done, total):
    log.info("processed %d/%d clips", done, total)


@cli.command("run")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="SNN checkpoint; without it the spectral-subtraction baseline denoises.")
@click.option("--attack", type=click.Choice(["none", "fgsm", "pgd", "pooled"]), default=None)
@click.option("--fraction", type=click.FloatRange(0, 1), default=None)
@click.option("--epsilon", default=None, help="L-inf budget, or 'auto' to calibrate.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default="nase-report.json",
              show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Per-clip CSV (default: report path with .csv).")
@click.option("--plots/--no-plots", default=True, help="Write plot CSVs and PNGs next to the report.")
@common_options
def cmd_run(corpus_path, checkpoint, attack, fraction, epsilon, report_path, csv_path, plots, config_path,
            overrides):
    """Run the end-to-end pipeline and write the report."""
    cfg = resolve(config_path, overrides, {"run.fraction": fraction})
    corpus = load_corpus(corpus_path)
    cfg, pcfg, denoiser, kinds, calibrated = _prepare_run(cfg, corpus, checkpoint, attack, epsilon)
    report = run_experiment(corpus, pcfg, cfg.run.fraction, denoiser=denoiser, key=_key(cfg),
                            attack_kinds=kinds or None, progress=_progress)
    doc = report.to_dict()
    doc["effective_config"] = cfg.to_dict()
    if calibrated is not None:
        doc["calibrated_epsilon"] = calibrated
    report_path = Path(report_path)
    write_json(doc, report_path)
    write_csv(report, csv_path or report_path.with_suffix(".csv"))
    if plots:
        write_plot_data(report, report_path.parent / f"{report_path.stem}_plots")
    click.echo(summary_line(report))
    if report.faults:
        click.echo(f"StateError: {len(report.faults)} clip(s) faulted into HARD_RESET", err=True)
        return 2
    return 0


@cli.command("bench")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--clips", type=click.IntRange(1), default=8, show_default=True)
@click.option("--attack", type=click.Choice(["none", "fgsm", "pgd", "pooled"]), default=None)
@click.option("--fraction", type=click.FloatRange(0, 1), default=None)
@common_options
def cmd_bench(corpus_path, checkpoint, clips, attack, fraction, config_path, overrides):
    """Per-stage and end-to-end wall-clock per clip."""
    cfg = resolve(config_path, overrides, {"run.fraction": fraction})
    corpus = load_corpus(corpus_path)
    corpus = replace(corpus, pairs=corpus.pairs[:clips])
    cfg, pcfg, denoiser, kinds, _ = _prepare_run(cfg, corpus, checkpoint, attack, None)
    report = run_experiment(corpus, pcfg, cfg.run.fraction, denoiser=denoiser, key=_key(cfg),
                            attack_kinds=kinds or None)
    if not report.outcomes:
        raise ConfigError("every benchmarked clip faulted")
    n = len(report.outcomes)
    click.echo(f"{'stage':<12}{'mean ms/clip':>14}")
    for stage in STAGES:
        total = sum(o.stage_ms.get(stage, 0.0) for o in report.outcomes)
        click.echo(f"{stage:<12}{total / n:>14.3f}")
    click.echo(f"{'end-to-end':<12}{np.mean([o.wall_latency_ms for o in report.outcomes]):>14.3f}")
    click.echo(f"reference: FPGA latency {FPGA_LATENCY_MS} ms (hardware figure, not comparable)")
    return 2 if report.faults else 0


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="nase", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except NaseError as exc:
        click.echo(f"{exc.category}Error: {exc}", err=True)
        return 1 if exc.category == "Config" else 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
