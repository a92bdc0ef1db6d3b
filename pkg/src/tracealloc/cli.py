"""Command-line driver for the trace-to-allocation pipeline.

Each subcommand runs one batch stage against an output directory; `run`
executes the whole chain (optionally resuming mid-way with --from).
Exit codes: 0 success, 1 configuration/validation error, 2 stage failure.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import click

from .pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    load_config,
    run_pipeline,
    run_stage,
)

EXIT_VALIDATION = 1
EXIT_STAGE_FAILURE = 2


def _resolve_config(config_path: Optional[str], seed: Optional[int],
                    out: Optional[str]) -> PipelineConfig:
    try:
        cfg = load_config(config_path) if config_path else PipelineConfig()
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_VALIDATION)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


def _execute(stage_name: str, cfg: PipelineConfig) -> None:
    out = Path(cfg.out_dir)
    try:
        run_stage(stage_name, cfg, out)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_VALIDATION)
    except StageError as exc:
        click.echo(f"stage {stage_name} failed: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    except Exception as exc:  # noqa: BLE001 - stage isolation boundary
        click.echo(f"stage {stage_name} failed: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(),
                      default=None, help="YAML pipeline configuration.")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None,
                      help="Root seed (overrides the config).")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Artifact directory (overrides the config).")(fn)
    return fn


@click.group()
def main() -> None:
    """Trace fingerprinting, pattern forecasting, and SLO allocation."""


def _make_stage_command(stage_name: str):
    @main.command(name=stage_name, help=f"Run the {stage_name} stage.")
    @_common_options
    def _cmd(config_path, seed, out, _stage=stage_name):
        cfg = _resolve_config(config_path, seed, out)
        _execute(_stage, cfg)

    return _cmd


for _name in STAGES:
    _make_stage_command(_name)


@main.command(name="run", help="Run the full pipeline (resume with --from).")
@_common_options
@click.option("--from", "start", type=click.Choice(STAGES), default="ingest",
              help="First stage to execute; earlier artifacts are reused.")
def run_cmd(config_path, seed, out, start):
    cfg = _resolve_config(config_path, seed, out)
    out_dir = Path(cfg.out_dir)
    try:
        executed = run_pipeline(cfg, out_dir, start=start)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_VALIDATION)
    except StageError as exc:
        click.echo(f"pipeline failed: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    except Exception as exc:  # noqa: BLE001 - stage isolation boundary
        click.echo(f"pipeline failed: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    click.echo("completed stages: " + ", ".join(executed))


if __name__ == "__main__":
    main()
