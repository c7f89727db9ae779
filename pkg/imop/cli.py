"""imop command line: forward, estimate, test-ident, replicate, export-model, intro-demo.

Every subcommand prints one JSON line on stdout naming the files it wrote.
Exit status is 0 on success, 1 for invalid input and 2 for numerical failure.
"""
import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click

from imop.config import Config
from imop.errors import NumericalError, ValidationError
from imop.services import (
    intro_demo,
    load_config,
    run_estimate,
    run_experiment,
    run_export,
    run_forward,
    run_identifiability,
    write_json,
)

logger = logging.getLogger("imop.cli")

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def configure_logging(verbose=False):
    root = logging.getLogger("imop")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.WARNING)
    root.propagate = False


def emit(command, outputs, **extra):
    pointer = {"command": command, "status": "ok", **extra,
               "outputs": {k: str(v) for k, v in sorted(outputs.items())}}
    click.echo(json.dumps(pointer, sort_keys=True))


def common_options(require_config=True):
    def decorator(fn):
        @click.option("--config", "config_path", type=click.Path(dir_okay=False), required=require_config,
                      help="JSON config file.")
        @click.option("--seed", type=int, default=None, help="Override the config seed.")
        @click.option("--out", "out_dir", envvar="IMOP_OUT_DIR", default=Config.IMOP_OUT_DIR, show_default=True,
                      type=click.Path(file_okay=False), help="Output directory.")
        @click.option("--threads", type=click.IntRange(min=0), default=None, help="Worker threads, 0 = auto.")
        @click.option("--verbose", is_flag=True, help="Debug diagnostics on stderr.")
        @wraps(fn)
        def wrapper(config_path, seed, out_dir, threads, verbose, **kwargs):
            configure_logging(verbose)
            data = load_config(config_path) if config_path else {}
            if not isinstance(data, dict):
                raise ValidationError("config must be a JSON object")
            data = dict(data)
            if seed is not None:
                data["seed"] = seed
            if threads is not None:
                data["threads"] = threads
            return fn(data, Path(out_dir), **kwargs)

        return wrapper

    return decorator


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Inverse multiobjective optimization toolkit."""


@cli.command()
@common_options()
def forward(data, out_dir):
    """Sample the efficient front of an instance."""
    payload, paths = run_forward(data, out_dir)
    emit("forward", paths, points=len(payload["front"]["points"]))


@cli.command()
@common_options()
def estimate(data, out_dir):
    """Estimate θ from observations."""
    payload, paths = run_estimate(data, out_dir)
    emit("estimate", paths, value=payload["estimate"]["value"])


@cli.command("test-ident")
@common_options()
def test_ident(data, out_dir):
    """Search for a distant parameter with the same efficient points."""
    payload, paths = run_identifiability(data, out_dir)
    emit("test-ident", paths, z_test=payload["z_test"], non_identifiable=payload["non_identifiable"])


@cli.command()
@common_options()
def replicate(data, out_dir):
    """Run a replicated experiment over N and K grids."""
    report = run_experiment(data, out_dir=out_dir, threads=data.get("threads"))
    emit("replicate", report.paths, run_status=report.status, failures=report.failures)


@cli.command("export-model")
@common_options()
def export_model_cmd(data, out_dir):
    """Write a single-level MIP reformulation in LP format."""
    payload, paths = run_export(data, out_dir)
    certificate = payload.get("certificate")
    emit("export-model", paths, certified=None if certificate is None else certificate["passed"])


@cli.command("intro-demo")
@common_options(require_config=False)
@click.option("--a", "a", type=float, default=None)
@click.option("--b", "b", type=float, default=None)
@click.option("--c", "c", type=float, default=None)
@click.option("--samples", type=int, default=None)
def intro_demo_cmd(data, out_dir, a, b, c, samples):
    """Sample mean against the bi-objective estimate on the introductory triangle."""
    args = {
        "a": a if a is not None else data.get("a", 6.0),
        "b": b if b is not None else data.get("b", 1.0),
        "c": c if c is not None else data.get("c", 1.0),
        "samples": samples if samples is not None else data.get("samples", 2000),
    }
    report = intro_demo(**args, K=data.get("K", 11), tau=data.get("tau", 1e-2), seed=data.get("seed", 0))
    path = write_json(out_dir / "intro_demo.json", {**args, **report.to_dict()})
    emit("intro-demo", {"json": path}, efficient_fraction=report.efficient_fraction)


def main(argv=None):
    """Run the CLI and map failures to exit codes."""
    try:
        status = cli.main(args=argv, prog_name="imop", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        logger.error("%s %s", exc, json.dumps(exc.details, default=str) if exc.details else "")
        return 1
    except NumericalError as exc:
        logger.error("numerical failure weight_index=%s: %s", exc.weight_index, exc)
        return 2
    return status if isinstance(status, int) else 0
