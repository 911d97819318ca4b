import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
from pydantic import ValidationError

from lib.actions import ActionError
from lib.router import ACTION_HELP, EXIT_INPUT_ERROR, EXIT_OK, Router
from optypes.match_types import (
    TIME_PRESETS,
    DegreeComparison,
    MatchMode,
    PipelineConfig,
)
from util.sweep_runner import MeshPair

# CLI flag -> (config section, field)
FLAG_FIELDS = {
    "t_steps": ("descriptors", "t_steps"),
    "t_min": ("descriptors", "t_min"),
    "t_max": ("descriptors", "t_max"),
    "k_min": ("segmentation", "k_min"),
    "k_max": ("segmentation", "k_max"),
    "seed": ("segmentation", "seed"),
    "degree_mode": ("segmentation", "degree_mode"),
    "sigma": ("matching", "sigma"),
    "max_sym": ("matching", "max_symmetry_order"),
    "gap": ("matching", "gap_ratio"),
    "use_cluster_ids": ("matching", "use_cluster_ids"),
    "exclude_unmatched": ("evaluation", "exclude_unmatched"),
}
DEFAULT_SWEEP_PAIRS = [MeshPair("builtin:figure", "builtin:figure-fine")]


class ExitCodeGroup(click.Group):
    """Click group that exits 0 on success, 1 on input errors, 2 on pipeline failures."""

    def main(self, args=None, prog_name=None, **extra):
        extra.pop("standalone_mode", None)
        try:
            rv = super().main(args=args, prog_name=prog_name, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_INPUT_ERROR)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_INPUT_ERROR)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


def resolve_config(
    config_path: Optional[str], workers: Optional[int], options: Dict[str, Any]
) -> PipelineConfig:
    """Defaults < --config file < --t-preset < explicit flags."""
    data: Dict[str, Any] = {}
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise click.BadParameter(f"Cannot read config {config_path}: {e}", param_hint="--config")
    for section in ("descriptors", "segmentation", "matching", "evaluation"):
        data.setdefault(section, {})

    preset = options.pop("t_preset", None)
    if preset:
        data["descriptors"].update(TIME_PRESETS[preset])
    symmetric_only = options.pop("symmetric_only", None)
    if symmetric_only:
        data["symmetric_only"] = True
    if workers is not None:
        data["workers"] = workers
    for flag, value in options.items():
        if value is None or flag not in FLAG_FIELDS:
            continue
        section, name = FLAG_FIELDS[flag]
        data[section][name] = value

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise click.BadParameter(str(e), param_hint="pipeline options")


def pipeline_options(func):
    """Shared overrides for the descriptor, segmentation and matching stages."""
    options = [
        click.option("--t-preset", type=click.Choice(sorted(TIME_PRESETS)), help="HKS time-step preset."),
        click.option("--t-steps", type=int, help="Number of HKS time steps (default 15)."),
        click.option("--t-min", type=float, help="Smallest HKS time (default 0.03)."),
        click.option("--t-max", type=float, help="Largest HKS time (default 0.25)."),
        click.option("--k-min", type=int, help="Smallest cluster count tried (default 5)."),
        click.option("--k-max", type=int, help="Largest cluster count tried (default 10)."),
        click.option("--seed", type=int, help="k-means seed (default 42)."),
        click.option(
            "--degree-mode",
            type=click.Choice([m.value for m in DegreeComparison]),
            help="Shape graph comparison used to pick k.",
        ),
        click.option("--sigma", type=float, help="Affinity bandwidth (default 0.5)."),
        click.option("--max-sym", type=int, help="Maximum symmetry order (default 8)."),
        click.option("--gap", type=float, help="Gap ratio for discretization (default 0.9)."),
        click.option("--use-cluster-ids", is_flag=True, default=None, help="Penalize matches across clusters."),
        click.option("--symmetric-only", is_flag=True, default=None, help="Skip symmetry breaking."),
        click.option(
            "--exclude-unmatched", is_flag=True, default=None,
            help="Score only vertices of matched regions.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


PIPELINE_FLAGS = (
    "t_preset", "t_steps", "t_min", "t_max", "k_min", "k_max", "seed", "degree_mode",
    "sigma", "max_sym", "gap", "use_cluster_ids", "symmetric_only", "exclude_unmatched",
)


def _split_pipeline_flags(kwargs: Dict[str, Any]) -> Dict[str, Any]:
    return {flag: kwargs.pop(flag) for flag in PIPELINE_FLAGS if flag in kwargs}


def _router(ctx: click.Context, flags: Dict[str, Any], testing: bool = False) -> Router:
    config = resolve_config(ctx.obj["config_path"], ctx.obj["workers"], flags)
    return Router(config, testing)


def _dispatch(router: Router, action: str, **kwargs: Any) -> Any:
    try:
        return router.run_action(action, **kwargs)
    except ActionError as e:
        click.echo(f"Error: {e}", err=True)
        raise click.exceptions.Exit(router.exit_code(e))


@click.group(cls=ExitCodeGroup, context_settings=dict(help_option_names=["--help", "-h"]))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON pipeline configuration.")
@click.option("--workers", type=int, default=None, help="Concurrent k values / sweep trials.")
@click.option("--verbose", "-v", is_flag=True, default=False, help="Debug logging.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], workers: Optional[int], verbose: bool):
    """Region-level correspondences between non-rigid shapes."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {"config_path": config_path, "workers": workers}


@cli.command("match", help=ACTION_HELP["match"])
@click.argument("shape_a")
@click.argument("shape_b")
@click.option("--out", "out_dir", default=None, help="Output directory; nothing is written without it.")
@click.option("--gt", "gt_path", help="Vertex map A -> B, one index per line.")
@click.option("--gt-nearest", "gt_nearest_path", help="Nearest A vertex per B sample (from `sample`).")
@click.option("--dump-descriptors", is_flag=True, default=False, help="Write HKS values as CSV.")
@pipeline_options
@click.pass_context
def match(ctx: click.Context, **kwargs: Any):
    router = _router(ctx, _split_pipeline_flags(kwargs))
    report = _dispatch(router, "match", path_a=kwargs.pop("shape_a"), path_b=kwargs.pop("shape_b"), **kwargs)
    click.echo(
        f"k={report.chosen_k}  segments {report.segments_a}/{report.segments_b}  "
        f"pairs {len(report.symmetric_matching.pairs)}"
    )
    if report.accuracy is not None:
        click.echo(f"accuracy {report.accuracy:.4f}")
    if report.one_to_one_accuracy is not None:
        click.echo(f"one-to-one accuracy {report.one_to_one_accuracy:.4f}")
    return EXIT_OK


@cli.command("self", help=ACTION_HELP["self"])
@click.argument("shape")
@click.option("--out", "out_dir", default=None, help="Output directory; nothing is written without it.")
@click.option("--dump-descriptors", is_flag=True, default=False, help="Write HKS values as CSV.")
@pipeline_options
@click.pass_context
def self_symmetry(ctx: click.Context, **kwargs: Any):
    router = _router(ctx, _split_pipeline_flags(kwargs))
    report = _dispatch(router, "self", path=kwargs.pop("shape"), **kwargs)
    for entry in report.self_symmetry or []:
        click.echo(f"{entry.node}: {entry.kind.value} {entry.partners}")
    return EXIT_OK


@cli.command("eval", help=ACTION_HELP["eval"])
@click.argument("report_path")
@click.option("--gt", "gt_path", help="Vertex map A -> B, one index per line.")
@click.option("--gt-nearest", "gt_nearest_path", help="Nearest A vertex per B sample.")
@click.option("--exclude-unmatched/--count-unmatched", default=None, help="Unmatched-region policy.")
@click.pass_context
def evaluate(ctx: click.Context, **kwargs: Any):
    router = _router(ctx, {})
    scores = _dispatch(router, "eval", **kwargs)
    click.echo(json.dumps(scores, indent=2))
    return EXIT_OK


@cli.command("sample", help=ACTION_HELP["sample"])
@click.argument("mesh_path")
@click.option("--points", type=int, required=True, help="Number of samples.")
@click.option("--noise", type=float, default=0.0, show_default=True, help="Noise as a fraction of the shape width.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", help="Output .xyz (default <mesh>_<points>.xyz).")
@click.pass_context
def sample(ctx: click.Context, mesh_path: str, points: int, noise: float, seed: int, out_path: Optional[str]):
    router = _router(ctx, {})
    if out_path is None:
        stem = Path(mesh_path.replace(":", "_")).stem
        out_path = f"{stem}_{points}.xyz"
    path = _dispatch(router, "sample", mesh_path=mesh_path, points=points, noise=noise, seed=seed, out_path=out_path)
    click.echo(f"Wrote {path}")
    return EXIT_OK


@cli.command("sweep", help=ACTION_HELP["sweep"])
@click.argument("pairlist", required=False)
@click.option("--out", "out_path", default="sweep.csv", show_default=True, help="Output CSV.")
@click.option("--testing", is_flag=True, default=False, help="Reduced densities and a single seed.")
@pipeline_options
@click.pass_context
def sweep(ctx: click.Context, pairlist: Optional[str], out_path: str, testing: bool, **kwargs: Any):
    router = _router(ctx, _split_pipeline_flags(kwargs), testing=testing)
    pairs = None if pairlist else DEFAULT_SWEEP_PAIRS
    cells = _dispatch(router, "sweep", pairlist=pairlist, out_path=out_path, pairs=pairs)
    for cell in cells:
        row = cell.as_row()
        click.echo(", ".join(f"{key}={row[key]}" for key in row))
    return EXIT_OK


@cli.command("export-constraints", help=ACTION_HELP["export-constraints"])
@click.argument("report_path")
@click.option("--out", "out_path", help="Output .npz (default next to the report).")
@click.option(
    "--mode",
    type=click.Choice([m.value for m in MatchMode]),
    default=MatchMode.SYMMETRIC.value,
    show_default=True,
)
@click.pass_context
def export_constraints(ctx: click.Context, report_path: str, out_path: Optional[str], mode: str):
    router = _router(ctx, {})
    path = _dispatch(router, "export-constraints", report_path=report_path, out_path=out_path, mode=MatchMode(mode))
    click.echo(f"Wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    cli()
