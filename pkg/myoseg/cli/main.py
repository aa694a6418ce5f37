"""Command-line entry point for the segmentation pipeline."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
from pydantic import ValidationError

from ..config import RunConfig, load_run_config
from ..exceptions import DataError, PipelineError
from ..schemas import DatasetManifest, PhantomSpec
from ..services.atlas import MuscleAtlas, label_segmentation
from ..services.boost import load_model, save_training_report
from ..services.imgio import check_manifest_paths, load_image, load_manifest, load_mask
from ..services.metrics import EvalReport, label_dice, score_masks
from ..services.phantom import MANIFEST_NAME, generate_dataset
from ..services.pipeline import (
    cross_validate,
    feature_table,
    fit_atlas,
    fit_classifier,
    load_slices,
    predict_slice,
    select_volumes,
    write_slice_outputs,
)
from ..services.telemetry import configure_logging, get_logger, reset_logging

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PIPELINE = 3

MODEL_NAME = "model.json"
TRAINING_REPORT_NAME = "training_report.csv"


class PipelineGroup(click.Group):
    """Maps pipeline exceptions onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        except ValidationError as e:
            click.echo(f"Invalid configuration: {e}", err=True)
            code = EXIT_USAGE
        except DataError as e:
            click.echo(f"Data error: {e}", err=True)
            code = EXIT_DATA
        except PipelineError as e:
            click.echo(f"Pipeline failure: {e}", err=True)
            code = EXIT_PIPELINE
        if standalone_mode:
            sys.exit(code)
        return code


def run_options(func: Callable) -> Callable:
    """Config file plus the flags that override it."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                     help="JSON run configuration"),
        click.option("--seed", type=int, help="Seed for every random choice"),
        click.option("--rounds", "boosting_rounds", type=int, help="AdaBoost rounds"),
        click.option("--erosion-radius", type=int, help="Disk radius eroding training labels"),
        click.option("--atlas-reference", type=int, help="Training slice used as atlas frame"),
        click.option("--n-jobs", type=int, help="joblib workers"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _resolve(ctx: click.Context, config_path: Optional[Path], **overrides: Any) -> RunConfig:
    overrides.setdefault("log_level", ctx.obj.get("log_level"))
    config = load_run_config(config_path, overrides)
    configure_logging(config.log_level, ctx.obj.get("json_logs", False))
    return config


def _manifest(path: Path) -> DatasetManifest:
    manifest = load_manifest(path)
    check_manifest_paths(manifest)
    return manifest


def _volumes(manifest: DatasetManifest, include: Sequence[str] = (), exclude: Sequence[str] = ()) -> List[str]:
    return select_volumes(manifest, list(include) or None, list(exclude) or None)


@click.group(cls=PipelineGroup)
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None, help="Logging level (default from config)")
@click.option("--json-logs", is_flag=True, help="Emit JSON log lines")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], json_logs: bool):
    """Muscle segmentation from block texture descriptors, AdaBoost and an atlas."""
    ctx.ensure_object(dict)
    ctx.obj["log_level"] = log_level.upper() if log_level else None
    ctx.obj["json_logs"] = json_logs
    configure_logging(ctx.obj["log_level"] or "INFO", json_logs)
    ctx.call_on_close(reset_logging)


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False, path_type=Path), help="PhantomSpec JSON")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--volumes", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--slices", type=click.IntRange(min=1), default=5, show_default=True)
@run_options
@click.pass_context
def phantom(ctx, spec_path, out_dir, volumes, slices, config_path, **flags):
    """Generate a phantom dataset and its manifest."""
    config = _resolve(ctx, config_path, output_dir=out_dir, **flags)
    template = PhantomSpec()
    if spec_path is not None:
        if not spec_path.is_file():
            raise DataError(f"Phantom spec not found: {spec_path}")
        try:
            template = PhantomSpec.model_validate_json(spec_path.read_text())
        except ValidationError as e:
            raise DataError(f"Invalid phantom spec {spec_path}: {e}") from e
    generate_dataset(config.seed, volumes, slices, out_dir, template=template, n_jobs=config.n_jobs)
    config.echo(out_dir)
    click.echo(str(out_dir / MANIFEST_NAME))


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Feature CSV")
@run_options
@click.pass_context
def features(ctx, manifest_path, out_path, config_path, **flags):
    """Dump every block descriptor to CSV."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_path.parent, **flags)
    slices = load_slices(_manifest(manifest_path), config)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    feature_table(slices).to_csv(out_path, index=False)
    config.echo(out_path.parent)


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--exclude-volume", multiple=True, help="Volume id left out of training")
@run_options
@click.pass_context
def train(ctx, manifest_path, out_dir, exclude_volume, config_path, **flags):
    """Train the block classifier on every (non-excluded) slice."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    manifest = _manifest(manifest_path)
    slices = load_slices(manifest, config, _volumes(manifest, exclude=exclude_volume), require_masks=True)
    clf = fit_classifier(slices, config)
    clf.save(out_dir / MODEL_NAME)
    save_training_report(clf, out_dir / TRAINING_REPORT_NAME)
    config.echo(out_dir)


@cli.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--volume", multiple=True, help="Only predict these volume ids")
@run_options
@click.pass_context
def predict(ctx, model_path, manifest_path, out_dir, volume, config_path, **flags):
    """Write binary muscle masks and overlays."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    clf = load_model(model_path, expected_features=config.descriptor_length)
    manifest = _manifest(manifest_path)
    for data in load_slices(manifest, config, _volumes(manifest, include=volume)):
        write_slice_outputs(out_dir, data.ref, data.image, predict_slice(clf, data))
    config.echo(out_dir)


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--exclude-volume", multiple=True, help="Volume id left out of the atlas")
@run_options
@click.pass_context
def atlas(ctx, manifest_path, out_dir, exclude_volume, config_path, **flags):
    """Build the probabilistic muscle atlas."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    manifest = _manifest(manifest_path)
    slices = load_slices(manifest, config, _volumes(manifest, exclude=exclude_volume), require_masks=True)
    fit_atlas(slices, config).save(out_dir)
    config.echo(out_dir)


def _prediction(pred_dir: Path, volume: str, index: int, kind: str) -> Path:
    return pred_dir / volume / f"{index:03d}_{kind}.png"


@cli.command()
@click.option("--binary", "binary_dir", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Directory written by predict")
@click.option("--atlas", "atlas_path", type=click.Path(path_type=Path), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--volume", multiple=True, help="Only label these volume ids")
@run_options
@click.pass_context
def label(ctx, binary_dir, atlas_path, manifest_path, out_dir, volume, config_path, **flags):
    """Transfer atlas labels onto binary masks."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    muscle_atlas = MuscleAtlas.load(atlas_path)
    manifest = _manifest(manifest_path)
    failed = []
    for ref in manifest.iter_slices(_volumes(manifest, include=volume)):
        image = load_image(ref.image)
        binary = load_mask(_prediction(binary_dir, ref.volume, ref.index, "binary"), expected_dims=image.dims)
        try:
            labeled = label_segmentation(binary, image, muscle_atlas, config.bone_area_min, config.bone_area_max)
        except PipelineError as e:
            logger.warning("slice_failed", volume=ref.volume, slice=ref.index, stage="label", error=str(e))
            failed.append(ref.key)
            write_slice_outputs(out_dir, ref, image, binary)
            continue
        write_slice_outputs(out_dir, ref, image, binary, labeled)
    config.echo(out_dir)
    if failed:
        raise PipelineError(f"labeling failed on {len(failed)} slice(s): {failed}")


@cli.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--volume", multiple=True, help="Only score these volume ids")
@run_options
@click.pass_context
def evaluate(ctx, pred_dir, manifest_path, out_dir, volume, config_path, **flags):
    """Score predicted masks against ground truth."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    manifest = _manifest(manifest_path)
    slices: List[Dict] = []
    labels: List[Dict] = []
    for ref in manifest.iter_slices(_volumes(manifest, include=volume)):
        if ref.mask is None:
            raise DataError(f"volume {ref.volume} slice {ref.index}: no ground-truth mask")
        truth = load_mask(ref.mask)
        pred = load_mask(_prediction(pred_dir, ref.volume, ref.index, "binary"), expected_dims=truth.dims)
        slices.append({"volume": ref.volume, "slice": ref.index, **score_masks(pred, truth)})
        labeled_path = _prediction(pred_dir, ref.volume, ref.index, "labels")
        if labeled_path.is_file():
            labeled = load_mask(labeled_path, expected_dims=truth.dims)
            labels.extend(
                {"volume": ref.volume, "slice": ref.index, "muscle": k, "dice": v}
                for k, v in label_dice(labeled, truth).items()
            )
    EvalReport.from_records(slices, labels).write(out_dir)
    config.echo(out_dir)


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@run_options
@click.pass_context
def crossval(ctx, manifest_path, out_dir, config_path, **flags):
    """Leave-one-volume-out evaluation with masks, overlays and reports."""
    config = _resolve(ctx, config_path, manifest_path=manifest_path, output_dir=out_dir, **flags)
    report = cross_validate(load_manifest(manifest_path), config, out_dir)
    report.write(out_dir)
    config.echo(out_dir)
    for row in report.summary.itertuples(index=False):
        click.echo(f"{row.volume}\t{row.metric}\t{row.mean:.4f}\t{row.std:.4f}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    return cli.main(args=list(argv) if argv is not None else None, prog_name="myoseg", standalone_mode=False)


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
