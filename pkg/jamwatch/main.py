"""Command-line entry point: simulate -> spectrogram -> train -> eval / bench / describe / plot."""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import click
from pydantic import ValidationError

from jamwatch import bench_service, detector_service, model_service, plot_service
from jamwatch.artifact_io import read_json, write_json
from jamwatch.bench_service import BenchService
from jamwatch.detector_service import DetectorService
from jamwatch.enums import CorpusLayout, ModelKind, ModelScale, ScoreKind
from jamwatch.errors import ConfigurationError, JamwatchError, SourceExhaustedError, error_line
from jamwatch.iq_simulation_service import IQFileSource, IQSimulationService
from jamwatch.setup_experiment import ExperimentSetup, load_config
from jamwatch.spectrogram_dataset import SpectrogramDataset, read_dataset, write_dataset
from jamwatch.spectrogram_service import SpectrogramService

logger = logging.getLogger(__name__)


def _progress() -> bool:
    return sys.stderr.isatty()


def reports_errors(command: Callable) -> Callable:
    """Turns failures into one `error kind=... field=... message=...` line on stderr and exit code 1."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            loc = ".".join(str(p) for p in e.errors()[0]["loc"]) if e.errors() else None
            click.echo(error_line(ConfigurationError(e.errors()[0]["msg"] if e.errors() else str(e), field=loc)), err=True)
        except (JamwatchError, OSError) as e:
            click.echo(error_line(e), err=True)
        raise click.exceptions.Exit(1)

    return wrapper


def config_options(command: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="YAML experiment config."),
        click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one config value."),
        click.option("--output-dir", type=click.Path(path_type=Path), default=None, help="Experiment output directory."),
        click.option("--force", is_flag=True, help="Overwrite existing outputs of this stage."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def model_options(command: Callable) -> Callable:
    command = click.option("--scale", type=click.Choice([s.value for s in ModelScale]), default=None)(command)
    return click.option("--model", "model_kind", type=click.Choice([k.value for k in ModelKind]), default=None)(command)


def _setup(config_path: Optional[Path], overrides: tuple, output_dir: Optional[Path], force: bool, **flags: Any) -> ExperimentSetup:
    cfg = load_config(config_path, overrides, output_dir=output_dir, **{k: v for k, v in flags.items() if v is not None})
    setup = ExperimentSetup(cfg, force=force)
    setup.write_config_echo()
    logger.debug("Config %s resolved to %s", setup.config_hash[:12], cfg.model_dump(mode="json"))
    return setup


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """Spectrogram-based jamming watchdog."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@config_options
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="all", show_default=True)
@click.option("--layout", type=click.Choice([l.value for l in CorpusLayout]), default=CorpusLayout.CONCATENATED.value, show_default=True)
@model_options
@reports_errors
def simulate(config_path, overrides, output_dir, force, split, layout, model_kind, scale) -> None:
    """Generate labeled IQ corpora for the configured splits."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    cfg = setup.config
    service = IQSimulationService(cfg.scenario, CorpusLayout(layout))
    for name in setup.splits(split):
        counts = cfg.splits.counts(name)
        directory = setup.claim(setup.iq_dir(name))
        service.simulate(directory, counts, setup.stage_seed(f"simulate/{name}"), extra=setup.provenance(split=name), progress=_progress())
        total = sum(counts.values())
        click.echo(f"simulate split={name} frames={total} jammer={cfg.scenario.jammer_kind} path={directory}")


@cli.command()
@config_options
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="all", show_default=True)
@model_options
@reports_errors
def spectrogram(config_path, overrides, output_dir, force, split, model_kind, scale) -> None:
    """Turn IQ corpora into neg-log spectrogram datasets."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    params = setup.config.spectrogram
    service = SpectrogramService(n=params.n, rows=params.rows, epsilon=params.epsilon)
    for name in setup.splits(split):
        source = IQFileSource(setup.iq_dir(name))
        path = setup.claim(setup.dataset_path(name))
        manifest = write_dataset(
            service.transform_all(source),
            path,
            extra=setup.provenance(split=name, n=params.n, epsilon=params.epsilon, source=f"iq/{name}"),
        )
        click.echo(f"spectrogram split={name} count={manifest['count']} shape={manifest['rows']}x{manifest['cols']} path={path}")


@cli.command()
@config_options
@model_options
@reports_errors
def train(config_path, overrides, output_dir, force, model_kind, scale) -> None:
    """Train the configured model on the train split, early-stopped on the val split."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    cfg = setup.config
    train_specs = read_dataset(setup.dataset_path("train"))
    val_specs = read_dataset(setup.dataset_path("val"))
    if not train_specs:
        raise ConfigurationError("train dataset is empty", field="splits.train")

    net = model_service.build_model(cfg.model.kind, cfg.model.scale, train_specs[0].rows, train_specs[0].cols, seed=setup.stage_seed("model"))
    model_dir = setup.claim(setup.model_dir)
    click.echo(f"train model={cfg.model.kind} scale={cfg.model.scale} params={model_service.param_count(net)}")

    detector = DetectorService(net)
    result = detector.fit(train_specs, val_specs, cfg.training, progress=_progress())
    val_scores = detector.score(val_specs)
    threshold = detector.operating_threshold(val_scores, cfg.model.calibrate_margin)

    metadata = setup.provenance(
        model_kind=str(cfg.model.kind),
        scale=str(cfg.model.scale),
        score_kind=str(detector.score_kind),
        threshold=threshold,
        val_score_max=float(val_scores.max()),
        spectrogram=cfg.spectrogram.model_dump(mode="json"),
        training=result.summary(),
    )
    model_service.save_model(net, setup.checkpoint_path, metadata)
    detector_service.write_loss_trace(result, model_dir / "loss_trace.csv")
    write_json(model_dir / "summary.json", metadata)
    click.echo(
        f"train best_epoch={result.best_epoch} stopped_epoch={result.stopped_epoch} "
        f"best_val_loss={result.best_val_loss:.6g} threshold={threshold:.6g}"
    )


def _threshold(metadata: dict[str, Any], threshold: Optional[float], margin: Optional[float]) -> float:
    if threshold is not None:
        return threshold
    if margin is not None and metadata.get("score_kind") == ScoreKind.RECONSTRUCTION_ERROR:
        return detector_service.calibrate_threshold([metadata["val_score_max"]], margin)
    return float(metadata.get("threshold", detector_service.CNN_THRESHOLD))


@cli.command(name="eval")
@config_options
@model_options
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="Defaults to <output-dir>/model/checkpoint.jwck.")
@click.option("--split", type=click.Choice(["val", "test"]), default="test", show_default=True)
@click.option("--threshold", type=float, default=None, help="Operating threshold; defaults to the calibrated one.")
@click.option("--calibrate-margin", type=float, default=None, help="Recalibrate tau as max validation score x margin.")
@reports_errors
def evaluate(config_path, overrides, output_dir, force, model_kind, scale, checkpoint, split, threshold, calibrate_margin) -> None:
    """Score a split and write the FA/MD sweep, per-sample scores and a summary."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    net, metadata = model_service.load_model(checkpoint or setup.checkpoint_path)
    dataset = SpectrogramDataset(setup.dataset_path(split))
    specs, labels = dataset.specs, dataset.labels
    dataset_hash, checkpoint_hash = dataset.manifest.get("config_hash"), metadata.get("config_hash")
    if dataset_hash != checkpoint_hash:
        logger.warning("%s was built under config %s, the checkpoint under %s", dataset.path, str(dataset_hash)[:12], str(checkpoint_hash)[:12])
    if any(label is None for label in labels):
        raise ConfigurationError(f"{split} dataset has unlabeled spectrograms", field="labels")

    detector = DetectorService(net)
    scores = detector.score(specs)
    tau = _threshold(metadata, threshold, calibrate_margin)
    evaluation = detector.evaluate(labels, scores, tau)
    interval = evaluation.interval

    eval_dir = setup.claim(setup.eval_dir)
    detector.write_evaluation(evaluation, labels, scores, eval_dir)
    training = metadata.get("training", {})
    summary = {
        **setup.provenance(split=split, checkpoint_config_hash=checkpoint_hash, dataset_config_hash=dataset_hash),
        "model_kind": metadata.get("model_kind"),
        "score_kind": str(detector.score_kind),
        "best_epoch": training.get("best_epoch"),
        "stopped_epoch": training.get("stopped_epoch"),
        "zero_error_interval": list(interval) if interval else None,
        "label_counts": detector_service.label_counts(labels),
        **evaluation.summary,
    }
    write_json(eval_dir / "summary.json", summary)

    op = summary["operating_point"]
    click.echo(f"eval split={split} samples={len(specs)} tau={tau:.6g} p_fa={op['p_fa']} p_md={op['p_md']} accuracy={op['accuracy']}")
    ratio = summary["jammed_to_trusted_ratio"]
    if ratio is not None:
        click.echo(f"eval jammed_to_trusted_ratio={ratio:.4g}")
    click.echo(f"eval zero_error_interval={'none' if interval is None else f'({interval[0]:.6g}, {interval[1]:.6g}]'}")


@cli.command()
@config_options
@model_options
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--source", type=click.Path(path_type=Path), default=None, help="IQ corpus directory; defaults to the test split.")
@click.option("--trials", type=int, default=1000, show_default=True)
@click.option("--warmup", type=int, default=bench_service.WARMUP_TRIALS, show_default=True)
@click.option("--cycle/--no-cycle", default=True, show_default=True, help="Reuse frames when the source is shorter than the run.")
@click.option("--threshold", type=float, default=None)
@reports_errors
def bench(config_path, overrides, output_dir, force, model_kind, scale, checkpoint, source, trials, warmup, cycle, threshold) -> None:
    """Time load -> spectrogram -> model -> threshold per sample on one CPU thread."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    net, metadata = model_service.load_model(checkpoint or setup.checkpoint_path)
    iq = IQFileSource(source or setup.iq_dir("test"), cycle=cycle)
    params = metadata.get("spectrogram") or setup.config.spectrogram.model_dump(mode="json")
    kind = ModelKind(metadata["model_kind"]) if metadata.get("model_kind") else None
    tau = _threshold(metadata, threshold, None)

    spectrograms = SpectrogramService(n=params["n"], rows=params["rows"], epsilon=params["epsilon"])
    service = BenchService(net, tau, spectrograms, kind)

    bench_dir = setup.claim(setup.bench_dir)
    try:
        report = service.run(iq, trials=trials, warmup=warmup, progress=_progress())
    except SourceExhaustedError as e:
        bench_service.write_latency_csv(e.completed, bench_dir / "latency.csv")
        click.echo(f"bench completed_trials={len(e.completed)} before the source ran out")
        raise

    summary = service.write(report, bench_dir, setup.provenance())
    reference = summary.get("reference_p95")
    click.echo(
        f"bench trials={summary['trials']} p50={summary['p50']:.3f}ms p95={summary['p95']:.3f}ms p99={summary['p99']:.3f}ms"
        + (f" reference_p95={reference:g}ms" if reference is not None else "")
    )


@cli.command()
@config_options
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="Describe a trained model instead of the configured one.")
@model_options
@reports_errors
def describe(config_path, overrides, output_dir, force, checkpoint, model_kind, scale) -> None:
    """Print the layer / output size / parameter table."""
    if checkpoint is not None:
        net, _ = model_service.load_model(checkpoint)
        descriptor = getattr(net, "descriptor", None)
        if descriptor is None:
            raise ConfigurationError(f"{checkpoint} carries no model descriptor", field="checkpoint")
    else:
        cfg = load_config(config_path, overrides, output_dir=output_dir, model_kind=model_kind, scale=scale)
        descriptor = model_service.model_descriptor(cfg.model.kind, cfg.model.scale, cfg.spectrogram.rows, cfg.spectrogram.n)
    click.echo(f"{descriptor.kind} ({descriptor.scale}), input {descriptor.input_shape[0]} x {descriptor.input_shape[1]} x {descriptor.input_shape[2]}")
    click.echo(model_service.format_layer_table(descriptor))


@cli.command()
@config_options
@model_options
@reports_errors
def plot(config_path, overrides, output_dir, force, model_kind, scale) -> None:
    """Render sweep.csv and latency.csv of an experiment to PNG."""
    setup = _setup(config_path, overrides, output_dir, force, model_kind=model_kind, scale=scale)
    rendered: list[Path] = []
    sweep_csv = setup.eval_dir / "sweep.csv"
    if sweep_csv.exists():
        summary = read_json(setup.eval_dir / "summary.json") if (setup.eval_dir / "summary.json").exists() else {}
        log_tau = summary.get("score_kind") != ScoreKind.CLASS_PROBABILITY
        rendered.append(plot_service.plot_sweep(sweep_csv, setup.eval_dir / "sweep.png", log_tau=log_tau))
    latency_csv = setup.bench_dir / "latency.csv"
    if latency_csv.exists():
        summary = read_json(setup.bench_dir / "summary.json") if (setup.bench_dir / "summary.json").exists() else {}
        rendered.append(plot_service.plot_latency_cdf(latency_csv, setup.bench_dir / "latency_cdf.png", summary.get("reference_p95")))
    if not rendered:
        raise FileNotFoundError(f"No sweep.csv or latency.csv under {setup.output_dir}")
    for path in rendered:
        click.echo(f"plot path={path}")


if __name__ == "__main__":
    cli()
