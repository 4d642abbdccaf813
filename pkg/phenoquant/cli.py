"""
Command line interface.

Every subcommand writes into an output directory: its primary tables, a
``manifest.json`` with the effective configuration and a ``run.log`` with
time-stamped log lines. Primary outputs never contain timestamps, so
repeating a run with the same inputs and seed reproduces them byte for
byte.
"""
import argparse
from collections.abc import Callable, Sequence
import configparser
import dataclasses
import datetime
import enum
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np
import pandas as pd

from . import __version__, errors
from .analysis import anomaly, metrics
from .misc import tables
from .misc.const import SCHEMA_VERSION, ExitCode, ModelKind
from .misc.days import bucket_grid
from .model.baselines import ClimatologyBaseline, GlobalBaseline, fit_climatology, fit_global
from .model.features import (
    FeatureMatrix,
    ObservationTable,
    PreprocessorState,
    apply_preprocessor,
    filter_table,
    fit_preprocessor,
)
from .model.train import Checkpoint, LossConfig, TrainConfig, TrainingSet, fit
from .synth import Injection, SynthConfig, generate, write_corpus
from .utils.handlers import stop_on_divergence, write_training_log

__all__ = (
    "main",
    "build_parser",
)

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected error
  2  usage or configuration error
  3  an input table lacks required columns
  4  schema version mismatch or unreadable checkpoint
  5  checkpoint does not fit the features
  6  an input path does not exist
  7  an input is empty where data is required
  8  the loss or gradient became non-finite
"""

_CONFIG_TYPES = {
    "train": TrainConfig,
    "loss": LossConfig,
    "synth": SynthConfig,
    "anomaly": anomaly.AnomalyConfig,
}
_SECTION = "phenoquant"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise errors.ConfigurationError(message)


# Configuration


def _known_keys() -> set[str]:
    return {f.name for cls in _CONFIG_TYPES.values() for f in dataclasses.fields(cls)}


def load_settings(path: str|None, overrides: Sequence[str]) -> dict[str, str]:
    """Merge a ``key = value`` file with ``key=value`` overrides

    Raises
    ------
    :class:`ConfigurationError`
        A key is unknown or an override is not of the form ``key=value``
    """
    settings: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(f"[{_SECTION}]\n" + Path(path).read_text(encoding="utf-8"))
        except configparser.Error as e:
            raise errors.ConfigurationError(f"{path}: {e}") from e
        settings.update(parser[_SECTION])
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep:
            raise errors.ConfigurationError(f"Override {override!r} is not of the form key=value")
        settings[key.strip()] = value.strip()

    unknown = sorted(set(settings) - _known_keys())
    if unknown:
        raise errors.ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
    return settings


def _parse_injections(text: str) -> tuple[Injection, ...]:
    injections = []
    for entry in filter(None, (part.strip() for part in text.split(";"))):
        fields = [f.strip() for f in entry.split(",")]
        if len(fields) not in (4, 5):
            raise ValueError(f"Injection {entry!r} needs fraction,start,duration,drop[,shape]")
        injections.append(Injection(
            float(fields[0]),
            datetime.date.fromisoformat(fields[1]),
            int(fields[2]),
            float(fields[3]),
            *fields[4:],
        ))
    return tuple(injections)


def _coerce(name: str, default, text: str):
    if name == "injections":
        return _parse_injections(text)
    if name == "crossing_pairs":
        return tuple(tuple(int(i) for i in pair.split("-")) for pair in text.split(","))
    if isinstance(default, bool):
        if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"{text!r} is not a boolean")
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        element = type(default[0]) if default else float
        return tuple(element(v) for v in text.split(","))
    return type(default)(text)


def build_config[C](cls: type[C], settings: dict[str, str]) -> C:
    """A configuration object from defaults overridden by ``settings``

    Raises
    ------
    :class:`ConfigurationError`
        A value does not parse or the object rejects it
    """
    kwargs = {}
    for field in dataclasses.fields(cls):
        if field.name in settings:
            try:
                kwargs[field.name] = _coerce(field.name, field.default, settings[field.name])
            except ValueError as e:
                raise errors.ConfigurationError(f"{field.name}: {e}") from e
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise errors.ConfigurationError(f"{cls.__name__}: {e}") from e


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, datetime.date):
        return value.isoformat()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Cannot serialise {type(value)}")


# Runs


class Run:
    """Output directory, log file and manifest of one subcommand"""

    def __init__(self, command: str, args: argparse.Namespace, settings: dict[str, str]):
        self.command = command
        self.args = args
        self.settings = settings
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}

    def input(self, name: str, path: str|None, *, required: bool=True) -> Path|None:
        """Register an input path, checking that it exists"""
        if path is None:
            if required:
                raise errors.ConfigurationError(f"--{name} is required")
            return None
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Input {name} {path} does not exist")
        self.inputs[name] = str(path)
        return path

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def table(self, name: str, frame: pd.DataFrame) -> None:
        tables.write_table(self.path(name), frame, self.command)

    def document(self, name: str, document: dict) -> None:
        document = {"schema_version": SCHEMA_VERSION, "command": self.command, **document}
        self.path(name).write_text(
            json.dumps(document, sort_keys=True, indent=1, default=_plain) + "\n", encoding="utf-8"
        )

    def use(self, key: str, config) -> None:
        self.config[key] = dataclasses.asdict(config)

    def write_manifest(self) -> None:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "settings": dict(sorted(self.settings.items())),
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "threads": self.args.threads,
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1, default=_plain) + "\n", encoding="utf-8"
        )


def _load_preprocessor(path: Path) -> PreprocessorState:
    """From a ``preprocessor.json`` written by ``prep`` or from a checkpoint"""
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise errors.CheckpointError(f"{path} is not a JSON document") from e
    if document.get("schema_version") != SCHEMA_VERSION:
        raise errors.SchemaVersionError(
            f"{path} has schema version {document.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    if "preprocessor" not in document:
        raise errors.CheckpointError(f"{path} holds no preprocessor state")
    return PreprocessorState.from_dict(document["preprocessor"])


def _save_checkpoint(run: Run, checkpoint: Checkpoint) -> None:
    document = checkpoint.to_document()
    document["command"] = run.command
    run.path("checkpoint.json").write_text(
        json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _model_inputs(
        run: Run,
        checkpoint: Checkpoint
) -> tuple[FeatureMatrix|None, pd.DataFrame|None]:
    if checkpoint.kind is not ModelKind.CONDITIONAL:
        return None, None
    path = run.input("features", run.args.features)
    return tables.read_features(path, checkpoint.preprocessor)


def _with_features(observations: ObservationTable, features: FeatureMatrix|None) -> ObservationTable:
    if features is None:
        return observations
    known = np.isin(observations.pixel_id, features.pixel_ids)
    if not known.all():
        logging.warning("Ignoring %d observations of pixels without features", int((~known).sum()))
    return observations.take(known)


def _predict(checkpoint: Checkpoint, observations: ObservationTable, features: FeatureMatrix|None):
    if len(observations) == 0:
        return np.empty((0, 3))
    return checkpoint.model().predict(observations, features)


# Subcommands


def _synth(run: Run) -> None:
    config = build_config(SynthConfig, run.settings)
    run.use("synth", config)
    corpus = generate(config)
    for path in write_corpus(corpus, run.out, run.command):
        run.outputs.append(path.name)


def _prep(run: Run) -> None:
    args = run.args
    pixels = run.input("pixels", args.pixels)
    observations = run.input("observations", args.observations)
    stored = run.input("preprocessor", args.preprocessor, required=False)

    skipped: list[int] = []
    if stored is not None:
        state = _load_preprocessor(stored)
        logging.info("Applying stored preprocessor from %s", stored)
        records = tables.read_pixel_records(pixels, state.feature_names, skipped=skipped)
    else:
        records = tables.read_pixel_records(pixels, skipped=skipped)
        state = fit_preprocessor(records)
    features = apply_preprocessor(state, records, skipped=skipped)
    matrix = FeatureMatrix.from_features(features, state.n_continuous, state.n_habitats)
    coords = pd.DataFrame(
        [(r.pixel_id, r.row, r.col) for r in records if r.row is not None and r.col is not None],
        columns=["pixel_id", "row", "col"],
    )

    raw = tables.read_raw_observations(observations)
    table, tally = filter_table(raw["pixel_id"], raw["date"], raw["ndvi"], raw["ndsi"], raw["mask"])

    tables.write_features(run.path("features.csv"), matrix, state, coords, run.command)
    tables.write_observations(run.path("observations.csv"), table, run.command)
    run.document("preprocessor.json", {"preprocessor": state.to_dict()})
    run.table("summary.csv", pd.DataFrame({
        "feature": state.feature_names,
        "mean": state.means,
        "std": state.stds,
        "impute": state.impute_values,
    }))
    reasons = ["retained", *(str(r) for r in tally), "skipped_pixels"]
    counts = [len(table), *tally.values(), len(skipped)]
    run.table("rejections.csv", pd.DataFrame({"reason": reasons, "count": counts}))
    logging.info(
        "Prepared %d pixels (%d species, %d habitats) and %d observations",
        len(matrix), state.n_species, state.n_habitats, len(table)
    )


def _fit(run: Run) -> None:
    args = run.args
    kind = ModelKind(args.kind)
    observations = tables.read_observations(run.input("observations", args.observations))

    if kind is not ModelKind.CONDITIONAL:
        baseline = fit_global(observations) if kind is ModelKind.GLOBAL else fit_climatology(observations)
        _save_checkpoint(run, Checkpoint(kind, baseline=baseline))
        return

    train_config = build_config(TrainConfig, run.settings)
    loss_config = build_config(LossConfig, run.settings)
    run.use("train", train_config)
    run.use("loss", loss_config)
    initial = None
    resume = run.input("resume", args.resume, required=False)
    if resume is not None:
        initial = Checkpoint.load(resume)
        state = initial.preprocessor
    else:
        state = _load_preprocessor(run.input("preprocessor", args.preprocessor))
    features, _ = tables.read_features(run.input("features", args.features), state)
    dataset = TrainingSet.build(features, observations)

    log_path = run.path("training_log.csv")

    def attach(trainer):
        write_training_log(trainer, log_path, run.command)
        if args.stop_on_divergence:
            stop_on_divergence(trainer)

    checkpoint = fit(
        dataset,
        train_config,
        loss_config,
        preprocessor=state,
        initial=initial,
        threads=args.threads,
        setup=attach,
    )
    _save_checkpoint(run, checkpoint)


def _predict_cmd(run: Run) -> None:
    args = run.args
    checkpoint = Checkpoint.load(run.input("checkpoint", args.checkpoint))
    features, _ = _model_inputs(run, checkpoint)
    if features is not None and args.pixels is not None:
        wanted = tables.read_pixel_set(run.input("pixels", args.pixels))
        features = features.take(np.isin(features.pixel_ids, wanted))

    t_grid = bucket_grid()[::args.step]
    if features is not None and len(features) == 0:
        values = np.empty((0, len(t_grid), 3))
    else:
        values = checkpoint.model().predict_grid(features, t_grid)
    n_rows = values.shape[0]
    pixel_ids = features.pixel_ids if features is not None else [None] * n_rows
    frame = pd.DataFrame({
        "pixel_id": pd.array(np.repeat(pixel_ids, len(t_grid)), dtype="Int64"),
        "bucket": np.tile(np.arange(0, len(bucket_grid()), args.step), n_rows),
        "t": np.tile(t_grid, n_rows),
        "f25": values[..., 0].reshape(-1),
        "f50": values[..., 1].reshape(-1),
        "f75": values[..., 2].reshape(-1),
    })
    run.table("curves.csv", frame)


def _score(run: Run) -> None:
    args = run.args
    config = build_config(anomaly.AnomalyConfig, run.settings)
    run.use("anomaly", config)
    checkpoint = Checkpoint.load(run.input("checkpoint", args.checkpoint))
    features, _ = _model_inputs(run, checkpoint)
    observations = _with_features(
        tables.read_observations(run.input("observations", args.observations)), features
    )
    records = anomaly.score_table(observations, _predict(checkpoint, observations, features), config)
    run.table("anomalies.csv", records.frame())


def _metrics(run: Run) -> None:
    args = run.args
    model_path = run.input("checkpoint", args.checkpoint)
    reference_path = run.input("reference", args.reference)
    checkpoint = Checkpoint.load(model_path)
    reference = Checkpoint.load(reference_path)
    features = None
    if ModelKind.CONDITIONAL in (checkpoint.kind, reference.kind):
        state = (checkpoint if checkpoint.kind is ModelKind.CONDITIONAL else reference).preprocessor
        features, _ = tables.read_features(run.input("features", args.features), state)
    observations = _with_features(
        tables.read_observations(run.input("observations", args.observations)), features
    )
    if len(observations) == 0:
        raise errors.EmptyInputError("No observations to evaluate on")

    climatology_path = run.input("climatology", args.climatology, required=False)
    if climatology_path is not None:
        climatology = Checkpoint.load(climatology_path).model()
        if not isinstance(climatology, ClimatologyBaseline):
            raise errors.CheckpointError(f"{climatology_path} is not a climatology checkpoint")
    else:
        logging.info("Fitting the per-day reference climatology on the evaluation observations")
        climatology = fit_climatology(observations)

    report = metrics.evaluate(
        _predict(checkpoint, observations, features),
        _predict(reference, observations, features),
        observations,
        climatology_predictions=climatology.predict(observations),
        model=f"{checkpoint.kind}:{model_path.stem}",
        reference=f"{reference.kind}:{reference_path.stem}",
    )
    run.path("report.json").write_text(report.to_json(run.command), encoding="utf-8")
    run.table("report.csv", metrics.summary_frame([report]))
    run.table("per_day.csv", report.per_day.frame())


def _read_anomalies(run: Run) -> anomaly.AnomalyTable:
    path = run.input("anomalies", run.args.anomalies)
    frame = tables.read_table(
        path,
        ("pixel_id", "date", "t", "ndvi", "score", "flag", "positive", "usable", "f25", "f75"),
        source=f"anomaly table {path}",
    )
    return anomaly.AnomalyTable.from_frame(frame)


def _aggregate(run: Run) -> None:
    args = run.args
    records = _read_anomalies(run)

    daily = anomaly.daily_fraction(records)
    run.table("daily.csv", daily.frame())
    run.table("daily_by_date.csv", daily.per_date)
    run.table("seasonal.csv", anomaly.seasonal_fraction(records))
    pixels = anomaly.pixel_fraction(records)
    run.table("pixel_fraction.csv", pixels.per_pixel)
    run.table("histogram.csv", pixels.histogram)
    summary = {"overall_fraction": daily.overall, **pixels.summary()}
    run.table("summary.csv", pd.DataFrame({"statistic": list(summary), "value": list(summary.values())}))

    window = None
    if args.window is not None:
        window = tuple(datetime.date.fromisoformat(d) for d in args.window)
    elif args.dates is not None:
        window = [datetime.date.fromisoformat(d) for d in args.dates.split(",")]
    if window is None:
        return
    snapshot = anomaly.snapshot_map(records, window, anomaly.MergeRule(args.merge))
    run.table("snapshot.csv", snapshot)
    coords_path = run.input("coords", args.coords, required=False)
    if coords_path is not None:
        frame = tables.read_table(coords_path, ("pixel_id", "row", "col"), source="coordinate table")
        coords = frame[["pixel_id", "row", "col"]].apply(pd.to_numeric).dropna().astype(np.int64)
        grid = anomaly.ascii_grid(snapshot, coords, column=args.grid_column)
        run.path("snapshot.asc").write_text(
            tables.header_line(run.command) + "\n" + grid, encoding="utf-8"
        )


def _case(run: Run) -> None:
    args = run.args
    records = _read_anomalies(run)
    affected = tables.read_pixel_set(run.input("affected", args.affected))
    control = tables.read_pixel_set(run.input("control", args.control))
    run.table("case.csv", anomaly.case_study(records, affected, control).frame)


_COMMANDS: dict[str, Callable[[Run], None]] = {
    "synth": _synth,
    "prep": _prep,
    "fit": _fit,
    "predict": _predict_cmd,
    "score": _score,
    "metrics": _metrics,
    "aggregate": _aggregate,
    "case": _case,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--config", help="File of key = value settings")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="Override a setting"
    )
    common.add_argument("--seed", type=int, help="Shorthand for --set seed=N")
    common.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1,
        help="Worker threads; results do not depend on it (default: all cores)"
    )
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(
        prog="phenoquant",
        description="Conditional quantile models of the seasonal greenness cycle",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate a synthetic corpus")

    prep = sub.add_parser("prep", parents=[common], help="Filter observations and preprocess features")
    prep.add_argument("--pixels", required=True, help="Raw pixel covariate table")
    prep.add_argument("--observations", required=True, help="Raw observation table")
    prep.add_argument("--preprocessor", help="Apply this stored preprocessor instead of fitting one")

    fit_parser = sub.add_parser("fit", parents=[common], help="Train a model or fit a baseline")
    fit_parser.add_argument("--kind", choices=[k.value for k in ModelKind], default="conditional")
    fit_parser.add_argument("--observations", required=True)
    fit_parser.add_argument("--features")
    fit_parser.add_argument("--preprocessor")
    fit_parser.add_argument("--resume", help="Continue from this checkpoint")
    fit_parser.add_argument(
        "--stop-on-divergence", action="store_true",
        help="Abort with exit code 8 once the epoch loss stays far above its best value"
    )

    predict = sub.add_parser("predict", parents=[common], help="Quantile curves on a day grid")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--features")
    predict.add_argument("--pixels", help="Table whose pixel_id column selects pixels")
    predict.add_argument("--step", type=int, default=1, help="Day buckets between grid points")

    score = sub.add_parser("score", parents=[common], help="Anomaly scores of observations")
    score.add_argument("--checkpoint", required=True)
    score.add_argument("--observations", required=True)
    score.add_argument("--features")

    metrics_parser = sub.add_parser("metrics", parents=[common], help="Goodness of fit against a reference")
    metrics_parser.add_argument("--checkpoint", required=True)
    metrics_parser.add_argument("--reference", required=True)
    metrics_parser.add_argument("--observations", required=True)
    metrics_parser.add_argument("--features")
    metrics_parser.add_argument("--climatology", help="Climatology checkpoint for the per-day skill")

    aggregate = sub.add_parser("aggregate", parents=[common], help="Anomaly fractions and snapshot maps")
    aggregate.add_argument("--anomalies", required=True)
    window = aggregate.add_mutually_exclusive_group()
    window.add_argument("--window", nargs=2, metavar=("FIRST", "LAST"), help="Inclusive snapshot dates")
    window.add_argument("--dates", help="Comma separated snapshot dates")
    aggregate.add_argument("--merge", choices=[m.value for m in anomaly.MergeRule], default="any")
    aggregate.add_argument("--coords", help="Table with pixel_id, row, col for the ASCII grid")
    aggregate.add_argument("--grid-column", choices=("score", "flag"), default="score")

    case = sub.add_parser("case", parents=[common], help="Case study of an affected and a control area")
    case.add_argument("--anomalies", required=True)
    case.add_argument("--affected", required=True)
    case.add_argument("--control", required=True)
    return parser


def _exit_code(error: BaseException) -> ExitCode:
    match error:
        case errors.ConfigurationError():
            return ExitCode.USAGE
        case errors.MissingColumnsError():
            return ExitCode.MISSING_COLUMNS
        case errors.SchemaVersionError():
            return ExitCode.SCHEMA_VERSION
        case errors.DimensionMismatchError():
            return ExitCode.DIMENSION_MISMATCH
        case errors.CheckpointError():
            return ExitCode.SCHEMA_VERSION
        case FileNotFoundError():
            return ExitCode.MISSING_INPUT
        case errors.EmptyInputError():
            return ExitCode.EMPTY_INPUT
        case errors.NonFiniteError():
            return ExitCode.NON_FINITE
    return ExitCode.UNEXPECTED


def _configure_logging(verbose: int, log_path: Path|None) -> list[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(max(logging.DEBUG, logging.WARNING - 10 * verbose))
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handlers: list[logging.Handler] = [console]
    if log_path is not None:
        logfile = logging.FileHandler(log_path, mode="w", encoding="utf-8")
        logfile.setLevel(logging.DEBUG if verbose > 1 else logging.INFO)
        logfile.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        handlers.append(logfile)
    for handler in handlers:
        root.addHandler(handler)
    logging.captureWarnings(True)
    return handlers


def main(argv: Sequence[str]|None=None) -> int:
    handlers: list[logging.Handler] = []
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        settings = load_settings(args.config, overrides)
        if args.threads < 1:
            raise errors.ConfigurationError("--threads must be at least 1")
        if getattr(args, "step", 1) < 1:
            raise errors.ConfigurationError("--step must be at least 1")
        run = Run(args.command, args, settings)
        handlers = _configure_logging(args.verbose, run.out / "run.log")
        logging.info("phenoquant %s %s", __version__, args.command)
        _COMMANDS[args.command](run)
        run.write_manifest()
        logging.info("Wrote %s", ", ".join(sorted(run.outputs)))
        return ExitCode.OK
    except Exception as e:
        code = _exit_code(e)
        if code is ExitCode.UNEXPECTED:
            logging.debug("Unexpected failure", exc_info=True)
        message = " ".join(str(e).split())
        print(f"error code={int(code)} kind={type(e).__name__} message={message}", file=sys.stderr)
        return code
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()
        logging.captureWarnings(False)


if __name__ == "__main__":
    sys.exit(main())
