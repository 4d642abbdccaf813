import json

import pytest

from conftest import TINY_TRAIN
from phenoquant import errors
from phenoquant.cli import build_config, load_settings, main
from phenoquant.misc.const import ExitCode
from phenoquant.misc.tables import read_header, read_table, write_table
from phenoquant.model.train import LossConfig
from phenoquant.synth import RecoveryShape, SynthConfig

TRAIN_SETTINGS = [f"--set={key}={value}" for key, value in TINY_TRAIN.items()]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic corpus carried through prep and every fit"""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "synth", "--set", "n_pixels=40", "--set", "years=2020", "--seed", 3) == 0
    assert run(
        "prep", "--out", root / "prep",
        "--pixels", root / "synth" / "pixels.csv",
        "--observations", root / "synth" / "raw_observations.csv",
    ) == 0
    prep = root / "prep"
    assert run(
        "fit", "--out", root / "fit", "--threads", 2,
        "--observations", prep / "observations.csv",
        "--features", prep / "features.csv",
        "--preprocessor", prep / "preprocessor.json",
        *TRAIN_SETTINGS,
    ) == 0
    for kind in ("global", "climatology"):
        assert run("fit", "--out", root / kind, "--kind", kind, "--observations", prep / "observations.csv") == 0
    return root


def model_args(root):
    return ["--checkpoint", root / "fit" / "checkpoint.json", "--features", root / "prep" / "features.csv"]


class TestPipeline:
    def test_prep_outputs(self, workspace):
        prep = workspace / "prep"
        rejections = read_table(prep / "rejections.csv", ("reason", "count"))
        assert rejections["reason"].iloc[0] == "retained"
        assert rejections["reason"].iloc[-1] == "skipped_pixels"
        assert len(read_table(prep / "features.csv", ("pixel_id",))) == 40
        assert read_header(prep / "summary.csv") == {"schema": "1", "command": "prep"}
        document = json.loads((prep / "preprocessor.json").read_text())
        assert document["schema_version"] == 1 and document["command"] == "prep"

    def test_fit_outputs(self, workspace):
        checkpoint = json.loads((workspace / "fit" / "checkpoint.json").read_text())
        assert checkpoint["kind"] == "conditional"
        log = read_table(workspace / "fit" / "training_log.csv", ("epoch", "total"))
        assert log["epoch"].tolist() == ["1", "2"]

        manifest = json.loads((workspace / "fit" / "manifest.json").read_text())
        assert manifest["command"] == "fit"
        assert manifest["threads"] == 2
        assert manifest["config"]["train"]["epochs"] == 2
        assert manifest["settings"]["width"] == "8"
        assert manifest["outputs"] == ["checkpoint.json", "training_log.csv"]
        assert set(manifest["inputs"]) == {"observations", "features", "preprocessor"}
        assert (workspace / "fit" / "run.log").read_text()

    def test_predict(self, workspace, tmp_path):
        assert run("predict", "--out", tmp_path / "conditional", *model_args(workspace), "--step", 61) == 0
        curves = read_table(tmp_path / "conditional" / "curves.csv", ("pixel_id", "bucket", "t", "f25", "f50", "f75"))
        assert len(curves) == 40 * 6
        assert curves["bucket"].tolist()[:6] == ["0", "61", "122", "183", "244", "305"]

        assert run(
            "predict", "--out", tmp_path / "global", "--checkpoint", workspace / "global" / "checkpoint.json"
        ) == 0
        curves = read_table(tmp_path / "global" / "curves.csv", ("pixel_id",))
        assert len(curves) == 366
        assert curves["pixel_id"].isna().all()

    def test_score_aggregate_and_case(self, workspace, tmp_path):
        observations = workspace / "prep" / "observations.csv"
        assert run("score", "--out", tmp_path / "score", *model_args(workspace), "--observations", observations) == 0
        anomalies = tmp_path / "score" / "anomalies.csv"
        assert len(read_table(anomalies, ("score", "flag"))) == len(read_table(observations, ()))

        assert run(
            "aggregate", "--out", tmp_path / "aggregate", "--anomalies", anomalies,
            "--window", "2020-06-01", "2020-06-30",
            "--coords", workspace / "synth" / "pixels.csv", "--grid-column", "flag",
        ) == 0
        aggregate = tmp_path / "aggregate"
        for name in ("daily.csv", "daily_by_date.csv", "seasonal.csv", "pixel_fraction.csv", "histogram.csv",
                     "summary.csv", "snapshot.csv"):
            assert read_header(aggregate / name)["command"] == "aggregate"
        assert len(read_table(aggregate / "daily.csv", ("bucket",))) == 366
        grid = (aggregate / "snapshot.asc").read_text().splitlines()
        assert grid[0] == "# phenoquant schema=1 command=aggregate"
        assert grid[1:3] == ["ncols 40", "nrows 1"]

        affected, control = tmp_path / "affected.csv", tmp_path / "control.csv"
        affected.write_text("pixel_id\n" + "\n".join(map(str, range(1, 11))) + "\n")
        control.write_text("pixel_id\n" + "\n".join(map(str, range(11, 21))) + "\n")
        assert run(
            "case", "--out", tmp_path / "case", "--anomalies", anomalies,
            "--affected", affected, "--control", control,
        ) == 0
        case = read_table(tmp_path / "case" / "case.csv", ("area", "date", "fraction"))
        assert set(case["area"]) == {"affected", "control"}

    def test_metrics(self, workspace, tmp_path):
        assert run(
            "metrics", "--out", tmp_path / "metrics", *model_args(workspace),
            "--reference", workspace / "global" / "checkpoint.json",
            "--observations", workspace / "prep" / "observations.csv",
            "--climatology", workspace / "climatology" / "checkpoint.json",
        ) == 0
        report = json.loads((tmp_path / "metrics" / "report.json").read_text())
        assert report["command"] == "metrics"
        assert len(report["coverage"]) == 3
        assert len(read_table(tmp_path / "metrics" / "per_day.csv", ("bucket",))) == 366

    def test_global_against_itself(self, workspace, tmp_path):
        global_checkpoint = workspace / "global" / "checkpoint.json"
        assert run(
            "metrics", "--out", tmp_path, "--checkpoint", global_checkpoint, "--reference", global_checkpoint,
            "--observations", workspace / "prep" / "observations.csv",
        ) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["d2"] == [0.0, 0.0, 0.0]

    def test_reruns_are_byte_identical(self, workspace, tmp_path):
        prep = workspace / "prep"
        assert run(
            "fit", "--out", tmp_path, "--threads", 1,
            "--observations", prep / "observations.csv",
            "--features", prep / "features.csv",
            "--preprocessor", prep / "preprocessor.json",
            *TRAIN_SETTINGS,
        ) == 0
        for name in ("checkpoint.json", "training_log.csv"):
            assert (tmp_path / name).read_bytes() == (workspace / "fit" / name).read_bytes()

        assert run("synth", "--out", tmp_path / "synth", "--set", "n_pixels=40", "--set", "years=2020",
                   "--seed", 3) == 0
        assert (tmp_path / "synth" / "raw_observations.csv").read_bytes() == \
               (workspace / "synth" / "raw_observations.csv").read_bytes()

    def test_resume_with_divergence_guard(self, workspace, tmp_path):
        prep = workspace / "prep"
        assert run(
            "fit", "--out", tmp_path, "--stop-on-divergence",
            "--resume", workspace / "fit" / "checkpoint.json",
            "--observations", prep / "observations.csv",
            "--features", prep / "features.csv",
            *TRAIN_SETTINGS, "--set=epochs=1",
        ) == 0
        log = read_table(tmp_path / "training_log.csv", ("epoch",))
        assert log["epoch"].tolist() == ["1", "2", "3"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["train"]["epochs"] == 1
        assert "resume" in manifest["inputs"]


def test_empty_observations_give_an_empty_table(workspace, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("pixel_id,date,t,ndvi\n")
    code = run(
        "score", "--out", tmp_path / "out", "--checkpoint", workspace / "global" / "checkpoint.json",
        "--observations", empty,
    )
    assert code == 0
    lines = (tmp_path / "out" / "anomalies.csv").read_text().splitlines()
    assert lines == ["# phenoquant schema=1 command=score", "pixel_id,date,t,ndvi,score,flag,positive,usable,f25,f75"]


class TestExitCodes:
    def test_unknown_setting(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--set", "colour=blue") == ExitCode.USAGE
        line = capsys.readouterr().err.strip().splitlines()[-1]
        assert line.startswith("error code=2 kind=ConfigurationError message=Unknown configuration keys: colour")

    def test_bad_usage(self, tmp_path):
        assert run("predict", "--out", tmp_path) == ExitCode.USAGE
        assert run("frobnicate") == ExitCode.USAGE
        assert run("predict", "--out", tmp_path, "--checkpoint", "x", "--step", 0) == ExitCode.USAGE

    def test_conditional_fit_needs_features(self, workspace, tmp_path):
        assert run(
            "fit", "--out", tmp_path, "--observations", workspace / "prep" / "observations.csv"
        ) == ExitCode.USAGE

    def test_missing_column(self, workspace, tmp_path):
        pixels = read_table(workspace / "synth" / "pixels.csv", ())
        write_table(tmp_path / "pixels.csv", pixels.drop(columns="habitat"), "synth")
        code = run(
            "prep", "--out", tmp_path / "out", "--pixels", tmp_path / "pixels.csv",
            "--observations", workspace / "synth" / "raw_observations.csv",
        )
        assert code == ExitCode.MISSING_COLUMNS

    def test_schema_version(self, workspace, tmp_path):
        document = json.loads((workspace / "global" / "checkpoint.json").read_text())
        document["schema_version"] = 99
        checkpoint = tmp_path / "checkpoint.json"
        checkpoint.write_text(json.dumps(document))
        code = run(
            "score", "--out", tmp_path / "out", "--checkpoint", checkpoint,
            "--observations", workspace / "prep" / "observations.csv",
        )
        assert code == ExitCode.SCHEMA_VERSION

    def test_unreadable_checkpoint(self, workspace, tmp_path):
        checkpoint = tmp_path / "checkpoint.json"
        checkpoint.write_text("{not json")
        code = run(
            "score", "--out", tmp_path / "out", "--checkpoint", checkpoint,
            "--observations", workspace / "prep" / "observations.csv",
        )
        assert code == ExitCode.SCHEMA_VERSION

    def test_dimension_mismatch(self, workspace, tmp_path):
        features = read_table(workspace / "prep" / "features.csv", ())
        write_table(tmp_path / "features.csv", features.drop(columns="slope"), "prep")
        code = run(
            "score", "--out", tmp_path / "out", "--checkpoint", workspace / "fit" / "checkpoint.json",
            "--features", tmp_path / "features.csv", "--observations", workspace / "prep" / "observations.csv",
        )
        assert code == ExitCode.DIMENSION_MISMATCH

    def test_missing_input(self, workspace, tmp_path, capsys):
        code = run(
            "score", "--out", tmp_path, "--checkpoint", workspace / "global" / "checkpoint.json",
            "--observations", tmp_path / "absent.csv",
        )
        assert code == ExitCode.MISSING_INPUT
        assert "kind=FileNotFoundError" in capsys.readouterr().err

    def test_empty_evaluation_set(self, workspace, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("pixel_id,date,ndvi\n")
        checkpoint = workspace / "global" / "checkpoint.json"
        code = run(
            "metrics", "--out", tmp_path / "out", "--checkpoint", checkpoint, "--reference", checkpoint,
            "--observations", empty,
        )
        assert code == ExitCode.EMPTY_INPUT


class TestSettings:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "settings.ini"
        path.write_text("n_pixels = 12\nlambda_nc = 4\n")
        settings = load_settings(str(path), ["n_pixels=15"])
        assert settings == {"n_pixels": "15", "lambda_nc": "4"}
        assert build_config(SynthConfig, settings).n_pixels == 15
        assert build_config(LossConfig, settings).lambda_nc == 4.0

    def test_injections(self):
        config = build_config(
            SynthConfig, {"injections": "0.2,2020-06-01,30,2.0;0.1,2020-07-01,10,1.5,linear", "years": "2020"}
        )
        assert config.years == (2020,)
        assert [i.fraction for i in config.injections] == [0.2, 0.1]
        assert config.injections[1].shape is RecoveryShape.LINEAR

    @pytest.mark.parametrize("settings", [{"n_pixels": "many"}, {"dropout": "2"}, {"injections": "0.2,x,30,2"}])
    def test_rejected_values(self, settings):
        with pytest.raises(errors.ConfigurationError):
            build_config(SynthConfig, settings)

    def test_malformed_override(self):
        with pytest.raises(errors.ConfigurationError):
            load_settings(None, ["n_pixels"])
