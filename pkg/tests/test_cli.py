import csv
import json
from pathlib import Path

import numpy as np
import pytest

from cnolab import experiment as ex
from cnolab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from cnolab.cno import evaluate
from cnolab.config import ConfigError, load_config, parse_config, render_config
from cnolab.solvers.etdrk4 import SolverDivergenceError
from cnolab.training import read_history_csv

TINY = """
[experiment]
equation = ks
resolution = 16
seed = 3
output_dir = {out}
transfer_target = scenario2
n_target = 4

[source]
K = 2
split_sizes = 8, 4, 4
dt = 0.005

[target.scenario1]
K = 3
split_sizes = 8, 4, 4
dt = 0.005

[target.scenario2]
K = 4
split_sizes = 8, 4, 4
dt = 0.005

[model]
levels = 1
lifting_channels = 4
res_blocks_per_level = 1
bottleneck_res_blocks = 1

[pretrain]
epochs = 3
batch_size = 4

[transfer]
epochs = 2
batch_size = 4
repeats = 2

[adapters]
n_tail_blocks = 1

[sweep]
sizes = 2, 4
"""


def write_config(tmp_path, out=None, text=TINY, name="tiny.ini"):
    path = tmp_path / name
    path.write_text(text.format(out=out or tmp_path / "run"), "utf-8")
    return path


class TestConfig:
    def test_defaults_and_values(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.source.params == {"K": 2}
        assert cfg.targets["scenario2"].split_sizes == (8, 4, 4)
        assert cfg.pretrain.epochs == 3 and cfg.pretrain.seed == 3
        assert cfg.transfer.repeats == 2
        assert cfg.finetune.n_tail_blocks == 1
        assert cfg.mmd.sigma is None and cfg.mmd.embed_resolution == 32

    def test_render_round_trip(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        text = render_config(cfg)
        assert "K = 2" in text
        assert parse_config(text) == cfg
        assert render_config(parse_config(text)) == text

    def test_overrides(self, tmp_path):
        cfg = load_config(write_config(tmp_path), {"seed": 9, "resolution": 32, "output_dir": "elsewhere"})
        assert (cfg.seed, cfg.resolution, cfg.output_dir) == (9, 32, "elsewhere")
        assert cfg.transfer.seed == 9

    def test_stage_seed(self, tmp_path):
        text = TINY.replace("[pretrain]\n", "[pretrain]\nseed = 11\n")
        cfg = load_config(write_config(tmp_path, text=text))
        assert cfg.pretrain.seed == 11 and cfg.transfer.seed == 3
        assert parse_config(render_config(cfg)) == cfg

    @pytest.mark.parametrize(
        "edit",
        [
            ("[model]\n", "[model]\nwidth = 3\n"),
            ("[sweep]\n", "[bogus]\nx = 1\n[sweep]\n"),
            ("equation = ks", "equation = heat"),
            ("transfer_target = scenario2", "transfer_target = scenario9"),
            ("n_tail_blocks = 1", "n_tail_blocks = 2"),
            ("epochs = 3", "epochs = three"),
            ("K = 2\n", "nu = 1e-3\n"),
            ("[model]\n", "[model]\nin_shift = 1.0\n"),
        ],
    )
    def test_rejected(self, tmp_path, edit):
        text = TINY.replace(*edit)
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, text=text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "none.ini")]) == EXIT_CONFIG

    def test_bad_arguments(self):
        assert main(["transfer", "--strategy", "magic", "--config", "x"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_resolution_flag_choices(self, tmp_path):
        assert main(["generate", "--config", str(write_config(tmp_path)), "--resolution", "48"]) == EXIT_CONFIG

    def test_pretrain_without_data(self, tmp_path, capsys):
        assert main(["pretrain", "--config", str(write_config(tmp_path))]) == EXIT_DATA
        assert "generate" in capsys.readouterr().err

    def test_transfer_without_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["generate", "--config", str(cfg)]) == EXIT_OK
        assert main(["transfer", "--config", str(cfg), "--strategy", "nlt"]) == EXIT_DATA
        assert "pretrain" in capsys.readouterr().err

    def test_report_on_empty_directory(self, tmp_path):
        out = tmp_path / "empty"
        assert main(["report", "--config", str(write_config(tmp_path)), "--out", str(out)]) == EXIT_DATA
        assert not (out / "report").exists()

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["generate", "--config", str(write_config(tmp_path)), "--out", str(blocker / "run")]) == EXIT_DATA

    def test_conflicting_frozen_config(self, tmp_path):
        out = tmp_path / "run"
        assert main(["mmd", "--config", str(write_config(tmp_path)), "--out", str(out)]) == EXIT_DATA
        assert (out / "config.ini").exists()
        assert main(["mmd", "--config", str(write_config(tmp_path)), "--out", str(out), "--seed", "99"]) == EXIT_CONFIG

    def test_numeric_divergence(self, tmp_path, monkeypatch):
        def boom(cfg):
            raise SolverDivergenceError("step 3 produced non-finite values")

        monkeypatch.setattr(ex, "cmd_generate", boom)
        assert main(["generate", "--config", str(write_config(tmp_path))]) == EXIT_NUMERIC


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = write_config(root)
    run = root / "run"
    codes = {}
    for command in (["generate"], ["pretrain"], ["transfer", "--strategy", "no_transfer"], ["transfer", "--strategy", "nlt"],
                    ["transfer", "--strategy", "lora"], ["transfer", "--strategy", "supervised"], ["sweep-nt"], ["mmd"], ["report"]):
        codes[" ".join(command)] = main([command[0], "--config", str(config), *command[1:]])
    return load_config(config), run, codes


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, _, codes = pipeline
        assert set(codes.values()) == {EXIT_OK}, codes

    def test_dataset_files(self, pipeline):
        cfg, run, _ = pipeline
        files = sorted(p.name for p in (run / "data").glob("source_*.cnot"))
        assert len(files) == 6
        assert [len(ex.load_split(cfg, "source", s)) for s in ("train", "val", "test")] == [8, 4, 4]

    def test_generate_rerun_byte_identical(self, pipeline, tmp_path):
        cfg, run, _ = pipeline
        before = {p.name: p.read_bytes() for p in (run / "data").iterdir()}
        assert main(["generate", "--config", str(run / "config.ini")]) == EXIT_OK
        assert {p.name: p.read_bytes() for p in (run / "data").iterdir()} == before

    def test_pretrain_outputs(self, pipeline):
        _, run, _ = pipeline
        result = json.loads((run / "pretrain" / "result.json").read_text())
        assert (run / "pretrain" / "checkpoint" / "manifest.json").exists()
        assert len(read_history_csv(run / "pretrain" / "history.csv")) == 4
        assert result["mean_field_error"] > 0

    def test_no_transfer_single_evaluation(self, pipeline):
        cfg, run, _ = pipeline
        result = ex.load_result(cfg, "scenario2", "no_transfer")
        assert len(result.errors) == 1
        assert not list((run / "transfer" / "scenario2" / "no_transfer").glob("seed*"))

    def test_nlt_epoch_zero_matches_source(self, pipeline):
        cfg, run, _ = pipeline
        source = ex.load_source(cfg)
        va = ex.load_split(cfg, "scenario2", "val")
        expected = evaluate(source, va.inputs, va.outputs, 64)
        for seed in (3, 4):
            rows = read_history_csv(run / "transfer" / "scenario2" / "nlt" / f"seed{seed}" / "history.csv")
            assert rows[0]["epoch"] == 0 and rows[0]["val_error"] == expected

    def test_result_has_all_seeds(self, pipeline):
        cfg, _, _ = pipeline
        result = ex.load_result(cfg, "scenario2", "nlt")
        assert result.seeds == [3, 4] and len(result.errors) == 2
        assert result.mean == pytest.approx(np.mean(result.errors))
        assert result.mmd is not None and result.mmd > 0
        assert len(result.checkpoints) == 2

    def test_reload_trained_adapter(self, pipeline):
        cfg, _, _ = pipeline
        result = ex.load_result(cfg, "scenario2", "lora")
        source = ex.load_source(cfg)
        te = ex.load_split(cfg, "scenario2", "test")
        model = ex.load_trained(Path(result.checkpoints[0]), source)
        assert evaluate(model, te.inputs, te.outputs) == pytest.approx(result.errors[0], rel=1e-12)

    def test_sweep_csv(self, pipeline):
        _, run, _ = pipeline
        rows = ex.read_sweep(run / "sweep" / "scenario2" / "sweep.csv")
        assert [r["n_t"] for r in rows] == [2, 4]
        assert set(rows[0]) == {"n_t", "nlt_mean", "nlt_std", "supervised_mean", "supervised_std"}

    def test_nested_subsets(self, pipeline):
        cfg, _, _ = pipeline
        small = ex.target_subset(cfg, "scenario2", 2)
        large = ex.target_subset(cfg, "scenario2", 4)
        np.testing.assert_array_equal(small.inputs, large.inputs[:2])
        with pytest.raises(ConfigError):
            ex.target_subset(cfg, "scenario2", 9)

    def test_mmd_csv(self, pipeline):
        _, run, _ = pipeline
        with open(run / "mmd.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["target"] for r in rows] == ["scenario1", "scenario2"]
        assert rows[0]["bandwidth_rule"] == "median"

    def test_report_tables(self, pipeline):
        _, run, _ = pipeline
        with open(run / "report" / "table2.csv", newline="") as fh:
            rows = {r["row"]: r for r in csv.DictReader(fh)}
        assert rows["finetune"]["scenario2_mark"] == "missing"
        marks = [rows[s]["scenario2_mark"] for s in ("no_transfer", "supervised", "lora", "nlt")]
        assert sorted(m for m in marks if m) == ["best", "second"]
        best = min(("no_transfer", "supervised", "lora", "nlt"), key=lambda s: float(rows[s]["scenario2_mean"]))
        assert rows[best]["scenario2_mark"] == "best"
        with open(run / "report" / "table1.csv", newline="") as fh:
            (t1,) = list(csv.DictReader(fh))
        assert t1["scenario1_no_transfer_error"] == "missing"
        assert float(t1["scenario2_no_transfer_error"]) > 0

    def test_report_figures(self, pipeline):
        cfg, run, _ = pipeline
        assert (run / "report" / "fig4.png").stat().st_size > 0
        assert (run / "report" / "contours_ks.png").stat().st_size > 0
        truth, panels = ex.contour_panels(cfg, "scenario2")
        assert list(panels) == list(ex.CONTOUR_COLUMNS) and len(panels) == 7
        assert len(truth) == 3 and panels["finetune"] is None

    def test_report_rows_recomputable(self, pipeline):
        cfg, run, _ = pipeline
        with open(run / "report" / "table2.csv", newline="") as fh:
            rows = {r["row"]: r for r in csv.DictReader(fh)}
        stored = json.loads((run / "transfer" / "scenario2" / "nlt" / "result.json").read_text())
        assert float(rows["nlt"]["scenario2_mean"]) == float(np.mean(stored["errors"]))


class TestRankMarks:
    def test_best_second_missing(self):
        assert ex.rank_marks({"a": 3.0, "b": 1.0, "c": None, "d": 2.0}) == {"a": "", "b": "best", "c": "missing", "d": "second"}
