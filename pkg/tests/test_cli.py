import csv
import json
from importlib import resources
from pathlib import Path

import jsonschema
import pytest

from policygen import BUILD_ID
from policygen.cli import main

SMALL = ["--iterations", "20", "--batch", "8", "--noise-dim", "4", "--emb-dim", "3",
         "--hidden", "16", "--beta-ramp", "10"]


def schema(name):
    text = resources.files("policygen").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(path: Path, name: str):
    doc = json.loads(path.read_text())
    jsonschema.validate(doc, schema(name))
    return doc


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--conditional", "--checkpoint-every", "10"] + SMALL) == 0
    return out


class TestTrain:
    def test_outputs(self, trained):
        for name in ["config.json", "trajectory.csv", "checkpoint.json",
                     "checkpoints/checkpoint_0000010.json", "checkpoints/checkpoint_0000020.json"]:
            assert (trained / name).is_file(), name
        cfg = validate(trained / "config.json", "config")
        assert cfg["build"] == BUILD_ID and cfg["params"]["iterations"] == 20
        ck = validate(trained / "checkpoint.json", "checkpoint")
        assert ck["conditional"] is True and ck["L"] == 8
        rows = list(csv.reader((trained / "trajectory.csv").open()))
        assert rows[0][:2] == ["iteration", "samples_cum"]
        assert len(rows) == 21 and rows[-1][1] == "160"

    def test_rerun_identical(self, trained, tmp_path):
        again = tmp_path / "again"
        assert main(["train", "--out", str(again), "--conditional", "--checkpoint-every", "10"] + SMALL) == 0
        for name in ["config.json", "trajectory.csv", "checkpoint.json"]:
            if name == "config.json":
                a = json.loads((trained / name).read_text())
                b = json.loads((again / name).read_text())
                assert a["params"] == b["params"]
            else:
                assert (trained / name).read_bytes() == (again / name).read_bytes()

    def test_rerun_from_config(self, trained, tmp_path):
        again = tmp_path / "from_cfg"
        assert main(["train", "--config", str(trained / "config.json"), "--out", str(again)]) == 0
        for name in ["trajectory.csv", "checkpoint.json"]:
            assert (trained / name).read_bytes() == (again / name).read_bytes()

    def test_flag_overrides_config(self, trained, tmp_path):
        again = tmp_path / "override"
        assert main(["train", "--config", str(trained / "config.json"), "--out", str(again),
                     "--iterations", "5"]) == 0
        assert json.loads((again / "config.json").read_text())["params"]["iterations"] == 5
        assert len((again / "trajectory.csv").read_text().splitlines()) == 6

    @pytest.mark.parametrize("bad", [["--dim", "0"], ["--batch", "0"], ["--iterations", "-1"],
                                     ["--alpha", "-1"], ["--hidden", "0"]])
    def test_invalid_flags_exit_1(self, tmp_path, bad):
        assert main(["train", "--out", str(tmp_path / "x")] + SMALL + bad) == 1

    def test_missing_out(self):
        assert main(["train"] + SMALL) == 1

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", str(tmp_path), "--bogus"])
        assert exc.value.code == 1

    def test_wrong_config_command(self, trained, tmp_path):
        assert main(["oracle", "--config", str(trained / "config.json"), "--out", str(tmp_path)]) == 1


class TestEval:
    def test_report_and_samples(self, trained, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.json"), "--out", str(out),
                     "--samples", "200", "--class", "5"]) == 0
        rep = validate(out / "report.json", "report")
        assert rep["n_samples"] == 200 and rep["label"] == 5
        assert rep["oracle_total"] == 1984
        assert sum(rep["reward_histogram"]["counts"]) == 200
        validate(out / "config.json", "config")
        rows = list(csv.reader((out / "samples.csv").open()))
        assert len(rows) == 201 and all(r[1] == "5" for r in rows[1:])

    def test_deterministic(self, trained, tmp_path):
        args = ["eval", "--checkpoint", str(trained / "checkpoint.json"), "--samples", "50", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ["report.json", "samples.csv"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_confusion(self, trained, tmp_path):
        out = tmp_path / "cm"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.json"), "--out", str(out),
                     "--samples", "10", "--confusion", "--per-class", "30"]) == 0
        cm = validate(out / "confusion.json", "confusion")
        assert all(sum(row) == 30 for row in cm["counts"])

    def test_class_on_unconditional(self, tmp_path):
        run = tmp_path / "u"
        assert main(["train", "--out", str(run), "--iterations", "2", "--batch", "4",
                     "--hidden", "8", "--noise-dim", "4"]) == 0
        assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--out",
                     str(tmp_path / "e"), "--class", "1"]) != 0

    def test_missing_checkpoint(self, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--out", str(tmp_path / "e")])
        assert code != 0

    def test_corrupt_checkpoint(self, trained, tmp_path):
        doc = json.loads((trained / "checkpoint.json").read_text())
        doc["cells"][1]["weights"][0] = doc["cells"][1]["weights"][0][:-1]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 2


class TestOracle:
    def test_defaults(self, tmp_path):
        assert main(["oracle", "--out", str(tmp_path)]) == 0
        s = validate(tmp_path / "summary.json", "oracle_summary")
        assert s["per_octant_counts"] == [248] * 8
        assert s["total_count"] == 1984
        assert s["equal_per_octant"] and s["matches_published"]
        lines = (tmp_path / "solutions.csv").read_text().splitlines()
        assert lines[0] == "idx_1,idx_2,idx_3,x_1,x_2,x_3,f_test,octant"
        assert len(lines) == 1985

    def test_tight_threshold(self, tmp_path):
        assert main(["oracle", "--out", str(tmp_path), "--threshold", "0.5"]) == 0
        s = validate(tmp_path / "summary.json", "oracle_summary")
        assert s["total_count"] == 0 and "published_per_octant" not in s

    def test_over_budget(self, tmp_path):
        assert main(["oracle", "--out", str(tmp_path / "o"), "--dim", "10"]) == 2
        assert not (tmp_path / "o").exists()


def test_sweep(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--out", str(out), "--dims", "1,2"] + SMALL) == 0
    s = validate(out / "summary.json", "sweep_summary")
    assert [r["dim"] for r in s["runs"]] == [1, 2]
    assert s["runs"][1]["grid_size"] == "10000"
    lines = (out / "rewards.csv").read_text().splitlines()
    assert lines[0] == "iteration,samples_cum,mean_reward_dim1,mean_reward_dim2"
    assert len(lines) == 21
    validate(out / "dim_2" / "config.json", "config")

    # a sweep member is the same run as a standalone train invocation
    single = tmp_path / "single"
    assert main(["train", "--config", str(out / "dim_2" / "config.json"), "--out", str(single)]) == 0
    for name in ["trajectory.csv", "checkpoint.json"]:
        assert (single / name).read_bytes() == (out / "dim_2" / name).read_bytes()


def test_sweep_rejects_conditional(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--conditional"] + SMALL) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert BUILD_ID in capsys.readouterr().out


def test_no_command():
    assert main([]) == 1
