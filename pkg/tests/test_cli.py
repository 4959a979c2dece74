"""End-to-end command tests, run in process through ``cli.main``."""

import re

import numpy as np
import pytest

from capcnn import cli
from capcnn.data import read_dataset

from _util import build_edf

ANNOTATIONS = """\
Patient: S7

Sleep Stage\tPosition\tTime [hh:mm:ss]\tEvent\tDuration[s]\tLocation
SLEEP-S2\tSUPINE\t22:06:30\tMCAP-A1\t5\tC4-A1
SLEEP-S2\tSUPINE\t22:07:10\tMCAP-A2\t6\tC4-A1
SLEEP-S2\tSUPINE\t22:08:05\tMCAP-A1\t4\tC4-A1
"""


def make_edf(tmp_path, rate=512, seconds=180):
    rng = np.random.default_rng(0)
    sig = {
        "label": "C4-A1", "dim": "uV",
        "phys_min": -1000, "phys_max": 1000,
        "dig_min": -32768, "dig_max": 32767,
        "spr": rate,
        "digital": rng.integers(-3000, 3000, size=rate * seconds),
    }
    path = tmp_path / "rec.edf"
    path.write_bytes(build_edf([sig], n_records=seconds, start_time="22.05.30"))
    return path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestPrepare:
    def test_prepare_writes_matching_dataset(self, tmp_path, capsys):
        edf = make_edf(tmp_path)
        ann = tmp_path / "scores.txt"
        ann.write_text(ANNOTATIONS)
        out = tmp_path / "s7.capd"
        code = run(["prepare", "--edf", edf, "--annotations", ann,
                    "--subject", "S7", "--out", out])
        assert code == 0
        ds = read_dataset(out)
        counts = ds.class_counts()
        assert counts["A1"] == 2 and counts["A2"] == 1
        assert counts["N"] == 3
        printed = capsys.readouterr().out
        assert "S7" in printed
        # Printed per-class counts match the file contents.
        row = printed.strip().splitlines()[-1].split()
        assert [int(v) for v in row[1:5]] == [2, 1, 0, 3]

    def test_missing_annotations_exit_2_names_path(self, tmp_path, capsys):
        edf = make_edf(tmp_path)
        missing = tmp_path / "nope.txt"
        code = run(["prepare", "--edf", edf, "--annotations", missing,
                    "--subject", "S7", "--out", tmp_path / "x.capd"])
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_256hz_recording_yields_2048_sample_segments(self, tmp_path):
        edf = make_edf(tmp_path, rate=256)
        ann = tmp_path / "scores.txt"
        ann.write_text(ANNOTATIONS)
        out = tmp_path / "s7.capd"
        assert run(["prepare", "--edf", edf, "--annotations", ann,
                    "--subject", "S7", "--out", out]) == 0
        ds = read_dataset(out)
        assert len(ds.segments) > 0
        assert all(seg.samples.shape == (2048,) for seg in ds.segments)

    def test_truncated_edf_exit_2(self, tmp_path, capsys):
        edf = make_edf(tmp_path)
        edf.write_bytes(edf.read_bytes()[:-10])
        ann = tmp_path / "scores.txt"
        ann.write_text(ANNOTATIONS)
        code = run(["prepare", "--edf", edf, "--annotations", ann,
                    "--subject", "S7", "--out", tmp_path / "x.capd"])
        assert code == 2
        assert "truncated" in capsys.readouterr().err


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        a, b = tmp_path / "a.capd", tmp_path / "b.capd"
        for out in (a, b):
            assert run(["synth", "--seed", 4, "--counts", "5,4,3,2",
                        "--out", out]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_counts_give_valid_empty_dataset(self, tmp_path):
        out = tmp_path / "empty.capd"
        assert run(["synth", "--seed", 0, "--counts", "0,0,0,0",
                    "--out", out]) == 0
        assert len(read_dataset(out).segments) == 0

    def test_counts_round_trip(self, tmp_path):
        out = tmp_path / "c.capd"
        assert run(["synth", "--seed", 1, "--counts", "7,6,5,4",
                    "--out", out]) == 0
        counts = read_dataset(out).class_counts()
        assert (counts["N"], counts["A1"], counts["A2"], counts["A3"]) == (7, 6, 5, 4)

    def test_bad_counts_exit_2(self, tmp_path, capsys):
        assert run(["synth", "--seed", 0, "--counts", "1,2",
                    "--out", tmp_path / "x.capd"]) == 2
        assert "counts" in capsys.readouterr().err


def parse_accuracy(text):
    match = re.search(r"accuracy (\d\.\d+)", text)
    assert match, text
    return float(match.group(1))


@pytest.fixture(scope="module")
def an_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("an_data") / "subject.capd"
    assert run(["synth", "--seed", 3, "--counts", "60,60,0,0",
                "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def mixed_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("mixed_data") / "subject.capd"
    assert run(["synth", "--seed", 9, "--counts", "24,16,12,12",
                "--out", out]) == 0
    return out


class TestTrainEvaluate:

    def test_train_reports_good_accuracy_and_checkpoint_round_trips(
            self, an_dataset, tmp_path, capsys):
        ckpt = tmp_path / "net.capn"
        code = run(["train", "--dataset", an_dataset, "--task", "AN",
                    "--fraction", 0.5, "--seed", 1, "--epochs", 12,
                    "--checkpoint-out", ckpt])
        assert code == 0
        trained = parse_accuracy(capsys.readouterr().out)
        assert trained > 0.85

        code = run(["evaluate", "--dataset", an_dataset, "--checkpoint", ckpt,
                    "--fraction", 0.5, "--seed", 1])
        assert code == 0
        reloaded = parse_accuracy(capsys.readouterr().out)
        assert reloaded == pytest.approx(trained, abs=1e-9)

    def test_loss_history_csv(self, an_dataset, tmp_path):
        loss_out = tmp_path / "loss.csv"
        code = run(["train", "--dataset", an_dataset, "--task", "AN",
                    "--fraction", 0.5, "--seed", 2, "--epochs", 2,
                    "--loss-out", loss_out])
        assert code == 0
        lines = loss_out.read_text().strip().splitlines()
        assert lines[0] == "iteration,epoch,meanLoss"
        assert len(lines) == 3  # 1 iteration per epoch at these sizes

    def test_config_file_sets_epochs_flags_override(self, an_dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("train.max_epochs = 1\n")
        loss_out = tmp_path / "loss1.csv"
        assert run(["--config", cfg, "train", "--dataset", an_dataset,
                    "--task", "AN", "--fraction", 0.5, "--seed", 2,
                    "--loss-out", loss_out]) == 0
        assert len(loss_out.read_text().strip().splitlines()) == 2
        loss_out2 = tmp_path / "loss2.csv"
        assert run(["--config", cfg, "train", "--dataset", an_dataset,
                    "--task", "AN", "--fraction", 0.5, "--seed", 2,
                    "--epochs", 3, "--loss-out", loss_out2]) == 0
        assert len(loss_out2.read_text().strip().splitlines()) == 4

    def test_insufficient_data_names_class(self, tmp_path, capsys):
        out = tmp_path / "tiny.capd"
        assert run(["synth", "--seed", 0, "--counts", "20,2,0,0",
                    "--out", out]) == 0
        code = run(["train", "--dataset", out, "--task", "AN",
                    "--fraction", 0.2, "--seed", 0, "--epochs", 1])
        assert code == 2
        assert "class" in capsys.readouterr().err


class TestExperimentAndReport:

    def test_sweep_writes_deterministic_results_and_report(
            self, mixed_dataset, tmp_path, capsys):
        res1, rep1 = tmp_path / "r1.csv", tmp_path / "r1.md"
        res2 = tmp_path / "r2.csv"
        for res, rep in ((res1, rep1), (res2, None)):
            argv = ["experiment", "--dataset", mixed_dataset, "--task", "AN",
                    "--mode", "sweep", "--results-out", res,
                    "--fractions", 0.25, 0.5, "--runs", 2,
                    "--base-seed", 0, "--epochs", 1]
            if rep:
                argv += ["--report-out", rep]
            assert run(argv) == 0
        assert res1.read_bytes() == res2.read_bytes()
        table = rep1.read_text()
        assert "25%" in table and "50%" in table and "average" in table
        capsys.readouterr()

    def test_retrain_emits_base_plus_validated_rows(self, mixed_dataset, tmp_path,
                                                    capsys):
        res = tmp_path / "retrain.csv"
        code = run(["experiment", "--dataset", mixed_dataset, "--task", "subtype",
                    "--mode", "retrain", "--results-out", res,
                    "--base-fraction", 0.25, "--validated-fractions", 0.3,
                    "--runs", 1, "--epochs", 1])
        assert code == 0
        out = capsys.readouterr().out
        assert "base" in out and "30% validated" in out
        rows = res.read_text().strip().splitlines()
        assert len(rows) == 3  # header + base run + validated run

    def test_report_from_results_file(self, mixed_dataset, tmp_path, capsys):
        res = tmp_path / "res.csv"
        assert run(["experiment", "--dataset", mixed_dataset, "--task", "AN",
                    "--mode", "sweep", "--results-out", res,
                    "--fractions", 0.5, "--runs", 1, "--epochs", 1]) == 0
        capsys.readouterr()
        out_md = tmp_path / "table.md"
        assert run(["report", "--results", res, "--out", out_md]) == 0
        assert "average" in out_md.read_text()

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        code = run(["experiment", "--dataset", tmp_path / "none.capd",
                    "--task", "AN", "--mode", "sweep",
                    "--results-out", tmp_path / "r.csv"])
        assert code == 2
