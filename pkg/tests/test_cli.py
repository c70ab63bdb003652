"""
tests/test_cli.py — subcommand dispatch, exit codes and the files each run writes.

Every run uses a tiny config written to tmp_path so the whole file stays fast.

Run with: pytest tests/test_cli.py -v
"""
import csv

import pytest

from app.main import EXIT_CONFIG, EXIT_OK, EXIT_USAGE, main

_TINY = """\
iterations=2
d_steps=1
batch_size=8
seed=3
classes=3
lfs=3
image_size=8
dataset_count=150
latent_dim=4
trunk_widths=8
head_widths=8
disc_widths=8
label_widths=4
common_widths=8
lfb_widths=4
log_every=1
audit_every=0
"""


def _write_cfg(tmp_path, text=_TINY):
    path = tmp_path / "tiny.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


def _run(tmp_path, command, *extra, out="run"):
    out_dir = tmp_path / out
    code = main([command, "--config", _write_cfg(tmp_path), "--out", str(out_dir), *extra])
    return code, out_dir


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def trained(tmp_path):
    code, out = _run(tmp_path, "train", out="trained")
    assert code == EXIT_OK
    return out / "checkpoints" / "final"


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

class TestExitCodes:
    def test_help_is_success(self):
        assert main(["--help"]) == EXIT_OK

    def test_unknown_subcommand(self):
        assert main(["fly"]) == EXIT_USAGE

    def test_bad_argument_type(self, tmp_path):
        assert main(["theory-check", "--trials", "many"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        code = main(["gen-data", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("wings=2\n", encoding="utf-8")
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_unknown_dataset(self, tmp_path):
        code, _ = _run(tmp_path, "gen-data", "--dataset", "mnist")
        assert code == EXIT_CONFIG

    @pytest.mark.parametrize("size, dataset", [(4, "shapes"), (5, "shapes-b")])
    def test_image_size_too_small(self, tmp_path, size, dataset):
        path = _write_cfg(tmp_path, _TINY.replace("image_size=8", f"image_size={size}"))
        code = main(["gen-data", "--config", path, "--out", str(tmp_path / "o"), "--dataset", dataset])
        assert code == EXIT_CONFIG


# ---------------------------------------------------------------------------
# Data, theory and runtime commands
# ---------------------------------------------------------------------------

class TestCommands:
    def test_gen_data_round_trips_through_dataset_flag(self, tmp_path):
        code, out = _run(tmp_path, "gen-data")
        assert code == EXIT_OK
        assert (out / "dataset" / "manifest.txt").exists()
        assert (out / "summary.txt").exists()
        code, _ = _run(tmp_path, "gen-data", "--dataset", str(out / "dataset"), out="again")
        assert code == EXIT_OK

    def test_theory_check(self, tmp_path):
        code, out = _run(tmp_path, "theory-check", "--trials", "10")
        assert code == EXIT_OK
        rows = _rows(out / "theory.csv")
        assert rows and all(r["schema_version"] == "1" for r in rows)
        assert "max_identity_error" in {r["check"] for r in rows}

    def test_bench_runtime(self, tmp_path):
        code, out = _run(tmp_path, "bench-runtime", "--lfs", "3", "--samples", "200")
        assert code == EXIT_OK
        assert [r["method"] for r in _rows(out / "runtime.csv")] == ["dp-mle", "adp-lfb", "ratio"]

    def test_seed_flag_changes_run_id(self, tmp_path):
        code, out = _run(tmp_path, "theory-check", "--trials", "2", "--seed", "11")
        assert code == EXIT_OK
        assert (out / "summary.txt").read_text(encoding="utf-8").splitlines()[0].endswith("-11")

    def test_gen_data_feature_bank_feeds_training(self, tmp_path):
        code, out = _run(tmp_path, "gen-data", "--feature-bank")
        assert code == EXIT_OK
        assert (out / "dataset" / "feature_bank.bin").exists()
        code, run = _run(tmp_path, "train", "--dataset", str(out / "dataset"), "--lfs", "2+feature", out="feat")
        assert code == EXIT_OK
        assert (run / "checkpoints" / "final").is_dir()
        assert not (run / "feature_bank.bin").exists()

    def test_feature_lf_on_builtin_world_trains_its_bank(self, tmp_path):
        code, out = _run(tmp_path, "train", "--lfs", "2+feature")
        assert code == EXIT_OK
        assert (out / "feature_bank.bin").exists()
        code, _ = _run(tmp_path, "eval", "--checkpoint", str(out / "checkpoints" / "final"),
                       "--lfs", "2+feature", out="feat-eval")
        assert code == EXIT_OK

    @pytest.mark.parametrize("command, extra, produced", [
        ("theory-check", ("--trials", "5"), "theory.csv"),
        ("train", (), "metrics.csv"),
    ])
    def test_rerun_writes_identical_csv(self, tmp_path, command, extra, produced):
        code, first = _run(tmp_path, command, *extra, out="first")
        assert code == EXIT_OK
        code, second = _run(tmp_path, command, *extra, out="second")
        assert code == EXIT_OK
        assert (first / produced).read_bytes() == (second / produced).read_bytes()


# ---------------------------------------------------------------------------
# Training and checkpoint consumers
# ---------------------------------------------------------------------------

class TestTraining:
    def test_train_writes_log_and_final_checkpoint(self, trained):
        out = trained.parent.parent
        assert trained.is_dir()
        rows = _rows(out / "metrics.csv")
        assert [r["iteration"] for r in rows] == ["1", "2"]
        assert (out / "summary.txt").exists()

    def test_eval(self, tmp_path, trained):
        code, out = _run(tmp_path, "eval", "--checkpoint", str(trained))
        assert code == EXIT_OK
        (row,) = _rows(out / "eval.csv")
        assert 0.0 <= float(row["c_rt"]) <= 100.0

    def test_sample_grid(self, tmp_path, trained):
        code, out = _run(tmp_path, "sample-grid", "--checkpoint", str(trained))
        assert code == EXIT_OK
        assert (out / "samples.pgm").read_bytes()[:2] == b"P5"

    def test_transfer_keeps_frozen_groups(self, tmp_path, trained):
        code, out = _run(tmp_path, "transfer", "--checkpoint", str(trained))
        assert code == EXIT_OK
        summary = (out / "summary.txt").read_text(encoding="utf-8")
        assert "frozen_unchanged  True" in summary.splitlines()

    def test_missing_checkpoint_is_an_error(self, tmp_path):
        code, _ = _run(tmp_path, "eval", "--checkpoint", str(tmp_path / "missing"))
        assert code not in (EXIT_OK, EXIT_USAGE)
