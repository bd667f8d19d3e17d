import csv
import hashlib
import subprocess
import sys

import pytest
import torch

from nullbus.cli import main
from nullbus.model import load_checkpoint
from nullbus.prompts import PromptPair


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "pool"
    assert main(["synth", "--n", "15", "--seed", "1", "--prompt-fraction", "0.5", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    runs = tmp_path_factory.mktemp("runs")
    folds = runs / "folds.map"
    assert main(["split", "--manifest", str(synth_dir / "manifest.csv"), "--k", "5", "--seed", "0",
                 "--out", str(folds)]) == 0
    ckpts = []
    for fold in range(5):
        code = main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--folds", str(folds),
                     "--fold", str(fold), "--epochs", "1", "--output-dir", str(runs), "--set", "batch_size=4"])
        assert code == 0
        ckpts.append(runs / "full" / f"fold{fold}" / "best.ckpt")
    return runs, folds, ckpts


class TestSynth:
    def test_manifest(self, synth_dir):
        rows = _rows(synth_dir / "manifest.csv")
        assert rows[0][:4] == ["id", "image_path", "mask_path", "class_label"]
        assert len(rows) == 16
        prompted = [r for r in rows[1:] if r[4]]
        assert len(prompted) == 8  # half-up rounding of 7.5

    def test_eight_rows_four_prompted(self, tmp_path):
        assert main(["synth", "--n", "8", "--seed", "1", "--prompt-fraction", "0.5", "--out-dir", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "manifest.csv")[1:]
        assert len(rows) == 8 and sum(bool(r[4]) for r in rows) == 4

    def test_rerun_is_byte_identical(self, synth_dir, tmp_path):
        again = tmp_path / "pool"
        assert main(["synth", "--n", "15", "--seed", "1", "--prompt-fraction", "0.5", "--out-dir", str(again)]) == 0
        assert _digest(again) == _digest(synth_dir)

    def test_bad_fraction_exits_1(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "4", "--prompt-fraction", "1.5", "--out-dir", str(tmp_path)])
        assert exc.value.code == 1
        assert "[0, 1]" in capsys.readouterr().err

    def test_env_seed(self, tmp_path, monkeypatch, synth_dir):
        monkeypatch.setenv("NULLBUS_SEED", "1")
        out = tmp_path / "env"
        assert main(["synth", "--n", "15", "--prompt-fraction", "0.5", "--out-dir", str(out)]) == 0
        assert _digest(out) == _digest(synth_dir)


class TestTrain:
    def test_run_directory(self, trained):
        runs, _, ckpts = trained
        for name in ("config.snapshot", "folds.map", "history.rows", "best.ckpt"):
            assert (runs / "full" / "fold0" / name).exists()
        assert all(c.exists() for c in ckpts)

    def test_zero_text_run_is_prompt_independent(self, synth_dir, tmp_path):
        code = main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--ablation", "zero_text",
                     "--epochs", "1", "--output-dir", str(tmp_path), "--set", "batch_size=4"])
        assert code == 0
        model, _ = load_checkpoint(tmp_path / "zero_text" / "fold0" / "best.ckpt")
        assert model.config.ablation == "zero_text"
        x = torch.rand(1, 1, 96, 96).expand(2, -1, -1, -1)
        with torch.no_grad():
            out = model(x, [PromptPair("malignant large mass", "mass located upper left"), PromptPair()])
        assert torch.equal(out[0], out[1])

    def test_fold_out_of_range_exits_1(self, synth_dir, tmp_path, capsys):
        code = main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--fold", "7",
                     "--output-dir", str(tmp_path)])
        assert code == 1
        assert "fold_index 7" in capsys.readouterr().err

    def test_unknown_key_exits_1(self, synth_dir, tmp_path):
        code = main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--set", "nonsense=3",
                     "--output-dir", str(tmp_path)])
        assert code == 1

    def test_missing_manifest_exits_1(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "none.csv"), "--output-dir", str(tmp_path)]) == 1


class TestEval:
    def test_checkpoints(self, synth_dir, trained, tmp_path, capsys):
        _, folds, ckpts = trained
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", *map(str, ckpts), "--manifest", str(synth_dir / "manifest.csv"),
                     "--folds", str(folds), "--out", str(out)])
        assert code == 0
        results = _rows(out / "results.rows")
        assert results[0] == ["id", "fold", "IoU", "Dice", "FPR", "FNR"]
        assert len(results) == 1 + 15
        summary = _rows(out / "summary.rows")
        assert [r[0] for r in summary] == ["Fold", "0", "1", "2", "3", "4", "Mean"]
        assert "Mean" in capsys.readouterr().out

    def test_results_aggregation(self, tmp_path):
        path = tmp_path / "r.rows"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "fold", "IoU", "Dice", "FPR", "FNR"])
            for f in range(5):
                w.writerow([f"s{f}", f, 0.8, 0.9, 0.1, 0.05])
        assert main(["eval", "--results", str(path), "--out", str(tmp_path / "o")]) == 0
        summary = _rows(tmp_path / "o" / "summary.rows")
        assert len(summary) == 7 and summary[-1] == ["Mean", "0.8000", "0.9000", "0.1000", "0.0500"]

    def test_missing_checkpoint(self, synth_dir, trained, tmp_path, capsys):
        _, folds, _ = trained
        code = main(["eval", "--checkpoint", str(tmp_path / "gone.ckpt"), "--manifest",
                     str(synth_dir / "manifest.csv"), "--folds", str(folds), "--out", str(tmp_path)])
        assert code == 1
        assert "gone.ckpt" in capsys.readouterr().err

    def test_missing_inputs(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1


class TestAblate:
    def test_four_variant_table(self, synth_dir, tmp_path):
        code = main(["ablate", "--manifest", str(synth_dir / "manifest.csv"), "--epochs", "1",
                     "--output-dir", str(tmp_path), "--set", "batch_size=4"])
        assert code == 0
        table = _rows(tmp_path / "ablation" / "ablation.rows")
        assert table[0] == ["Experiment", "IoU", "Dice", "FPR", "FNR"]
        assert [r[0] for r in table[1:]] == [
            "Zero Text-Guidance", "Zero Local Features", "Zero Global Features", "NullBUS"]
        for variant in ("full", "zero_text", "zero_local", "zero_global"):
            assert (tmp_path / "ablation" / variant / "fold0" / "best.ckpt").exists()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "nullbus.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "split", "train", "eval", "ablate"):
        assert cmd in proc.stdout
