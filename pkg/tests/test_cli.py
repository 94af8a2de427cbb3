import json

import pytest
from PIL import Image

from alignseg.cli import ABLATION_GRIDS, ENV_DATA_ROOT, RunManifest, code_version, main
from alignseg.config import save_config
from alignseg.data import SplitManifest

from conftest import make_mini_cfg


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(ENV_DATA_ROOT, raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesized dataset, a tiny config, a split, and one trained run."""
    ws = tmp_path_factory.mktemp("cli")
    root = ws / "data"
    assert main(["synth", "--out", str(root), "--n-train", "6", "--n-test", "2",
                 "--size", "32", "--seed", "3"]) == 0

    cfg = make_mini_cfg()
    cfg.optim.total_steps = 2
    cfg_path = ws / "cfg.yaml"
    save_config(cfg, cfg_path)

    split_path = ws / "split.txt"
    assert main(["split", "--data-root", str(root), "--ratio", "0.5",
                 "--seed", "0", "--out", str(split_path)]) == 0

    run_dir = ws / "run"
    assert main(["train", "--config", str(cfg_path), "--data-root", str(root),
                 "--split", str(split_path), "--out", str(run_dir)]) == 0
    return ws


class TestSynthAndSplit:
    def test_dataset_layout(self, workspace):
        root = workspace / "data"
        assert len(list((root / "images" / "train").glob("*.png"))) == 6
        assert len(list((root / "masks" / "train").glob("*.png"))) == 6
        assert len(list((root / "images" / "test").glob("*.png"))) == 2

    def test_split_manifest_contents(self, workspace):
        manifest = SplitManifest.load(workspace / "split.txt")
        assert len(manifest.labeled_ids) == 3
        assert len(manifest.unlabeled_ids) == 3
        assert not set(manifest.labeled_ids) & set(manifest.unlabeled_ids)

    def test_synth_is_reproducible(self, tmp_path, workspace):
        other = tmp_path / "again"
        assert main(["synth", "--out", str(other), "--n-train", "6", "--n-test", "2",
                     "--size", "32", "--seed", "3"]) == 0
        for rel in ("images/train", "masks/train"):
            ours = sorted((workspace / "data" / rel).glob("*.png"))
            theirs = sorted((other / rel).glob("*.png"))
            assert [p.name for p in ours] == [p.name for p in theirs]
            for a, b in zip(ours, theirs):
                assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint" / "manifest.txt").is_file()
        assert (run / "manifest.json").is_file()
        manifest = RunManifest.load(run / "manifest.json")
        assert manifest.code_version == code_version()
        assert manifest.config["optim"]["total_steps"] == 2

    def test_repeat_run_is_byte_identical(self, workspace, tmp_path):
        again = tmp_path / "run2"
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--split", str(workspace / "split.txt"), "--out", str(again)]) == 0
        first = (workspace / "run" / "checkpoint" / "manifest.txt").read_text()
        second = (again / "checkpoint" / "manifest.txt").read_text()
        assert first == second  # covers every tensor hash
        assert (workspace / "run" / "manifest.json").read_text() == (again / "manifest.json").read_text()

    def test_stdout_is_json_lines(self, workspace, tmp_path, capsys):
        main(["train", "--config", str(workspace / "cfg.yaml"),
              "--data-root", str(workspace / "data"), "--out", str(tmp_path / "r")])
        for line in capsys.readouterr().out.strip().split("\n"):
            record = json.loads(line)
            assert "event" in record

    def test_env_var_supplies_data_root(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_DATA_ROOT, str(workspace / "data"))
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--out", str(tmp_path / "r")]) == 0

    def test_flag_beats_env_var(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_DATA_ROOT, str(tmp_path / "nowhere"))
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--out", str(tmp_path / "r")]) == 0

    def test_resume_continues_to_schedule_end(self, workspace, tmp_path):
        out = tmp_path / "resumed"
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--split", str(workspace / "split.txt"),
                     "--resume", str(workspace / "run" / "checkpoint"),
                     "--override", "optim.total_steps=4",
                     "--out", str(out)]) == 0
        manifest = (out / "checkpoint" / "manifest.txt").read_text()
        assert manifest.split("\n")[1] == "step 4"


class TestExitCodes:
    def test_missing_data_root_is_config_error(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--out", str(tmp_path / "r")]) == 2

    def test_unknown_override_key(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--override", "optim.warmup=5", "--out", str(tmp_path / "r")]) == 2

    def test_malformed_config_file(self, workspace, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("optim: [unclosed\n")
        assert main(["train", "--config", str(bad),
                     "--data-root", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 2

    def test_empty_dataset_dir_is_data_error(self, workspace, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 3

    def test_unknown_split_id_is_data_error(self, workspace, tmp_path):
        rogue = SplitManifest(labeled_ids=["ghost"], unlabeled_ids=[], seed=0, ratio=1.0)
        rogue_path = tmp_path / "rogue.txt"
        rogue.save(rogue_path)
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--split", str(rogue_path), "--out", str(tmp_path / "r")]) == 3

    def test_missing_checkpoint_is_data_error(self, workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "ghost"),
                     "--data-root", str(workspace / "data"), "--out", str(tmp_path / "e")]) == 3

    def test_nan_lr_is_numeric_error(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--override", "optim.lr0=.nan",
                     "--steps", "3", "--out", str(tmp_path / "r")]) == 4


class TestEval:
    def test_writes_reports_and_summary(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint"),
                     "--data-root", str(workspace / "data"),
                     "--split", "test", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["n_images"] == 2
        assert 0.0 <= report["mean_dice"] <= 1.0
        csv = (out / "report.csv").read_text()
        assert csv.startswith("class,dice,jaccard")
        assert "mean over 2 classes" in capsys.readouterr().out

    def test_sliding_mode(self, workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint"),
                     "--data-root", str(workspace / "data"), "--split", "test",
                     "--mode", "sliding", "--window", "32", "--stride", "32",
                     "--out", str(tmp_path / "e")]) == 0


class TestOverlay:
    def test_one_png_per_image_at_image_dims(self, workspace, tmp_path):
        out = tmp_path / "ov"
        assert main(["overlay", "--checkpoint", str(workspace / "run" / "checkpoint"),
                     "--data-root", str(workspace / "data"),
                     "--split", "test", "--out", str(out)]) == 0
        pngs = sorted(out.glob("*.png"))
        assert len(pngs) == 2
        with Image.open(pngs[0]) as img:
            assert img.size == (32, 32)


class TestAblate:
    def test_branch_grid_and_byte_comparability(self, workspace, tmp_path):
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--split", str(workspace / "split.txt"),
                     "--grid", "branches", "--steps", "1", "--out", str(out)]) == 0
        summary = (out / "summary.csv").read_text().strip().split("\n")
        assert summary[0] == "variant,mean_dice,mean_jaccard"
        names = [line.split(",")[0] for line in summary[1:]]
        assert names == [n for n, _ in ABLATION_GRIDS["branches"]]

        # a standalone run with the same overrides produces the same bytes
        variant_dir = out / "variants" / "neither"
        solo = tmp_path / "solo"
        assert main(["train", "--config", str(workspace / "cfg.yaml"),
                     "--data-root", str(workspace / "data"),
                     "--split", str(workspace / "split.txt"),
                     "--override", "align.use_prototype=false",
                     "--override", "align.use_text=false",
                     "--steps", "1", "--out", str(solo)]) == 0
        assert (variant_dir / "checkpoint" / "manifest.txt").read_text() == \
            (solo / "checkpoint" / "manifest.txt").read_text()
        eval_out = tmp_path / "solo_eval"
        assert main(["eval", "--checkpoint", str(solo / "checkpoint"),
                     "--data-root", str(workspace / "data"),
                     "--split", "test", "--out", str(eval_out)]) == 0
        assert (variant_dir / "report.csv").read_text() == (eval_out / "report.csv").read_text()

    def test_grids_cover_the_ablation_tables(self):
        assert [n for n, _ in ABLATION_GRIDS["branches"]] == [
            "neither", "text_only", "prototype_only", "both"]
        assert [n for n, _ in ABLATION_GRIDS["tokens"]] == ["m0", "m2", "m3", "m4", "m5"]
        assert [n for n, _ in ABLATION_GRIDS["align"]] == ["none", "cosine", "kl", "mse"]
        assert len(ABLATION_GRIDS["encoder"]) == 2
