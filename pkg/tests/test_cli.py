import json
import os
import subprocess
import sys

import numpy as np
import pytest

from troi.cli import main
from troi.config import RunConfig, default_subjects
from troi.grid import BinaryMask, WeightedMask, read_pgm, save_mask
from troi.synth import load_subject


def small_config(tmp_path, **stage1):
    cfg = RunConfig().to_dict()
    subjects = []
    for s in cfg["subjects"][:3]:
        s.update(dims=[8, 8, 8], roi_spec=[{"center": [4, 4, 4], "radii": [2.5, 2.5, 2.5]}], n_samples=120,
                 n_test=40, embed_dim=4)
        subjects.append(s)
    cfg.update(subjects=subjects, model={"d_model": 16, "d_embed": 4, "n_blocks": 1})
    cfg["pretrain"]["schedule"]["total_epochs"] = 4
    cfg["stage2"]["schedule"]["total_epochs"] = 4
    cfg["stage1"].update(budget=120, **stage1)
    cfg["eval"]["max_candidates"] = 40
    path = tmp_path / "small.json"
    path.write_text(json.dumps(cfg))
    return path


def test_config_roundtrip_is_identity():
    cfg = RunConfig()
    text = cfg.dumps()
    again = RunConfig.loads(text)
    assert again == cfg
    assert again.dumps() == text


def test_config_names_every_hyperparameter():
    doc = RunConfig().to_dict()
    assert doc["mix_alpha"] == 0.2 and doc["mix_beta"] == 0.2
    assert doc["loss"]["tau"] == 0.1 and doc["loss"]["epsilon"] == 1.0 and "psi" in doc["loss"]
    s1 = doc["stage1"]
    assert s1["th"] == 0.05 and s1["budget"] == 600 and s1["filter"]["sigma"] == 1.0
    assert doc["pretrain"]["schedule"]["total_epochs"] == 150 and doc["pretrain"]["batch_size"] == 24


def test_config_rejects_unknown_keys_and_bad_json():
    doc = RunConfig().to_dict()
    doc["stage1"]["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        RunConfig.from_dict(doc)
    with pytest.raises(ValueError, match="JSON"):
        RunConfig.loads("{not json")


def test_default_layout_is_five_20_cubed_subjects(capsys, tmp_path):
    assert main(["gen", "--counts-only", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert all("grid=20x20x20" in line for line in lines)
    counts = [int(line.split("roi_voxels=")[1].split()[0]) for line in lines]
    assert all(450 <= c <= 550 for c in counts)
    assert lines[-1].endswith("role=target")


def test_large_grid_dims_accepted(capsys, tmp_path):
    assert main(["gen", "--counts-only", "--dims", "60,40,40", "--out", str(tmp_path)]) == 0
    assert "grid=60x40x40" in capsys.readouterr().out
    for spec in default_subjects(5, (60, 40, 40)):
        spec.validate()


def test_gen_same_seed_gives_identical_files(tmp_path):
    cfg = small_config(tmp_path)
    for d in ("a", "b"):
        assert main(["gen", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) == 0
    for i in range(3):
        name = f"gen/subject_{i:02d}.json"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_subject(tmp_path / "a/gen/subject_00.json").spec.seed == 700


def test_missing_upstream_is_one_line_error(tmp_path, capsys):
    assert main(["stage1", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("troi-error kind=MissingArtifact command=stage1 message=")
    json.loads(err[0].split("message=", 1)[1])


def test_bad_config_file_is_one_line_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "kind=ValueError" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = small_config(root)
    out = root / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out


def test_pipeline_writes_each_phase(pipeline):
    _, _, out = pipeline
    for phase, names in {"gen": ["subject_02.json"], "pretrain": ["checkpoint.json", "report.json"],
                         "stage1": ["mask.json", "report.json"], "stage2": ["checkpoint.json", "report.json"],
                         "eval": ["metrics.txt"]}.items():
        for name in names:
            assert (out / phase / name).exists(), (phase, name)
        assert (out / phase / "config.json").exists()
    assert (out / "pretrain" / "report.timing.log").exists()


def test_eval_prints_table_rows(pipeline, capsys):
    _, cfg, out = pipeline
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "retrieval: image | brain" in text and "reconstruction" in text
    assert (out / "eval" / "metrics.txt").read_text().startswith("image_retrieval_acc=")


def test_rerun_is_byte_identical(pipeline, tmp_path):
    _, cfg, first = pipeline
    second = tmp_path / "again"
    assert main(["run", "--config", str(cfg), "--out", str(second)]) == 0
    for rel in ("pretrain/report.json", "stage1/report.json", "stage1/mask.json", "stage2/report.json",
                "eval/metrics.txt", "pretrain/checkpoint.json"):
        a = (first / rel).read_text().replace(str(first), "<out>")
        b = (second / rel).read_text().replace(str(second), "<out>")
        assert a == b, rel


def test_dimension_mismatch_reported(pipeline, tmp_path, capsys):
    _, cfg, out = pipeline
    doc = json.loads(cfg.read_text())
    doc["model"]["d_model"] = 8
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    assert main(["stage1", "--config", str(other), "--out", str(out)]) == 1
    assert "kind=DimensionMismatch" in capsys.readouterr().err


def test_stage1_budget_flag(pipeline, tmp_path, capsys):
    _, cfg, out = pipeline
    assert main(["stage1", "--config", str(cfg), "--out", str(out), "--budget", "90"]) == 0
    line = capsys.readouterr().out
    assert "budget=90" in line
    assert int(line.split("voxels=")[1].split()[0]) <= 90
    assert json.loads((out / "stage1" / "config.json").read_text())["stage1"]["budget"] == 90


def test_export_mask_binary_and_scores(pipeline, tmp_path, capsys):
    _, _, out = pipeline
    pgm = tmp_path / "pgm"
    assert main(["export-mask", str(out / "stage1" / "mask.json"), "--pgm-dir", str(pgm),
                 "--subject", str(out / "gen" / "subject_02.json")]) == 0
    text = capsys.readouterr().out
    assert "nonzero=" in text and "iou=" in text and "precision=" in text and "recall=" in text
    files = sorted(pgm.glob("*.pgm"))
    assert len(files) == 8
    assert set(np.unique(np.concatenate([read_pgm(f).ravel() for f in files]))) <= {0, 255}


def test_export_all_ones_is_white(tmp_path, capsys):
    save_mask(BinaryMask.ones((3, 4, 2)), tmp_path / "ones.json")
    assert main(["export-mask", str(tmp_path / "ones.json"), "--pgm-dir", str(tmp_path / "p")]) == 0
    imgs = [read_pgm(f) for f in sorted((tmp_path / "p").glob("*.pgm"))]
    assert len(imgs) == 2 and all(np.all(i == 255) and i.shape == (3, 4) for i in imgs)
    assert "nonzero=24" in capsys.readouterr().out


def test_export_weighted_and_malformed(tmp_path, capsys):
    w = np.zeros((2, 2, 1))
    w[0, 0, 0] = 0.5
    save_mask(WeightedMask(w), tmp_path / "w.json")
    assert main(["export-mask", str(tmp_path / "w.json"), "--pgm-dir", str(tmp_path / "p")]) == 0
    (tmp_path / "bad.json").write_text('{"dims": [2, 2]}')
    assert main(["export-mask", str(tmp_path / "bad.json"), "--pgm-dir", str(tmp_path / "q")]) == 1
    assert "troi-error" in capsys.readouterr().err


def test_console_script_caps_threads(tmp_path):
    env = dict(os.environ, TROI_THREADS="1")
    code = "import troi.cli, os; print(os.environ['OMP_NUM_THREADS'], os.environ['OPENBLAS_NUM_THREADS'])"
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert res.stdout.split() == ["1", "1"]
    res = subprocess.run([sys.executable, "-m", "troi.cli", "config"], capture_output=True, text=True, check=True)
    assert RunConfig.loads(res.stdout) == RunConfig()
