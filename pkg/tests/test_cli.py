import json

import numpy as np
import pytest
import yaml
from PIL import Image

from stylebias.cli import main
from stylebias.datagen import load_group, save_group


@pytest.fixture
def group_file(tmp_path, tiny_group):
    path = tmp_path / "g.npz"
    save_group(tiny_group, path)
    return path


@pytest.fixture
def config_file(tmp_path):
    cfg = {
        "preset": "desk",
        "dataset": {"n_domains": 3, "n_classes": 3, "per_class": 4, "side": 32},
        "train": {"epochs": 1, "lr_drop_epoch": 1, "batch_size": 8, "val_fraction": 0.25},
        "stylization": {"p": 0.0},
        "n_runs": 1,
        "output_dir": str(tmp_path / "runs"),
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--target", "art"]) == 1
    assert main(["sweep-p", "--config", "x.yaml", "--probs", "a,b"]) in (1, 2)


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["matrix", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: nowhere\n")
    assert main(["matrix", "--config", str(bad)]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_dataset_synth_export_ingest(tmp_path, capsys):
    out = tmp_path / "s.npz"
    assert main(["dataset", "synth", "--n-domains", "2", "--n-classes", "2", "--per-class", "2", "--side", "32",
                 "--out", str(out)]) == 0
    g = load_group(out)
    assert g.domain_names == ["photo", "art"]
    assert main(["dataset", "export", "--group", str(out), "--out", str(tmp_path / "tree")]) == 0
    assert main(["dataset", "ingest", str(tmp_path / "tree"), "--side", "32", "--out", str(tmp_path / "i.npz")]) == 0
    assert sorted(load_group(tmp_path / "i.npz").domain_names) == ["art", "photo"]
    assert main(["dataset", "ingest", str(tmp_path / "nothing"), "--out", str(tmp_path / "x.npz")]) == 2


def test_stylizer_train_and_apply(tmp_path, group_file, tiny_group):
    w = tmp_path / "w.bin"
    assert main(["stylizer", "train", "--group", str(group_file), "--exclude", "art", "--epochs", "0",
                 "--out", str(w)]) == 0
    for name, domain in (("c.png", "photo"), ("s.png", "cartoon")):
        arr = (tiny_group[domain].images[0].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / name)
    out = tmp_path / "out" / "o.png"
    assert main(["stylizer", "apply", "--weights", str(w), "--content", str(tmp_path / "c.png"),
                 "--style", str(tmp_path / "s.png"), "--side", "32", "--out", str(out)]) == 0
    assert Image.open(out).size == (32, 32)
    assert main(["stylizer", "train", "--group", str(group_file), "--exclude", "photo,art,cartoon",
                 "--out", str(w)]) == 1


def test_train_eval_matrix_report(tmp_path, config_file, group_file, capsys, monkeypatch):
    assert main(["train", "--config", str(config_file), "--target", "art"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["target"] == "art"
    assert main(["train", "--config", str(config_file), "--target", "art"]) == 2
    assert "already exist" in capsys.readouterr().err
    ckpt = next((tmp_path / "runs").rglob("checkpoint.bin"))
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(group_file), "--domain", "art"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"art"}
    monkeypatch.setenv("STYLEBIAS_DATA_ROOT", str(group_file))
    assert main(["eval", "--checkpoint", str(ckpt)]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"photo", "art", "cartoon"}
    # the matrix sees the existing art entry
    assert main(["matrix", "--config", str(config_file)]) == 2
    assert main(["matrix", "--config", str(config_file), "--resume"]) == 0
    table = capsys.readouterr().out
    assert "Baseline" in table and "±" in table
    assert main(["report", "--ledger", str(tmp_path / "runs"), "--json", str(tmp_path / "r.json")]) == 0
    assert capsys.readouterr().out.strip() == table.strip()
    assert json.loads((tmp_path / "r.json").read_text())[0]["method"] == "Baseline"


def test_sweep_and_ablation(tmp_path, config_file, small_weights, capsys):
    small_weights.save(tmp_path / "w.bin")
    cfg = yaml.safe_load(config_file.read_text())
    cfg["stylizer"] = {"weights": str(tmp_path / "w.bin")}
    cfg["targets"] = ["photo"]
    config_file.write_text(yaml.safe_dump(cfg))
    assert main(["sweep-p", "--config", str(config_file), "--probs", "0.5,0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("p=0.00") and lines[2].startswith("p=0.50")
    assert main(["ablate-sources", "--config", str(config_file), "--target", "photo", "--subsets", "art;art,cartoon"]) == 0
    assert "art,cartoon" in capsys.readouterr().out
    assert main(["ablate-sources", "--config", str(config_file), "--target", "photo", "--subsets", ";"]) == 1


def _fit(model, images, labels, steps=150):
    import torch

    from stylebias.trainer import cross_entropy

    x, y = torch.from_numpy(images), torch.from_numpy(labels)
    opt = torch.optim.Adam(model.parameters(), lr=0.01)
    model.train()
    for _ in range(steps):
        opt.zero_grad()
        cross_entropy(model(x), y).backward()
        opt.step()
    return model.eval()


def test_cueconflict_bias_probe(tmp_path, group_file, small_weights, capsys):
    from stylebias.datagen import synthesize_textures
    from stylebias.trainer import ClassifierModel, evaluate, save_checkpoint

    group = load_group(group_file)
    textures = synthesize_textures(1000, 3, 10, 32)  # the default pool for --seed 0
    model = ClassifierModel(3, classes=group.classes, seed=0)
    _fit(model, np.concatenate([group["photo"].images, textures.images]),
         np.concatenate([group["photo"].labels, textures.labels]))
    assert evaluate(model, group["photo"]) == 1.0
    small_weights.save(tmp_path / "w.bin")
    save_checkpoint(model, tmp_path / "m.bin")
    cue_dir = tmp_path / "cue"
    assert main(["cueconflict", "build", "--checkpoints", str(tmp_path / "m.bin"), "--group", str(group_file),
                 "--content-domain", "photo", "--stylizer", str(tmp_path / "w.bin"), "--cap", "2",
                 "--iterations", "2", "--side", "32", "--out", str(cue_dir)]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["cap"] == 2 and manifest["n_samples"] == 6 and manifest["omitted"] == {}
    doc = json.loads((cue_dir / "manifest.json").read_text())
    assert all(s["y_s"] != s["y_t"] for s in doc["samples"])
    assert main(["bias", "--checkpoints", str(tmp_path / "m.bin"), "--set", str(cue_dir), "--folds", "3",
                 "--json", str(tmp_path / "b.json")]) == 0
    assert "Shape Bias" in capsys.readouterr().out
    report = json.loads((tmp_path / "b.json").read_text())[0]
    assert report["model_tag"] == "m" and 0 <= report["average"] <= 1
    assert main(["probe", "--checkpoint", str(tmp_path / "m.bin"), "--set", str(cue_dir), "--kind", "texture",
                 "--folds", "3", "--epochs", "5"]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["accuracy"] <= 1
