import csv

import numpy as np
import pytest
import yaml
from PIL import Image

from ugdnet import cli
from ugdnet.config import RunConfig
from ugdnet.data import load_dataset

TINY_CONFIG = {
    "network": {"stage_channels": [4, 8, 12, 16], "num_heads": [1, 1, 2, 2], "window": 3},
    "train": {"epochs": 1, "batch_size": 2, "base_lr": 0.01},
    "data": {"synth": True, "synth_count": 10, "size": 32},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


@pytest.fixture
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CONFIG))
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root / "out"


def _rows(path):
    return list(csv.DictReader(open(path)))


def test_train_smoke_outputs(trained):
    for name in ("best.ckpt", "last.ckpt", "train_log.csv", "config.yaml", "split.txt", "test_metrics.csv"):
        assert (trained / name).exists(), name
    echo = RunConfig.load(trained / "config.yaml")
    assert echo.network.stage_channels == (4, 8, 12, 16) and echo.data.size == 32


def test_train_default_synth_run(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    # defaults apart from the command-line overrides; a small count keeps it quick
    cfg = tmp_path / "c.yaml"
    cfg.write_text("data:\n  synth_count: 20\n")
    assert cli.main(["train", "--config", str(cfg), "--synth", "--epochs", "1", "--size", "64", "--seed", "3"]) == 0
    out = tmp_path / "train_seed3"
    assert (out / "last.ckpt").exists() and len(_rows(out / "train_log.csv")) == 1


def test_echo_reproduces_first_loss(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "config.yaml"), "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "train_log.csv")[0]["total"] == _rows(trained / "train_log.csv")[0]["total"]


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "c.yaml"
    cfg.write_text("data:\n  root: /nonexistent/place\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("network:\n  hybrid: true\n")
    assert cli.main(["train", "--config", str(cfg), "--synth"]) == 2
    assert "network.hybrid" in capsys.readouterr().err


def test_ablate_flag_shows_in_echo(config, tmp_path):
    assert cli.main(["train", "--config", str(config), "--ablate", "H", "--out", str(tmp_path / "h")]) == 0
    echo = yaml.safe_load((tmp_path / "h" / "config.yaml").read_text())
    assert echo["network"]["use_cnn_branch"] is False and echo["network"]["use_ugem"] is True
    cfg = RunConfig()
    cli.apply_ablation(cfg, ["baseline"])
    assert not any(getattr(cfg.network, f) for f in cli.TOGGLES.values())


def test_presets_are_incremental():
    cfgs = [cli.preset_config(RunConfig(), p) for p in cli.PRESETS]
    on = [[getattr(c.network, f) for f in cli.TOGGLES.values()] for c in cfgs]
    assert on == [[False] * 4, [True, False, False, False], [True, True, False, False],
                  [True, True, True, False], [True] * 4]


def test_eval_writes_per_case_and_aggregate(trained, tmp_path):
    assert cli.main(["eval", str(trained / "best.ckpt"), "--split", "all", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "metrics.csv")
    assert list(rows[0]) == ["case_id", "dsc", "hd", "asd", "assd", "sens", "prec", "empty_flag"]
    assert len(rows) == 11 and rows[-1]["case_id"] == "aggregate"


def test_eval_identity_is_perfect(trained, tmp_path):
    assert cli.main(["eval", str(trained / "best.ckpt"), "--identity", "--out", str(tmp_path)]) == 0
    agg = _rows(tmp_path / "metrics.csv")[-1]
    assert float(agg["dsc"]) == 100.0 and float(agg["hd"]) == 0.0


def test_eval_flags_empty_predictions(trained, tmp_path):
    # fresh zero-initialized fused head predicts background everywhere
    fresh = tmp_path / "fresh.ckpt"
    from ugdnet.checkpoint import save_checkpoint
    from ugdnet.network import UGDNet
    cfg = RunConfig.load(trained / "config.yaml")
    save_checkpoint(fresh, UGDNet(cfg.network), cfg.to_dict())
    assert cli.main(["eval", str(fresh), "--split", "all", "--out", str(tmp_path / "e")]) == 0
    rows = _rows(tmp_path / "e" / "metrics.csv")
    assert all(r["empty_flag"] == "1" for r in rows[:-1]) and rows[-1]["empty_flag"] == "10"
    assert float(rows[0]["hd"]) == pytest.approx(np.hypot(32, 32), abs=1e-5)


def test_eval_incompatible_config_exits_2(trained, tmp_path, capsys):
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump({**TINY_CONFIG, "network": {**TINY_CONFIG["network"], "use_cnn_branch": False}}))
    assert cli.main(["eval", str(trained / "best.ckpt"), "--config", str(other), "--out", str(tmp_path)]) == 2
    assert "unexpected" in capsys.readouterr().err


def test_predict_single_and_directory_with_corrupt_file(trained, tmp_path):
    data_dir = tmp_path / "data"
    assert cli.main(["synth", "--config", str(trained / "config.yaml"), "--count", "3", "--out", str(data_dir)]) == 0
    imgs = sorted((data_dir / "images").glob("*.png"))
    assert cli.main(["predict", str(trained / "best.ckpt"), str(imgs[0]), "--out", str(tmp_path / "one")]) == 0
    assert [p.name for p in (tmp_path / "one").iterdir()] == [imgs[0].name]

    flat = tmp_path / "flat"
    flat.mkdir()
    for p in imgs[:2]:
        (flat / p.name).write_bytes(p.read_bytes())
    (flat / "broken.png").write_bytes(b"not a png")
    assert cli.main(["predict", str(trained / "best.ckpt"), str(flat), "--out", str(tmp_path / "many")]) == 1
    assert sorted(p.name for p in (tmp_path / "many").iterdir()) == sorted(p.name for p in imgs[:2])


def test_overlay_colors():
    img = np.full((2, 2), 0.5)
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    rgb = cli.overlay_image(img, pred, gt)
    assert tuple(rgb[0, 0]) == cli.OVERLAY_TP
    assert tuple(rgb[0, 1]) == cli.OVERLAY_FP
    assert tuple(rgb[1, 0]) == cli.OVERLAY_FN
    assert tuple(rgb[1, 1]) == (128, 128, 128)


def test_overlay_of_perfect_prediction_has_only_tp(trained, tmp_path):
    import torch
    from ugdnet.checkpoint import save_checkpoint
    from ugdnet.network import UGDNet

    cfg = RunConfig.load(trained / "config.yaml")
    model = UGDNet(cfg.network)
    with torch.no_grad():
        model.fuse_bias.copy_(torch.tensor([-1.0, 1.0]))  # zero head weights: foreground everywhere
    ckpt = tmp_path / "fg.ckpt"
    save_checkpoint(ckpt, model, cfg.to_dict())
    data_dir = tmp_path / "data"
    cli.main(["synth", "--config", str(trained / "config.yaml"), "--count", "1", "--out", str(data_dir)])
    stem = next((data_dir / "images").glob("*.png")).stem
    Image.fromarray(np.full((32, 32), 255, np.uint8)).save(data_dir / "masks" / f"{stem}.png")
    assert cli.main(["predict", str(ckpt), str(data_dir), "--overlay", "--out", str(tmp_path / "o")]) == 0
    rgb = np.asarray(Image.open(tmp_path / "o" / f"{stem}_overlay.png"))
    assert (rgb == cli.OVERLAY_TP).all()


def test_synth_command_roundtrip(tmp_path):
    assert cli.main(["synth", "--seed", "4", "--size", "64", "--count", "3", "--out", str(tmp_path)]) == 0
    samples = load_dataset(tmp_path)
    assert len(samples) == 3 and samples[0].image.shape == (64, 64)


def test_gradcheck_scope_handling(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gradcheck", "everything"])
    assert e.value.code == 2
    assert cli.main(["gradcheck", "blocks"]) == 0
    assert "passed" in capsys.readouterr().out
