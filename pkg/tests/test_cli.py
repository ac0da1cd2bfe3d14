import json

import numpy as np
import pytest
from PIL import Image

from cxrseg.cli import main
from cxrseg.phantom import write_phantom_dataset

TOY = {
    "preprocess": {"target_size": 32, "clahe": {"tile_grid": [2, 2]}},
    "unet": {"depth": 2, "base_channels": 4},
    "critic": {"depth": 2, "base_channels": 4},
    "train": {"pretrain_epochs": 1, "adv_epochs": 1, "plain_epochs": 2, "batch_size": 4, "seed": 1},
}


def touch_layout(base, n_images, structures, masked):
    (base / "images").mkdir(parents=True)
    for i in range(n_images):
        (base / "images" / f"{i:04d}.png").touch()
    for s in structures:
        (base / "masks" / s).mkdir(parents=True)
        for i in range(masked):
            (base / "masks" / s / f"{i:04d}.png").touch()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    write_phantom_dataset(data, "JSRT", 10, size=48)
    write_phantom_dataset(data, "Montgomery", 6, size=48, seed=1)
    config = root / "toy.json"
    config.write_text(json.dumps(TOY))
    manifest = root / "manifest.jsonl"
    assert main(["ingest", "--data-root", str(data), "--out", str(manifest)]) == 0
    return root, data, config, manifest


@pytest.fixture(scope="module")
def trained(workspace):
    root, _, config, manifest = workspace
    runs = {}
    for variant in ("attn-unet", "adv-attn-unet"):
        out = root / "runs" / variant
        assert main(["train", "--manifest", str(manifest), "--protocol", "JSRT-only", "--variant", variant,
                     "--config", str(config), "--out", str(out), "--cache", str(root / "cache")]) == 0
        runs[variant] = out
    return runs


def test_ingest_full_corpus_counts(tmp_path, capsys):
    touch_layout(tmp_path / "JSRT", 247, ["left_lung", "right_lung", "heart"], 247)
    touch_layout(tmp_path / "Montgomery", 138, ["left_lung", "right_lung"], 138)
    touch_layout(tmp_path / "Shenzhen", 662, ["left_lung", "right_lung"], 566)
    out = tmp_path / "m.jsonl"
    assert main(["ingest", "--data-root", str(tmp_path), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "JSRT: 247" in text and "MONTGOMERY: 138" in text and "SHENZHEN: 566" in text
    first = out.read_bytes()
    assert main(["ingest", "--data-root", str(tmp_path), "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_ingest_empty_root(tmp_path, capsys):
    assert main(["ingest", "--data-root", str(tmp_path), "--out", str(tmp_path / "m.jsonl")]) == 2
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(workspace, tmp_path):
    root, _, _, manifest = workspace
    assert main([]) == 2
    assert main(["train", "--manifest", str(manifest)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 1}}))
    out = tmp_path / "never"
    assert main(["train", "--manifest", str(manifest), "--protocol", "ALL", "--variant", "attn-unet",
                 "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["train", "--manifest", str(manifest), "--protocol", "ALL", "--variant", "attn-unet",
                 "--set", "loss.bogus=1", "--out", str(out)]) == 2
    assert not out.exists()


def test_preprocess_fills_cache(workspace, tmp_path, capsys):
    root, _, config, manifest = workspace
    cache = tmp_path / "cache"
    assert main(["preprocess", "--manifest", str(manifest), "--config", str(config), "--cache", str(cache),
                 "--workers", "2"]) == 0
    assert len(list(cache.rglob("*.image.bin"))) == 16
    assert "preprocessed 16 samples" in capsys.readouterr().out


def test_train_writes_runs(trained):
    plain = [json.loads(ln) for ln in (trained["attn-unet"] / "history.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in plain] == ["pretrain", "pretrain"]
    adv = [json.loads(ln) for ln in (trained["adv-attn-unet"] / "history.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in adv] == ["pretrain", "adversarial"]
    snapshot = json.loads((trained["adv-attn-unet"] / "config.json").read_text())
    assert snapshot["experiment"]["loss"]["lambda_adv"] == 0.1


def test_evaluate_writes_metrics(workspace, trained, capsys):
    _, _, _, manifest = workspace
    run = trained["attn-unet"]
    assert main(["evaluate", "--run", str(run), "--manifest", str(manifest), "--split", "val"]) == 0
    assert "lung:" in capsys.readouterr().out
    assert json.loads((run / "final_metrics.json").read_text())["eval_split"] == "val"


def test_predict_resolution_and_determinism(workspace, trained, tmp_path):
    run = trained["attn-unet"]
    image = tmp_path / "big.png"
    rng = np.random.default_rng(0)
    Image.fromarray(rng.integers(0, 256, size=(1024, 1024), dtype=np.uint8)).save(image)
    outs = []
    for k in range(2):
        out = tmp_path / f"mask{k}.png"
        assert main(["predict", "--checkpoint", str(run / "checkpoints" / "best.pt"), "--image", str(image),
                     "--out", str(out), "--overlay", str(tmp_path / "overlay.png")]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    with Image.open(outs[0]) as mask:
        assert mask.mode == "P" and mask.size == (1024, 1024)
        labels = np.asarray(mask)
    assert set(np.unique(labels)) <= {0, 1, 2}
    with Image.open(tmp_path / "overlay.png") as overlay:
        assert overlay.mode == "RGB" and overlay.size == (1024, 1024)


def test_predict_missing_checkpoint(tmp_path):
    assert main(["predict", "--checkpoint", str(tmp_path / "none.pt"), "--image", "x.png",
                 "--out", str(tmp_path / "o.png")]) == 2


def test_report_table(trained, tmp_path, capsys):
    out = tmp_path / "report"
    assert main(["report", "--runs", str(trained["attn-unet"]), str(trained["adv-attn-unet"]),
                 "--out", str(out)]) == 0
    lines = (out / "table.txt").read_text().splitlines()
    assert lines[0].split() == ["Dataset", "ATTN", "U-Net", "Adv.", "ATTN"]
    assert lines[2].startswith("JSRT") and lines[2].count("%") == 2
    assert lines[3].split() == ["All", "-", "-"]
    assert lines[4].split() == ["All", "/", "JSRT", "-", "-"]
    assert (trained["attn-unet"] / "dice_curve.png").exists()
    csv = (out / "table.csv").read_text().splitlines()
    assert csv[0] == "Dataset,ATTN U-Net,Adv. ATTN"

    single = tmp_path / "single"
    assert main(["report", "--runs", str(trained["attn-unet"]), "--out", str(single)]) == 0
    assert (single / "table.txt").read_text().splitlines()[0].split() == ["Dataset", "ATTN", "U-Net"]


def test_report_missing_metrics(tmp_path):
    assert main(["report", "--runs", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_numerical_failure_exits_3(workspace, tmp_path, monkeypatch):
    import cxrseg.cli as cli
    from cxrseg.training import NonFiniteLossError

    def explode(*args, **kwargs):
        raise NonFiniteLossError("non-finite loss", {"epoch": 1})

    monkeypatch.setattr(cli, "run_experiment", explode)
    _, _, config, manifest = workspace
    assert main(["train", "--manifest", str(manifest), "--protocol", "ALL", "--variant", "attn-unet",
                 "--config", str(config), "--out", str(tmp_path / "r")]) == 3
