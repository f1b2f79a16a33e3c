import json

import numpy as np
import pytest
from PIL import Image

from triformer.checkpoint import load_checkpoint
from triformer.cli import main
from triformer.data import load_hsc

SPEC = {"classes": 3, "height": 14, "width": 14, "bands": 16, "regions": 6, "noise_sigma": 0.02,
        "sensor_b": {"bands": 12}}
CONFIG = {
    "model": {"patch": 5, "stage_widths": [8, 16, 32, 64], "stage_depths": [1, 0, 0]},
    "train": {"epochs": 2, "batch": 16, "warmup_epochs": 1},
    "tune": {"epochs": 2, "batch": 8, "warmup_epochs": 0},
    "sdt": {"aux": {"patch": 3, "stage_widths": [4, 8, 16, 32], "stage_depths": [0, 0, 0]}},
    "split": {"n_per_class": 5},
    "data": {"bands": 16},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "run.json").write_text(json.dumps(CONFIG))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "run.json"), "--data", str(root / "data/sensorA.hsc"),
                 "--out", str(root / "base.tfck")]) == 0
    return root


def test_gen_data_outputs(workspace, capsys, tmp_path):
    code, out = run(capsys, "gen-data", "--spec", workspace / "spec.json", "--seed", 3, "--out", tmp_path)
    assert code == 0
    for name in ("sensorA.hsc", "sensorB.hsc", "spec.json"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()
    a, la = load_hsc(tmp_path / "sensorA.hsc")
    b, _ = load_hsc(tmp_path / "sensorB.hsc")
    assert a.L == 16 and b.L == 12
    hist = np.bincount(la.labels.ravel(), minlength=4)[1:]
    assert {int(k): v for k, v in out["class_counts"].items()} == {i + 1: int(h) for i, h in enumerate(hist)}
    assert hist.sum() == 14 * 14


def test_gen_data_seed_changes_output(workspace, tmp_path):
    main(["gen-data", "--spec", str(workspace / "spec.json"), "--seed", "4", "--out", str(tmp_path)])
    assert (tmp_path / "sensorA.hsc").read_bytes() != (workspace / "data/sensorA.hsc").read_bytes()


def test_train_outputs(workspace):
    m = json.loads((workspace / "base.tfck.metrics.json").read_text())
    assert {"OA", "AA", "Kappa"} <= set(m)
    assert len((workspace / "base.tfck.history.jsonl").read_text().splitlines()) == 2
    assert (workspace / "base.tfck.history.png").read_bytes()[:4] == b"\x89PNG"
    assert load_checkpoint(workspace / "base.tfck").kind == "triformer"


def test_train_rerun_is_bitwise_identical(workspace, capsys, tmp_path):
    code, out = run(capsys, "train", "--config", workspace / "run.json", "--data", workspace / "data/sensorA.hsc",
                    "--out", tmp_path / "again.tfck", "--no-figures")
    assert code == 0
    a = json.loads((workspace / "base.tfck.metrics.json").read_text())
    a.pop("checkpoint"), out.pop("checkpoint")
    assert a == out
    assert (tmp_path / "again.tfck").read_bytes() == (workspace / "base.tfck").read_bytes()


def test_train_missing_file_exit_2(capsys, tmp_path):
    assert run(capsys, "train", "--data", tmp_path / "none.hsc", "--out", tmp_path / "x.tfck")[0] == 2


def test_unknown_config_key_exit_1(workspace, capsys, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"patch": 5}, "optimizer": {}}))
    code, _ = run(capsys, "train", "--config", tmp_path / "bad.json", "--data", workspace / "data/sensorA.hsc",
                  "--out", tmp_path / "x.tfck")
    assert code == 1


def test_usage_errors_exit_1(capsys):
    assert main(["nonsense"]) == 1
    assert main(["flops", "--extents", "9x9"]) == 1
    capsys.readouterr()


def test_numeric_divergence_exit_3(workspace, capsys, tmp_path):
    cfg = json.loads(json.dumps(CONFIG))
    cfg["train"].update({"base_lr": 1e300, "min_lr": 1e300, "epochs": 3})
    (tmp_path / "hot.json").write_text(json.dumps(cfg))
    code, _ = run(capsys, "train", "--config", tmp_path / "hot.json", "--data", workspace / "data/sensorA.hsc",
                  "--out", tmp_path / "x.tfck", "--no-figures")
    assert code == 3


def test_eval_map_and_metrics(workspace, capsys, tmp_path):
    code, out = run(capsys, "eval", "--ckpt", workspace / "base.tfck", "--data", workspace / "data/sensorA.hsc",
                    "--map-out", tmp_path / "map.png", "--figure-out", tmp_path / "fig.png")
    assert code == 0
    im = Image.open(tmp_path / "map.png")
    assert im.mode == "P" and im.size == (14, 14)
    idx = np.asarray(im)
    assert idx.min() >= 1 and idx.max() <= 3
    assert {"OA", "AA", "Kappa", "confusion_matrix"} <= set(out)
    code2, out2 = run(capsys, "eval", "--ckpt", workspace / "base.tfck", "--data", workspace / "data/sensorA.hsc",
                      "--map-out", tmp_path / "map2.png")
    assert out2["OA"] == out["OA"]
    assert (tmp_path / "map.png").read_bytes() == (tmp_path / "map2.png").read_bytes()


def test_class_map_colors_follow_labels(tmp_path):
    from triformer.plotting import palette, save_class_map

    labels = np.array([[0, 1, 2], [3, 2, 1]])
    save_class_map(labels, 3, tmp_path / "gt.png")
    im = Image.open(tmp_path / "gt.png")
    assert np.array_equal(np.asarray(im), labels)
    rgb = np.asarray(im.convert("RGB"))
    pal = palette(3)
    assert tuple(rgb[0, 0]) == (0, 0, 0)
    for r, c in [(0, 1), (1, 0), (1, 1)]:
        assert tuple(rgb[r, c]) == tuple(pal[labels[r, c]])


def test_tune_cold_factor_zero_keeps_base(workspace, capsys, tmp_path):
    out_ck = tmp_path / "dual.tfck"
    code, out = run(capsys, "tune", "--base", workspace / "base.tfck", "--config", workspace / "run.json",
                    "--data", workspace / "data/sensorB.hsc", "--n-per-class", 5, "--out", out_ck,
                    "--cold-factor", 0, "--no-figures")
    assert code == 0
    assert {"OA", "AA", "Kappa", "n_per_class", "repeats"} <= set(out)
    base = load_checkpoint(workspace / "base.tfck").tensors
    dual = load_checkpoint(out_ck).tensors
    for name, arr in base.items():
        if not name.startswith("head."):
            assert np.array_equal(dual["base." + name], arr), name


def test_tune_repeats_and_eval(workspace, capsys, tmp_path):
    args = ["tune", "--base", workspace / "base.tfck", "--config", workspace / "run.json",
            "--data", workspace / "data/sensorB.hsc", "--n-per-class", 5, "--repeats", 2, "--no-figures"]
    code, out = run(capsys, *args, "--out", tmp_path / "a.tfck")
    assert code == 0 and len(out["runs"]) == 2 and "OA_std" in out
    _, again = run(capsys, *args, "--out", tmp_path / "b.tfck")
    out.pop("checkpoint"), again.pop("checkpoint")
    assert out == again
    code, ev = run(capsys, "eval", "--ckpt", tmp_path / "a.tfck", "--data", workspace / "data/sensorB.hsc")
    assert code == 0 and "OA" in ev


def test_tune_scarce_class_exit_2(workspace, capsys, tmp_path):
    code, _ = run(capsys, "tune", "--base", workspace / "base.tfck", "--config", workspace / "run.json",
                  "--data", workspace / "data/sensorB.hsc", "--n-per-class", 500, "--out", tmp_path / "d.tfck")
    assert code == 2


def test_tune_scarce_class_names_class(workspace, capsys, tmp_path, caplog):
    with caplog.at_level("ERROR"):
        main(["tune", "--base", str(workspace / "base.tfck"), "--config", str(workspace / "run.json"),
              "--data", str(workspace / "data/sensorB.hsc"), "--n-per-class", "500", "--out", str(tmp_path / "d")])
    assert "class 1" in caplog.text


def test_flops(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"model": CONFIG["model"]}))
    code, out = run(capsys, "flops", "--config", tmp_path / "c.json", "--extents", "9x9x16",
                    "--figure-out", tmp_path / "cost.png")
    assert code == 0
    assert all(r["analytic"] == r["measured"] for r in out["layers"])
    assert (tmp_path / "cost.png").exists()
    _, again = run(capsys, "flops", "--config", tmp_path / "c.json", "--extents", "9x9x16")
    assert again == out


def test_convert_rgb(capsys, tmp_path):
    Image.fromarray(np.zeros((4, 5, 3), np.uint8)).save(tmp_path / "black.png")
    code, out = run(capsys, "convert-rgb", "--in", tmp_path / "black.png", "--out", tmp_path / "p.hsc")
    assert code == 0 and out["L"] == 32
    cube, _ = load_hsc(tmp_path / "p.hsc")
    assert cube.radiance.shape == (4, 5, 32) and not cube.radiance.any()
    assert run(capsys, "convert-rgb", "--in", tmp_path / "none.png", "--out", tmp_path / "q.hsc")[0] == 2


def test_help_lists_defaults(capsys):
    assert main(["--help"]) == 0
    assert '"n_per_class": 150' in capsys.readouterr().out
