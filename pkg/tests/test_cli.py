import json
import struct

import numpy as np
import pytest

from fgr.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from fgr.cli import main
from fgr.config import TrainConfig, save_config
from fgr.data import ImageSet, load_splits, save_cifar10
from fgr.freqfilter import filter_image
from fgr.imageio import PPMError, read_ppm, write_ppm
from fgr.nn import Model
from fgr.training import LOG_FIELDS, METRIC_FIELDS, read_csv


def test_checkpoint_roundtrip(tmp_path):
    model = Model("tinyconv", (3, 16, 16), 3)
    params = model.init(7)
    save_checkpoint(tmp_path / "m.ckpt", model, params, {"stage": "stage1"})
    back_model, back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert back_model == model and meta["stage"] == "stage1"
    assert back.names() == params.names()
    for n in params:
        assert back[n].data.tobytes() == params[n].data.tobytes()
    assert back.names("head") == params.names("head")


def test_checkpoint_layout_is_documented(tmp_path):
    model = Model("mlp", (12,), 2, hidden=4)
    params = model.init(0)
    save_checkpoint(tmp_path / "m.ckpt", model, params)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, meta_len = struct.unpack_from("<II", raw, 8)
    assert version == 1
    pos = 16 + meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    names = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2 : pos + 2 + name_len].decode()
        pos += 2 + name_len
        _, ndim = struct.unpack_from("<BB", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 2)
        pos += 2 + 4 * ndim
        data = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape)
        assert np.array_equal(data, params[name].data)
        pos += 8 * data.size
        names.append(name)
    assert names == sorted(names) and pos == len(raw)


def test_checkpoint_corruption_detected(tmp_path):
    model = Model("mlp", (12,), 2, hidden=4)
    save_checkpoint(tmp_path / "m.ckpt", model, model.init(0))
    raw = (tmp_path / "m.ckpt").read_bytes()
    for name, blob in (("magic", b"X" + raw[1:]), ("short", raw[:-3]), ("extra", raw + b"\0"),
                       ("version", raw[:8] + struct.pack("<I", 9) + raw[12:])):
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_ppm_roundtrip_and_errors(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# note\n2 1\n255\n" + bytes(range(6)))
    assert read_ppm(tmp_path / "c.ppm").tolist() == [[[0, 1, 2], [3, 4, 5]]]
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(PPMError):
        read_ppm(tmp_path / "bad.ppm")
    with pytest.raises(PPMError):
        write_ppm(tmp_path / "f.ppm", img.astype(float))


# ---------------------------------------------------------------- CLI smoke


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n", "96", "--n-val", "24", "--n-test", "40",
                 "--size", "16", "--seed", "1"]) == 0
    cfg = TrainConfig(epochs=1, batch_size=32, finetune_epochs=1, corruptions=("contrast",), seed=1)
    save_config(cfg, root / "cfg.json")
    return root


def test_gen_data_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 96, "val": 24, "test_id": 40, "test_shift": 40}
    assert manifest["num_classes"] == 3 and manifest["seed"] == 1
    assert manifest["config"]["size"] == 16
    assert len(load_splits(workspace / "data")["train"]) == 96


def test_train_finetune_eval_report(workspace, capsys):
    data, cfg = str(workspace / "data"), str(workspace / "cfg.json")
    s1, s2 = workspace / "s1", workspace / "s2"
    assert main(["train", "--config", cfg, "--data", data, "--out", str(s1)]) == 0
    assert main(["finetune-fgr", "--config", cfg, "--data", data, "--init", str(s1 / "model.ckpt"), "--out", str(s2)]) == 0
    rows = read_csv(s2 / "metrics.csv")
    assert list(rows[0]) == METRIC_FIELDS
    assert len(rows) == 2 + 5
    assert len({r["T_star"] for r in rows}) == 1
    log = read_csv(s2 / "training_log.csv")
    assert list(log[0]) == LOG_FIELDS and all(r["violation"] == "0" for r in log)
    assert (s2 / "reliability_test_id.csv").exists() and (s2 / "temperature.json").exists()
    assert main(["eval", "--ckpt", str(s2 / "model.ckpt"), "--data", data, "--config", cfg, "--out", str(workspace / "ev")]) == 0
    assert read_csv(workspace / "ev" / "metrics.csv") == rows
    capsys.readouterr()
    assert main(["report", "--run", str(s2)]) == 0
    out = capsys.readouterr().out
    assert "test_id:" in out and "violations=0" in out


def test_ablate_and_sweep(workspace):
    data, cfg = str(workspace / "data"), str(workspace / "cfg.json")
    assert main(["ablate", "--config", cfg, "--data", data, "--out", str(workspace / "ab")]) == 0
    assert [r["variant"] for r in read_csv(workspace / "ab" / "ablation.csv")] == ["filter-only", "rectify-only", "both"]
    assert main(["sweep", "--param", "lambda", "--values", "15,25", "--config", cfg, "--data", data,
                 "--out", str(workspace / "sw")]) == 0
    assert len(read_csv(workspace / "sw" / "sweep_lambda.csv")) == 2


def test_report_empty_dir(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == 1


def test_filter_command(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    write_ppm(tmp_path / "in.ppm", img)
    assert main(["filter", "--input", str(tmp_path / "in.ppm"), "--lambda", "18", "--output", str(tmp_path / "out.ppm")]) == 0
    assert np.array_equal(read_ppm(tmp_path / "out.ppm"), filter_image(img, 18))


def test_gen_data_from_cifar(tmp_path):
    rng = np.random.default_rng(0)
    for name, n in (("b1.bin", 30), ("b2.bin", 20), ("t.bin", 10)):
        save_cifar10(tmp_path / name, ImageSet(rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8), rng.integers(0, 10, n)))
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--cifar", str(tmp_path / "b1.bin"), str(tmp_path / "b2.bin"),
                 "--cifar-test", str(tmp_path / "t.bin")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 45, "val": 5, "test_id": 10}
    assert manifest["config"]["generator"] == "cifar10"
