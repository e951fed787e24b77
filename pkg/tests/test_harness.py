import random

import numpy as np
import pytest

from conftest import toy_run_config
from drebnet.boxes import Detection, GroundTruthBox
from drebnet.checkpoint import CheckpointError, dumps_checkpoint, loads_checkpoint
from drebnet.cli import main
from drebnet.config import ConfigError, RunConfig, format_config, parse_config
from drebnet.data import DataError, blackout, format_index, load_dataset, parse_index, read_image, write_ppm
from drebnet.engine import Tensor, no_grad
from drebnet.evaluate import metric_report, read_detections, write_detections
from drebnet.model import Phase
from drebnet.train import Trainer, synthetic_samples, train


# ----------------------------------------------------------------- config

def test_config_round_trip():
    cfg = RunConfig(seed=9)
    cfg.model.enable_lfamm = False
    cfg.model.input_hw = (96, 64)
    cfg.loss.w_ssim = 0.25
    text = format_config(cfg)
    assert format_config(parse_config(text)) == text


def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("# header\nseed = 1\nmodel.nope = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("optim.lr0 = fast\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("\njust words\n")
    with pytest.raises(ConfigError, match="phase_switch_ratio"):
        parse_config("phase_switch_ratio = 1.0\n")
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config("optim.batch_size = 1\n")


def test_switch_epoch():
    cfg = RunConfig(phase_switch_ratio=0.6)
    cfg.optim.total_epochs = 5
    assert cfg.switch_epoch == 3


# ------------------------------------------------------------------- data

INDEX = """# toy
a.ppm 0 1 2 10 12
a.ppm -1 20 20 25.5 30
b.ppm
c.ppm 1 0.5 0.5 4 4
"""


def test_index_parse_and_round_trip():
    recs = parse_index(INDEX)
    assert [r.image_path for r in recs] == ["a.ppm", "b.ppm", "c.ppm"]
    assert recs[0].boxes == [GroundTruthBox(0, 1, 2, 10, 12)]
    assert recs[0].ignored_regions == [(20.0, 20.0, 25.5, 30.0)]
    assert recs[1].boxes == []
    again = parse_index(format_index(recs))
    assert [(r.image_path, r.boxes, r.ignored_regions) for r in again] == \
           [(r.image_path, r.boxes, r.ignored_regions) for r in recs]


@pytest.mark.parametrize("line,msg", [("a.ppm 0 1 2 3", "expected"), ("a.ppm x 1 2 3 4", "non-numeric"),
                                      ("a.ppm 0 5 5 5 9", "empty"), ("a.ppm -2 1 1 2 2", "negative")])
def test_index_errors(line, msg):
    with pytest.raises(DataError, match=f"idx:2: {msg}"):
        parse_index("b.ppm\n" + line + "\n", "idx")


def test_blackout_pixels_exact(rng):
    img = rng.uniform(0.1, 1, (3, 40, 40))
    out = blackout(img, [(20, 20, 25.5, 30)])
    assert not out[:, 20:30, 20:26].any()
    assert np.array_equal(out[:, :20], img[:, :20]) and np.array_equal(out[:, :, 26:], img[:, :, 26:])


def test_load_dataset(tmp_path, rng):
    for name in ("a.ppm", "b.ppm", "c.ppm"):
        write_ppm(tmp_path / name, rng.uniform(0, 1, (3, 32, 32)))
    (tmp_path / "idx.txt").write_text(INDEX)
    ds = load_dataset(tmp_path / "idx.txt", tmp_path)
    a = ds.records[0].image
    assert a.shape == (3, 32, 32) and not a[:, 20:30, 20:26].any()
    assert ds.records[1].boxes == []
    (tmp_path / "b.ppm").unlink()
    with pytest.raises(DataError, match="b.ppm"):
        load_dataset(tmp_path / "idx.txt", tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.txt", tmp_path)


def test_ppm_round_trip(tmp_path, rng):
    img = (rng.integers(0, 256, (3, 5, 7)) / 255.0).astype(np.float32)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_image(tmp_path / "x.ppm"), img)


# ------------------------------------------------------------- checkpoint

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Five epochs, joint phase through epoch 3, with deep-decoder snapshots after each epoch."""
    tmp = tmp_path_factory.mktemp("toy")
    cfg = toy_run_config(tmp)
    t = Trainer(cfg, synthetic_samples(cfg, 4))
    snaps, recs = [], []
    for _ in range(5):
        recs.append(t.run_epoch())
        snaps.append({k: v.copy() for k, v in t.model.state_dict().items() if k.startswith("brab_deep.")})
    return cfg, t, snaps, recs


def test_deep_decoder_frozen_after_switch(toy_run):
    cfg, t, snaps, recs = toy_run
    assert [r.phase for r in recs] == [Phase.JOINT] * 3 + [Phase.DETACHED_BRAB] * 2
    assert any(not np.array_equal(snaps[1][k], snaps[2][k]) for k in snaps[2])
    for k in snaps[2]:
        assert np.array_equal(snaps[2][k], snaps[3][k]) and np.array_equal(snaps[3][k], snaps[4][k])
    assert all("mse" in r.losses for r in recs[:3])
    assert all("mse" not in r.losses and "ssim" not in r.losses for r in recs[3:])


def test_checkpoint_byte_round_trip(toy_run):
    cfg, t, _, _ = toy_run
    blob = dumps_checkpoint(t.model, cfg, "train", t.state)
    ck = loads_checkpoint(blob, expected=cfg)
    assert ck.mode == "train" and ck.state.step == t.state.step
    assert dumps_checkpoint(ck.model, ck.config, "train", ck.state) == blob
    infer = dumps_checkpoint(t.model, cfg, "infer")
    assert len(infer) < len(blob)
    assert loads_checkpoint(infer).model.brab_deep is None


def test_infer_checkpoint_reproduces_detached_forward(toy_run, rng):
    cfg, t, _, _ = toy_run
    model = loads_checkpoint(dumps_checkpoint(t.model, cfg, "infer")).model
    assert not model.training
    t.model.eval()
    x = rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)
    with no_grad():
        ref, _ = t.model.forward_train(Tensor(x), Phase.DETACHED_BRAB)
        got = model.forward_infer(Tensor(x))
    t.model.train()
    for a, b in zip(ref, got):
        assert np.max(np.abs(a.data - b.data)) == 0.0


def test_checkpoint_corruption(toy_run):
    cfg, t, _, _ = toy_run
    blob = bytearray(dumps_checkpoint(t.model, cfg, "infer"))
    bad = bytearray(blob)
    i = bad.index(b"seed = ")
    bad[i + 7] = ord("8") if bad[i + 7] != ord("8") else ord("7")
    with pytest.raises(CheckpointError, match="digest"):
        loads_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError, match="DRBC"):
        loads_checkpoint(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(bytes(blob) + b"\0")
    with pytest.raises(CheckpointError, match="different configuration"):
        loads_checkpoint(bytes(blob), expected=RunConfig())


def test_training_run_writes_log_and_is_deterministic(tmp_path):
    outs = []
    for _ in range(2):
        cfg = toy_run_config(tmp_path, epochs=4, ratio=0.5)
        train_path, infer_path = train(cfg)
        outs.append((train_path.read_bytes(), infer_path.read_bytes()))
        lines = (tmp_path / "run" / "train.log").read_text().splitlines()
        assert len(lines) == 4
        assert "mse=-" not in lines[1] and "mse=-" in lines[2] and "ssim=-" in lines[3]
    assert outs[0] == outs[1]


# --------------------------------------------------------------- evaluate

def _scene(rng, n_images=4):
    gts, dets = {}, []
    for i in range(n_images):
        gts[i] = []
        for _ in range(3):
            x, y = rng.uniform(0, 100, 2)
            w = rng.choice([10, 50, 120])
            gts[i].append(GroundTruthBox(int(rng.integers(0, 2)), x, y, x + w, y + w))
            dets.append(Detection(gts[i][-1].class_id, gts[i][-1].box, float(rng.uniform()), i))
        dets.append(Detection(0, (0, 0, 30, 30), float(rng.uniform()), i))
    return dets, gts


def test_report_perfect_detections(rng):
    _, gts = _scene(rng)
    perfect = [Detection(b.class_id, b.box, 1.0, i) for i, bs in gts.items() for b in bs]
    rep = metric_report(perfect, gts, (0.5, 0.75))
    assert rep["mAP_50"] == rep["mAR_50"] == rep["mAP_75"] == 1.0


def test_report_permutation_invariant(rng):
    dets, gts = _scene(rng)
    a = metric_report(dets, gts)
    shuffled = dets[:]
    random.Random(0).shuffle(shuffled)
    b = metric_report(shuffled, gts)
    assert a.keys() == b.keys()
    assert all((np.isnan(a[k]) and np.isnan(b[k])) or a[k] == b[k] for k in a)


def test_detection_file_round_trip(tmp_path, rng):
    dets, _ = _scene(rng)
    write_detections(tmp_path / "d.txt", dets)
    assert read_detections(tmp_path / "d.txt") == dets


# -------------------------------------------------------------------- cli

def test_cli_exit_codes(tmp_path, capsys, toy_run):
    assert main(["--version"]) == 0
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert main(["eval", "--ckpt", "x", "--data", "y", "--iou", "1.5"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.variant = huge\n")
    assert main(["train", "--config", str(bad)]) == 2
    cfg, t, _, _ = toy_run
    ck = tmp_path / "train.drbc"
    ck.write_bytes(dumps_checkpoint(t.model, cfg, "train", t.state))
    write_ppm(tmp_path / "a.ppm", np.zeros((3, 64, 64)))
    (tmp_path / "idx.txt").write_text("a.ppm 0 4 4 20 20\n")
    args = ["eval", "--ckpt", str(ck), "--data", str(tmp_path / "idx.txt"), "--out", str(tmp_path / "ev")]
    assert main(args) == 2
    assert main(args + ["--allow-train"]) == 0
    assert (tmp_path / "ev" / "report.csv").exists()
    assert main(["detect", "--ckpt", str(ck), "--image", str(tmp_path / "a.ppm"), "--thresh", "1.0"]) == 0
    assert "0 detections" in capsys.readouterr().out


def test_cli_synth_blur_and_stats(tmp_path, rng, capsys):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(3):
        write_ppm(src / f"{i}.ppm", rng.uniform(0, 1, (3, 32, 32)))
    assert main(["synth-blur", "--in", str(src), "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
    manifest = (tmp_path / "o" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "image,seed,psnr" and len(manifest) == 4
    assert main(["stats", "--pairs", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "stats.csv").exists()
    assert main(["synth-blur", "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "p")]) == 1


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--module", "lfamm", "--seeds", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
