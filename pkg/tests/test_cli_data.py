import struct

import numpy as np
import pytest

from plainseg.checkpoint import CheckpointError, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from plainseg.cli import main
from plainseg.config import ConfigError, RunConfig, load_config, parse_config, serialize_config
from plainseg.data import (SyntheticShapesSpec, file_digest, generate_sample, generate_synthetic, load_split,
                           read_pnm, write_pgm, write_ppm)
from plainseg.features import collect_features, dump_features, feature_to_gray, stage_names
from plainseg.model import build_model, preset
from plainseg.training import AdamW

# ---------------------------------------------------------------- synthetic data


def test_generator_labels_in_range(tmp_path):
    spec = SyntheticShapesSpec(image_size=32, num_classes=3, num_images=100)
    generate_synthetic(spec, tmp_path)
    X, Y = load_split(tmp_path, "train")
    assert X.shape == (100, 3, 32, 32) and Y.shape == (100, 32, 32)
    assert set(np.unique(Y)) <= {0, 1, 2}
    assert -1 <= X.min() and X.max() <= 1


def test_zero_shapes_is_all_background():
    spec = SyntheticShapesSpec(image_size=16, shapes_min=0, shapes_max=0)
    for i in range(5):
        assert np.all(generate_sample(spec, i)[1] == 0)


def test_every_class_is_common():
    spec = SyntheticShapesSpec(num_classes=3, shapes_min=3, shapes_max=5, num_images=200)
    labels = [generate_sample(spec, i)[1] for i in range(spec.num_images)]
    for c in range(3):
        assert np.mean([np.any(lab == c) for lab in labels]) >= 0.8


def test_bad_spec():
    with pytest.raises(ValueError):
        SyntheticShapesSpec(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticShapesSpec(shapes_min=4, shapes_max=2)


def test_pnm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    lab = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    write_pgm(tmp_path / "a.pgm", lab)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), lab)


def test_pnm_header_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    assert read_pnm(tmp_path / "c.pgm").tolist() == [[7, 9]]
    (tmp_path / "d.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "d.pgm")


def test_manifest_keeps_other_splits(tmp_path):
    spec = SyntheticShapesSpec(image_size=8, num_images=3)
    generate_synthetic(spec, tmp_path, "train")
    generate_synthetic(spec, tmp_path, "val", start=3)
    generate_synthetic(spec, tmp_path, "train")
    assert len(load_split(tmp_path, "train")[0]) == 3 and len(load_split(tmp_path, "val")[0]) == 3
    assert not np.array_equal(load_split(tmp_path, "train")[1], load_split(tmp_path, "val")[1])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = build_model(preset("tiny"), seed=1)
    opt = AdamW(model.named_parameters())
    for _, p in opt.params:
        p.grad = np.ones_like(p.data)
    opt.step(1e-3)
    save_checkpoint(tmp_path / "m.pseg", model, opt, extra={"iters": 5})
    other = build_model(preset("tiny"), seed=2)
    opt2 = AdamW(other.named_parameters())
    assert load_checkpoint(tmp_path / "m.pseg", other, opt2) == []
    for (n, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        assert a.dtype == b.dtype and np.array_equal(a, b), n
    name = opt.params[0][0]
    np.testing.assert_array_equal(opt.state[name]["v"], opt2.state[name]["v"])
    assert load_arrays(tmp_path / "m.pseg")["meta.iters"][0] == 5


def test_file_layout_is_little_endian(tmp_path):
    save_arrays(tmp_path / "x.pseg", {"ab": np.array([[1.5, 2.0]], dtype=np.float32)})
    buf = (tmp_path / "x.pseg").read_bytes()
    assert buf[:4] == b"PSEG"
    assert struct.unpack_from("<III", buf, 4) == (1, 1, 2)
    assert buf[16:18] == b"ab"
    assert struct.unpack_from("<BIQQ", buf, 18) == (0, 2, 1, 2)
    assert struct.unpack_from("<2f", buf, 18 + 21) == (1.5, 2.0)


def test_nonstrict_load_skips_head(tmp_path):
    enc_only = build_model(preset("tiny"), seed=4)
    arrays = {k: v for k, v in enc_only.state_dict().items() if k.startswith("encoder.")}
    save_arrays(tmp_path / "enc.pseg", arrays)
    model = build_model(preset("tiny"), seed=5)
    head_before = {k: v.copy() for k, v in model.state_dict().items() if k.startswith("head.")}
    missing = load_checkpoint(tmp_path / "enc.pseg", model, strict=False)
    assert missing and all(m.startswith("head.") for m in missing)
    state = model.state_dict()
    assert all(np.array_equal(state[k], v) for k, v in arrays.items())
    assert all(np.array_equal(state[k], v) for k, v in head_before.items())
    with pytest.raises((KeyError, ValueError)):
        load_checkpoint(tmp_path / "enc.pseg", build_model(preset("tiny")), strict=True)


def test_strict_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "a.pseg", build_model(preset("tiny")))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "a.pseg", build_model(preset("tiny", decoder_width=16)))


def test_corrupt_files_raise_without_partial_load(tmp_path):
    model = build_model(preset("tiny"))
    save_checkpoint(tmp_path / "m.pseg", model)
    good = (tmp_path / "m.pseg").read_bytes()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    (tmp_path / "bad.pseg").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.pseg", model)
    (tmp_path / "v.pseg").write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pseg", model)
    (tmp_path / "t.pseg").write_bytes(good[: len(good) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pseg", model)
    assert all(np.array_equal(model.state_dict()[k], v) for k, v in before.items())


# ---------------------------------------------------------------- config

SAMPLE = """
# tiny run
[model]
preset = tiny
decoder_layers = 4

[train]
learning_rate = 3e-4
literal_llrd = true
total_iters = 10
warmup_iters = 2

[eval]
stride = 32
"""


def test_parse_sample():
    cfg = parse_config(SAMPLE)
    assert cfg.model.embed_dim == 64 and cfg.model.decoder_layers == 4
    assert cfg.train.learning_rate == 3e-4 and cfg.train.literal_llrd is True
    assert cfg.eval.stride == 32 and cfg.data == RunConfig().data


def test_config_round_trip():
    cfg = parse_config(SAMPLE)
    assert parse_config(serialize_config(cfg)) == cfg
    assert parse_config(serialize_config(RunConfig())) == RunConfig()


@pytest.mark.parametrize("text,line", [
    ("[model]\nfoo = 1\n", 2),
    ("[model]\n\n[nope]\n", 3),
    ("[train]\nbatch_size = 2\nbatch_size = 3\n", 3),
    ("[train]\nbatch_size = two\n", 2),
    ("[train]\nliteral_llrd = maybe\n", 2),
    ("batch_size = 2\n", 1),
    ("[train]\njust words\n", 2),
    ("[model]\npreset = huge\n", 2),
    ("[model]\n\ngroup_count = 4\n", 3),
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as e:
        parse_config(text, "run.cfg")
    assert e.value.line == line
    assert str(e.value).startswith(f"run.cfg:{line}:")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


# ---------------------------------------------------------------- feature dumps


def test_constant_map_is_mid_gray():
    assert np.all(feature_to_gray(np.full((4, 3, 3), 2.5)) == 128)
    g = feature_to_gray(np.arange(8.0).reshape(2, 2, 2))
    assert g.min() == 0 and g.max() == 255


def test_dump_one_file_per_stage(tmp_path, rng):
    model = build_model(preset("tiny"))
    img = rng.standard_normal((3, 64, 64))
    assert stage_names(model) == ["pre-refine", "post-refine", "group-0", "group-1"]
    paths = dump_features(model, img, stage_names(model), tmp_path)
    assert sorted(p.name for p in paths) == sorted(f"{s}.pgm" for s in stage_names(model))
    assert read_pnm(tmp_path / "pre-refine.pgm").shape == (8, 8)  # 1/8 of 64
    assert read_pnm(tmp_path / "post-refine.pgm").shape == (16, 16)
    with pytest.raises(ValueError):
        dump_features(model, img, ["group-7"], tmp_path)


def test_group_count_follows_config(rng):
    model = build_model(preset("tiny", group_count=4))
    feats = collect_features(model, rng.standard_normal((3, 64, 64)))
    assert sum(k.startswith("group-") for k in feats) == 4


# ---------------------------------------------------------------- CLI

TINY_RUN = """
[model]
preset = tiny
[train]
batch_size = 2
warmup_iters = 1
log_every = 1
[data]
train_images = 4
val_images = 2
[eval]
crop = 64
stride = 64
"""


@pytest.fixture
def run_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY_RUN)
    return p


def test_gen_data_is_deterministic(tmp_path, run_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(run_cfg), "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(run_cfg), "--seed", "7", "--out", str(b)]) == 0
    assert file_digest(a) == file_digest(b)
    assert main(["gen-data", "--config", str(run_cfg), "--seed", "8", "--out", str(b)]) == 0
    assert file_digest(a) != file_digest(b)


def test_train_eval_bench_dump(tmp_path, run_cfg, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    cfg = ["--config", str(run_cfg)]
    assert main(["gen-data", *cfg, "--out", str(data)]) == 0
    assert main(["train", *cfg, "--data", str(data), "--out", str(run), "--iters", "2"]) == 0
    metrics = (run / "metrics.tsv").read_text().splitlines()
    assert metrics[0].split("\t")[:2] == ["iter", "loss"] and len(metrics) == 3
    assert load_config(run / "config.txt").train.total_iters == 2
    ck = str(run / "model.pseg")
    assert main(["eval", *cfg, "--checkpoint", ck, "--data", str(data)]) == 0
    out = capsys.readouterr().out
    assert "miou\t" in out and "iou_class_3\t" in out
    assert main(["bench", *cfg, "--checkpoint", ck, "--warmup", "0", "--repeats", "1"]) == 0
    assert "median_ms" in capsys.readouterr().out
    assert main(["dump-features", *cfg, "--checkpoint", ck, "--image", str(data / "val/img_00000.ppm"),
                 "--stage", "group-1", "--out", str(tmp_path / "f")]) == 0
    assert read_pnm(tmp_path / "f" / "group-1.pgm").shape == (16, 16)


def test_count_reports_reference_figures(capsys):
    assert main(["count", "--preset", "beit_base", "--format", "kv"]) == 0
    kv = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert float(kv["total_params"]) == pytest.approx(105e6, rel=0.03)
    assert float(kv["rp_percent"]) == pytest.approx(22, abs=3)
    assert main(["count", "--preset", "simple_upsample_base", "--input", "512", "512"]) == 0
    assert "110.6" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["count", "--config", str(bad)]) == 2
    assert f"{bad}:2:" in capsys.readouterr().err
    good = tmp_path / "good.cfg"
    good.write_text(TINY_RUN)
    assert main(["eval", "--config", str(good), "--checkpoint", str(tmp_path / "none.pseg"),
                 "--data", str(tmp_path)]) == 1
    mismatch = tmp_path / "m.cfg"
    mismatch.write_text("[model]\npreset = tiny\n[data]\nnum_classes = 3\n")
    assert main(["train", "--config", str(mismatch), "--data", str(tmp_path)]) == 2
