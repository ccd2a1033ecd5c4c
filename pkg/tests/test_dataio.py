import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hd2ssc.dataio import ModelConfig, SYNTHETIC, generate_synthetic, parse_config
from hd2ssc.dataio.config import FULL_SCALE, parse_config_text, parse_override
from hd2ssc.dataio.grid import VoxelGrid, decode_sscv, encode_sscv, read_sscv, write_sscv
from hd2ssc.dataio.kitti import decode_kitti, load_class_map, read_semantickitti_voxels
from hd2ssc.dataio.store import read_dataset, write_sample
from hd2ssc.errors import ConfigError, DataError, FormatError, HD2Error, LengthError
from hd2ssc.geometry import VoxelGridSpec, project_voxels
from hd2ssc.hsd import ExpansionLayer
from hd2ssc.pipeline import HD2SSC


def random_grid(rng, shape):
    labels = rng.integers(0, 6, size=shape)
    labels[rng.random(shape) < 0.05] = 255
    return VoxelGrid(labels, rng.random(shape) > 0.3)


# ------------------------------------------------------------------ SSCV

def test_sscv_round_trip_is_byte_exact(tmp_path):
    g = random_grid(np.random.default_rng(0), (5, 7, 3))
    write_sscv(g, tmp_path / "a.sscv")
    back = read_sscv(tmp_path / "a.sscv")
    assert back == g
    write_sscv(back, tmp_path / "b.sscv")
    assert (tmp_path / "a.sscv").read_bytes() == (tmp_path / "b.sscv").read_bytes()


def test_sscv_layout_by_hand():
    g = VoxelGrid(np.array([3, 258]).reshape(2, 1, 1), np.array([True, False]).reshape(2, 1, 1))
    buf = encode_sscv(g)
    assert buf == b"SSCV" + struct.pack("<HIII", 1, 2, 1, 1) + struct.pack("<HH", 3, 258) + b"\x80"


def test_sscv_bad_magic():
    buf = bytearray(encode_sscv(random_grid(np.random.default_rng(1), (2, 2, 2))))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_sscv(bytes(buf))


def test_sscv_truncation_reports_sizes():
    buf = encode_sscv(random_grid(np.random.default_rng(2), (3, 3, 3)))
    with pytest.raises(LengthError) as e:
        decode_sscv(buf[:-2])
    assert e.value.expected == len(buf) and e.value.actual == len(buf) - 2


def test_sscv_unknown_version():
    buf = bytearray(encode_sscv(random_grid(np.random.default_rng(3), (1, 1, 1))))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError, match="version"):
        decode_sscv(bytes(buf))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_sscv_reader_is_total(data):
    try:
        decode_sscv(data)
    except HD2Error:
        pass


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=40))
def test_sscv_reader_total_on_valid_header(payload):
    try:
        decode_sscv(b"SSCV" + struct.pack("<HIII", 1, 2, 3, 1) + payload)
    except HD2Error:
        pass


# ----------------------------------------------------------- KITTI format

def write_kitti_fixture(directory, frame, labels, invalid):
    """Independent writer: struct-packed u16 labels, hand-rolled MSB-first bits."""
    flat = [int(v) for v in labels.reshape(-1)]
    bits = [bool(v) for v in invalid.reshape(-1)]
    with open(directory / f"{frame}.label", "wb") as f:
        f.write(struct.pack(f"<{len(flat)}H", *flat))
    packed = bytearray()
    for start in range(0, len(bits), 8):
        byte = 0
        for j, b in enumerate(bits[start:start + 8]):
            if b:
                byte |= 1 << (7 - j)
        packed.append(byte)
    with open(directory / f"{frame}.invalid", "wb") as f:
        f.write(bytes(packed))


def test_kitti_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    dims = (6, 5, 4)
    raw = rng.choice([0, 10, 40, 252], size=dims)
    invalid = rng.random(dims) < 0.3
    write_kitti_fixture(tmp_path, "000007", raw, invalid)
    (tmp_path / "map.txt").write_text("# raw mapped\n0 0\n10: 1\n40 9\n252 255\n")
    cmap = load_class_map(tmp_path / "map.txt")
    g = read_semantickitti_voxels(tmp_path, 7, cmap, dims)
    expect = np.vectorize({0: 0, 10: 1, 40: 9, 252: 255}.get)(raw)
    assert np.array_equal(g.labels, expect)
    assert np.array_equal(g.valid, ~invalid)


def test_kitti_mask_byte_0x80():
    dims = (2, 2, 2)
    g = decode_kitti(bytes(16), b"\x80", dims=dims)
    flat = g.valid.reshape(-1)
    assert not flat[0] and flat[1:].all()


def test_kitti_full_size_grid(tmp_path):
    n = 256 * 256 * 32
    (tmp_path / "000000.label").write_bytes(bytes(2 * n))
    (tmp_path / "000000.invalid").write_bytes(bytes(n // 8))
    g = read_semantickitti_voxels(tmp_path, 0)
    assert g.shape == (256, 256, 32) and g.valid.all()


def test_kitti_errors():
    with pytest.raises(LengthError):
        decode_kitti(bytes(15), b"\x00", dims=(2, 2, 2))
    with pytest.raises(LengthError):
        decode_kitti(bytes(16), b"", dims=(2, 2, 2))
    with pytest.raises(DataError, match="raw label 77"):
        decode_kitti(struct.pack("<8H", 0, 0, 77, 0, 0, 0, 0, 0), b"\x00", {0: 0}, dims=(2, 2, 2))


# ----------------------------------------------------------------- config

def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    cfg = parse_config(tmp_path / "c.txt")
    assert cfg == ModelConfig()
    assert (cfg.c2d, cfg.c3d, cfg.d_exp, cfg.n_query, cfg.k_critical) == (32, 16, 4, 32, 64)
    assert (cfg.lr, cfg.weight_decay) == (2e-4, 1e-2)


def test_full_scale_constants():
    assert FULL_SCALE["d_exp"] == 4 and FULL_SCALE["n_query"] == 100
    assert FULL_SCALE["k_critical"] == 4096
    assert (FULL_SCALE["c2d"], FULL_SCALE["c3d"]) == (256, 32)


def test_d_exp_reaches_expansion_layer():
    cfg = parse_config_text("model.d_exp = 4\nmodel.c2d = 8\n")
    model = HD2SSC(cfg, 6)
    assert isinstance(model.expansion, ExpansionLayer)
    assert model.expansion.weight.shape == (32, 8)


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError, match="model.d_exp"):
        parse_config_text("model.d_exp = 0")
    with pytest.raises(ConfigError, match="model.bogus"):
        parse_config_text("model.bogus = 1")
    with pytest.raises(ConfigError, match="train.lr"):
        parse_config_text("train.lr = fast")
    with pytest.raises(ConfigError, match="given twice"):
        parse_config_text("train.seed = 1\ntrain.seed = 2")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_config_text_round_trip():
    cfg = ModelConfig(lr=3e-3, kl_topk_only=True, grid_resolution=0.25)
    assert parse_config_text(cfg.to_text()) == cfg
    assert parse_override("hor.kl_topk_only=true") == ("kl_topk_only", True)


# -------------------------------------------------------------- synthetic

SPEC = VoxelGridSpec((32, 32, 8), (0.0, -6.4, 0.0), 0.4)


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(5, 2, SPEC)
    b = generate_synthetic(5, 2, SPEC)
    for i, (x, y) in enumerate(zip(a, b)):
        write_sample(x, tmp_path / f"a{i}")
        write_sample(y, tmp_path / f"b{i}")
        for name in ("gt.sscv", "camera.txt", "image.npy"):
            assert (tmp_path / f"a{i}" / name).read_bytes() == (tmp_path / f"b{i}" / name).read_bytes()


def test_generated_scene_invariants():
    scenes = generate_synthetic(0, 8, SPEC)
    seen = set()
    fg_ids = SYNTHETIC.foreground_ids()
    for s in scenes:
        labels = s.gt.labels
        seen |= set(np.unique(labels).tolist())
        assert np.all(labels[:, :, 0] != 0), "ground layer must be full"
        assert np.all((labels < SYNTHETIC.num_classes) | (labels == 255))
        assert np.all(np.isin(labels[s.foreground_mask], fg_ids))
        assert s.image.shape == (3, 96, 128)
        proj = project_voxels(SPEC, s.camera, s.image_size)
        for c in fg_ids:
            assert np.any(proj.valid & (labels == c)), "foreground class out of view"
    assert seen >= set(range(SYNTHETIC.num_classes))


def test_generator_rejects_tiny_grid():
    with pytest.raises(ConfigError):
        generate_synthetic(0, 1, VoxelGridSpec((4, 4, 2), (0.0, -0.8, 0.0), 0.4))


def test_generator_rejects_zero_count():
    with pytest.raises(ConfigError):
        generate_synthetic(0, 0, SPEC)


def test_dataset_store_round_trip(tmp_path):
    scenes = generate_synthetic(1, 2, SPEC)
    for i, s in enumerate(scenes):
        write_sample(s, tmp_path / f"sample_{i:04d}")
    back, space = read_dataset(tmp_path)
    assert space is SYNTHETIC and len(back) == 2
    for a, b in zip(scenes, back):
        assert a.gt == b.gt
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.camera.K, b.camera.K) and np.array_equal(a.camera.R, b.camera.R)
        assert np.array_equal(a.foreground_mask, b.foreground_mask)


def test_dataset_store_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "missing")
    with pytest.raises(DataError):
        read_dataset(tmp_path)
