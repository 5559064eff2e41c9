import json
import math

import numpy as np
import pytest

from sitsforecast import sits_io as io
from sitsforecast.errors import ConfigurationError, ValidationError


# -- PPM / PBM -----------------------------------------------------------------

def test_ppm_known_bytes():
    frame = np.zeros((1, 2, 3))
    frame[0, 1] = [1.0, 0.5, 0.0]
    assert io.encode_ppm(frame) == b"P6\n2 1\n255\n" + bytes([0, 0, 0, 255, 128, 0])


def test_ppm_roundtrip_of_quantised_frames():
    rng = np.random.default_rng(0)
    for shape in ((1, 1, 3), (5, 7, 3), (16, 16, 3)):
        q = rng.integers(0, 256, shape) / 255.0
        assert np.array_equal(io.decode_ppm(io.encode_ppm(q)), q)


def test_ppm_header_comments_and_errors():
    data = b"P6\n# a comment\n1 1\n255\n" + bytes([10, 20, 30])
    assert np.allclose(io.decode_ppm(data)[0, 0] * 255, [10, 20, 30])
    with pytest.raises(ValidationError):
        io.decode_ppm(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValidationError):
        io.decode_ppm(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(ValidationError):
        io.decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(ValidationError):
        io.encode_ppm(np.zeros((2, 2)))


def test_pbm_known_bytes_and_roundtrip():
    bits = np.zeros((2, 9), dtype=bool)
    bits[0, 0] = bits[1, 8] = True
    assert io.encode_pbm(bits) == b"P4\n9 2\n" + bytes([0x80, 0x00, 0x00, 0x80])
    rng = np.random.default_rng(1)
    for shape in ((1, 1), (3, 8), (7, 13), (32, 32)):
        b = rng.random(shape) < 0.5
        assert np.array_equal(io.decode_pbm(io.encode_pbm(b)), b)
    with pytest.raises(ValidationError):
        io.decode_pbm(b"P4\n9 2\n\x00")


# -- synthetic generator -------------------------------------------------------------

def test_interval_coverage_closed_form():
    assert io.interval_coverage(1.5, 3.25, 5).tolist() == [0.0, 0.5, 1.0, 0.25, 0.0]
    assert io.square_coverage(4.0, 4.0, 3.0, 8).sum() == pytest.approx(9.0, abs=1e-12)


def test_growing_square_sides_follow_linear_law():
    sc = io.Scenario("growing_square", noise=0.0)
    for seq in io.generate_synthetic(sc, 5, frames_per_seq=5, size=16, seed=3):
        elapsed = np.asarray(seq.timestamps, float) - seq.timestamps[0]
        sides = np.asarray(seq.meta["sides"])
        rate = seq.meta["rate"]
        assert np.allclose(sides, np.minimum(sides[0] + rate * elapsed, 14.0), atol=1e-12)
        cy, cx = seq.meta["center"]
        for frame, clean, s in zip(seq.frames, seq.meta["clean"], sides):
            assert np.array_equal(frame, clean)
            assert io.square_coverage(cy, cx, s, 16).sum() == pytest.approx(s * s, abs=1e-9)


def test_generator_determinism_and_gaps():
    sc = io.Scenario("moving_block")
    a = io.generate_synthetic(sc, 4, 6, 16, seed=7)
    b = io.generate_synthetic(sc, 4, 6, 16, seed=7)
    c = io.generate_synthetic(sc, 4, 6, 16, seed=8)
    assert all(np.array_equal(x, y) for s, t in zip(a, b) for x, y in zip(s.frames, t.frames))
    assert any(not np.array_equal(s.frames[0], t.frames[0]) for s, t in zip(a, c))
    for s in a:
        gaps = np.diff(s.timestamps)
        assert (gaps >= 30).all() and (gaps <= 1100).all()
        assert s.scene_description == "harbor" and s.id.startswith("moving_block_")


def test_noise_bounded_and_static_scene():
    seq = io.generate_synthetic(io.Scenario("static", noise=0.02), 1, 3, 8, seed=0)[0]
    for f, c in zip(seq.frames, seq.meta["clean"]):
        assert np.abs(f - c).max() <= 0.01 + 1e-12
    assert np.array_equal(seq.meta["clean"][0], seq.meta["clean"][2])


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        io.Scenario("bogus")
    with pytest.raises(ConfigurationError):
        io.Scenario(noise=0.6)
    with pytest.raises(ConfigurationError):
        io.generate_synthetic(io.Scenario(), 1, frames_per_seq=1)


def test_sequence_validation():
    f = np.zeros((4, 4, 3))
    with pytest.raises(ValidationError):
        io.SitsSequence([f, f], [10, 10])
    with pytest.raises(ValidationError):
        io.SitsSequence([f], [1])
    with pytest.raises(ValidationError):
        io.SitsSequence([f, f + 2.0], [1, 2])
    with pytest.raises(ValidationError):
        io.SitsSequence([f, np.zeros((4, 5, 3))], [1, 2])


def test_split():
    f = np.zeros((4, 4, 3))
    seq = io.SitsSequence([f, f, f + 0.5], [0, 10, 50], "x", "s")
    hist, target, ts = seq.split(2)
    assert len(hist) == 2 and ts == 50 and target[0, 0, 0] == 0.5
    assert seq.split(3)[1:] == (None, None)


# -- manifests -------------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    seq = io.generate_synthetic(io.Scenario(), 1, 3, 8, seed=1)[0]
    path = io.write_sequence(seq, tmp_path)
    doc = json.loads(path.read_text())
    assert list(doc) == ["id", "scene_description", "frames"]
    back = io.load_sequence(path)
    assert back.timestamps == seq.timestamps and back.scene_description == "construction site"
    for a, b in zip(back.frames, seq.frames):
        assert np.array_equal(a, io.quantize(b) / 255.0)
    assert [s.id for s in io.load_dataset(tmp_path)] == [seq.id]


def test_manifest_errors(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(ValidationError):
        io.load_sequence(tmp_path / "a.json")
    (tmp_path / "b.json").write_text(json.dumps({"id": "b", "frames": []}))
    with pytest.raises(ValidationError):
        io.load_sequence(tmp_path / "b.json")
    (tmp_path / "c.json").write_text(json.dumps(
        {"id": "c", "scene_description": "", "frames": [{"path": "gone.ppm", "timestamp_days": 0}]}))
    with pytest.raises(FileNotFoundError):
        io.load_sequence(tmp_path / "c.json")
    io.write_ppm(tmp_path / "f.ppm", np.zeros((2, 2, 3)))
    (tmp_path / "d.json").write_text(json.dumps(
        {"id": "d", "scene_description": "", "frames": [{"path": "f.ppm", "timestamp_days": 1.5}] * 2}))
    with pytest.raises(ValidationError):
        io.load_sequence(tmp_path / "d.json")
    with pytest.raises(FileNotFoundError):
        io.load_dataset(tmp_path / "nope")


# -- reports -----------------------------------------------------------------------

def test_empty_report():
    assert io.build_report([]) == {"config": {}, "sequences": [], "aggregate": None}


def test_report_rounding_order_and_aggregate(tmp_path):
    rows = [
        {"id": "a", "tcs": 1 / 3, "sps": 0.5, "acs": 2 / 3, "psnr": math.inf, "ssim": 0.25, "extra": 1},
        {"id": "b", "tcs": 0.5, "sps": 1.0, "acs": 0.5, "psnr": 20.0, "ssim": None},
    ]
    doc = io.write_report(rows, tmp_path / "r.json", {"config": {"k": 1}, "seed": 3})
    assert list(doc) == ["config", "seed", "sequences", "aggregate"]
    assert list(doc["sequences"][0]) == list(io.SEQUENCE_FIELDS)
    assert doc["sequences"][0]["tcs"] == 0.333333333
    assert doc["sequences"][0]["psnr"] == "inf"
    assert doc["aggregate"] == {"mean_tcs": 0.416666667, "mean_psnr": 20.0, "mean_ssim": 0.25}
    text = (tmp_path / "r.json").read_text()
    assert text.endswith("}\n") and json.loads(text) == doc
