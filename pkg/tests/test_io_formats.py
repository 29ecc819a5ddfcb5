"""Tensor container round trips, manifests, track CSVs, and PGM dumps."""

import json
import os

import numpy as np
import pytest

import saltrack.io_formats as iof
from saltrack.autodiff import Rng, Tensor


def test_tensor_roundtrip_f32_bit_exact(tmp_path):
    t = Rng(0).normal((5, 7, 3))
    path = tmp_path / "a.tf"
    iof.write_tensor(path, t)
    back = iof.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back.data, t)


def test_tensor_roundtrip_f64_bit_exact(tmp_path):
    t = Rng(1).normal((4, 4), dtype=np.float64)
    path = tmp_path / "b.tf"
    iof.write_tensor(path, t)
    back = iof.read_tensor(path)
    assert back.dtype == np.float64
    assert back.data.tobytes() == t.tobytes()


def test_tensor_roundtrip_preserves_nan_payload(tmp_path):
    """Bit exactness includes non-finite values; the format does not judge."""
    t = np.array([np.nan, np.inf, -0.0, 1.5], dtype=np.float32)
    path = tmp_path / "c.tf"
    iof.write_tensor(path, t)
    back = iof.read_tensor(path).data
    assert back.tobytes() == t.tobytes()


def test_write_tensor_accepts_tensor_wrapper(tmp_path):
    t = Tensor(np.ones((2, 2), dtype=np.float32))
    iof.write_tensor(tmp_path / "d.tf", t)
    assert np.array_equal(iof.read_tensor(tmp_path / "d.tf").data, t.data)


def test_write_twice_same_bytes(tmp_path):
    t = Rng(2).normal((6, 2))
    iof.write_tensor(tmp_path / "x1.tf", t)
    iof.write_tensor(tmp_path / "x2.tf", t)
    assert (tmp_path / "x1.tf").read_bytes() == (tmp_path / "x2.tf").read_bytes()


def test_read_tensor_shape_header_only(tmp_path):
    iof.write_tensor(tmp_path / "e.tf", np.zeros((3, 9, 2), dtype=np.float32))
    assert iof.read_tensor_shape(tmp_path / "e.tf") == (3, 9, 2)


def test_truncated_payload_raises(tmp_path):
    path = tmp_path / "t.tf"
    iof.write_tensor(path, np.ones((4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(iof.TruncationError):
        iof.read_tensor(path)


def test_garbage_header_raises(tmp_path):
    path = tmp_path / "g.tf"
    path.write_bytes(b"not json\n\x00\x01")
    with pytest.raises(iof.HeaderError):
        iof.read_tensor(path)


def test_missing_header_key_raises(tmp_path):
    path = tmp_path / "k.tf"
    path.write_bytes(json.dumps({"dtype": "f32", "shape": [1]}).encode() + b"\n" + b"\x00" * 4)
    with pytest.raises(iof.HeaderError):
        iof.read_tensor(path)


def test_unknown_dtype_raises(tmp_path):
    path = tmp_path / "u.tf"
    header = {"dtype": "f16", "shape": [2], "layout": "row-major", "endian": "little"}
    path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 4)
    with pytest.raises(iof.DtypeError):
        iof.read_tensor(path)


def test_header_without_newline_raises(tmp_path):
    path = tmp_path / "n.tf"
    path.write_bytes(b'{"dtype":"f32"}')
    with pytest.raises(iof.HeaderError):
        iof.read_tensor(path)


# -- manifests ----------------------------------------------------------------


def write_frames(tmp_path, n=3, shape=(12, 12, 2)):
    paths = []
    for i in range(n):
        p = tmp_path / f"frame_{i:03d}.tf"
        iof.write_tensor(p, Rng(i).normal(shape))
        paths.append(str(p))
    return paths


def test_manifest_roundtrip(tmp_path):
    frames = write_frames(tmp_path)
    man = iof.SequenceManifest(
        frames=frames,
        exemplar_frame_index=0,
        exemplar_box=(2.0, 3.0, 4.0, 5.0),
        gt_boxes=[(2.0, 3.0, 4.0, 5.0)] * 3,
        meta={"seed": 7},
    )
    mp = tmp_path / "manifest.json"
    iof.write_manifest(mp, man)
    back = iof.read_manifest(mp)
    assert back.frame_count() == 3
    assert back.exemplar_frame_index == 0
    assert back.exemplar_box == (2.0, 3.0, 4.0, 5.0)
    assert back.gt_boxes == [(2.0, 3.0, 4.0, 5.0)] * 3
    assert back.meta["seed"] == 7
    assert [os.path.basename(f) for f in back.frames] == [os.path.basename(f) for f in frames]


def test_manifest_relative_paths_survive_move(tmp_path):
    sub = tmp_path / "seq"
    sub.mkdir()
    frames = write_frames(sub)
    man = iof.SequenceManifest(frames, 0, (1.0, 1.0, 3.0, 3.0))
    iof.write_manifest(sub / "manifest.json", man)
    doc = json.loads((sub / "manifest.json").read_text())
    assert doc["frames"] == ["frame_000.tf", "frame_001.tf", "frame_002.tf"]


def test_manifest_missing_frame_raises(tmp_path):
    frames = write_frames(tmp_path)
    man = iof.SequenceManifest(frames, 0, (1.0, 1.0, 2.0, 2.0))
    iof.write_manifest(tmp_path / "m.json", man)
    os.remove(frames[1])
    with pytest.raises(iof.ResolutionError):
        iof.read_manifest(tmp_path / "m.json")


def test_manifest_box_out_of_bounds_raises(tmp_path):
    frames = write_frames(tmp_path)
    man = iof.SequenceManifest(frames, 0, (10.0, 10.0, 6.0, 6.0))
    iof.write_manifest(tmp_path / "m.json", man)
    with pytest.raises(iof.ValidationError):
        iof.read_manifest(tmp_path / "m.json")


def test_manifest_gt_length_mismatch_raises(tmp_path):
    frames = write_frames(tmp_path)
    man = iof.SequenceManifest(frames, 0, (1.0, 1.0, 2.0, 2.0), gt_boxes=[(0.0, 0.0, 1.0, 1.0)])
    iof.write_manifest(tmp_path / "m.json", man)
    with pytest.raises(iof.ValidationError):
        iof.read_manifest(tmp_path / "m.json")


def test_manifest_exemplar_index_range(tmp_path):
    frames = write_frames(tmp_path)
    man = iof.SequenceManifest(frames, 5, (1.0, 1.0, 2.0, 2.0))
    iof.write_manifest(tmp_path / "m.json", man)
    with pytest.raises(iof.ValidationError):
        iof.read_manifest(tmp_path / "m.json")


# -- track CSV ----------------------------------------------------------------


def make_records(k=2, n=4):
    rng = Rng(3)
    recs = []
    for f in range(n):
        box = tuple(float(v) for v in rng.uniform(0.0, 10.0, (4,), dtype=np.float64))
        sal = [tuple(float(v) for v in rng.uniform(0.0, 24.0, (3,), dtype=np.float64)) for _ in range(k)]
        recs.append(iof.TrackRecord(f, box, float(rng.uniform(0.0, 1.0)), sal))
    return recs


def test_track_csv_roundtrip_exact(tmp_path):
    """repr() float formatting means the parsed values are bit-identical."""
    recs = make_records()
    path = tmp_path / "track.csv"
    iof.write_track_csv(path, recs)
    back = iof.read_track_csv(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert a.frame_index == b.frame_index
        assert a.box == b.box
        assert a.confidence == b.confidence
        assert a.saliency == b.saliency


def test_track_csv_header_names(tmp_path):
    iof.write_track_csv(tmp_path / "t.csv", make_records(k=1, n=1))
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "frame,x,y,w,h,conf,sx_0,sy_0,sval_0"


def test_track_csv_rejects_empty(tmp_path):
    with pytest.raises(iof.ValidationError):
        iof.write_track_csv(tmp_path / "t.csv", [])


def test_track_csv_rejects_ragged_saliency(tmp_path):
    recs = make_records(k=2, n=2)
    recs[1].saliency = recs[1].saliency[:1]
    with pytest.raises(iof.ValidationError):
        iof.write_track_csv(tmp_path / "t.csv", recs)


def test_track_csv_bad_header_raises(tmp_path):
    (tmp_path / "bad.csv").write_text("frame,x,y,w,h\n0,1,2,3,4\n")
    with pytest.raises(iof.HeaderError):
        iof.read_track_csv(tmp_path / "bad.csv")


def test_track_csv_short_row_raises(tmp_path):
    path = tmp_path / "short.csv"
    iof.write_track_csv(path, make_records(k=1, n=2))
    lines = path.read_text().splitlines()
    lines[2] = ",".join(lines[2].split(",")[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(iof.TruncationError):
        iof.read_track_csv(path)


# -- PGM and generic CSV --------------------------------------------------------


def test_pgm_header_and_scaling(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = tmp_path / "m.pgm"
    iof.dump_pgm(m, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    pixels = np.frombuffer(raw[len(b"P5\n2 2\n255\n"):], dtype=np.uint8)
    assert pixels.tolist() == [0, 128, 255, 64]


def test_pgm_constant_map_is_mid_gray(tmp_path):
    path = tmp_path / "c.pgm"
    iof.dump_pgm(np.full((3, 3), 2.5), path)
    pixels = np.frombuffer(path.read_bytes()[len(b"P5\n3 3\n255\n"):], dtype=np.uint8)
    assert set(pixels.tolist()) == {128}


def test_pgm_rejects_nan(tmp_path):
    with pytest.raises(iof.ValidationError):
        iof.dump_pgm(np.array([[np.nan, 0.0]]), tmp_path / "n.pgm")


def test_pgm_rejects_non_2d(tmp_path):
    with pytest.raises(iof.ValidationError):
        iof.dump_pgm(np.zeros((2, 2, 2)), tmp_path / "x.pgm")


def test_write_csv_mixed_types(tmp_path):
    path = tmp_path / "rows.csv"
    iof.write_csv(path, ["step", "name", "value"], [(0, "a", 0.5), (1, "b", 0.25)])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,name,value"
    assert lines[1] == "0,a,0.5"
    assert lines[2] == "1,b,0.25"
