import math
import struct

import numpy as np
import pytest

from lidar_ood import pcio
from lidar_ood.core import Box3D, LabeledObject, OodCategory, PointCloud
from lidar_ood.errors import (DimensionMismatch, NonFiniteValue, ParseError, TruncatedFile,
                              UnknownCategory)
from lidar_ood.pcio import FeatureSample, OodObjectRecord


def test_empty_cloud(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(pcio.read_cloud(p).points) == 0


def test_single_record_decodes(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    pc = pcio.read_cloud(p)
    assert pc.points.tolist() == [[1.0, 2.0, 3.0, 0.5]]


def test_cloud_bytes_round_trip(tmp_path, rng):
    for i in range(50):
        n = int(rng.integers(0, 300))
        arr = np.column_stack([rng.normal(size=(n, 3)) * 20, rng.uniform(size=n)]).astype("<f4")
        p = tmp_path / f"c{i}.bin"
        p.write_bytes(arr.tobytes())
        q = tmp_path / f"d{i}.bin"
        pcio.write_cloud(pcio.read_cloud(p), q)
        assert q.read_bytes() == p.read_bytes()


def test_truncated_and_nonfinite_clouds(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"\0" * 20)
    with pytest.raises(TruncatedFile, match="byte 16"):
        pcio.read_cloud(p)
    p.write_bytes(struct.pack("<8f", 0, 0, 0, 0, 1, float("nan"), 0, 0))
    with pytest.raises(NonFiniteValue, match="byte 16"):
        pcio.read_cloud(p)


def test_out_of_range_intensity_is_clamped(tmp_path):
    p = tmp_path / "i.bin"
    p.write_bytes(struct.pack("<8f", 0, 0, 0, 1.5, 0, 0, 0, -0.2))
    before = pcio.clamped_intensity_count
    pc = pcio.read_cloud(p)
    assert pc.points[:, 3].tolist() == [1.0, 0.0]
    assert pcio.clamped_intensity_count == before + 2


def test_labels_empty_and_comments(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("")
    assert pcio.read_labels(p) == []
    p.write_text("# header only\n\n   # indented comment\n")
    assert pcio.read_labels(p) == []


def test_single_label_round_trip(tmp_path):
    obj = LabeledObject(Box3D((12.25, -3.5, -0.8), (3.9, 1.6, 1.56), 0.3), "Car")
    p = tmp_path / "l.txt"
    pcio.write_labels([obj], p)
    assert pcio.read_labels(p) == [obj]
    text = p.read_text()
    pcio.write_labels(pcio.read_labels(p), p)
    assert p.read_text() == text


def test_label_round_trip_random(tmp_path, rng):
    objs = []
    for i in range(40):
        # values representable in 9 significant digits survive exactly
        vals = [float(format(v, ".9g")) for v in rng.uniform(0.1, 50, 7)]
        ood = bool(i % 2)
        cat = OodCategory.DETECTED_FG_OOD if ood else OodCategory.DETECTED_FG_ID
        objs.append(LabeledObject(Box3D(vals[3:6], vals[:3], math.remainder(vals[6], 2 * math.pi)),
                                  "thing" if ood else "Car", ood, cat))
    objs = [LabeledObject(Box3D(o.box.center, o.box.size, float(format(o.box.yaw, ".9g"))),
                          o.class_name, o.is_ood, o.category) for o in objs]
    p = tmp_path / "r.txt"
    pcio.write_labels(objs, p)
    assert pcio.read_labels(p) == objs


def test_label_parse_errors_name_line():
    with pytest.raises(ParseError) as exc:
        pcio.parse_labels("Car 1 1 1 0 0 0 0 0 1\nCar 1 1 1 0 0 0\n")
    assert exc.value.line == 2
    with pytest.raises(UnknownCategory) as exc:
        pcio.parse_labels("# c\nCar 1 1 1 0 0 0 0 0 42\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        pcio.parse_labels("Car 1 x 1 0 0 0 0 0 1\n")
    with pytest.raises(ParseError):
        pcio.parse_labels("Car 1 1 1 0 0 0 0 2 1\n")


def _records():
    return [
        OodObjectRecord("a", "bench", "synthetic", OodCategory.DETECTED_BG_OOD, 12.5, 0.25, "o/a.bin"),
        OodObjectRecord("b", "sign", "real", OodCategory.DETECTED_BG_ID, 20.0, -1.0, "o/b.bin"),
        OodObjectRecord("c", "stroller", "real", OodCategory.DETECTED_FG_OOD, 7.75, 3.0, "o/c.bin"),
    ]


def test_ood_db_round_trip_preserves_order(tmp_path, rng):
    recs = _records()
    clouds = [PointCloud(np.column_stack([rng.normal(size=(5, 3)), rng.uniform(size=5)])
                         .astype("<f4").astype(float)) for _ in recs]
    pcio.write_ood_db(recs, tmp_path, clouds)
    assert pcio.read_ood_db(tmp_path) == recs
    objs = pcio.load_ood_objects(tmp_path)
    assert [o.record.object_id for o in objs] == ["a", "b", "c"]
    assert all(np.array_equal(o.cloud.points, c.points) for o, c in zip(objs, clouds))


def test_ood_db_errors(tmp_path):
    (tmp_path / "manifest.txt").write_text(
        "object_id=a class_name=x source=real category=9 original_range=1 original_azimuth=0 cloud_path=a\n")
    with pytest.raises(UnknownCategory):
        pcio.read_ood_db(tmp_path)
    (tmp_path / "manifest.txt").write_text("object_id=a class_name=x\n")
    with pytest.raises(ParseError) as exc:
        pcio.read_ood_db(tmp_path)
    assert exc.value.line == 1
    (tmp_path / "manifest.txt").write_text("garbage\n")
    with pytest.raises(ParseError):
        pcio.read_ood_db(tmp_path)
    with pytest.raises(ValueError):
        OodObjectRecord("a", "x", "real", OodCategory.DETECTED_FG_ID, 1.0, 0.0, "a")
    with pytest.raises(ValueError):
        OodObjectRecord("a", "x", "real", OodCategory.DETECTED_FG_OOD, 0.0, 0.0, "a")


def test_manifest_round_trip_and_dataset(tmp_path):
    from lidar_ood import synth
    ds = synth.make_dataset(3, seed=5)
    manifest = pcio.save_dataset(ds, tmp_path)
    m = pcio.read_manifest(manifest)
    assert [f[0] for f in m.frames] == [f.frame_id for f in ds.frames]
    assert m.classes == ds.classes
    back = pcio.load_dataset(manifest)
    assert [f.frame_id for f in back.frames] == [f.frame_id for f in ds.frames]
    # clouds are stored as float32: a second save is byte-identical to the first
    pcio.save_dataset(back, tmp_path / "again")
    for f in ds.frames:
        a = (tmp_path / "clouds" / f"{f.frame_id}.bin").read_bytes()
        assert (tmp_path / "again" / "clouds" / f"{f.frame_id}.bin").read_bytes() == a


def test_manifest_rejects_duplicates(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("classes=Car\nframe_id=a cloud=x labels=y\nframe_id=a cloud=x labels=y\n")
    with pytest.raises(ParseError):
        pcio.read_manifest(p)


def test_feature_dump_empty(tmp_path):
    p = tmp_path / "f.bin"
    pcio.write_feature_dump([], p, layer="backbone", dim=4)
    samples, header = pcio.read_feature_dump(p)
    assert samples == [] and header.dim == 4 and header.layer == "backbone"


def test_feature_dump_single_bit_exact(tmp_path):
    s = FeatureSample(np.array([1.5, -0.25, 3e-8, 7.0]), 2, True)
    p = tmp_path / "f.bin"
    pcio.write_feature_dump([s], p, n_classes=3)
    (back,), header = pcio.read_feature_dump(p)
    assert back == s and header.n_classes == 3 and header.count == 1


def test_feature_dump_round_trip_random(tmp_path, rng):
    samples = [FeatureSample(rng.normal(size=16), int(rng.integers(3)), bool(rng.integers(2)),
                             layer="conv4x") for _ in range(1000)]
    p = tmp_path / "f.bin"
    pcio.write_feature_dump(samples, p)
    back, _ = pcio.read_feature_dump(p)
    assert back == samples


def test_feature_dump_errors(tmp_path):
    with pytest.raises(DimensionMismatch):
        pcio.write_feature_dump([FeatureSample(np.zeros(3), 0), FeatureSample(np.zeros(4), 0)],
                                tmp_path / "x.bin")
    p = tmp_path / "f.bin"
    pcio.write_feature_dump([FeatureSample(np.zeros(3), 0)], p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(TruncatedFile):
        pcio.read_feature_dump(p)
    p.write_bytes(b"abc")
    with pytest.raises(TruncatedFile):
        pcio.read_feature_dump(p)
    p.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(ParseError):
        pcio.read_feature_dump(p)
