import math

import numpy as np
import pytest

from lidar_ood.core import Box3D, Detection, Fov, LabeledObject, OodCategory, bev_iou
from lidar_ood.detector import DetectorOutput
from lidar_ood.errors import MissingAnchorIndex, MissingLayer, NonIntegerScale
from lidar_ood.featx import (DEFAULT_POS_IOU, AnchorGrid, FeatureMap, assign_positive_anchors,
                             extract_logit_samples, extract_test_samples, extract_training_samples,
                             upsample_nearest)

SMALL_FOV = Fov(0.0, 20.0, -10.0, 10.0)


def small_grid():
    return AnchorGrid.from_fov(SMALL_FOV, 1.0)


def output_with(maps, detections=()):
    return DetectorOutput(tuple(detections), maps)


def brute_positive(gt, grid):
    """Exhaustive sweep over every anchor of the grid."""
    h, w = grid.shape
    pos = set()
    for obj in gt:
        if obj.is_ood:
            continue
        thr = DEFAULT_POS_IOU[obj.class_name]
        best, best_key, hit = -1.0, None, False
        for r in range(h):
            for c in range(w):
                for k, t in enumerate(grid.templates):
                    if t.class_name != obj.class_name:
                        continue
                    iou = bev_iou(grid.anchor_box(r, c, k), obj.box)
                    if iou > best:
                        best, best_key = iou, (r, c, k)
                    if iou >= thr:
                        pos.add((r, c, k))
                        hit = True
        if not hit:
            pos.add(best_key)
    return pos


def test_exact_anchor_is_positive():
    grid = small_grid()
    box = grid.anchor_box(4, 7, 0)
    pos = assign_positive_anchors([LabeledObject(box, "Car")], grid)
    assert (4, 7, 0) in {(p.row, p.col, p.anchor) for p in pos}


def test_empty_gt():
    assert assign_positive_anchors([], small_grid()) == []


def test_positive_set_matches_exhaustive_sweep(rng):
    grid = small_grid()
    names = [t[0] for t in (("Car",), ("Pedestrian",), ("Cyclist",))]
    sizes = {"Car": (3.9, 1.6, 1.56), "Pedestrian": (0.8, 0.6, 1.73), "Cyclist": (1.76, 0.6, 1.73)}
    gt = []
    for i in range(10):
        name = names[int(rng.integers(3))]
        size = tuple(np.array(sizes[name]) * rng.uniform(0.9, 1.1, 3))
        gt.append(LabeledObject(Box3D((rng.uniform(2, 18), rng.uniform(-8, 8), -1.0), size,
                                      rng.uniform(-math.pi, math.pi)), name))
    got = {(p.row, p.col, p.anchor) for p in assign_positive_anchors(gt, grid)}
    assert got == brute_positive(gt, grid)


def test_assignment_permutation_invariant(rng):
    grid = small_grid()
    gt = [LabeledObject(Box3D((rng.uniform(3, 17), rng.uniform(-7, 7), -1.0), (3.9, 1.6, 1.56),
                              rng.uniform(-3, 3)), "Car") for _ in range(6)]
    a = assign_positive_anchors(gt, grid)
    perm = [5, 2, 0, 4, 1, 3]
    b = assign_positive_anchors([gt[i] for i in perm], grid)
    key = lambda ps, order: sorted((p.row, p.col, p.anchor, order[p.gt_index]) for p in ps)
    assert key(a, list(range(6))) == key(b, perm)


def test_ood_objects_get_no_anchors():
    grid = small_grid()
    obj = LabeledObject(grid.anchor_box(4, 7, 0), "Car", True, OodCategory.DETECTED_FG_OOD)
    assert assign_positive_anchors([obj], grid) == []


def test_upsample_identity_and_single_cell():
    fm = FeatureMap("conv2x", np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    assert upsample_nearest(fm, (2, 3)) is fm
    one = FeatureMap("conv8x", np.array([[[1.0, 2.0]]], dtype=np.float32), 4)
    up = upsample_nearest(one, (4, 4))
    assert up.data.shape == (4, 4, 2) and np.all(up.data == np.array([1.0, 2.0], dtype=np.float32))


def test_upsample_index_oracle(rng):
    fm = FeatureMap("conv4x", rng.normal(size=(2, 2, 3)).astype(np.float32), 2)
    up = upsample_nearest(fm, (4, 4))
    for y in range(4):
        for x in range(4):
            assert np.array_equal(up.data[y, x], fm.data[y // 2, x // 2])
    assert np.allclose(up.data.sum((0, 1)), 4 * fm.data.sum((0, 1)), rtol=1e-6)
    assert {tuple(v) for v in up.data.reshape(-1, 3)} == {tuple(v) for v in fm.data.reshape(-1, 3)}


def test_upsample_non_integer_scale():
    fm = FeatureMap("conv4x", np.zeros((3, 3, 1)), 2)
    with pytest.raises(NonIntegerScale):
        upsample_nearest(fm, (4, 4))


def test_training_samples_read_exact_cells(rng):
    grid = small_grid()
    h, w = grid.shape
    maps = {"backbone": FeatureMap("backbone", rng.normal(size=(h, w, 5)).astype(np.float32)),
            "conv8x": FeatureMap("conv8x", rng.normal(size=(h // 4, w // 4, 3)).astype(np.float32), 4)}
    out = output_with(maps)
    assert extract_training_samples(out, [], grid, "backbone") == []
    gt = [LabeledObject(Box3D((10.3, 0.2, -1.0), (3.9, 1.6, 1.56), 0.1), "Car")]
    pos = assign_positive_anchors(gt, grid)
    for layer in ("backbone", "conv8x"):
        samples = extract_training_samples(out, gt, grid, layer)
        assert len(samples) == len(pos) >= 1
        s = maps[layer].stride_vs_backbone
        for p, smp in zip(pos, samples):
            assert np.array_equal(smp.vector, maps[layer].data[p.row // s, p.col // s])
            assert smp.class_label == 0 and smp.layer == layer
    with pytest.raises(MissingLayer):
        extract_training_samples(out, gt, grid, "conv2x")


def _det(anchor=(0, 0), logits=None):
    probs = np.array([0.7, 0.2, 0.05, 0.05])
    return Detection.from_probs(Box3D((1, 1, -1), (3.9, 1.6, 1.56), 0.0), probs, anchor,
                                np.log(probs) if logits is None else logits)


def test_test_samples(rng):
    data = rng.normal(size=(4, 4, 3)).astype(np.float32)
    out = output_with({"backbone": FeatureMap("backbone", data)}, [_det((0, 0)), _det((3, 2))])
    assert extract_test_samples(output_with(out.feature_maps), "backbone") == []
    s = extract_test_samples(out, "backbone", frame_id="f7", is_ood=[False, True])
    assert np.array_equal(s[0].vector, data[0, 0]) and np.array_equal(s[1].vector, data[3, 2])
    assert [x.frame_id for x in s] == ["f7", "f7"] and [x.is_ood for x in s] == [False, True]
    bad = Detection.from_probs(Box3D((1, 1, -1), (1, 1, 1), 0.0), [0.7, 0.2, 0.05, 0.05])
    with pytest.raises(MissingAnchorIndex):
        extract_test_samples(output_with(out.feature_maps, [bad]), "backbone")


def test_stub_output_yields_one_sample_per_detection(world):
    from lidar_ood import pcio
    from lidar_ood.detector import StubDetector
    ds = pcio.load_dataset(world / "id" / "manifest.txt")
    out = StubDetector().detect(ds.frames[0].cloud)
    s = extract_test_samples(out, "conv4x", ds.frames[0].frame_id)
    assert len(s) == len(out.detections) > 0
    assert all(x.frame_id == ds.frames[0].frame_id and x.vector.size == 8 for x in s)


def test_logit_samples():
    out = output_with({}, [_det()])
    (s,) = extract_logit_samples(out)
    assert s.vector.size == 3 and s.layer == "logits"
    gt = [LabeledObject(Box3D((1, 1, -1), (3.9, 1.6, 1.56), 0.0), "Cyclist")]
    (t,) = extract_logit_samples(out, gt=gt, classes=("Car", "Pedestrian", "Cyclist"))
    assert t.class_label == 2
    assert extract_logit_samples(out, gt=[], classes=("Car",)) == []
