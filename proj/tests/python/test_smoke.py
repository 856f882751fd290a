import math

import numpy as np
import pytest

import tlam


@pytest.fixture(scope="module")
def scene():
    tlam.set_num_threads(1)
    return tlam.synth_scene(8, 6, 3, 5)


def test_synth_scene_shapes(scene):
    names = [l["name"] for l in scene["labels"]]
    assert names == ["semantics", "depth", "normals", "edges", "curvature"]
    for l in scene["labels"]:
        assert l["values"].dtype == np.float32
        assert l["values"].shape[:2] == (8, 6)
        assert l["mask"].dtype == np.uint8 and l["mask"].all()
    assert scene["target"].shape == (8, 6, 3)
    assert scene["instances"].shape == (8, 6)


def test_sparsify_extremes(scene):
    same = tlam.sparsify(scene["labels"], scene["instances"], 0.0, 1)
    for a, b in zip(same, scene["labels"]):
        np.testing.assert_array_equal(a["values"], b["values"])
    empty = tlam.sparsify(scene["labels"], scene["instances"], 1.0, 1)
    assert all(not l["mask"].any() and not l["values"].any() for l in empty)
    with pytest.raises(ValueError):
        tlam.sparsify(scene["labels"], scene["instances"], 1.5, 1)


def test_merge_shapes_and_macs(scene, tmp_path):
    m = tlam.Merger(scene["labels"], variant="tlam", d=8, depth=1, heads=2, seed=3)
    z = m.merge(scene["labels"])
    assert z.shape == (8, 6, 8) and z.dtype == np.float64
    assert m.last_attention_macs == tlam.count_attention_macs(5, 8, 2, 1, 48) == 19200
    z32 = m.merge(scene["labels"], precision="f32")
    assert z32.dtype == np.float32
    np.testing.assert_allclose(z32, z, atol=1e-4)

    m.save(tmp_path / "params")
    again = tlam.Merger.load(tmp_path / "params").merge(scene["labels"])
    np.testing.assert_array_equal(again, z)


def test_absent_pixels_ignore_values(scene):
    labels = tlam.sparsify(scene["labels"], scene["instances"], 0.5, 9)
    m = tlam.Merger(labels, d=8, depth=2, heads=2, seed=1)
    z = m.merge(labels)
    noisy = [dict(l, values=np.where(l["mask"][..., None] == 0, 7.0, l["values"]).astype(np.float32)) for l in labels]
    np.testing.assert_array_equal(m.merge(noisy), z)


def test_tensor_round_trip(tmp_path):
    for arr in (np.arange(24, dtype=np.float32).reshape(2, 3, 4), np.linspace(0, 1, 5), np.array([[1, 2]], np.uint8)):
        tlam.save_tensor(arr, tmp_path / "t.tlt")
        back = tlam.load_tensor(tmp_path / "t.tlt")
        assert back.dtype == arr.dtype
        np.testing.assert_array_equal(back, arr)


def test_metrics():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 1], [0, 1]])
    assert math.isclose(tlam.mean_iou(pred, gt, 2), 7 / 12)
    assert math.isclose(tlam.pixel_accuracy(pred, gt, 2), 3 / 4)


def test_pca(scene):
    z = tlam.Merger(scene["labels"], d=8, depth=1, heads=2).merge(scene["labels"])
    p = tlam.pca_project_3(z)
    assert p["image"].shape == (8, 6, 3)
    assert p["image"].min() >= 0.0 and p["image"].max() <= 1.0
    assert len(p["components"]) == 3


def test_gradcheck():
    ok = tlam.gradcheck("small")
    assert all(r["passed"] for r in ok)
    bad = tlam.gradcheck("small", corrupt=1.1)
    assert not any(r["passed"] for r in bad)


def test_train_toy_short():
    r = tlam.train_toy(height=8, width=8, regions=3, iters=20, d=8, depth=1)
    assert not r["diverged"]
    assert len(r["loss"]) == 20
    assert r["concept"].shape == (8, 8, 8)
    assert tlam.train_toy(height=8, width=8, iters=30, d=8, depth=1, lr=1e3)["diverged"]
