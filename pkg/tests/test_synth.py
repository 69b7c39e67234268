import json
import math

import numpy as np
import pytest

from statevad import synth
from statevad.synth import GenConfig

SMALL = GenConfig(n_train_clips=3, n_test_clips=8, clip_length=24, objects_per_clip=(1, 2))


@pytest.fixture(scope="module")
def small():
    return synth.generate_dataset(SMALL, seed=3)


@pytest.fixture(scope="module")
def default_test():
    return synth.generate_dataset(GenConfig(n_train_clips=1), seed=0)[1]


def test_generation_is_deterministic(small):
    again = synth.generate_dataset(SMALL, seed=3)
    for a, b in zip(small[0] + small[1], again[0] + again[1]):
        assert a.clip_id == b.clip_id
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.objects == b.objects
        np.testing.assert_array_equal(a.labels, b.labels)


def test_seed_changes_data(small):
    other = synth.generate_dataset(SMALL, seed=4)
    assert small[0][0].frames.tobytes() != other[0][0].frames.tobytes()


def test_training_split_is_normal_and_frames_in_range(small):
    train, test = small
    for clip in train:
        assert not clip.labels.any()
        assert all(o["kind"] in ("square", "disc") and not o["anomalous"] for o in clip.objects)
    for clip in train + test:
        assert clip.frames.shape == (24, 3, 128, 128)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0


def test_labels_mark_exactly_the_frames_with_a_visible_anomaly(small):
    for clip in small[1]:
        for t in range(clip.length):
            visible = any(b["anomalous"] for b in clip.boxes(t))
            assert clip.labels[t] == int(visible)


def test_clip_without_anomalous_objects_is_all_normal(default_test):
    clean = [c for c in default_test if not any(o["anomalous"] for o in c.objects)]
    assert clean
    for clip in clean:
        assert not clip.labels.any()


def test_boxes_within_frame(default_test):
    for clip in default_test:
        for t in range(clip.length):
            for b in clip.boxes(t):
                assert 0 <= b["x0"] < b["x1"] <= 128 and 0 <= b["y0"] < b["y1"] <= 128


def test_anomaly_fraction_near_target(default_test):
    frames = sum(c.length for c in default_test)
    anomalous = sum(int(c.labels.sum()) for c in default_test)
    assert abs(anomalous / frames - 0.25) <= 0.05


def test_object_larger_than_frame_rejected():
    with pytest.raises(ValueError):
        GenConfig(frame_size=16, object_size=(14, 20))


def test_fast_mover_trajectory_matches_velocity(default_test):
    fast = [(c, k, o) for c in default_test for k, o in enumerate(c.objects) if o.get("anomaly") == "fast"]
    assert fast
    for clip, k, obj in fast:
        speed = math.hypot(obj["vx"], obj["vy"])
        assert 6.0 <= speed <= 8.0
        track = [(t, p) for t, p in enumerate(clip.positions[k]) if p is not None]
        for (t0, p0), (t1, p1) in zip(track, track[1:]):
            assert t1 == t0 + 1
            assert (p1[0] - p0[0], p1[1] - p0[1]) == (obj["vx"], obj["vy"])


def test_normal_objects_move_slowly(small):
    for clip in small[0]:
        for obj in clip.objects:
            assert 1.0 <= math.hypot(obj["vx"], obj["vy"]) <= 2.0


def test_flow_background_zero_and_object_velocity(small):
    clip = small[0][0]
    obj, track = clip.objects[0], clip.positions[0]
    t = 5
    flow = synth.flow_oracle(clip, t)
    x0, y0 = track[t]
    s = obj["size"]
    c = s // 2
    assert tuple(flow[:, y0 + c, x0 + c]) == (obj["vx"], obj["vy"])
    covered = np.zeros((128, 128), bool)
    for o, tr in zip(clip.objects, clip.positions):
        if tr[t] is not None:
            covered[tr[t][1]:tr[t][1] + o["size"], tr[t][0]:tr[t][0] + o["size"]] = True
    assert not flow[:, ~covered].any()


def test_flow_last_frame_replicates_previous(small):
    clip = small[1][0]
    np.testing.assert_array_equal(synth.flow_oracle(clip, clip.length - 1), synth.flow_oracle(clip, clip.length - 2))
    with pytest.raises(IndexError):
        synth.flow_oracle(clip, clip.length)


def test_fast_mover_mean_flow_magnitude(default_test):
    for clip in default_test:
        for k, obj in enumerate(clip.objects):
            if obj.get("anomaly") != "fast":
                continue
            t = obj["first"]
            x0, y0 = clip.positions[k][t]
            s = obj["size"]
            flow = synth.flow_oracle(clip, t)[:, y0:y0 + s, x0:x0 + s]
            mask = synth._shape_mask(obj["kind"], s)
            assert np.hypot(flow[0], flow[1])[mask].mean() >= 6.0


def _warp(frame, flow):
    # forward splat: every pixel moves by its own integer flow vector
    C, H, W = frame.shape
    out = frame.copy()
    ys, xs = np.nonzero(np.abs(flow).sum(axis=0) > 0)
    for y, x in zip(ys, xs):
        ty, tx = y + int(flow[1, y, x]), x + int(flow[0, y, x])
        if 0 <= ty < H and 0 <= tx < W:
            out[:, ty, tx] = frame[:, y, x]
    return out


def test_flow_consistency_warp(small):
    # moving a frame by its oracle flow reproduces the next frame away from the borders
    # (uncovered background is left as in frame t, so only disoccluded pixels differ)
    for clip in small[0][:2]:
        for t in (3, 10):
            warped = _warp(clip.frames[t], synth.flow_oracle(clip, t))
            nxt = clip.frames[t + 1]
            assert np.abs(warped - nxt)[:, 8:-8, 8:-8].mean() < 0.05


def test_resize_identity_constant_and_checkerboard():
    rng = np.random.default_rng(0)
    p = rng.random((3, 32, 32)).astype(np.float32)
    assert np.array_equal(synth.resize_bilinear(p), p)
    const = np.full((2, 13, 21), 0.3)
    np.testing.assert_allclose(synth.resize_bilinear(const), 0.3)
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = synth.resize_bilinear(board, 3, 3)
    assert out[0, 1, 1] == 0.5
    np.testing.assert_array_equal(out[0, [0, 0, 2, 2], [0, 2, 0, 2]], [0, 1, 1, 0])


def test_context_indices_clamp():
    assert synth.context_indices(10, 3, 48) == [7, 8, 9, 10, 11, 12, 13]
    assert synth.context_indices(0, 3, 48) == [0, 0, 0, 0, 1, 2, 3]
    assert synth.context_indices(47, 3, 48) == [44, 45, 46, 47, 47, 47, 47]


def test_stcc_shapes_and_crops(small):
    clip = small[0][0]
    box = clip.boxes(10)[0]
    cube, flow = synth.build_stcc(clip, synth.detection_box(box, 4, 128), 10)
    assert cube.shape == (7, 3, 32, 32) and flow.shape == (7, 2, 32, 32)
    assert cube.min() >= 0 and cube.max() <= 1
    # the middle slice is the frame-t crop itself
    x0, y0, x1, y1 = synth.detection_box(box, 4, 128)
    np.testing.assert_allclose(cube[3], synth.resize_bilinear(clip.frames[10, :, y0:y1, x0:x1]), atol=1e-7)


def test_stcc_flow_scaling_halves_for_64px_crop():
    frames = np.zeros((3, 3, 128, 128), np.float32)
    clip = synth.Clip("c", frames, [], [], np.zeros(3, np.int64))
    flows = np.zeros((3, 2, 128, 128), np.float32)
    flows[:, 0] = 2.0
    flows[:, 1] = -4.0
    _, fc = synth.build_stcc(clip, (10, 20, 74, 84), 1, T=1, flows=flows)
    np.testing.assert_allclose(fc[:, 0], 1.0)
    np.testing.assert_allclose(fc[:, 1], -2.0)


def test_degenerate_box_rejected(small):
    with pytest.raises(ValueError, match="degenerate"):
        synth.build_stcc(small[0][0], (5, 5, 5, 20), 3)


def test_extract_cubes_provenance(small):
    cs = synth.extract_cubes(small[1], frame_stride=6)
    assert cs.cubes.shape[1:] == (7, 3, 32, 32)
    assert len(cs) == len(cs.clip_ids) == len(cs.frames) == len(cs.anomalous)
    assert all(f % 6 == 0 for f in cs.frames)
    clip = {c.clip_id: c for c in small[1]}
    for cid, f, oid, a in zip(cs.clip_ids, cs.frames, cs.object_ids, cs.anomalous):
        assert any(b["object_id"] == oid and b["anomalous"] == a for b in clip[cid].boxes(f))
    sub = cs.subset([0, 2])
    assert sub.frames == [cs.frames[0], cs.frames[2]]


def test_save_and_load_round_trip(tmp_path, small):
    train, test = small
    manifest = synth.save_dataset(tmp_path, SMALL, 3, train, test)
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    assert manifest["splits"]["train"]["anomalous_frames"] == 0
    loaded = synth.load_split(tmp_path, "test")
    for a, b in zip(test, loaded):
        assert np.array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.boxes(5) == b.boxes(5)
        np.testing.assert_array_equal(synth.flow_oracle(a, 5), synth.flow_oracle(b, 5))
