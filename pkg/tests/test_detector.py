import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from statevad import autodiff as ad
from statevad import detector, pipeline, synth
from statevad.model import ModelConfig, init_model, state_forward
from statevad.trainer import ScoreStats

TINY = ModelConfig(H=16, W=16, T=1, d=16, n_heads=2, n_stacks=1, groups=4, encoder_widths=(8, 8, 16))
STATS = ScoreStats(mean_r=40.0, std_r=7.0, mean_m=90.0, std_m=30.0)


@pytest.fixture(scope="module")
def models():
    raw = init_model(TINY, 1)
    motion = init_model(TINY.for_branch(2), 2)
    rng = np.random.default_rng(0)
    for m in (raw, motion):
        for name in m.buffers:
            m.buffers[name][:] = rng.uniform(0.5, 1.5, m.buffers[name].shape)
    return raw.eval(), motion.eval()


@pytest.fixture(scope="module")
def data():
    cfg = synth.GenConfig(n_train_clips=1, n_test_clips=6, clip_length=16, objects_per_clip=(1, 2))
    _, test = synth.generate_dataset(cfg, seed=2)
    return test, synth.extract_cubes(test, T=1, size=16)


def test_perturb_config_rejects_negative_eta():
    with pytest.raises(ValueError):
        detector.PerturbConfig(eta=-0.1)


def test_eta_zero_is_bit_identical(models, data):
    cubes = data[1].cubes[:3]
    out = detector.perturb_inputs(*models, cubes, data[1].flows[:3], 0.0)
    assert out.tobytes() == cubes.tobytes()


def test_empty_frame_gives_empty_result(models):
    empty = np.zeros((0, 3, 3, 16, 16), np.float32)
    out = detector.perturb_inputs(*models, empty, np.zeros((0, 3, 2, 16, 16), np.float32), 0.01)
    assert out.shape == empty.shape


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_loss_scaling_leaves_perturbation_unchanged(models, data, c):
    cubes, flows = data[1].cubes[:3], data[1].flows[:3]
    base = detector.perturb_inputs(*models, cubes, flows, 0.01)
    scaled = detector.perturb_inputs(*models, cubes, flows, 0.01, loss_scale=c)
    assert scaled.tobytes() == base.tobytes()


def test_perturbation_matches_single_cube_gradients(models, data):
    # oracle: gradient of each cube's own error, one cube at a time
    raw, motion = models
    cubes, flows = data[1].cubes[:3], data[1].flows[:3]
    out = detector.perturb_inputs(raw, motion, cubes, flows, 0.02)
    for m in range(3):
        x = ad.Tensor(cubes[m:m + 1], requires_grad=True)
        err = ad.sum_((state_forward(x, raw) - x) ** 2) + ad.sum_((state_forward(x, motion) - ad.Tensor(flows[m:m + 1])) ** 2)
        err.backward()
        expected = cubes[m] - np.float32(0.02) * np.sign(x.grad[0])
        np.testing.assert_array_equal(out[m], expected)
    assert set(np.unique(np.round((cubes - out) / 0.02, 3))) <= {-1.0, 0.0, 1.0}


def test_perturbation_is_not_clamped(models, data):
    cubes, flows = data[1].cubes[:2], data[1].flows[:2]
    out = detector.perturb_inputs(*models, cubes, flows, 0.5)
    assert out.min() < 0.0 or out.max() > 1.0


def test_sign_of_zero_is_zero():
    np.testing.assert_array_equal(ad.sign(np.array([0.0, -2.0, 3.0])), [0.0, -1.0, 1.0])


def test_models_are_frozen_during_perturbation(models, data):
    raw, motion = models
    before = {k: v.copy() for k, v in raw.buffers.items()}
    detector.perturb_inputs(raw, motion, data[1].cubes[:2], data[1].flows[:2], 0.01)
    assert not raw.training and not motion.training
    assert all(p.grad is None for p in raw.parameters())
    for k, v in before.items():
        assert np.array_equal(v, raw.buffers[k])


def _hand_errors(raw, motion, cube, flow):
    with ad.no_grad():
        r = state_forward(cube, raw).data.astype(np.float64)
        m = state_forward(cube, motion).data.astype(np.float64)
    return ((r - cube) ** 2).sum(), ((m - flow) ** 2).sum()


def test_cube_score_matches_compositional_oracle(models, data):
    cube = data[1].cubes[1] + np.float32(0.01)
    flow = data[1].flows[1]
    s_r, s_m = _hand_errors(*models, cube, flow)
    expected = 0.3 * (s_r - STATS.mean_r) / STATS.std_r + 1.0 * (s_m - STATS.mean_m) / STATS.std_m
    got = detector.cube_score(*models, cube, flow, STATS, 0.3, 1.0)
    assert abs(got - expected) <= 1e-6 * max(1.0, abs(expected))


def test_score_zero_at_mean_errors(models, data):
    cube, flow = data[1].cubes[0], data[1].flows[0]
    s_r, s_m = detector.branch_errors(*models, cube[None], flow[None])
    stats = ScoreStats(float(s_r[0]), 3.0, float(s_m[0]), 5.0)
    assert detector.cube_score(*models, cube, flow, stats) == 0.0


def test_raw_only_weights_ignore_flow(models, data):
    cube, flow = data[1].cubes[0], data[1].flows[0]
    a = detector.cube_score(*models, cube, flow, STATS, w_r=1.0, w_m=0.0)
    b = detector.cube_score(*models, cube, flow + 3.0, STATS, w_r=1.0, w_m=0.0)
    assert a == b


def test_motion_error_uses_given_flow_target(models, data):
    cube, flow = data[1].cubes[0], data[1].flows[0]
    a = detector.cube_score(*models, cube, flow, STATS, w_r=0.0, w_m=1.0)
    b = detector.cube_score(*models, cube, flow + 1.0, STATS, w_r=0.0, w_m=1.0)
    assert a != b


def test_frame_score_examples():
    assert detector.frame_score([-0.2, 1.7, 0.3]) == 1.7
    assert detector.frame_score([0.4]) == 0.4
    assert detector.frame_score([]) is None


def test_no_evidence_sentinel():
    resolved = detector.resolve_frame_scores([0.5, None, -1.5, 2.0])
    np.testing.assert_array_equal(resolved, [0.5, -2.5, -1.5, 2.0])
    all_empty = detector.resolve_frame_scores([None, None, None])
    assert len(set(all_empty)) == 1
    assert detector.auroc(all_empty, [0, 1, 1]) == 0.5


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(0, 7), st.floats(0, 5))
def test_frame_score_is_monotone(scores, i, bump):
    i = i % len(scores)
    raised = list(scores)
    raised[i] += bump
    assert detector.frame_score(raised) >= detector.frame_score(scores)


def _brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auroc_examples():
    # pairs (0.35, 0.1), (0.8, 0.1), (0.8, 0.4) are won, (0.35, 0.4) lost
    assert _brute_auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert detector.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert detector.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert detector.auroc([1.0] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        # coarse grid so that ties are common
        scores = np.round(rng.normal(size=n), 1 if trial % 2 else 6)
        assert detector.auroc(scores, labels) == _brute_auroc(scores.tolist(), labels.tolist())


def test_auroc_invariant_under_increasing_maps():
    rng = np.random.default_rng(1)
    s = rng.normal(size=50)
    y = (rng.random(50) < 0.4).astype(int)
    a = detector.auroc(s, y)
    assert detector.auroc(np.exp(s), y) == a
    assert detector.auroc(3.0 * s + 7.0, y) == a


def test_auroc_single_class_rejected():
    with pytest.raises(ValueError, match="both classes"):
        detector.auroc([0.1, 0.2], [1, 1])


def test_roc_curve_area_equals_auroc_and_svg_is_valid():
    rng = np.random.default_rng(2)
    s = np.round(rng.normal(size=80), 1)
    y = (rng.random(80) < 0.3).astype(int)
    fpr, tpr = detector.roc_curve(s, y)
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert area == pytest.approx(detector.auroc(s, y), abs=1e-12)
    svg = detector.roc_svg(fpr, tpr, auc=area)
    root = ET.fromstring(svg.split("\n", 1)[1])
    assert root.tag.endswith("svg")
    assert "href" not in svg


# -- pipeline -------------------------------------------------------------
def _ckpt(models):
    from statevad.trainer import Checkpoint
    return Checkpoint(raw=models[0], motion=models[1], stats=STATS, config=TINY)


def test_pipeline_eta_zero_equals_plain_and_signs_match(models, data):
    clips, cubes = data
    sub_clips = clips[:2]
    cs = synth.extract_cubes(sub_clips, T=1, size=16, frame_stride=4)
    frames = pipeline.FrameTable.from_clips(sub_clips)
    ev = pipeline.evaluate(_ckpt(models), cs, frames, etas=[0.0, 0.01])
    assert ev.result(0.0) is ev.plain
    assert ev.results[0].frame_scores.tobytes() == ev.plain.frame_scores.tobytes()
    # batched signs agree with per-frame perturb_inputs
    signs = pipeline.gradient_signs(_ckpt(models), cs)
    groups = pipeline.frame_groups(cs, frames)
    for g in [g for g in groups if g][:4]:
        y_hat = detector.perturb_inputs(*models, cs.cubes[g], cs.flows[g], 0.01)
        np.testing.assert_array_equal(y_hat, cs.cubes[g] - np.float32(0.01) * signs[g].astype(np.float32))
    # frames never sampled get the sentinel
    empty = [i for i, g in enumerate(groups) if not g]
    assert empty
    assert np.all(ev.plain.frame_scores[empty] == ev.plain.frame_scores[[i for i, g in enumerate(groups) if g]].min() - 1)


def test_pipeline_scores_csv_deterministic(tmp_path, models, data):
    clips = data[0][:2]
    cs = synth.extract_cubes(clips, T=1, size=16, frame_stride=5)
    frames = pipeline.FrameTable.from_clips(clips)
    paths = []
    for k in range(2):
        ev = pipeline.evaluate(_ckpt(models), cs, frames, etas=[0.01])
        paths.append(tmp_path / f"s{k}.csv")
        pipeline.write_scores_csv(paths[-1], ev, ev.results[0])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header, first = paths[0].read_text().splitlines()[:2]
    assert header == "clip_id,frame,label,score,n_cubes"
    assert first.startswith(clips[0].clip_id + ",0,")


def test_paired_frames_pairs_cubes_of_one_frame(data):
    cs = data[1]
    n_idx, a_idx = pipeline.paired_frames(cs)
    assert len(n_idx) == len(a_idx) > 0
    for n, a in zip(n_idx, a_idx):
        assert not cs.anomalous[n] and cs.anomalous[a]
        assert (cs.clip_ids[n], cs.frames[n]) == (cs.clip_ids[a], cs.frames[a])
