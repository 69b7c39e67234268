import json

import numpy as np
import pytest

from statevad import autodiff as ad
from statevad import synth, trainer
from statevad.model import ModelConfig, init_model, state_forward
from statevad.trainer import ScoreStats, TrainConfig

TINY = ModelConfig(H=16, W=16, T=1, d=16, n_heads=2, n_stacks=1, groups=4, encoder_widths=(8, 8, 16))


@pytest.fixture(scope="module")
def tiny_data():
    cfg = synth.GenConfig(n_train_clips=3, n_test_clips=2, clip_length=16)
    train, _ = synth.generate_dataset(cfg, seed=1)
    return synth.extract_cubes(train, T=1, size=16, frame_stride=2)


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_data):
    return trainer.train(tiny_data.cubes, tiny_data.flows, TINY, TrainConfig(epochs=2, batch_size=8), seed=0)


def _naive_loss(out, target):
    n, P = out.shape[:2]
    total = 0.0
    for i in range(n):
        for j in range(P):
            total += float(((out[i, j].astype(np.float64) - target[i, j]) ** 2).sum())
    return total / n


def test_loss_raw_matches_double_loop(tiny_data):
    model = init_model(TINY, 0).eval()
    x = tiny_data.cubes[:4]
    with ad.no_grad():
        out = state_forward(x, model).data
        loss = trainer.loss_raw(x, model).item()
    assert abs(loss - _naive_loss(out, x)) <= 1e-6 * max(1.0, abs(loss))


def test_loss_motion_matches_double_loop(tiny_data):
    model = init_model(TINY.for_branch(2), 0).eval()
    x, o = tiny_data.cubes[:4], tiny_data.flows[:4]
    with ad.no_grad():
        out = state_forward(x, model).data
        loss = trainer.loss_motion(x, o, model).item()
    assert abs(loss - _naive_loss(out, o)) <= 1e-6 * max(1.0, abs(loss))


def test_identity_and_zero_output_losses(monkeypatch, tiny_data):
    model = init_model(TINY, 0)
    x = tiny_data.cubes[:3]
    monkeypatch.setattr(trainer, "state_forward", lambda cube, m: cube)
    assert trainer.loss_raw(x, model).item() == 0.0
    monkeypatch.setattr(trainer, "state_forward", lambda cube, m: cube * ad.Tensor(np.float32(0)))
    expected = (x.astype(np.float64) ** 2).reshape(3, -1).sum(axis=1).mean()
    assert trainer.loss_raw(x, model).item() == pytest.approx(expected, rel=1e-6)
    zeros = np.zeros((3, 3, 2, 16, 16), np.float32)
    monkeypatch.setattr(trainer, "state_forward", lambda cube, m: ad.Tensor(zeros))
    motion = init_model(TINY.for_branch(2), 0)
    assert trainer.loss_motion(x, zeros, motion).item() == 0.0


def test_loss_motion_rejects_mismatched_flows(tiny_data):
    motion = init_model(TINY.for_branch(2), 0)
    with pytest.raises(ad.ShapeError, match="flow targets"):
        trainer.loss_motion(tiny_data.cubes[:2], tiny_data.flows[:3], motion)


def test_flow_targets_receive_no_gradient(tiny_data):
    motion = init_model(TINY.for_branch(2), 0)
    o = ad.Tensor(tiny_data.flows[:2], requires_grad=True)
    trainer.loss_motion(tiny_data.cubes[:2], o, motion).backward()
    assert o.grad is None


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        trainer.train(np.zeros((0, 3, 3, 16, 16), np.float32), np.zeros((0, 3, 2, 16, 16), np.float32), TINY)


def test_training_reduces_loss_and_is_deterministic(tiny_data, tiny_ckpt):
    curve = tiny_ckpt.metadata["loss_curve"]
    assert curve[-1]["loss_r"] < curve[0]["loss_r"]
    again = trainer.train(tiny_data.cubes, tiny_data.flows, TINY, TrainConfig(epochs=2, batch_size=8), seed=0)
    assert again.metadata["loss_curve"] == curve
    for name, p in tiny_ckpt.raw.params.items():
        assert np.array_equal(p.data, again.raw.params[name].data)
    assert tiny_ckpt.stats.std_r > 0 and tiny_ckpt.stats.std_m > 0


def test_branches_are_independent_models(tiny_ckpt):
    assert tiny_ckpt.raw.config.C_out == 3 and tiny_ckpt.motion.config.C_out == 2
    shared = set(map(id, tiny_ckpt.raw.parameters())) & set(map(id, tiny_ckpt.motion.parameters()))
    assert not shared


def test_nan_loss_aborts_with_location(tiny_data):
    cubes = tiny_data.cubes[:8].copy()
    cubes[5, 0, 0, 0, 0] = np.nan
    with pytest.raises(trainer.NumericalError, match=r"epoch 1, step 1, batch 0 \(raw branch\)"):
        trainer.train(cubes, tiny_data.flows[:8], TINY, TrainConfig(epochs=1, batch_size=8))


def _welford(values):
    n, mean, m2 = 0, 0.0, 0.0
    for v in values:
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    return mean, (m2 / n) ** 0.5


def test_score_stats_match_streaming_oracle(tiny_data, tiny_ckpt):
    stats = trainer.compute_score_stats(tiny_ckpt.raw, tiny_ckpt.motion, tiny_data.cubes, tiny_data.flows)
    s_r, s_m = trainer.reconstruction_errors(tiny_ckpt.raw, tiny_ckpt.motion, tiny_data.cubes, tiny_data.flows)
    for (mean, std), (m2, s2) in (((stats.mean_r, stats.std_r), _welford(s_r)), ((stats.mean_m, stats.std_m), _welford(s_m))):
        assert abs(mean - m2) <= 1e-6 * abs(m2)
        assert abs(std - s2) <= 1e-6 * abs(s2)
    again = trainer.compute_score_stats(tiny_ckpt.raw, tiny_ckpt.motion, tiny_data.cubes, tiny_data.flows)
    assert again == stats
    assert stats == tiny_ckpt.stats


def test_score_stats_floor_and_minimum(tiny_data, tiny_ckpt):
    same = np.repeat(tiny_data.cubes[:1], 3, axis=0)
    flows = np.repeat(tiny_data.flows[:1], 3, axis=0)
    stats = trainer.compute_score_stats(tiny_ckpt.raw, tiny_ckpt.motion, same, flows)
    assert stats.std_r == trainer.STD_FLOOR and stats.std_m == trainer.STD_FLOOR
    with pytest.raises(ValueError, match="at least 2"):
        trainer.compute_score_stats(tiny_ckpt.raw, tiny_ckpt.motion, same[:1], flows[:1])


def test_loss_csv(tmp_path, tiny_ckpt):
    path = tmp_path / "loss.csv"
    trainer.write_loss_csv(path, tiny_ckpt.metadata["loss_curve"])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss_r,loss_m"
    assert len(lines) == 3
    assert float(lines[1].split(",")[1]) == tiny_ckpt.metadata["loss_curve"][0]["loss_r"]


def _score(ckpt, cube, flow):
    from statevad import detector
    return detector.cube_score(ckpt.raw, ckpt.motion, cube, flow, ckpt.stats)


def test_checkpoint_round_trip(tmp_path, tiny_data, tiny_ckpt):
    trainer.save_checkpoint(tiny_ckpt, tmp_path / "a")
    loaded = trainer.load_checkpoint(tmp_path / "a")
    trainer.save_checkpoint(loaded, tmp_path / "b")
    for f in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert loaded.stats == tiny_ckpt.stats
    for name, arr in tiny_ckpt.motion.state_arrays().items():
        assert np.array_equal(arr, loaded.motion.state_arrays()[name])
    a = _score(tiny_ckpt, tiny_data.cubes[0], tiny_data.flows[0])
    b = _score(loaded, tiny_data.cubes[0], tiny_data.flows[0])
    assert abs(a - b) <= 1e-7


def test_checkpoint_errors(tmp_path, tiny_ckpt):
    path = trainer.save_checkpoint(tiny_ckpt, tmp_path / "ck")
    with pytest.raises(trainer.CheckpointError, match="no checkpoint"):
        trainer.load_checkpoint(tmp_path / "missing")

    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(trainer.CheckpointError, match="magic"):
        trainer.load_checkpoint(path)

    (path / "tensors.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(trainer.CheckpointError, match="truncated"):
        trainer.load_checkpoint(path)

    (path / "tensors.bin").write_bytes(blob)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(trainer.CheckpointError, match="version 99"):
        trainer.load_checkpoint(path)


def test_score_stats_dataclass_round_trip():
    s = ScoreStats(1.0, 2.0, 3.0, 4.0)
    assert ScoreStats.from_dict(s.to_dict()) == s
