"""Batch evaluation of test clips: perturbation, cube scores, frame scores, AUROC.

The input gradient of every test cube is computed once; each η then needs a
single forward pass per branch on ``Y - η·sign(g)``. Unperturbed (η = 0)
errors come from a plain no-grad forward.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from . import detector
from .synth import Clip, CubeSet
from .trainer import Checkpoint, reconstruction_errors


@dataclass
class FrameTable:
    clip_ids: list
    frames: list
    labels: np.ndarray

    @classmethod
    def from_clips(cls, clips: Sequence[Clip], frame_stride: int = 1) -> "FrameTable":
        """Every ``frame_stride``-th frame of every clip, in clip order."""
        cids, frames, labels = [], [], []
        for clip in clips:
            for t in range(0, clip.length, frame_stride):
                cids.append(clip.clip_id)
                frames.append(t)
                labels.append(int(clip.labels[t]))
        return cls(cids, frames, np.asarray(labels, dtype=int))

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class EtaResult:
    eta: float
    s_r: np.ndarray
    s_m: np.ndarray
    cube_scores: np.ndarray
    frame_scores: np.ndarray
    n_cubes: np.ndarray
    auroc: float


@dataclass
class Evaluation:
    frames: FrameTable
    cubes: CubeSet
    results: list = field(default_factory=list)
    plain: EtaResult | None = None

    def result(self, eta: float) -> EtaResult:
        if eta == 0 and self.plain is not None:
            return self.plain
        for r in self.results:
            if r.eta == eta:
                return r
        raise KeyError(eta)


def frame_groups(cubes: CubeSet, frames: FrameTable) -> list[list[int]]:
    """Cube indices of every frame in ``frames`` order."""
    pos = {(c, f): i for i, (c, f) in enumerate(zip(frames.clip_ids, frames.frames))}
    groups = [[] for _ in range(len(frames))]
    for i, key in enumerate(zip(cubes.clip_ids, cubes.frames)):
        if key not in pos:
            raise ValueError(f"cube {i} belongs to unknown frame {key}")
        groups[pos[key]].append(i)
    return groups


def frame_level(cube_scores: np.ndarray, groups: list[list[int]]):
    raw = [detector.frame_score(cube_scores[g]) for g in groups]
    return detector.resolve_frame_scores(raw)


def cube_weights(cubes: CubeSet) -> np.ndarray:
    """1/M for every cube, M = number of cubes in its frame."""
    counts = Counter(zip(cubes.clip_ids, cubes.frames))
    return np.array([1.0 / counts[k] for k in zip(cubes.clip_ids, cubes.frames)])


def gradient_signs(ckpt: Checkpoint, cubes: CubeSet, batch: int = 16) -> np.ndarray:
    """sign of the per-frame perturbation gradient for every cube (int8)."""
    weights = cube_weights(cubes)
    out = np.zeros(cubes.cubes.shape, dtype=np.int8)
    for start in range(0, len(cubes), batch):
        sl = slice(start, start + batch)
        g, _, _ = detector.input_gradient(ckpt.raw, ckpt.motion, cubes.cubes[sl], cubes.flows[sl], weights[sl])
        out[sl] = ad.sign(g)
    return out


def _result(eta, s_r, s_m, ckpt, w_r, w_m, groups, labels) -> EtaResult:
    cs = detector.standardized_score(s_r, s_m, ckpt.stats, w_r, w_m)
    fs = frame_level(cs, groups)
    return EtaResult(eta, s_r, s_m, cs, fs, np.array([len(g) for g in groups]), detector.auroc(fs, labels))


def evaluate(
    ckpt: Checkpoint,
    cubes: CubeSet,
    frames: FrameTable,
    etas: Sequence[float] = (),
    w_r: float = 0.3,
    w_m: float = 1.0,
    batch: int = 16,
    signs: np.ndarray | None = None,
) -> Evaluation:
    """Plain scores plus one perturbed run per η (in the given order)."""
    for eta in etas:
        if eta < 0:
            raise ValueError(f"eta must be >= 0, got {eta}")
    groups = frame_groups(cubes, frames)
    ckpt.raw.eval()
    ckpt.motion.eval()
    s_r, s_m = reconstruction_errors(ckpt.raw, ckpt.motion, cubes.cubes, cubes.flows, batch)
    ev = Evaluation(frames, cubes)
    ev.plain = _result(0.0, s_r, s_m, ckpt, w_r, w_m, groups, frames.labels)
    if any(eta > 0 for eta in etas) and signs is None and len(cubes):
        signs = gradient_signs(ckpt, cubes, batch)
    for eta in etas:
        if eta == 0:
            ev.results.append(ev.plain)
            continue
        dtype = cubes.cubes.dtype
        pr, pm = [], []
        for start in range(0, len(cubes), batch):
            sl = slice(start, start + batch)
            y_hat = cubes.cubes[sl] - dtype.type(eta) * signs[sl].astype(dtype)
            a, b = detector.branch_errors(ckpt.raw, ckpt.motion, y_hat, cubes.flows[sl])
            pr.append(a)
            pm.append(b)
        pr = np.concatenate(pr) if pr else np.zeros(0)
        pm = np.concatenate(pm) if pm else np.zeros(0)
        ev.results.append(_result(float(eta), pr, pm, ckpt, w_r, w_m, groups, frames.labels))
    return ev


# -- perturbation gap ---------------------------------------------------------
def score_reduction(ev: Evaluation, eta: float) -> np.ndarray:
    """Per-cube drop of the standardized score caused by the perturbation."""
    return ev.plain.cube_scores - ev.result(eta).cube_scores


def relative_reduction(ev: Evaluation, eta: float) -> np.ndarray:
    """Per-cube fractional drop of the total reconstruction error S_r + S_m."""
    plain = ev.plain.s_r + ev.plain.s_m
    pert = ev.result(eta).s_r + ev.result(eta).s_m
    return (plain - pert) / np.maximum(plain, 1e-12)


def paired_frames(cubes: CubeSet) -> tuple[np.ndarray, np.ndarray]:
    """(normal cube, anomalous cube) index pairs taken from the same frame."""
    normal, anomalous = [], []
    by_frame: dict = {}
    for i, key in enumerate(zip(cubes.clip_ids, cubes.frames)):
        by_frame.setdefault(key, []).append(i)
    for idx in by_frame.values():
        norm = [i for i in idx if not cubes.anomalous[i]]
        anom = [i for i in idx if cubes.anomalous[i]]
        for a, n in zip(anom, norm):
            normal.append(n)
            anomalous.append(a)
    return np.asarray(normal, dtype=int), np.asarray(anomalous, dtype=int)


@dataclass
class GapTest:
    eta: float
    mean_normal: float
    mean_anomalous: float
    n_pairs: int
    statistic: float
    p_value: float


def gap_test(ev: Evaluation, eta: float, reduction=relative_reduction) -> GapTest:
    """One-sided Wilcoxon signed-rank test that normal cubes lose more error
    than anomalous cubes of the same frame."""
    red = reduction(ev, eta)
    n_idx, a_idx = paired_frames(ev.cubes)
    if len(n_idx) == 0:
        return GapTest(eta, float("nan"), float("nan"), 0, float("nan"), float("nan"))
    res = sps.wilcoxon(red[n_idx], red[a_idx], alternative="greater")
    return GapTest(eta, float(red[n_idx].mean()), float(red[a_idx].mean()), len(n_idx),
                   float(res.statistic), float(res.pvalue))


def class_means(ev: Evaluation, eta: float, reduction=relative_reduction) -> tuple[float, float]:
    red = reduction(ev, eta)
    anom = np.asarray(ev.cubes.anomalous, dtype=bool)
    mean = lambda v: float(v.mean()) if len(v) else float("nan")  # noqa: E731
    return mean(red[~anom]), mean(red[anom])


# -- output files -------------------------------------------------------------
def write_scores_csv(path, ev: Evaluation, result: EtaResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_id", "frame", "label", "score", "n_cubes"])
        for i in range(len(ev.frames)):
            w.writerow([ev.frames.clip_ids[i], ev.frames.frames[i], int(ev.frames.labels[i]),
                        repr(float(result.frame_scores[i])), int(result.n_cubes[i])])


def write_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
