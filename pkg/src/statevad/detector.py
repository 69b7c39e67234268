"""Test-time input perturbation, standardized anomaly scores, frame scores and AUROC."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import StateModel, state_forward
from .trainer import ScoreStats


@dataclass
class PerturbConfig:
    eta: float = 0.002
    w_r: float = 0.3
    w_m: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameScore:
    frame: int
    score: float | None
    label: int
    cube_ids: list


def _errors(recon: ad.Tensor, target, p: float) -> ad.Tensor:
    n = recon.shape[0]
    return ad.pnorm_pp(ad.reshape(recon - target, (n, -1)), p, axis=1)


def _frozen(*models: StateModel) -> None:
    for m in models:
        m.eval()
        m.requires_grad_(False)


def input_gradient(raw_model: StateModel, motion_model: StateModel, cubes, flows, loss_weights=None):
    """Gradient of each cube's raw + motion reconstruction error w.r.t. that cube.

    ``loss_weights`` scales each cube's error term (e.g. 1/M for a frame with
    M cubes). Models are used in eval mode, so every cube's term depends on
    its own input only and one backward pass over the summed loss yields all
    per-cube gradients. Returns (gradient, plain S_r, plain S_m); the plain
    errors come from the same forward pass.
    """
    _frozen(raw_model, motion_model)
    cubes = np.asarray(cubes)
    x = ad.Tensor(cubes, requires_grad=True)
    o = ad.Tensor(np.asarray(flows, dtype=x.dtype))
    s_r = _errors(state_forward(x, raw_model), x, raw_model.config.p)
    s_m = _errors(state_forward(x, motion_model), o, motion_model.config.p)
    total = s_r + s_m
    if loss_weights is not None:
        total = total * ad.Tensor(np.asarray(loss_weights, dtype=x.dtype))
    ad.sum_(total).backward()
    return x.grad, s_r.data.astype(np.float64), s_m.data.astype(np.float64)


def perturb_inputs(raw_model: StateModel, motion_model: StateModel, cubes, flows, eta: float, loss_scale: float | None = None):
    """One signed-gradient descent step on the inputs of a frame's M cubes.

    ``loss_scale`` defaults to 1/M; any positive value gives the same result
    because only the sign of the gradient is used. Results are not clipped.
    """
    cubes = np.asarray(cubes)
    M = len(cubes)
    if M == 0:
        return cubes.copy()
    if eta == 0:
        return cubes.copy()
    scale = 1.0 / M if loss_scale is None else loss_scale
    if scale <= 0:
        raise ValueError("loss_scale must be positive")
    grad, _, _ = input_gradient(raw_model, motion_model, cubes, flows, np.full(M, scale))
    return (cubes - cubes.dtype.type(eta) * ad.sign(grad).astype(cubes.dtype)).astype(cubes.dtype)


def branch_errors(raw_model: StateModel, motion_model: StateModel, cubes, flows):
    """(S_r, S_m) per cube: raw error against the (possibly perturbed) input itself,
    motion error against the given flow targets."""
    _frozen(raw_model, motion_model)
    with ad.no_grad():
        x = ad.Tensor(np.asarray(cubes))
        o = ad.Tensor(np.asarray(flows, dtype=x.dtype))
        s_r = _errors(state_forward(x, raw_model), x, raw_model.config.p)
        s_m = _errors(state_forward(x, motion_model), o, motion_model.config.p)
    return s_r.data.astype(np.float64), s_m.data.astype(np.float64)


def standardized_score(s_r, s_m, stats: ScoreStats, w_r: float, w_m: float):
    s_r = np.asarray(s_r, dtype=np.float64)
    s_m = np.asarray(s_m, dtype=np.float64)
    return w_r * (s_r - stats.mean_r) / stats.std_r + w_m * (s_m - stats.mean_m) / stats.std_m


def cube_score(raw_model, motion_model, perturbed_cube, flow, stats: ScoreStats, w_r: float = 0.3, w_m: float = 1.0) -> float:
    """Weighted standardized reconstruction error of one (already perturbed) cube.

    ``flow`` is the flow target of the unperturbed frames.
    """
    s_r, s_m = branch_errors(raw_model, motion_model, np.asarray(perturbed_cube)[None], np.asarray(flow)[None])
    return float(standardized_score(s_r, s_m, stats, w_r, w_m)[0])


def frame_score(cube_scores: Sequence[float]) -> float | None:
    """Maximum cube score; ``None`` marks a frame with no cubes (no evidence)."""
    scores = list(cube_scores)
    if not scores:
        return None
    return float(max(scores))


def resolve_frame_scores(scores: Sequence[float | None]) -> np.ndarray:
    """Replace no-evidence markers by (minimum finite frame score - 1).

    If no frame has evidence every frame gets 0, so all scores tie.
    """
    finite = [s for s in scores if s is not None]
    fill = (min(finite) - 1.0) if finite else 0.0
    return np.array([fill if s is None else s for s in scores], dtype=np.float64)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUROC needs both classes; got {n_pos} positive and {n_neg} negative frames")
    return scores, labels, n_pos, n_neg


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based ranks i+1..j+1 share their average
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(false positive rates, true positive rates) over all score thresholds."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def roc_svg(fpr, tpr, title: str = "ROC", auc: float | None = None, size: int = 320) -> str:
    """Standalone SVG of a ROC curve."""
    pad = 40
    inner = size - 2 * pad

    def xy(fx, fy):
        return pad + fx * inner, size - pad - fy * inner

    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(a, b) for a, b in zip(fpr, tpr)))
    label = title if auc is None else f"{title} (AUROC {auc:.4f})"
    x0, y0 = xy(0, 0)
    x1, y1 = xy(1, 1)
    return (
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'  <rect width="{size}" height="{size}" fill="white"/>\n'
        f'  <rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>\n'
        f'  <line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="gray" stroke-dasharray="4 4"/>\n'
        f'  <polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
        f'  <text x="{size / 2}" y="{pad / 2 + 4}" text-anchor="middle" font-family="sans-serif" font-size="12">{label}</text>\n'
        f'  <text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">false positive rate</text>\n'
        f'  <text x="12" y="{size / 2}" text-anchor="middle" font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 12 {size / 2})">true positive rate</text>\n'
        f"</svg>\n"
    )
