"""Synthetic surveillance-style video with exact boxes, labels and optical flow.

Normal clips show solid squares and discs drifting at 1-2 px/frame over a
static textured background. Test clips additionally contain anomalous events:
fast movers (>= 6 px/frame) and an unseen shape (triangle). Because every
object moves by an integer displacement per frame over a static background,
the optical flow is known exactly and stands in for a learned flow network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import io as tensor_io

NORMAL_KINDS = ("square", "disc")


@dataclass(frozen=True)
class GenConfig:
    frame_size: int = 128
    clip_length: int = 48
    n_train_clips: int = 60
    n_test_clips: int = 40
    objects_per_clip: tuple = (1, 1)
    object_size: tuple = (14, 20)
    normal_speed: tuple = (1.0, 2.0)
    fast_speed: tuple = (6.0, 8.0)
    shape_segment: tuple = (12, 24)
    anomaly_fraction: float = 0.25
    anomaly_types: tuple = ("fast", "shape")
    box_margin: int = 4

    def __post_init__(self):
        for name in ("objects_per_clip", "object_size", "normal_speed", "fast_speed", "shape_segment", "anomaly_types"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.object_size[1] + 2 > self.frame_size:
            raise ValueError(f"object size {self.object_size[1]} does not fit a {self.frame_size}px frame")
        travel = math.ceil(self.normal_speed[1]) * (self.clip_length - 1) + self.object_size[1]
        if travel > self.frame_size:
            raise ValueError(f"a normal object travelling {travel}px does not stay inside the frame")
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise ValueError("anomaly_fraction must be in [0, 1)")
        unknown = set(self.anomaly_types) - {"fast", "shape"}
        if unknown:
            raise ValueError(f"unknown anomaly types {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        return cls(**data)


@dataclass
class Clip:
    """Frames (L, 3, F, F) in [0, 1] plus per-object tracks.

    ``objects`` holds one dict per object with its kind, constant velocity
    (vx, vy) in px/frame, size, colour, visible frame range and anomaly flag;
    ``positions[k][t]`` is the top-left corner of object k at frame t (or
    None when invisible).
    """

    clip_id: str
    frames: np.ndarray
    objects: list
    positions: list
    labels: np.ndarray
    background: np.ndarray | None = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def boxes(self, t: int) -> list[dict]:
        """Ground-truth object boxes at frame ``t``: x0, y0 inclusive, x1, y1 exclusive."""
        out = []
        for obj, pos in zip(self.objects, self.positions):
            p = pos[t]
            if p is None:
                continue
            x0, y0 = p
            out.append({
                "object_id": obj["object_id"],
                "x0": x0, "y0": y0, "x1": x0 + obj["size"], "y1": y0 + obj["size"],
                "anomalous": obj["anomalous"],
            })
        return out


# -- rendering ---------------------------------------------------------------
def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disc":
        r = size / 2.0
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        half = (yy / size) * (size / 2.0)
        return np.abs(xx - size / 2.0) <= half
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, F: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.05, 0.35, 3), rng.uniform(0.05, 0.35, 3)
    ramp = np.linspace(0.0, 1.0, F)
    direction = rng.integers(0, 2)
    grid = ramp[None, :] if direction == 0 else ramp[:, None]
    grid = np.broadcast_to(grid, (F, F))
    bg = c0[:, None, None] * (1 - grid) + c1[:, None, None] * grid
    bg = bg + rng.uniform(-0.03, 0.03, (1, F, F))
    return np.clip(bg, 0.0, 1.0)


def render_frame(clip_objects, positions, t: int, background: np.ndarray) -> np.ndarray:
    frame = background.copy()
    for obj, pos in zip(clip_objects, positions):
        p = pos[t]
        if p is None:
            continue
        x0, y0 = p
        s = obj["size"]
        mask = _shape_mask(obj["kind"], s)
        region = frame[:, y0:y0 + s, x0:x0 + s]
        color = np.asarray(obj["color"])[:, None, None]
        frame[:, y0:y0 + s, x0:x0 + s] = np.where(mask[None], color, region)
    return frame


# -- object tracks -----------------------------------------------------------
def _normal_velocities(lo: float, hi: float) -> list[tuple[int, int]]:
    out = []
    reach = int(math.ceil(hi))
    for vx in range(-reach, reach + 1):
        for vy in range(-reach, reach + 1):
            if lo <= math.hypot(vx, vy) <= hi:
                out.append((vx, vy))
    return out


def _start_range(v: int, span: int, F: int, size: int) -> tuple[int, int]:
    """Valid start coordinates so that start + v*k stays in [0, F - size] for k < span."""
    lo = max(0, -v * (span - 1))
    hi = min(F - size, F - size - v * (span - 1))
    return lo, hi


def _color(rng: np.random.Generator) -> list[float]:
    return [round(float(c), 4) for c in rng.uniform(0.45, 0.95, 3)]


def _normal_object(rng, cfg: GenConfig, object_id: int, L: int, kind=None, first=0, last=None, anomalous=False):
    last = L - 1 if last is None else last
    span = last - first + 1
    size = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    choices = _normal_velocities(*cfg.normal_speed)
    vx, vy = choices[int(rng.integers(len(choices)))]
    xr, yr = _start_range(vx, span, cfg.frame_size, size), _start_range(vy, span, cfg.frame_size, size)
    x0 = int(rng.integers(xr[0], xr[1] + 1))
    y0 = int(rng.integers(yr[0], yr[1] + 1))
    obj = {
        "object_id": object_id,
        "kind": kind or NORMAL_KINDS[int(rng.integers(len(NORMAL_KINDS)))],
        "size": size, "vx": vx, "vy": vy, "color": _color(rng),
        "first": first, "last": last, "anomalous": anomalous,
    }
    track = [None] * L
    for t in range(first, last + 1):
        track[t] = (x0 + vx * (t - first), y0 + vy * (t - first))
    return obj, track


def _fast_velocity(rng, lo: float, hi: float) -> tuple[int, int]:
    reach = int(math.ceil(hi))
    options = [(vx, vy) for vx in range(-reach, reach + 1) for vy in range(-2, 3)
               if lo <= math.hypot(vx, vy) <= hi and abs(vx) >= abs(vy)]
    vx, vy = options[int(rng.integers(len(options)))]
    return (vx, vy) if rng.integers(2) == 0 else (vy, vx)


def _fast_span(cfg: GenConfig, size: int, v: tuple[int, int]) -> int:
    travel = cfg.frame_size - size
    spans = [travel // abs(c) + 1 for c in v if c != 0]
    return min(spans)


def _fast_object(rng, cfg: GenConfig, object_id: int, L: int, first: int, span: int, size: int, v):
    vx, vy = v
    last = first + span - 1
    xr, yr = _start_range(vx, span, cfg.frame_size, size), _start_range(vy, span, cfg.frame_size, size)
    x0 = int(rng.integers(xr[0], xr[1] + 1))
    y0 = int(rng.integers(yr[0], yr[1] + 1))
    obj = {
        "object_id": object_id, "kind": "square" if rng.integers(2) == 0 else "disc",
        "size": size, "vx": vx, "vy": vy, "color": _color(rng),
        "first": first, "last": last, "anomalous": True, "anomaly": "fast",
    }
    track = [None] * L
    for t in range(first, last + 1):
        track[t] = (x0 + vx * (t - first), y0 + vy * (t - first))
    return obj, track


def _plan_events(rng, cfg: GenConfig) -> dict:
    """Choose anomalous events so the anomalous-frame fraction tracks the target.

    Each test clip has two half-clip slots; each slot hosts at most one event.
    """
    L = cfg.clip_length
    half = L // 2
    slots = [(c, s) for c in range(cfg.n_test_clips) for s in range(2)]
    order = rng.permutation(len(slots))
    target = cfg.anomaly_fraction * cfg.n_test_clips * L
    events: dict = {}
    covered = 0
    for n, idx in enumerate(order):
        if not cfg.anomaly_types or covered >= target:
            break
        kind = cfg.anomaly_types[n % len(cfg.anomaly_types)]
        size = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        if kind == "fast":
            v = _fast_velocity(rng, *cfg.fast_speed)
            span = min(_fast_span(cfg, size, v), half)
        else:
            v = None
            span = int(rng.integers(cfg.shape_segment[0], cfg.shape_segment[1] + 1))
            span = min(span, half)
        remaining = target - covered
        if remaining < span / 2:
            break
        if kind == "shape":
            span = max(min(span, int(round(remaining))), cfg.shape_segment[0] // 2)
        clip, slot = slots[idx]
        lo = slot * half
        hi = (slot + 1) * half if slot == 0 else L
        first = int(rng.integers(lo, hi - span + 1))
        events.setdefault(clip, []).append({"kind": kind, "first": first, "span": span, "size": size, "v": v})
        covered += span
    return events


def _make_clip(rng, cfg: GenConfig, clip_id: str, events: list) -> Clip:
    L, F = cfg.clip_length, cfg.frame_size
    background = _background(rng, F)
    objects, positions = [], []
    lo, hi = cfg.objects_per_clip
    for k in range(int(rng.integers(lo, hi + 1))):
        obj, track = _normal_object(rng, cfg, k, L)
        objects.append(obj)
        positions.append(track)
    for ev in sorted(events, key=lambda e: e["first"]):
        oid = len(objects)
        if ev["kind"] == "fast":
            obj, track = _fast_object(rng, cfg, oid, L, ev["first"], ev["span"], ev["size"], ev["v"])
        else:
            obj, track = _normal_object(rng, cfg, oid, L, kind="triangle", first=ev["first"],
                                        last=ev["first"] + ev["span"] - 1, anomalous=True)
            obj["anomaly"] = "shape"
        objects.append(obj)
        positions.append(track)
    frames = np.stack([render_frame(objects, positions, t, background) for t in range(L)]).astype(np.float32)
    labels = np.zeros(L, dtype=np.int64)
    for obj in objects:
        if obj["anomalous"]:
            labels[obj["first"]:obj["last"] + 1] = 1
    return Clip(clip_id, frames, objects, positions, labels, background.astype(np.float32))


def generate_dataset(gen_config: GenConfig, seed: int) -> tuple[list[Clip], list[Clip]]:
    """Deterministic (train clips, test clips) for ``seed``; training clips are all normal."""
    root = np.random.SeedSequence(seed)
    plan_seq, train_seq, test_seq = root.spawn(3)
    events = _plan_events(np.random.default_rng(plan_seq), gen_config)
    train = [
        _make_clip(np.random.default_rng(s), gen_config, f"train_{i:03d}", [])
        for i, s in enumerate(train_seq.spawn(gen_config.n_train_clips))
    ]
    test = [
        _make_clip(np.random.default_rng(s), gen_config, f"test_{i:03d}", events.get(i, []))
        for i, s in enumerate(test_seq.spawn(gen_config.n_test_clips))
    ]
    return train, test


# -- optical flow ------------------------------------------------------------
def flow_oracle(clip: Clip, t: int) -> np.ndarray:
    """Exact flow (2, F, F) from frame t to t+1: (dx, dy) of the visible object, 0 on background.

    The last frame has no successor and replicates the flow of frame L-2.
    """
    L = clip.length
    if not 0 <= t < L:
        raise IndexError(f"frame {t} outside clip of length {L}")
    if t == L - 1 and L > 1:
        t = L - 2
    F = clip.frames.shape[-1]
    flow = np.zeros((2, F, F), dtype=np.float32)
    for obj, pos in zip(clip.objects, clip.positions):
        p = pos[t]
        if p is None:
            continue
        x0, y0 = p
        s = obj["size"]
        mask = _shape_mask(obj["kind"], s)
        for axis, v in ((0, obj["vx"]), (1, obj["vy"])):
            region = flow[axis, y0:y0 + s, x0:x0 + s]
            region[mask] = v
    return flow


def clip_flows(clip: Clip) -> np.ndarray:
    return np.stack([flow_oracle(clip, t) for t in range(clip.length)])


# -- context cubes -----------------------------------------------------------
def resize_bilinear(patch: np.ndarray, H: int = 32, W: int = 32) -> np.ndarray:
    """Bilinear resize of (C, a, b) with corner-aligned sampling."""
    patch = np.asarray(patch)
    C, a, b = patch.shape
    if a < 1 or b < 1:
        raise ValueError(f"cannot resize an empty patch of shape {patch.shape}")
    if (a, b) == (H, W):
        return patch.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(patch.dtype)

    r0, r1, fr = axis(a, H)
    c0, c1, fc = axis(b, W)
    rows = patch[:, r0, :] * (1 - fr)[None, :, None] + patch[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]
    return out.astype(patch.dtype)


def context_indices(t: int, T: int, L: int) -> list[int]:
    return [min(max(j, 0), L - 1) for j in range(t - T, t + T + 1)]


def build_stcc(clip: Clip, box, t: int, T: int = 3, size: int = 32, flows: np.ndarray | None = None):
    """Crop the same box from frames t-T..t+T (edge-clamped) and resize to ``size``.

    Returns (cube (2T+1, 3, size, size), flow cube (2T+1, 2, size, size)); flow
    vectors are rescaled by the per-axis resize ratio.
    """
    x0, y0, x1, y1 = (box["x0"], box["y0"], box["x1"], box["y1"]) if isinstance(box, dict) else box
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {(x0, y0, x1, y1)}")
    F = clip.frames.shape[-1]
    if x0 < 0 or y0 < 0 or x1 > F or y1 > F:
        raise ValueError(f"box {(x0, y0, x1, y1)} outside the {F}px frame")
    sx, sy = size / (x1 - x0), size / (y1 - y0)
    cube, flow = [], []
    for j in context_indices(t, T, clip.length):
        cube.append(resize_bilinear(clip.frames[j, :, y0:y1, x0:x1], size, size))
        fj = flows[j] if flows is not None else flow_oracle(clip, j)
        f = resize_bilinear(fj[:, y0:y1, x0:x1], size, size)
        f[0] *= sx
        f[1] *= sy
        flow.append(f)
    return np.stack(cube).astype(np.float32), np.stack(flow).astype(np.float32)


def detection_box(box: dict, margin: int, F: int) -> tuple[int, int, int, int]:
    """Ground-truth box grown by ``margin`` px and clipped to the frame."""
    return (max(box["x0"] - margin, 0), max(box["y0"] - margin, 0),
            min(box["x1"] + margin, F), min(box["y1"] + margin, F))


@dataclass
class CubeSet:
    """Context cubes of many objects/frames with their provenance."""

    cubes: np.ndarray
    flows: np.ndarray
    clip_ids: list
    frames: list
    object_ids: list
    anomalous: np.ndarray

    def __len__(self) -> int:
        return len(self.cubes)

    def subset(self, idx) -> "CubeSet":
        idx = np.asarray(idx, dtype=int)
        return CubeSet(self.cubes[idx], self.flows[idx], [self.clip_ids[i] for i in idx],
                       [self.frames[i] for i in idx], [self.object_ids[i] for i in idx], self.anomalous[idx])


def extract_cubes(clips, T: int = 3, size: int = 32, margin: int = 4, frame_stride: int = 1, frame_offset: int = 0) -> CubeSet:
    """One cube per visible object per sampled frame, in (clip, frame, object) order."""
    cubes, flows, cids, frames, oids, anom = [], [], [], [], [], []
    for clip in clips:
        F = clip.frames.shape[-1]
        all_flows = clip_flows(clip)
        for t in range(frame_offset, clip.length, frame_stride):
            for box in clip.boxes(t):
                c, f = build_stcc(clip, detection_box(box, margin, F), t, T, size, flows=all_flows)
                cubes.append(c)
                flows.append(f)
                cids.append(clip.clip_id)
                frames.append(t)
                oids.append(box["object_id"])
                anom.append(box["anomalous"])
    P = 2 * T + 1
    empty = np.zeros((0, P, 3, size, size), np.float32)
    return CubeSet(
        np.stack(cubes) if cubes else empty,
        np.stack(flows) if flows else np.zeros((0, P, 2, size, size), np.float32),
        cids, frames, oids, np.asarray(anom, dtype=bool),
    )


# -- disk format -------------------------------------------------------------
def _clip_manifest(clip: Clip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "length": clip.length,
        "labels": clip.labels.tolist(),
        "objects": clip.objects,
        "boxes": [clip.boxes(t) for t in range(clip.length)],
        "positions": [[list(p) if p is not None else None for p in track] for track in clip.positions],
    }


def save_dataset(out_dir, gen_config: GenConfig, seed: int, train: list, test: list) -> dict:
    out_dir = Path(out_dir)
    manifest = {"format": "statevad-dataset", "version": 1, "seed": int(seed),
                "gen_config": gen_config.to_dict(), "splits": {}}
    for split, clips in (("train", train), ("test", test)):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        for clip in clips:
            tensor_io.save(d / f"{clip.clip_id}.sten", clip.frames)
            (d / f"{clip.clip_id}.json").write_text(json.dumps(_clip_manifest(clip), indent=1))
        manifest["splits"][split] = {
            "clips": [c.clip_id for c in clips],
            "frames": int(sum(c.length for c in clips)),
            "anomalous_frames": int(sum(int(c.labels.sum()) for c in clips)),
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_split(data_dir, split: str) -> list[Clip]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    clips = []
    for cid in manifest["splits"][split]["clips"]:
        meta = json.loads((data_dir / split / f"{cid}.json").read_text())
        frames = tensor_io.load(data_dir / split / f"{cid}.sten")
        positions = [[tuple(p) if p is not None else None for p in track] for track in meta["positions"]]
        clips.append(Clip(cid, frames, meta["objects"], positions, np.asarray(meta["labels"], dtype=np.int64)))
    return clips


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())
