"""Joint training of the raw and motion branches, score statistics, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import io as tensor_io
from .model import ModelConfig, StateModel, init_model, state_forward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-8


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint directory is missing, truncated or from another version."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    stats_batch: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class ScoreStats:
    mean_r: float
    std_r: float
    mean_m: float
    std_m: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreStats":
        return cls(**data)


@dataclass
class Checkpoint:
    raw: StateModel
    motion: StateModel
    stats: ScoreStats
    config: ModelConfig
    metadata: dict = field(default_factory=dict)


# -- losses -----------------------------------------------------------------
def _errors(recon: ad.Tensor, target, p: float) -> ad.Tensor:
    """Per-cube sum of |recon - target|^p over positions and pixels."""
    diff = recon - target
    n = recon.shape[0]
    return ad.pnorm_pp(ad.reshape(diff, (n, -1)), p, axis=1)


def loss_raw(cubes, raw_model: StateModel) -> ad.Tensor:
    """(1/n) sum_i ||raw(X_i) - X_i||_p^p over a batch of n cubes."""
    x = cubes if isinstance(cubes, ad.Tensor) else ad.Tensor(cubes)
    if x.shape[0] == 0:
        raise ValueError("loss_raw needs a nonempty batch")
    recon = state_forward(x, raw_model)
    return ad.mean(_errors(recon, x, raw_model.config.p))


def loss_motion(cubes, flows, motion_model: StateModel) -> ad.Tensor:
    """(1/n) sum_i ||motion(X_i) - O_i||_p^p; flow targets are constants."""
    x = cubes if isinstance(cubes, ad.Tensor) else ad.Tensor(cubes)
    flows = flows.data if isinstance(flows, ad.Tensor) else np.asarray(flows)
    cfg = motion_model.config
    expected = (x.shape[0], cfg.positions, cfg.C_out, cfg.H, cfg.W)
    if flows.shape != expected:
        raise ad.ShapeError(f"flow targets have shape {flows.shape}, expected {expected}")
    recon = state_forward(x, motion_model)
    return ad.mean(_errors(recon, ad.Tensor(flows.astype(recon.dtype)), cfg.p))


# -- statistics -------------------------------------------------------------
def reconstruction_errors(raw_model: StateModel, motion_model: StateModel, cubes, flows, batch: int = 32):
    """Per-cube (S_r, S_m) without perturbation, models in eval mode."""
    cubes = np.asarray(cubes)
    flows = np.asarray(flows)
    p_r, p_m = raw_model.config.p, motion_model.config.p
    s_r, s_m = [], []
    with ad.no_grad():
        for start in range(0, len(cubes), batch):
            x = ad.Tensor(cubes[start:start + batch])
            o = flows[start:start + batch]
            s_r.append(_errors(state_forward(x, raw_model), x, p_r).data.astype(np.float64))
            s_m.append(_errors(state_forward(x, motion_model), ad.Tensor(o.astype(x.dtype)), p_m).data.astype(np.float64))
    if not s_r:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(s_r), np.concatenate(s_m)


def stats_from_errors(s_r: np.ndarray, s_m: np.ndarray) -> ScoreStats:
    if len(s_r) < 2:
        raise ValueError(f"score statistics need at least 2 cubes, got {len(s_r)}")
    return ScoreStats(
        mean_r=float(np.mean(s_r)), std_r=max(float(np.std(s_r)), STD_FLOOR),
        mean_m=float(np.mean(s_m)), std_m=max(float(np.std(s_m)), STD_FLOOR),
    )


def compute_score_stats(raw_model: StateModel, motion_model: StateModel, cubes, flows, batch: int = 32) -> ScoreStats:
    """Population mean/std of unperturbed per-cube training errors of both branches."""
    if len(cubes) < 2:
        raise ValueError(f"score statistics need at least 2 cubes, got {len(cubes)}")
    raw_model.eval()
    motion_model.eval()
    s_r, s_m = reconstruction_errors(raw_model, motion_model, cubes, flows, batch)
    return stats_from_errors(s_r, s_m)


# -- training ---------------------------------------------------------------
def _step(model: StateModel, loss: ad.Tensor, state: ad.AdamState, where: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at {where}")
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    ad.adam_step(params, [p.grad for p in params], state)
    return value


def train(
    cubes: np.ndarray,
    flows: np.ndarray,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    progress=None,
) -> Checkpoint:
    """Minimise L_r + L_m with Adam, then compute training score statistics.

    The branches share no parameters, so the gradient of the summed loss
    splits into one backward pass per branch; each branch keeps its own Adam
    state. ``progress(epoch, loss_r, loss_m)`` is called after every epoch.
    """
    cubes = np.asarray(cubes)
    flows = np.asarray(flows)
    if len(cubes) == 0:
        raise ValueError("training set is empty")
    if len(flows) != len(cubes):
        raise ad.ShapeError(f"{len(cubes)} cubes but {len(flows)} flow targets")
    cfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    root = np.random.SeedSequence(seed)
    raw_seed, motion_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in root.spawn(3))
    raw = init_model(cfg.for_branch(cfg.C), raw_seed).train()
    motion = init_model(cfg.for_branch(2), motion_seed).train()
    adam = dict(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, epsilon=tcfg.epsilon)
    state_r, state_m = ad.AdamState(**adam), ad.AdamState(**adam)
    rng = np.random.default_rng(shuffle_seed)
    dtype = ad.get_default_dtype()

    curve = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(cubes))
        tot_r = tot_m = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = np.sort(order[start:start + tcfg.batch_size])
            x = ad.Tensor(cubes[idx].astype(dtype))
            o = flows[idx].astype(dtype)
            step += 1
            where = f"epoch {epoch}, step {step}, batch {b}"
            lr_val = _step(raw, loss_raw(x, raw), state_r, f"{where} (raw branch)")
            lm_val = _step(motion, loss_motion(x, o, motion), state_m, f"{where} (motion branch)")
            tot_r += lr_val
            tot_m += lm_val
            n_batches += 1
        curve.append({"epoch": epoch, "loss_r": tot_r / n_batches, "loss_m": tot_m / n_batches})
        log.info("epoch %d  loss_r %.4f  loss_m %.4f", epoch, tot_r / n_batches, tot_m / n_batches)
        if progress is not None:
            progress(epoch, tot_r / n_batches, tot_m / n_batches)

    stats = compute_score_stats(raw, motion, cubes.astype(dtype), flows.astype(dtype), tcfg.stats_batch)
    meta = {"epochs": tcfg.epochs, "seed": int(seed), "train_config": tcfg.to_dict(),
            "n_train_cubes": int(len(cubes)), "loss_curve": curve}
    return Checkpoint(raw=raw, motion=motion, stats=stats, config=cfg, metadata=meta)


def write_loss_csv(path, curve: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss_r", "loss_m"])
        for row in curve:
            w.writerow([row["epoch"], repr(float(row["loss_r"])), repr(float(row["loss_m"]))])


# -- persistence ------------------------------------------------------------
def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``path/manifest.json`` and ``path/tensors.bin`` (concatenated tensor records)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "tensors.bin", "wb") as f:
        for branch, model in (("raw", ckpt.raw), ("motion", ckpt.motion)):
            for name, arr in model.state_arrays().items():
                n = tensor_io.write_tensor(f, arr)
                entries.append({"branch": branch, "name": name, "offset": offset, "nbytes": n})
                offset += n
    digest = hashlib.sha256((path / "tensors.bin").read_bytes()).hexdigest()
    manifest = {
        "format": "statevad-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "branch_configs": {"raw": ckpt.raw.config.to_dict(), "motion": ckpt.motion.config.to_dict()},
        "dtype": str(next(iter(ckpt.raw.params.values())).dtype),
        "stats": ckpt.stats.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": entries,
        "tensors_sha256": digest,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("format") != "statevad-checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}")
    blob_path = path / "tensors.bin"
    if not blob_path.exists():
        raise CheckpointError(f"missing tensor file {blob_path}")
    arrays = {"raw": {}, "motion": {}}
    blob = blob_path.read_bytes()
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensors.bin truncated: {e['branch']}/{e['name']} needs bytes up to {end}, file has {len(blob)}")
        try:
            arrays[e["branch"]][e["name"]] = tensor_io.read_tensor(io.BytesIO(blob[e["offset"]:end]))
        except tensor_io.TensorFormatError as exc:
            raise CheckpointError(f"{e['branch']}/{e['name']}: {exc}") from None
    dtype = np.dtype(manifest["dtype"])
    models = {}
    for branch in ("raw", "motion"):
        cfg = ModelConfig.from_dict(manifest["branch_configs"][branch])
        model = init_model(cfg, 0, dtype=dtype)
        missing = set(model.state_arrays()) - set(arrays[branch])
        if missing:
            raise CheckpointError(f"{branch} branch is missing tensors {sorted(missing)[:3]}")
        model.load_arrays(arrays[branch])
        models[branch] = model.eval()
    return Checkpoint(
        raw=models["raw"], motion=models["motion"],
        stats=ScoreStats.from_dict(manifest["stats"]),
        config=ModelConfig.from_dict(manifest["model_config"]),
        metadata=manifest["metadata"],
    )
