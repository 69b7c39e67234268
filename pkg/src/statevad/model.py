"""STATE auto-encoder: conv encoder, convolutional attention stacks, conv decoder.

Every patch of a spatio-temporal context cube goes through the same encoder.
The attention stacks let the 2T+1 encoded maps attend to each other
pixel-wise, with attention weights produced by a small conv net applied to
concatenated query/key maps. The decoder mirrors the encoder back to patch
resolution with ``C_out`` channels (3 for raw pixels, 2 for optical flow).

Tensors use (positions, channels, height, width) layout; a batch of cubes
adds a leading axis.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    W: int = 32
    C: int = 3
    C_out: int = 3
    T: int = 3
    d: int = 128
    n_heads: int = 4
    n_stacks: int = 3
    groups: int = 8
    p: float = 2.0
    encoder_widths: tuple = (32, 64, 128)
    deconv_kernel: int = 4

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.d % self.groups:
            raise ValueError(f"d={self.d} is not divisible by groups={self.groups}")
        if self.H % 4 or self.W % 4:
            raise ValueError(f"patch extent {self.H}x{self.W} must be divisible by 4")
        if len(self.encoder_widths) != 3 or self.encoder_widths[-1] != self.d:
            raise ValueError(f"encoder_widths must have 3 entries ending in d={self.d}")
        if self.C_out not in (2, 3) and self.C_out != self.C:
            raise ValueError(f"C_out must be 3 (raw) or 2 (motion), got {self.C_out}")
        if self.T < 0 or self.n_stacks < 0 or self.p <= 0:
            raise ValueError("T and n_stacks must be non-negative and p positive")
        if self.deconv_kernel < 2 or self.deconv_kernel % 2:
            raise ValueError("deconv_kernel must be an even size >= 2 to double the extent")

    @property
    def positions(self) -> int:
        return 2 * self.T + 1

    @property
    def h(self) -> int:
        return self.H // 4

    @property
    def w(self) -> int:
        return self.W // 4

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def is_motion(self) -> bool:
        return self.C_out == 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder_widths"] = list(self.encoder_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def for_branch(self, C_out: int) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "C_out": C_out})


def _conv_shapes(cfg: ModelConfig):
    """Parameter shapes in initialization order: name -> (shape, fan_in, kind)."""
    c1, c2, c3 = cfg.encoder_widths
    d, dh, k = cfg.d, cfg.head_dim, cfg.deconv_kernel
    shapes = OrderedDict()

    def conv(name, c_in, c_out, ksize=3):
        shapes[f"{name}.weight"] = ((c_out, c_in, ksize, ksize), c_in * ksize * ksize, "uniform")
        shapes[f"{name}.bias"] = ((c_out,), None, "zeros")

    def deconv(name, c_in, c_out):
        shapes[f"{name}.weight"] = ((c_in, c_out, k, k), c_in * k * k, "uniform")
        shapes[f"{name}.bias"] = ((c_out,), None, "zeros")

    def norm(name, c):
        shapes[f"{name}.weight"] = ((c,), None, "ones")
        shapes[f"{name}.bias"] = ((c,), None, "zeros")

    conv("enc1a", cfg.C, c1)
    norm("enc1a_bn", c1)
    conv("enc1b", c1, c1)
    norm("enc1b_bn", c1)
    conv("enc2", c1, c2)
    norm("enc2_bn", c2)
    conv("enc3", c2, c3)
    norm("enc3_bn", c3)
    shapes["pe"] = ((cfg.positions, d), None, "zeros")
    for s in range(cfg.n_stacks):
        conv(f"att{s}.q", d, d)
        conv(f"att{s}.kv", d, d)
        for head in range(cfg.n_heads):
            conv(f"att{s}.net{head}", 2 * dh, 1)
        conv(f"att{s}.ffn", d, d)
        norm(f"att{s}.gn", d)
    deconv("dec1", c3, c2)
    norm("dec1_bn", c2)
    deconv("dec2", c2, c1)
    norm("dec2_bn", c1)
    conv("dec3", c1, cfg.C_out)
    return shapes


_BN_LAYERS = ("enc1a_bn", "enc1b_bn", "enc2_bn", "enc3_bn", "dec1_bn", "dec2_bn")


@dataclass
class StateModel:
    """Parameters, BatchNorm running statistics and mode of one STATE branch."""

    config: ModelConfig
    params: "OrderedDict[str, Tensor]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    training: bool = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> "StateModel":
        self.training = True
        return self

    def eval(self) -> "StateModel":
        self.training = False
        return self

    def requires_grad_(self, flag: bool) -> "StateModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """All persistent arrays, parameters first then running statistics."""
        out = OrderedDict((name, p.data) for name, p in self.params.items())
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: stored shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(arrays[name], dtype=self.buffers[name].dtype)

    def __call__(self, cube):
        return state_forward(cube, self)


def init_model(config: ModelConfig, seed: int, dtype=None) -> StateModel:
    """Deterministic initialization: conv kernels U[-s, s] with s = sqrt(1/fan_in), zero biases, PE zeros."""
    dtype = np.dtype(dtype or ad.get_default_dtype())
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, (shape, fan_in, kind) in _conv_shapes(config).items():
        if kind == "uniform":
            s = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-s, s, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    buffers = OrderedDict()
    for name in _BN_LAYERS:
        c = params[f"{name}.weight"].shape[0]
        buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)
    return StateModel(config=config, params=params, buffers=buffers)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    return OrderedDict((name, spec[0]) for name, spec in _conv_shapes(config).items())


# -- building blocks --------------------------------------------------------
def _conv(model: StateModel, name: str, x: Tensor, padding: int = 1) -> Tensor:
    return ad.conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], stride=1, padding=padding)


def _bn(model: StateModel, name: str, x: Tensor) -> Tensor:
    return ad.batch_norm(
        x,
        model.params[f"{name}.weight"],
        model.params[f"{name}.bias"],
        model.buffers[f"{name}.running_mean"],
        model.buffers[f"{name}.running_var"],
        training=model.training,
    )


def _conv_relu_bn(model: StateModel, name: str, x: Tensor) -> Tensor:
    return _bn(model, f"{name}_bn", ad.relu(_conv(model, name, x)))


def _deconv_relu_bn(model: StateModel, name: str, x: Tensor) -> Tensor:
    k = model.config.deconv_kernel
    y = ad.conv_transpose2d(
        x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], stride=2, padding=(k - 2) // 2
    )
    return _bn(model, f"{name}_bn", ad.relu(y))


def _as_batch(cube, cfg: ModelConfig, channels: int, height: int, width: int, what: str):
    cube = cube if isinstance(cube, Tensor) else Tensor(cube)
    single = cube.ndim == 4
    if single:
        cube = ad.reshape(cube, (1,) + cube.shape)
    expected = (cfg.positions, channels, height, width)
    if cube.ndim != 5 or cube.shape[1:] != expected:
        raise ad.ShapeError(f"{what}: expected (n, {expected}) or {expected}, got {cube.shape}")
    return cube, single


def encode(cube, model: StateModel) -> Tensor:
    """(P, C, H, W) -> (P, d, H/4, W/4); a leading batch axis is preserved."""
    cfg = model.config
    x, single = _as_batch(cube, cfg, cfg.C, cfg.H, cfg.W, "encode")
    n = x.shape[0]
    z = ad.reshape(x, (n * cfg.positions, cfg.C, cfg.H, cfg.W))
    z = _conv_relu_bn(model, "enc1a", z)
    z = _conv_relu_bn(model, "enc1b", z)
    z = ad.maxpool2d(_conv_relu_bn(model, "enc2", z))
    z = ad.maxpool2d(_conv_relu_bn(model, "enc3", z))
    shape = (cfg.positions, cfg.d, cfg.h, cfg.w)
    return ad.reshape(z, shape if single else (n,) + shape)


def attention_layer(z, model: StateModel, stack: int, return_attention: bool = False):
    """One attention-stack layer; output has the input's shape.

    With ``return_attention`` also returns ``{"weights": [per-head (n, P, P, h, w)
    softmax weights indexed (query, key)], "multihead": pre-residual output}``.
    """
    cfg = model.config
    z, single = _as_batch(z, cfg, cfg.d, cfg.h, cfg.w, "attention_layer")
    n, P, d, h, w = z.shape
    dh = cfg.head_dim
    prefix = f"att{stack}"
    flat = ad.reshape(z, (n * P, d, h, w))

    q = ad.reshape(ad.leaky_relu(_conv(model, f"{prefix}.q", flat)), (n, P, d, h, w))
    kv = ad.reshape(ad.leaky_relu(_conv(model, f"{prefix}.kv", flat)), (n, P, d, h, w))
    pe = ad.reshape(model.params["pe"], (1, P, d, 1, 1))
    q = q + pe
    k = kv + pe

    heads, weights = [], []
    for head in range(cfg.n_heads):
        ch = slice(head * dh, (head + 1) * dh)
        qh = ad.reshape(q[:, :, ch], (n * P, dh, h, w))
        kh = ad.reshape(k[:, :, ch], (n * P, dh, h, w))
        vh = kv[:, :, ch]
        kernel = model.params[f"{prefix}.net{head}.weight"]
        # conv over concat(Q_i, K_j) splits into a Q part and a K part
        aq = ad.conv2d(qh, kernel[:, :dh], padding=1)
        ak = ad.conv2d(kh, kernel[:, dh:], model.params[f"{prefix}.net{head}.bias"], padding=1)
        scores = ad.leaky_relu(ad.reshape(aq, (n, P, 1, h, w)) + ad.reshape(ak, (n, 1, P, h, w)))
        attn = ad.softmax(scores, axis=2)
        mixed = ad.reshape(attn, (n, P, P, 1, h, w)) * ad.reshape(vh, (n, 1, P, dh, h, w))
        heads.append(ad.sum_(mixed, axis=2))
        weights.append(attn)
    multihead = ad.concat(heads, axis=2)

    u = z + multihead
    u_flat = ad.reshape(u, (n * P, d, h, w))
    v = u_flat + ad.leaky_relu(_conv(model, f"{prefix}.ffn", u_flat))
    out = ad.group_norm(v, cfg.groups, model.params[f"{prefix}.gn.weight"], model.params[f"{prefix}.gn.bias"])
    out = ad.reshape(out, (P, d, h, w) if single else (n, P, d, h, w))
    if return_attention:
        return out, {"weights": weights, "multihead": multihead}
    return out


def decode(z, model: StateModel) -> Tensor:
    """(P, d, h, w) -> (P, C_out, H, W), linear output."""
    cfg = model.config
    x, single = _as_batch(z, cfg, cfg.d, cfg.h, cfg.w, "decode")
    n = x.shape[0]
    y = ad.reshape(x, (n * cfg.positions, cfg.d, cfg.h, cfg.w))
    y = _deconv_relu_bn(model, "dec1", y)
    y = _deconv_relu_bn(model, "dec2", y)
    y = _conv(model, "dec3", y)
    shape = (cfg.positions, cfg.C_out, cfg.H, cfg.W)
    return ad.reshape(y, shape if single else (n,) + shape)


def state_forward(cube, model: StateModel) -> Tensor:
    z = encode(cube, model)
    for s in range(model.config.n_stacks):
        z = attention_layer(z, model, s)
    return decode(z, model)
