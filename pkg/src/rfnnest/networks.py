"""Encoder, residual fusion networks (RFN_1..4) and the nest-connected decoder."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError, InputError, ShapeError

NUM_SCALES = 4
SCHEMA_VERSION = 1


@dataclass
class ArchitectureConfig:
    """Layer widths and wiring.

    Pool placement: stem conv at full resolution, then a 2x2 max pool before
    each of the four encoder blocks. Feature scale m (1-based) therefore sits
    at ``H / 2**m``. The decoder output is upsampled once before the head conv
    to restore full resolution.
    """

    stem_channels: int = 16
    scale_channels: list[int] = field(default_factory=lambda: [64, 112, 160, 208])
    rfn_hidden_channels: list[int] | None = None
    nest_connections: bool = True
    kernel: int = 3
    output_kernel: int = 1
    pad_mode: str = "reflect"
    stem_activation: bool = True

    def __post_init__(self):
        self.scale_channels = [int(c) for c in self.scale_channels]
        if len(self.scale_channels) != NUM_SCALES:
            raise ConfigError(f"exactly {NUM_SCALES} scale widths are required, got {len(self.scale_channels)}")
        if self.rfn_hidden_channels is None:
            self.rfn_hidden_channels = list(self.scale_channels)
        self.rfn_hidden_channels = [int(c) for c in self.rfn_hidden_channels]
        if len(self.rfn_hidden_channels) != NUM_SCALES:
            raise ConfigError("rfn_hidden_channels needs one entry per scale")
        if min([self.stem_channels, *self.scale_channels, *self.rfn_hidden_channels]) <= 0:
            raise ConfigError("all channel counts must be positive")
        for k in (self.kernel, self.output_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if self.pad_mode not in ag.PAD_MODES:
            raise ConfigError(f"pad_mode must be one of {ag.PAD_MODES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Decoder grid (UNet++ style, rows = scales 1..3 that receive upsampled input).
DECODER_NODES = [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (1, 3)]


def decoder_node_inputs(m: int, n: int, nest: bool) -> list[tuple[int, int]]:
    """Grid nodes concatenated to form the input of node (m, n); the last entry is upsampled."""
    same_row = [(m, j) for j in range(n)] if nest else [(m, n - 1)]
    return same_row + [(m + 1, n - 1)]


class ModelWeights:
    """Ordered, name-addressed parameter collection for encoder, RFN_1..4 and decoder."""

    GROUPS = ("encoder", "rfn1", "rfn2", "rfn3", "rfn4", "decoder")

    def __init__(self, params: dict[str, Parameter] | None = None):
        self.params: dict[str, Parameter] = dict(params or {})

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, data)

    def group(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.split(".", 1)[0] == prefix]

    def rfn_params(self) -> list[Parameter]:
        return [p for g in ("rfn1", "rfn2", "rfn3", "rfn4") for p in self.group(g)]

    def set_trainable(self, groups, flag: bool) -> None:
        for g in groups:
            for p in self.group(g):
                p.trainable = flag

    def freeze_autoencoder(self) -> None:
        """Stage-2 setup: only the RFN blocks remain trainable."""
        self.set_trainable(("encoder", "decoder"), False)
        self.set_trainable(("rfn1", "rfn2", "rfn3", "rfn4"), True)

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            {n: Parameter(n, p.data.astype(dtype), trainable=p.trainable) for n, p in self.params.items()}
        )

    def copy(self) -> "ModelWeights":
        return ModelWeights({n: Parameter(n, p.data.copy(), trainable=p.trainable) for n, p in self.params.items()})

    def digest(self, groups=None) -> str:
        """SHA-256 over names and raw bytes, optionally restricted to some groups."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            if groups is not None and name.split(".", 1)[0] not in groups:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------
def _conv_specs(cfg: ArchitectureConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel) for every conv in the model, in canonical order."""
    k = cfg.kernel
    c = cfg.scale_channels
    specs = [("encoder.stem", 1, cfg.stem_channels, k)]
    prev = cfg.stem_channels
    for m in range(NUM_SCALES):
        specs.append((f"encoder.block{m + 1}.conv1", prev, c[m], k))
        specs.append((f"encoder.block{m + 1}.conv2", c[m], c[m], k))
        prev = c[m]
    for m in range(NUM_SCALES):
        ch, hid = c[m], cfg.rfn_hidden_channels[m]
        p = f"rfn{m + 1}"
        specs += [
            (f"{p}.conv1", ch, hid, k),
            (f"{p}.conv2", ch, hid, k),
            (f"{p}.conv3", 2 * hid, ch, k),
            (f"{p}.conv4", ch, ch, k),
            (f"{p}.conv5", ch, ch, k),
            (f"{p}.conv6", 2 * ch, ch, 1),
        ]
    for m, n in DECODER_NODES:
        c_in = sum(c[i - 1] for i, _ in decoder_node_inputs(m, n, cfg.nest_connections))
        specs.append((f"decoder.node{m}_{n}.conv1", c_in, c[m - 1], k))
        specs.append((f"decoder.node{m}_{n}.conv2", c[m - 1], c[m - 1], k))
    specs.append(("decoder.head", c[0], 1, cfg.output_kernel))
    return specs


def init_weights(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Kaiming-uniform (fan-in, ReLU gain) conv weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    w = ModelWeights()
    for name, cin, cout, k in _conv_specs(cfg):
        bound = np.sqrt(6.0 / (cin * k * k))
        w.add(f"{name}.weight", rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype))
        w.add(f"{name}.bias", np.zeros(cout, dtype=dtype))
    return w


def infer_architecture(w: ModelWeights, pad_mode: str = "reflect") -> ArchitectureConfig:
    """Recover the layer widths and nest flag from parameter shapes."""
    try:
        stem = w["encoder.stem.weight"].shape
        scale = [w[f"encoder.block{m}.conv2.weight"].shape[0] for m in range(1, 5)]
        hidden = [w[f"rfn{m}.conv1.weight"].shape[0] for m in range(1, 5)]
        node12_in = w["decoder.node1_2.conv1.weight"].shape[1]
        head = w["decoder.head.weight"].shape
    except KeyError as exc:
        raise ConfigError(f"weights are missing parameter {exc}") from None
    nest = node12_in == 2 * scale[0] + scale[1]
    return ArchitectureConfig(
        stem_channels=stem[0],
        scale_channels=scale,
        rfn_hidden_channels=hidden,
        nest_connections=nest,
        kernel=stem[2],
        output_kernel=head[2],
        pad_mode=pad_mode,
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------
@dataclass
class CropRecord:
    height: int
    width: int
    padded_height: int
    padded_width: int

    @property
    def is_noop(self) -> bool:
        return self.height == self.padded_height and self.width == self.padded_width


def pad_input(img: Tensor) -> tuple[Tensor, CropRecord]:
    """Reflection-pad bottom/right so both spatial dims are multiples of 16."""
    if img.ndim != 4:
        raise ShapeError(f"expected (N,1,H,W) image, got {img.shape}")
    h, w = img.shape[2:]
    if h < 16 or w < 16:
        raise InputError(f"images must be at least 16x16, got {h}x{w}")
    ph, pw = -(-h // 16) * 16, -(-w // 16) * 16
    rec = CropRecord(h, w, ph, pw)
    return ag.reflect_pad_to(img, ph, pw), rec


def unpad(img: Tensor, rec: CropRecord) -> Tensor:
    return img if rec.is_noop else ag.crop(img, rec.height, rec.width)


def _conv(x: Tensor, w: ModelWeights, name: str, cfg: ArchitectureConfig, act: bool = True) -> Tensor:
    weight = w[f"{name}.weight"]
    k = weight.shape[2]
    y = ag.conv2d(x, weight, w[f"{name}.bias"], padding=k // 2, pad_mode=cfg.pad_mode)
    return ag.relu(y) if act else y


def encode(img: Tensor, w: ModelWeights, cfg: ArchitectureConfig) -> list[Tensor]:
    """Multi-scale features phi[0..3] (scales 1..4) of a padded (N,1,H,W) image."""
    h, wd = img.shape[2:]
    if h % 16 or wd % 16:
        raise ShapeError(f"encode needs spatial dims divisible by 16, got {h}x{wd}; call pad_input first")
    x = _conv(img, w, "encoder.stem", cfg, act=cfg.stem_activation)
    phi = []
    for m in range(1, NUM_SCALES + 1):
        x = ag.maxpool2(x)
        x = _conv(x, w, f"encoder.block{m}.conv1", cfg)
        x = _conv(x, w, f"encoder.block{m}.conv2", cfg)
        phi.append(x)
    return phi


def rfn_fuse(phi_ir: Tensor, phi_vi: Tensor, m: int, w: ModelWeights, cfg: ArchitectureConfig) -> Tensor:
    """Residual fusion network for scale ``m`` (1-based)."""
    if phi_ir.shape != phi_vi.shape:
        raise InputError(f"RFN inputs differ in shape: {phi_ir.shape} vs {phi_vi.shape}")
    p = f"rfn{m}"
    a = _conv(phi_ir, w, f"{p}.conv1", cfg)
    b = _conv(phi_vi, w, f"{p}.conv2", cfg)
    r = _conv(ag.concat_channels([a, b]), w, f"{p}.conv3", cfg)
    r = _conv(r, w, f"{p}.conv4", cfg)
    r = _conv(r, w, f"{p}.conv5", cfg)
    init = _conv(ag.concat_channels([phi_ir, phi_vi]), w, f"{p}.conv6", cfg)
    return r + init


def decode(phi: list[Tensor], w: ModelWeights, cfg: ArchitectureConfig, nest: bool | None = None,
           clamp: bool = False) -> Tensor:
    """Reconstruct a 1-channel image at twice the resolution of phi[0].

    ``nest`` defaults to the config flag; it must agree with the weight shapes.
    """
    if len(phi) != NUM_SCALES:
        raise ShapeError(f"decode expects {NUM_SCALES} feature maps, got {len(phi)}")
    nest = cfg.nest_connections if nest is None else nest
    grid: dict[tuple[int, int], Tensor] = {(m, 0): phi[m - 1] for m in range(1, NUM_SCALES + 1)}
    for m, n in DECODER_NODES:
        srcs = decoder_node_inputs(m, n, nest)
        parts = [grid[s] for s in srcs[:-1]] + [ag.upsample2(grid[srcs[-1]])]
        x = _conv(ag.concat_channels(parts), w, f"decoder.node{m}_{n}.conv1", cfg)
        grid[(m, n)] = _conv(x, w, f"decoder.node{m}_{n}.conv2", cfg)
    out = _conv(ag.upsample2(grid[(1, 3)]), w, "decoder.head", cfg, act=False)
    return ag.clamp(out, 0.0, 1.0) if clamp else out


def reconstruct(img: Tensor, w: ModelWeights, cfg: ArchitectureConfig, clamp: bool = False) -> Tensor:
    """Autoencoder pass used by stage-1 training."""
    padded, rec = pad_input(img)
    return unpad(decode(encode(padded, w, cfg), w, cfg, clamp=clamp), rec)


def fuse_features(phi_ir, phi_vi, w: ModelWeights, cfg: ArchitectureConfig, strategy=None) -> list[Tensor]:
    """Fuse every scale with the RFN blocks, or with a handcrafted ``strategy(a, b)`` on raw arrays."""
    if len(phi_ir) != NUM_SCALES or len(phi_vi) != NUM_SCALES:
        raise ShapeError("feature sets must have 4 scales")
    if strategy is None:
        return [rfn_fuse(phi_ir[m], phi_vi[m], m + 1, w, cfg) for m in range(NUM_SCALES)]
    return [Tensor(strategy(phi_ir[m].data, phi_vi[m].data)) for m in range(NUM_SCALES)]


def fuse_forward(ir: Tensor, vi: Tensor, w: ModelWeights, cfg: ArchitectureConfig, strategy=None,
                 clamp: bool = True) -> Tensor:
    """End-to-end fusion: pad, encode both, fuse per scale, decode, crop."""
    if ir.shape != vi.shape:
        raise InputError(f"infrared {ir.shape} and visible {vi.shape} images differ in size")
    pir, rec = pad_input(ir)
    pvi, _ = pad_input(vi)
    phi_f = fuse_features(encode(pir, w, cfg), encode(pvi, w, cfg), w, cfg, strategy)
    return unpad(decode(phi_f, w, cfg, clamp=clamp), rec)
