"""Denoiser construction, presets and parameter/FLOPs accounting.

Three layouts are supported:

* ``isotropic``: a stack of residual stages at one resolution and width.
* ``ushape``: encoder stages that halve resolution and widen channels, a
  mirrored decoder with concatenated skips. The deepest encoder stage is the
  bottleneck.
* ``ours``: the U-shape skeleton, but every transformer block runs at one
  reallocated width ``C_iso``; each stage projects in and out of it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import MODES, TransformerBlock, sinusoidal_embed
from .nn import Linear, Module, norm_groups
from .tensor import Tensor

ARCH_KINDS = ("isotropic", "ushape", "ours")


class ConfigError(ValueError):
    """Invalid denoiser configuration."""


class ResolutionError(ValueError):
    """Input resolution incompatible with the denoiser."""


@dataclass
class DenoiserConfig:
    arch_kind: str
    cond_mode: str
    blocks_per_stage: list[int]
    stage_channels: list[int]
    realloc_channel: int | None = None
    base_channel: int | None = None
    window: int = 8
    fft_window: int = 8
    heads: int = 8
    d_t: int = 128
    in_channels: int = 6
    out_channels: int = 3
    rel_bias: bool = True
    mlp_ratio: int = 4
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        self.stage_channels = [int(c) for c in self.stage_channels]
        if self.base_channel is None and self.stage_channels:
            self.base_channel = self.stage_channels[0]
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def n_downsamples(self) -> int:
        return 0 if self.arch_kind == "isotropic" else self.n_stages - 1

    @property
    def resolution_multiple(self) -> int:
        return 2 ** self.n_downsamples * max(self.window, self.fft_window)

    def block_width(self, stage: int) -> int:
        return self.realloc_channel if self.arch_kind == "ours" else self.stage_channels[stage]

    def validate(self) -> None:
        if self.arch_kind not in ARCH_KINDS:
            raise ConfigError(f"arch_kind must be one of {ARCH_KINDS}")
        if self.cond_mode not in MODES:
            raise ConfigError(f"cond_mode must be one of {MODES}")
        if not self.stage_channels or len(self.blocks_per_stage) != len(self.stage_channels):
            raise ConfigError("blocks_per_stage and stage_channels must have equal, non-zero length")
        if any(b < 1 for b in self.blocks_per_stage) or any(c < 1 for c in self.stage_channels):
            raise ConfigError("block counts and channels must be positive")
        if self.base_channel != self.stage_channels[0]:
            raise ConfigError("base_channel must equal the first stage width")
        if self.arch_kind == "ours":
            if self.realloc_channel is None:
                raise ConfigError("arch_kind 'ours' needs realloc_channel")
            lo, hi = min(self.stage_channels), max(self.stage_channels)
            if not lo < self.realloc_channel < hi:
                raise ConfigError(f"realloc_channel must lie strictly between {lo} and {hi}")
        elif self.realloc_channel is not None:
            raise ConfigError("realloc_channel is only meaningful for arch_kind 'ours'")
        if self.arch_kind == "isotropic" and len(set(self.stage_channels)) != 1:
            raise ConfigError("isotropic stages must share one width")
        for c in set(self.stage_channels) | {self.block_width(0)}:
            if c % self.heads:
                raise ConfigError(f"width {c} not divisible by {self.heads} heads")
            if c % norm_groups(c):
                raise ConfigError(f"width {c} not divisible by its norm groups")
        if self.window < 2 or self.window % 2:
            raise ConfigError("attention window must be even and >= 2")
        if self.fft_window < 2 or self.fft_window % 2:
            raise ConfigError("FFT window must be even and >= 2")
        if self.d_t % 2:
            raise ConfigError("time-embedding width must be even")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> DenoiserConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


_UNET = dict(blocks_per_stage=[6, 6, 6, 6], stage_channels=[160, 320, 320, 640])

PRESETS: dict[str, dict] = {
    "isotropic": dict(arch_kind="isotropic", cond_mode="adaln", blocks_per_stage=[6] * 5, stage_channels=[160] * 5),
    "ushape": dict(arch_kind="ushape", cond_mode="adaln", **_UNET),
    "ours_adaln": dict(arch_kind="ours", cond_mode="adaln", realloc_channel=192, **_UNET),
    "ours_adafm": dict(arch_kind="ours", cond_mode="adafm", realloc_channel=192, **_UNET),
    "ours_lite": dict(arch_kind="ours", cond_mode="adafm", blocks_per_stage=[4, 4, 4],
                      stage_channels=[128, 256, 256], realloc_channel=160),
    "shallower_udit": dict(arch_kind="ushape", cond_mode="adaln", blocks_per_stage=[4, 4, 4, 4],
                           stage_channels=[160, 320, 320, 640]),
    "narrower_udit": dict(arch_kind="ushape", cond_mode="adaln", blocks_per_stage=[6, 6, 6, 6],
                          stage_channels=[144, 288, 288, 576]),
    # desk-scale configurations
    "micro": dict(arch_kind="ours", cond_mode="adafm", blocks_per_stage=[1, 1], stage_channels=[8, 16],
                  realloc_channel=12, window=4, fft_window=4, heads=2, d_t=16),
    # micro with single-channel images, the configuration trained on the toy set
    "toy": dict(arch_kind="ours", cond_mode="adafm", blocks_per_stage=[1, 1], stage_channels=[8, 16],
                realloc_channel=12, window=4, fft_window=4, heads=2, d_t=16, in_channels=2, out_channels=1),
}


def preset(name: str, **overrides) -> DenoiserConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return DenoiserConfig(**{**PRESETS[name], **overrides, "name": name})


# ----------------------------------------------------------- resampling
def space_to_depth(x: Tensor) -> Tensor:
    """``(B, H, W, C) -> (B, H/2, W/2, 4C)``; channel order is (row, col, c)."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ResolutionError(f"cannot downsample odd size {H}x{W}")
    x = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H // 2, W // 2, 4 * C))


def depth_to_space(x: Tensor) -> Tensor:
    B, H, W, C4 = x.shape
    C = C4 // 4
    x = T.reshape(x, (B, H, W, 2, 2, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, 2 * H, 2 * W, C))


def downsample(x: Tensor, proj: Linear) -> Tensor:
    return proj(space_to_depth(x))


def upsample(x: Tensor, proj: Linear) -> Tensor:
    return depth_to_space(proj(x))


# ----------------------------------------------------------------- model
class Stage(Module):
    """Blocks at one resolution, with optional width projections and residual tail."""

    def __init__(self, cfg: DenoiserConfig, index: int, rng, channels: int, width: int, residual: bool):
        self.entry = Linear(channels, width, rng) if width != channels or cfg.arch_kind == "ours" else None
        self.blocks = [
            TransformerBlock(width, cfg.heads, cfg.window, (k % 2) * (cfg.window // 2), cfg.fft_window,
                             cfg.d_t, cfg.cond_mode, rng, cfg.rel_bias, cfg.mlp_ratio)
            for k in range(cfg.blocks_per_stage[index])
        ]
        self.exit = Linear(width, channels, rng) if self.entry is not None else None
        self.tail = Linear(channels, channels, rng) if residual else None
        self.index = index

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.entry(x) if self.entry is not None else x
        for blk in self.blocks:
            h = blk(h, temb)
        if self.exit is not None:
            h = self.exit(h)
        return T.add(x, self.tail(h)) if self.tail is not None else h

    def flops(self, tokens: int) -> int:
        windows = tokens // self.blocks[0].p ** 2
        total = sum(b.flops(tokens, windows) for b in self.blocks)
        for lin in (self.entry, self.exit, self.tail):
            if lin is not None:
                total += lin.flops(tokens)
        return total


class Denoiser(Module):
    """``x0 = f(x_t, y, t)``; inputs are ``(B, c, H, W)`` arrays, outputs likewise."""

    def __init__(self, cfg: DenoiserConfig, rng):
        self.cfg = cfg
        C = cfg.stage_channels
        self.head_in = Linear(cfg.in_channels, C[0], rng)
        residual = cfg.arch_kind == "isotropic"
        self.enc = [Stage(cfg, i, rng, C[i], cfg.block_width(i), residual) for i in range(cfg.n_stages)]
        n_down = cfg.n_downsamples
        self.down = [Linear(4 * C[i], C[i + 1], rng) for i in range(n_down)]
        self.up = [Linear(C[i + 1], 4 * C[i], rng) for i in range(n_down)]
        self.fuse = [Linear(2 * C[i], C[i], rng) for i in range(n_down)]
        self.dec = [Stage(cfg, i, rng, C[i], cfg.block_width(i), False) for i in range(n_down)]
        self.head_out = Linear(C[0], cfg.out_channels, rng, zero=True)

    def check_resolution(self, H: int, W: int) -> None:
        m = self.cfg.resolution_multiple
        if H % m or W % m:
            raise ResolutionError(f"input {H}x{W} must be a multiple of {m} on both sides")

    def __call__(self, x_t, y, t) -> Tensor:
        x_t, y = T.as_tensor(x_t), T.as_tensor(y)
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t, y = T.reshape(x_t, (1,) + x_t.shape), T.reshape(y, (1,) + y.shape)
        if x_t.shape != y.shape:
            raise T.ShapeError(f"x_t {x_t.shape} and y {y.shape} differ")
        B, c, H, W = x_t.shape
        if 2 * c != self.cfg.in_channels:
            raise T.ShapeError(f"denoiser takes {self.cfg.in_channels // 2}-channel images, got {c}")
        self.check_resolution(H, W)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        temb = Tensor(sinusoidal_embed(t, self.cfg.d_t))

        h = T.transpose(T.concat([x_t, y], axis=1), (0, 2, 3, 1))
        h = self.head_in(h)
        skips = []
        for i, stage in enumerate(self.enc):
            h = stage(h, temb)
            if i < len(self.down):
                skips.append(h)
                h = downsample(h, self.down[i])
        for i in reversed(range(len(self.dec))):
            h = upsample(h, self.up[i])
            h = self.fuse[i](T.concat([h, skips[i]], axis=-1))
            h = self.dec[i](h, temb)
        out = T.transpose(self.head_out(h), (0, 3, 1, 2))
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def stages(self):
        """``(stage_index, module)`` for every parameterised piece, encoder first."""
        for i, s in enumerate(self.enc):
            yield i, s
        for i, s in enumerate(self.dec):
            yield i, s

    def block_widths(self) -> list[int]:
        """Width of every attention/MLP weight, read from the constructed tensors."""
        widths = []
        for _, stage in self.stages():
            for blk in stage.blocks:
                for w in (blk.attn.qkv.weight, blk.attn.proj.weight, blk.mlp.fc1.weight):
                    widths.append(w.shape[0])
                widths.append(blk.mlp.fc2.weight.shape[1])
        return widths

    def flops(self, resolution: int) -> list[int]:
        """Per-stage FLOPs for one ``resolution x resolution`` sample."""
        cfg = self.cfg
        per = [0] * cfg.n_stages
        tokens = [(resolution >> (i if cfg.arch_kind != "isotropic" else 0)) ** 2 for i in range(cfg.n_stages)]
        per[0] += self.head_in.flops(tokens[0]) + self.head_out.flops(tokens[0])
        for i, stage in self.stages():
            per[i] += stage.flops(tokens[i])
        for i in range(cfg.n_downsamples):
            per[i] += self.down[i].flops(tokens[i] // 4) + self.up[i].flops(tokens[i + 1])
            per[i] += self.fuse[i].flops(tokens[i])
        return per


def build_denoiser(config: DenoiserConfig, seed: int | None = 0) -> Denoiser:
    """Materialised model; ``seed=None`` builds zero-memory shape stubs for accounting."""
    config.validate()
    return Denoiser(config, None if seed is None else T.make_rng(seed))


def denoiser_forward(d: Denoiser, x_t, y, t) -> np.ndarray:
    return d(x_t, y, t).data


# ------------------------------------------------------------ accounting
@dataclass
class StageReport:
    stage: int
    resolution: int
    params: int
    flops: int
    share: float


def _stage_of(name: str) -> int:
    head, *rest = name.split(".")
    if head in ("enc", "dec", "down", "up", "fuse"):
        return int(rest[0])
    return 0


def param_category(name: str) -> str:
    if ".time." in name:
        return "conditioning"
    if ".attn." in name:
        return "attention"
    if ".mlp." in name:
        return "mlp"
    if ".norm" in name:
        return "norm"
    return "other"


def _resolutions(cfg: DenoiserConfig, resolution: int) -> list[int]:
    if cfg.arch_kind == "isotropic":
        return [resolution] * cfg.n_stages
    return [resolution >> i for i in range(cfg.n_stages)]


def count_params(config: DenoiserConfig, resolution: int = 64) -> tuple[int, list[StageReport]]:
    """Exact parameter count from the constructed weight shapes, split by stage."""
    model = build_denoiser(config, seed=None)
    per = [0] * config.n_stages
    for name, p in model.named_parameters():
        per[_stage_of(name)] += p.size
    total = sum(per)
    res = _resolutions(config, resolution)
    return total, [StageReport(i, res[i], per[i], 0, per[i] / total) for i in range(config.n_stages)]


def param_breakdown(config: DenoiserConfig) -> dict[str, int]:
    model = build_denoiser(config, seed=None)
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        cat = param_category(name)
        out[cat] = out.get(cat, 0) + p.size
    return out


def estimate_flops(config: DenoiserConfig, resolution: int) -> tuple[int, list[StageReport]]:
    """Analytic FLOPs (2 x multiply-accumulates) for one square sample."""
    model = build_denoiser(config, seed=None)
    model.check_resolution(resolution, resolution)
    per = model.flops(resolution)
    total = sum(per)
    res = _resolutions(config, resolution)
    return total, [StageReport(i, res[i], 0, per[i], per[i] / total) for i in range(config.n_stages)]


def stage_report(config: DenoiserConfig, resolution: int, by: str = "flops") -> list[StageReport]:
    """Per-stage params and FLOPs; ``share`` is taken from the ``by`` column."""
    _, pr = count_params(config, resolution)
    _, fr = estimate_flops(config, resolution)
    rows = [StageReport(a.stage, a.resolution, a.params, b.flops, b.share if by == "flops" else a.share)
            for a, b in zip(pr, fr)]
    return rows
