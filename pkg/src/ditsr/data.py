"""Procedural HR/LR training pairs.

HR images mix oriented sinusoids with flat-shaded rectangles and discs. The
LR twin is Gaussian blur, decimation, additive noise and a bicubic upsample
back to the HR grid, so ``y0 - x0`` is an elementwise residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import load_tensors, save_tensors
from .tensor import make_rng


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_samples: int = 64
    hr_size: int = 64
    scale: int = 4
    blur_sigma: float = 1.2
    noise_sigma: float = 0.01
    channels: int = 1
    max_cycles: float = 6.0  # sinusoid cycles per image; 6/64 stays below the x4 LR Nyquist
    seed: int = 0

    def validate(self, multiple: int = 1) -> None:
        if self.hr_size % self.scale:
            raise ValueError(f"hr_size {self.hr_size} not divisible by scale {self.scale}")
        if self.hr_size % multiple:
            raise ValueError(f"hr_size {self.hr_size} not a multiple of {multiple}")


@dataclass
class PairSet:
    x0: np.ndarray  # (N, c, H, W) high resolution
    y0: np.ndarray  # (N, c, H, W) degraded, upsampled back

    def __len__(self) -> int:
        return len(self.x0)

    def split(self, n_train: int) -> tuple[PairSet, PairSet]:
        return PairSet(self.x0[:n_train], self.y0[:n_train]), PairSet(self.x0[n_train:], self.y0[n_train:])


def _keys(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
        np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, factor: int) -> np.ndarray:
    """``(n_in*factor, n_in)`` interpolation matrix; LR sample ``i`` sits at HR ``i*factor``."""
    n_out = n_in * factor
    pos = np.arange(n_out) / factor
    M = np.zeros((n_out, n_in))
    base = np.floor(pos).astype(int)
    for off in range(-1, 3):
        src = base + off
        w = _keys(pos - src)
        np.add.at(M, (np.arange(n_out), np.clip(src, 0, n_in - 1)), w)
    return M


def bicubic_upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Separable bicubic upsampling of the last two axes (edge samples replicated)."""
    Mh = bicubic_matrix(img.shape[-2], factor)
    Mw = bicubic_matrix(img.shape[-1], factor)
    return Mh @ img @ Mw.T


def degrade(x0: np.ndarray, spec: ToyDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.scale
    blurred = gaussian_filter(x0, sigma=(0,) * (x0.ndim - 2) + (spec.blur_sigma,) * 2, mode="reflect")
    lr = blurred[..., ::s, ::s]
    if spec.noise_sigma > 0:
        lr = lr + spec.noise_sigma * rng.standard_normal(lr.shape)
    return bicubic_upsample(lr, s)


def hr_pattern(size: int, channels: int, rng: np.random.Generator, max_cycles: float = 6.0) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((channels, size, size))
    for c in range(channels):
        layer = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.0, max_cycles) / size
            phase = rng.uniform(0, 2 * np.pi)
            layer += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        for _ in range(rng.integers(1, 4)):
            level = rng.uniform(-1.5, 1.5)
            if rng.random() < 0.5:
                r0, c0 = rng.integers(0, size - 8, size=2)
                h, w = rng.integers(6, size // 2, size=2)
                layer[r0:r0 + h, c0:c0 + w] = level
            else:
                cy, cx = rng.uniform(0, size, size=2)
                rad = rng.uniform(4, size / 4)
                layer[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = level
        lo, hi = layer.min(), layer.max()
        img[c] = (layer - lo) / (hi - lo) if hi > lo else 0.5
    return img


def synth_dataset(spec: ToyDatasetSpec) -> PairSet:
    spec.validate()
    rng = make_rng(spec.seed)
    x0 = np.stack([hr_pattern(spec.hr_size, spec.channels, rng, spec.max_cycles) for _ in range(spec.n_samples)])
    y0 = degrade(x0, spec, rng)
    return PairSet(x0, y0)


HELD_OUT = 32


def toy_split(spec: ToyDatasetSpec | None = None, held_out: int = HELD_OUT) -> tuple[PairSet, PairSet]:
    """Train/test split of the toy set; the last ``held_out`` pairs are never trained on."""
    spec = spec or ToyDatasetSpec(n_samples=160)
    if spec.n_samples <= held_out:
        raise ValueError(f"need more than {held_out} samples, got {spec.n_samples}")
    return synth_dataset(spec).split(spec.n_samples - held_out)


def save_pairs(path, pairs: PairSet) -> None:
    save_tensors(path, {"x0": pairs.x0, "y0": pairs.y0})


def load_pairs(path) -> PairSet:
    t = load_tensors(path)
    if set(t) != {"x0", "y0"}:
        raise ValueError(f"{path}: expected tensors x0 and y0, found {sorted(t)}")
    return PairSet(t["x0"], t["y0"])
