"""Windowed 2-D DFTs, window fold/unfold and the pixel-frequency map.

Spectra are stored centred: the DC bin of an ``n x n`` transform sits at
``(n // 2, n // 2)`` and index ``u`` holds frequency ``(u - n // 2) / n``.
The transforms are separable matrix products with a precomputed centred DFT
matrix, so a ``p x p`` window costs two ``p x p`` matmuls.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from pathlib import Path

import numpy as np


@lru_cache(maxsize=None)
def centered_dft_matrix(n: int) -> np.ndarray:
    """``F[u, x] = exp(-2j*pi*(u - n//2)*x/n)``; rows ordered low-to-high frequency."""
    k = np.arange(n) - n // 2
    x = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(k, x) / n)
    F.setflags(write=False)
    return F


def _check_square(a: np.ndarray) -> int:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square trailing dims, got {a.shape}")
    return a.shape[-1]


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalised forward 2-D DFT over the last two axes, centred output."""
    x = np.asarray(x)
    n = _check_square(x)
    F = centered_dft_matrix(n)
    return F @ x @ F.T


def idft2(X: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2` (``1/n^2`` normalised); returns a complex array."""
    X = np.asarray(X)
    n = _check_square(X)
    Fh = centered_dft_matrix(n).conj()
    return (Fh.T @ X @ Fh) / (n * n)


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _twiddle_is_trivial(k: int, n: int) -> bool:
    # exp(-2j*pi*k/n) is one of 1, -1, j, -j
    return (4 * k) % n == 0


def fft_radix2(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Iterative decimation-in-time FFT along ``axis`` (length a power of two).

    Natural (uncentred) output order, same as ``numpy.fft.fft``.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    a = x[..., _bit_reverse(n)].copy()
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(-2j * np.pi * np.arange(half) / m)
        a = a.reshape(a.shape[:-1] + (n // m, m))
        top = a[..., :half].copy()
        bot = a[..., half:] * w
        a[..., :half] = top + bot
        a[..., half:] = top - bot
        a = a.reshape(a.shape[:-2] + (n,))
        m *= 2
    return np.moveaxis(a, -1, axis)


def fft_flops(n: int) -> int:
    """Real floating-point operations of :func:`fft_radix2` on one length-``n`` vector.

    Each butterfly costs two complex additions (4 real ops); a twiddle that is
    not one of 1, -1, j, -j adds a complex multiply (4 mults + 2 adds).
    """
    ops = 0
    m = 2
    while m <= n:
        half = m // 2
        nontrivial = sum(not _twiddle_is_trivial(k, m) for k in range(half))
        ops += (n // m) * (half * 4 + nontrivial * 6)
        m *= 2
    return ops


def fft2_flops(p: int) -> int:
    """Row-then-column 2-D FFT of a ``p x p`` window."""
    return 2 * p * fft_flops(p)


def mirror_index(n: int) -> np.ndarray:
    """Index of the conjugate-mirror bin (frequency ``-k``) in centred storage."""
    # for even n: (n - u) % n; works for odd n through the frequency map
    k = np.arange(n) - n // 2
    return (-k + n // 2) % n


def unfold_windows(x: np.ndarray, p: int) -> np.ndarray:
    """Split ``(..., C, H, W)`` into ``(..., H*W/p^2, C, p, p)`` windows, row-major."""
    x = np.asarray(x)
    *lead, C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"feature size {H}x{W} is not divisible by window {p}")
    nh, nw = H // p, W // p
    nl = len(lead)
    w = x.reshape(*lead, C, nh, p, nw, p)
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return w.transpose(axes).reshape(*lead, nh * nw, C, p, p)


def fold_windows(w: np.ndarray, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`unfold_windows`."""
    w = np.asarray(w)
    *lead, n, C, p, p2 = w.shape
    if p != p2 or H % p or W % p or n != (H // p) * (W // p):
        raise ValueError(f"cannot fold {w.shape} into {H}x{W}")
    nh, nw = H // p, W // p
    nl = len(lead)
    x = w.reshape(*lead, nh, nw, C, p, p)
    axes = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1, nl + 4)
    return x.transpose(axes).reshape(*lead, C, H, W)


def pixel_frequency(u: int, v: int, H: int, W: int, fs: float = 1.0) -> tuple[float, float]:
    """Frequency of bin ``(u, v)`` in a centred ``H x W`` spectrum.

    The horizontal frequency is normalised by ``W``; for square windows this
    is the same as normalising by ``H``.
    """
    if not (0 <= u < H and 0 <= v < W):
        raise IndexError(f"bin ({u}, {v}) outside a {H}x{W} spectrum")
    return (u - H / 2) / H * fs, (v - W / 2) / W * fs


def frequency_grid(H: int, W: int, fs: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    fu = (np.arange(H) - H / 2) / H * fs
    fv = (np.arange(W) - W / 2) / W * fs
    return np.meshgrid(fu, fv, indexing="ij")


def radial_power_spectrum(x: np.ndarray, n_bins: int, fs: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``|DFT|^2`` per radial-frequency bin.

    ``x`` is ``(H, W)`` or ``(C, H, W)``; with channels the power spectra are
    averaged over channels. Bins are uniform on ``[0, fs*sqrt(2)/2]``.
    Returns ``(bin_centers, power)``; empty bins report zero power.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    power = (np.abs(dft2(x)) ** 2).mean(axis=0)
    fu, fv = frequency_grid(*power.shape, fs=fs)
    r = np.hypot(fu, fv)
    edges = np.linspace(0.0, 0.5 * np.sqrt(2.0) * fs, n_bins + 1)
    idx = np.clip(np.digitize(r, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(idx.ravel(), minlength=n_bins)
    sums = np.bincount(idx.ravel(), weights=power.ravel(), minlength=n_bins)
    out = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    return 0.5 * (edges[:-1] + edges[1:]), out


def write_spectrum_csv(path: str | Path, centers: np.ndarray, power: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center_frequency", "power"])
        for c, pw in zip(centers, power):
            w.writerow([repr(float(c)), repr(float(pw))])
