"""Transformer block of the denoiser and its two time-conditioning modes.

Feature maps are channels-last ``(B, H, W, C)`` tensors throughout, so
per-channel parameters broadcast over the trailing axis and linear layers
are plain matmuls.

AdaLN modulates each channel uniformly over space. AdaFM multiplies the
centred spectrum of every ``p x p`` window by one real ``p x p`` scale matrix,
shared across windows and channels, which amounts to a per-timestep spatial
filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fourier
from . import tensor as T
from .nn import GroupNorm, Linear, Module, new_param
from .tensor import Tensor

MODES = ("adaln", "adafm")

# imaginary residue above this means the scale matrix broke conjugate symmetry
IMAG_TOL = 1e-9


def sinusoidal_embed(t, d_t: int) -> np.ndarray:
    """Interleaved sin/cos embedding, ``emb[2i] = sin(t w_i)``, ``w_i = 10000^(-2i/d_t)``.

    ``t`` may be a scalar or a 1-D array of timesteps; the result has a
    trailing axis of width ``d_t``.
    """
    if d_t % 2:
        raise ValueError(f"embedding width must be even, got {d_t}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, d_t, 2) / d_t)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (d_t,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def cond_width(mode: str, channels: int, p: int) -> int:
    """Width of each of the two per-block conditioning vectors."""
    if mode == "adaln":
        return 3 * channels
    if mode == "adafm":
        return p * p
    raise ValueError(f"unknown conditioning mode {mode!r}")


def conditioning_param_count(mode: str, d_t: int, channels: int, p: int) -> int:
    """Weights of the final time-projection layer of one block (biases excluded)."""
    return d_t * cond_width(mode, channels, p) * 2


class TimeMLP(Module):
    """Per-block ``d_t -> d_t -> 2*width`` MLP; the output layer starts at zero."""

    def __init__(self, d_t: int, width: int, rng):
        self.fc1 = Linear(d_t, d_t, rng)
        self.fc2 = Linear(d_t, 2 * width, rng, zero=True)
        self.width = width

    def __call__(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        h = self.fc2(T.gelu(self.fc1(emb)))
        h = T.reshape(h, h.shape[:-1] + (2, self.width))
        return T.take(h, 0, axis=-2), T.take(h, 1, axis=-2)


def time_mlp(base_embed, mode: str, channels: int, p: int, rng) -> tuple[Tensor, Tensor]:
    """Run a freshly initialised time MLP; mostly useful for shape checks."""
    base_embed = T.as_tensor(base_embed)
    mlp = TimeMLP(base_embed.shape[-1], cond_width(mode, channels, p), rng)
    return mlp(base_embed)


# ------------------------------------------------------------------- AdaLN
def adaln_modulate(x: Tensor, f_time: Tensor) -> tuple[Tensor, Tensor]:
    """``x*(1+scale) + shift`` per channel; returns the modulated map and the gate.

    ``x`` is ``(B, H, W, C)`` (or ``(H, W, C)``) and ``f_time`` ``(B, 3C)`` (or ``(3C,)``).
    """
    x, f_time = T.as_tensor(x), T.as_tensor(f_time)
    C = x.shape[-1]
    if f_time.shape[-1] != 3 * C:
        raise T.ShapeError(f"AdaLN needs {3 * C} conditioning values, got {f_time.shape[-1]}")
    lead = f_time.shape[:-1]
    parts = T.reshape(f_time, lead + (3, C))
    scale, shift, gate = (T.take(parts, i, axis=-2) for i in range(3))
    spatial = lead + (1, 1, C)
    scale, shift = T.reshape(scale, spatial), T.reshape(shift, spatial)
    out = T.add(T.mul(x, T.add(scale, 1.0)), shift)
    return out, T.reshape(gate, spatial)


# ------------------------------------------------------------------- AdaFM
def adafm_symmetrize(S_raw):
    """Average every bin with its conjugate mirror so real inputs stay real.

    Accepts a numpy array or Tensor of shape ``(..., p, p)`` in centred layout.
    """
    p = S_raw.shape[-1]
    m = fourier.mirror_index(p)
    if isinstance(S_raw, Tensor):
        mirrored = T.take(T.take(S_raw, m, axis=S_raw.ndim - 2), m, axis=S_raw.ndim - 1)
        return T.scale(T.add(S_raw, mirrored), 0.5)
    S_raw = np.asarray(S_raw, dtype=np.float64)
    return 0.5 * (S_raw + S_raw[..., m, :][..., :, m])


def frequency_scale(f_time: Tensor, p: int) -> Tensor:
    """Scale matrix ``S = sym(1 + reshape(f_time, p, p))``; zero input gives the identity."""
    f_time = T.as_tensor(f_time)
    S = T.reshape(T.add(f_time, 1.0), f_time.shape[:-1] + (p, p))
    return adafm_symmetrize(S)


def _to_windows(x: np.ndarray, p: int) -> np.ndarray:
    # (B, H, W, C) -> (B, n, C, p, p)
    return fourier.unfold_windows(np.moveaxis(x, -1, -3), p)


def _from_windows(w: np.ndarray, H: int, W: int) -> np.ndarray:
    return np.moveaxis(fourier.fold_windows(w, H, W), -3, -1)


def _to_vectors(x: np.ndarray, p: int) -> np.ndarray:
    # (B, H, W, C) -> (B, n*C, p*p), each row one window of one channel
    B, H, W, C = x.shape
    w = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 5, 2, 4)
    return w.reshape(B, -1, p * p)


def _from_vectors(v: np.ndarray, p: int, H: int, W: int) -> np.ndarray:
    B, C = v.shape[0], v.shape[1] // ((H // p) * (W // p))
    w = v.reshape(B, H // p, W // p, C, p, p).transpose(0, 1, 4, 2, 5, 3)
    return w.reshape(B, H, W, C)


@lru_cache(maxsize=None)
def _window_dft(p: int) -> np.ndarray:
    """Centred DFT of a flattened ``p x p`` window as one ``p^2 x p^2`` matrix."""
    F = fourier.centered_dft_matrix(p)
    K = np.kron(F, F)
    K.setflags(write=False)
    return K


def spectral_operator(S: np.ndarray) -> np.ndarray:
    """Real matrix ``A`` with ``A @ vec(w) == vec(iDFT(S * DFT(w)))`` for real windows.

    ``S`` is ``(..., p, p)``; returns ``(..., p^2, p^2)``.
    """
    p = S.shape[-1]
    K = _window_dft(p)
    s = S.reshape(S.shape[:-2] + (1, p * p))
    A = (K.conj().T * s) @ K / (p * p)
    residue = np.abs(A.imag).max()
    if residue > IMAG_TOL:
        raise ValueError(f"AdaFM produced an imaginary residue of {residue:.3e}; scale matrix is not conjugate-symmetric")
    return np.ascontiguousarray(A.real)


def _adafm_fused(x: Tensor, S: Tensor, p: int) -> Tensor:
    B, H, W, C = x.shape
    Sd = S.data if S.ndim == 3 else S.data[None]
    A = spectral_operator(Sd)
    v = _to_vectors(x.data, p)
    out = _from_vectors(v @ np.ascontiguousarray(np.swapaxes(A, -1, -2)), p, H, W)

    def backward(g):
        gv = _to_vectors(g, p)
        gx = gS = None
        if x.requires_grad:
            gx = _from_vectors(gv @ A, p, H, W)
        if S.requires_grad:
            GA = np.swapaxes(gv, -1, -2) @ v
            if S.ndim == 2:
                GA = GA.sum(axis=0, keepdims=True)
            K = _window_dft(p)
            gS = ((K.conj() @ GA) * K).sum(axis=-1).real / (p * p)
            gS = gS.reshape(Sd.shape[0], p, p)
            if S.ndim == 2:
                gS = gS[0]
        return gx, gS

    return T._result(out, (x, S), backward)


def _adafm_pipeline(x: Tensor, S: Tensor, p: int) -> Tensor:
    B, H, W, C = x.shape
    Sd = S.data.reshape(S.shape[:-2] + (1, 1, p, p)) if S.ndim == 3 else S.data
    spec = fourier.dft2(_to_windows(x.data, p))
    back = fourier.idft2(Sd * spec)
    residue = np.abs(back.imag).max() if back.size else 0.0
    if residue > IMAG_TOL * max(1.0, np.abs(back.real).max()):
        raise ValueError(f"AdaFM produced an imaginary residue of {residue:.3e}; scale matrix is not conjugate-symmetric")
    out = _from_windows(back.real, H, W)

    def backward(g):
        G = fourier.dft2(_to_windows(g, p))
        gx = gS = None
        if x.requires_grad:
            # S real and mirror-symmetric makes the operator self-adjoint
            gx = _from_windows(fourier.idft2(Sd * G).real, H, W)
        if S.requires_grad:
            full = (spec * G.conj()).real / (p * p)
            gS = full.sum(axis=(1, 2)) if S.ndim == 3 else full.sum(axis=tuple(range(full.ndim - 2)))
        return gx, gS

    return T._result(out, (x, S), backward)


def adafm_modulate(x, S, p: int | None = None, fused: bool = True) -> Tensor:
    """Fold(iDFT(S * DFT(Unfold(x)))) with one real scale matrix per sample.

    ``x``: ``(B, H, W, C)``; ``S``: ``(B, p, p)`` (or one shared ``(p, p)``),
    centred and conjugate-symmetric. Unbatched ``(H, W, C)`` input is accepted.
    ``fused=False`` runs the explicit window DFT pipeline; the default applies
    the equivalent real ``p^2 x p^2`` operator to every window.
    """
    x, S = T.as_tensor(x), T.as_tensor(S)
    if x.ndim == 3:
        S1 = T.reshape(S, (1,) + S.shape[-2:]) if S.ndim == 2 else S
        return T.reshape(adafm_modulate(T.reshape(x, (1,) + x.shape), S1, p, fused), x.shape)
    p = S.shape[-1] if p is None else p
    if S.shape[-2:] != (p, p):
        raise T.ShapeError(f"scale matrix must be {p}x{p}, got {S.shape}")
    H, W = x.shape[1:3]
    if H % p or W % p:
        raise T.ShapeError(f"feature size {H}x{W} not divisible by FFT window {p}")
    return _adafm_fused(x, S, p) if fused else _adafm_pipeline(x, S, p)


# --------------------------------------------------------------- attention
@dataclass(frozen=True)
class AttentionWindowSpec:
    window: int
    shift: int
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.shift not in (0, self.window // 2):
            raise ValueError(f"shift must be 0 or {self.window // 2}")


def relative_position_index(w: int) -> np.ndarray:
    """``(w*w, w*w)`` index into a ``(2w-1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def window_partition(x: Tensor, w: int) -> Tensor:
    B, H, W, C = x.shape
    x = T.reshape(x, (B, H // w, w, W // w, w, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // w) * (W // w), w * w, C))


def window_merge(x: Tensor, w: int, B: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    x = T.reshape(x, (B, H // w, W // w, w, w, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


class WindowAttention(Module):
    """Multi-head self-attention inside ``w x w`` windows, optional cyclic shift."""

    def __init__(self, channels: int, heads: int, window: int, shift: int, rng, rel_bias: bool = True):
        if channels % heads:
            raise T.ShapeError(f"{channels} channels not divisible by {heads} heads")
        self.spec = AttentionWindowSpec(window, shift, heads, channels // heads)
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.bias_table = new_param(((2 * window - 1) ** 2, heads), rng, 0.02) if rel_bias else None
        self._index = relative_position_index(window)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        B, H, W, C = x.shape
        w = s.window
        if H % w or W % w:
            raise T.ShapeError(f"feature size {H}x{W} not divisible by attention window {w}")
        if s.shift:
            x = T.roll(x, (-s.shift, -s.shift), (1, 2))
        win = window_partition(x, w)
        n, N = win.shape[0], w * w
        qkv = T.reshape(self.qkv(win), (n, N, 3, s.heads, s.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (T.take(qkv, i, axis=0) for i in range(3))
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(s.head_dim))
        if self.bias_table is not None:
            bias = T.transpose(T.take(self.bias_table, self._index, axis=0), (2, 0, 1))
            logits = T.add(logits, bias)
        attn = T.softmax(logits, axis=-1)
        o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, N, C))
        out = window_merge(self.proj(o), w, B, H, W)
        if s.shift:
            out = T.roll(out, (s.shift, s.shift), (1, 2))
        return out

    def flops(self, tokens: int) -> int:
        N = self.spec.window ** 2
        return self.qkv.flops(tokens) + self.proj.flops(tokens) + 2 * 2 * tokens * N * self.channels


def windowed_mhsa(x: Tensor, spec: AttentionWindowSpec, attn: WindowAttention) -> Tensor:
    if spec != attn.spec:
        raise ValueError("attention module was built for a different window spec")
    return attn(x)


# ------------------------------------------------------------------- block
class MLP(Module):
    def __init__(self, channels: int, rng, ratio: int = 4):
        self.fc1 = Linear(channels, ratio * channels, rng)
        self.fc2 = Linear(ratio * channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def flops(self, tokens: int) -> int:
        return self.fc1.flops(tokens) + self.fc2.flops(tokens)


class TransformerBlock(Module):
    """Norm -> conditioning -> MHSA, then Norm -> conditioning -> MLP, both residual.

    AdaLN gates each residual branch; AdaFM has no gate.
    """

    def __init__(self, channels: int, heads: int, window: int, shift: int, fft_window: int,
                 d_t: int, mode: str, rng, rel_bias: bool = True, mlp_ratio: int = 4):
        if mode not in MODES:
            raise ValueError(f"unknown conditioning mode {mode!r}")
        self.mode, self.p, self.channels = mode, fft_window, channels
        self.norm1 = GroupNorm(channels, rng)
        self.attn = WindowAttention(channels, heads, window, shift, rng, rel_bias)
        self.norm2 = GroupNorm(channels, rng)
        self.mlp = MLP(channels, rng, mlp_ratio)
        self.time = TimeMLP(d_t, cond_width(mode, channels, fft_window), rng)

    def _branch(self, x: Tensor, f: Tensor, norm, fn) -> Tensor:
        h = norm(x)
        if self.mode == "adaln":
            h, gate = adaln_modulate(h, f)
            return T.add(x, T.mul(gate, fn(h)))
        h = adafm_modulate(h, frequency_scale(f, self.p), self.p)
        return T.add(x, fn(h))

    def __call__(self, x: Tensor, t_embed: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise T.ShapeError(f"block expects {self.channels} channels, got {x.shape[-1]}")
        f1, f2 = self.time(t_embed)
        x = self._branch(x, f1, self.norm1, self.attn)
        return self._branch(x, f2, self.norm2, self.mlp)

    def flops(self, tokens: int, windows: int) -> int:
        """Multiply-accumulates x2 of linear, attention and DFT work for ``tokens`` pixels."""
        total = self.attn.flops(tokens) + self.mlp.flops(tokens)
        if self.mode == "adafm":
            # forward + inverse FFT per window and channel, at both AdaFM sites
            total += 2 * 2 * fourier.fft2_flops(self.p) * windows * self.channels
        d_t = self.time.fc1.d_in
        total += 2 * (d_t * d_t + d_t * 2 * self.time.width)
        return total


def transformer_block_forward(x: Tensor, t_embed, block: TransformerBlock) -> Tensor:
    return block(T.as_tensor(x), T.as_tensor(t_embed))
