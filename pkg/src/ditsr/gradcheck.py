"""Finite-difference gradient checks for every layer type and the full denoiser.

Each check contracts the layer output with a fixed random tensor so the loss
is a generic scalar, then compares autodiff gradients with central
differences. Zero-initialised weights are jittered first; otherwise most
upstream gradients would be exactly zero and the check would prove nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .architecture import DenoiserConfig, build_denoiser, downsample, preset, upsample
from .blocks import MLP, TimeMLP, TransformerBlock, WindowAttention, adafm_modulate, adafm_symmetrize, adaln_modulate
from .nn import GroupNorm, Linear, Module
from .tensor import Tensor, make_rng, relative_error

BLOCK_TOL = 1e-5
NET_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol


def jitter(module: Module, rng: np.random.Generator, std: float = 0.2) -> None:
    for p in module.parameters():
        p.data = p.data + std * rng.standard_normal(p.shape)


def _param_fd(loss_fn: Callable[[], float], p: Tensor, coords, eps: float = 1e-5) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss_fn()
        flat[i] = orig - eps
        fm = loss_fn()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def check_module(name: str, forward: Callable[[Tensor], Tensor], x: np.ndarray, module: Module | None,
                 rng: np.random.Generator, tol: float = BLOCK_TOL, max_coords: int | None = None) -> list[CheckResult]:
    """Check d(loss)/d(input) and d(loss)/d(every parameter) of ``forward``.

    With ``max_coords`` only that many randomly chosen coordinates of each
    tensor are perturbed.
    """
    R = rng.standard_normal(forward(Tensor(x)).shape)

    def loss(inp: Tensor) -> Tensor:
        return T.tsum(T.mul(forward(inp), R))

    params = list(module.named_parameters()) if module is not None else []
    if module is not None:
        module.zero_grad()
    xin = Tensor(x, requires_grad=True)
    loss(xin).backward()

    def coords_for(size: int) -> np.ndarray:
        if max_coords is None or size <= max_coords:
            return np.arange(size)
        return np.sort(rng.choice(size, size=max_coords, replace=False))

    results = []
    c = coords_for(x.size)
    holder = Tensor(np.array(x))
    num = _param_fd(lambda: loss(holder).item(), holder, c)
    results.append(CheckResult(f"{name}:input", relative_error(xin.grad.reshape(-1)[c], num), tol))
    for pname, p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        c = coords_for(p.size)
        num = _param_fd(lambda: loss(Tensor(x)).item(), p, c)
        results.append(CheckResult(f"{name}:{pname}", relative_error(analytic.reshape(-1)[c], num), tol))
    return results


def block_checks(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    B, H, W, C = 2, 8, 8, 8
    x = rng.standard_normal((B, H, W, C))
    temb = Tensor(rng.standard_normal((B, 16)))
    out: list[CheckResult] = []

    lin = Linear(C, 6, rng)
    jitter(lin, rng)
    out += check_module("linear", lin, x, lin, rng)

    gn = GroupNorm(C, rng, groups=2)
    jitter(gn, rng)
    out += check_module("group_norm", gn, x, gn, rng)

    mlp = MLP(C, rng)
    jitter(mlp, rng)
    out += check_module("mlp", mlp, x, mlp, rng)

    for shift in (0, 2):
        attn = WindowAttention(C, 2, 4, shift, rng)
        jitter(attn, rng)
        out += check_module(f"window_attention_shift{shift}", attn, x, attn, rng)

    tm = TimeMLP(16, 3 * C, rng)
    jitter(tm, rng)
    out += check_module("time_mlp", lambda e: T.concat(list(tm(e)), axis=-1), temb.data, tm, rng)

    f_ln = rng.standard_normal((B, 3 * C))
    out += check_module("adaln_x", lambda v: T.add(*adaln_modulate(v, Tensor(f_ln))), x, None, rng)
    out += check_module("adaln_f", lambda f: T.add(*adaln_modulate(Tensor(x), f)), f_ln, None, rng)

    S_raw = 1.0 + 0.3 * rng.standard_normal((B, 4, 4))
    for fused in (True, False):
        tag = "fused" if fused else "pipeline"
        out += check_module(f"adafm_{tag}_x",
                            lambda v: adafm_modulate(v, Tensor(adafm_symmetrize(S_raw)), 4, fused=fused), x, None, rng)
        out += check_module(f"adafm_{tag}_S",
                            lambda s: adafm_modulate(Tensor(x), adafm_symmetrize(s), 4, fused=fused), S_raw, None, rng)

    for mode in ("adaln", "adafm"):
        for shift in (0, 2):
            blk = TransformerBlock(C, 2, 4, shift, 4, 16, mode, rng)
            jitter(blk, rng)
            out += check_module(f"block_{mode}_shift{shift}", lambda v: blk(v, temb), x, blk, rng)

    down = Linear(4 * C, 2 * C, rng)
    out += check_module("downsample", lambda v: downsample(v, down), x, down, rng)
    up = Linear(C, 4 * C, rng)
    out += check_module("upsample", lambda v: upsample(v, up), x, up, rng)
    return out


def network_check(config: DenoiserConfig | None = None, seed: int = 0, max_coords: int = 24,
                  size: int = 16) -> list[CheckResult]:
    """End-to-end check of the denoiser w.r.t. ``x_t``, ``y`` and a sample of every weight.

    ``size`` is rounded up to the model's resolution multiple.
    """
    config = config or preset("micro")
    rng = make_rng(seed)
    model = build_denoiser(config, seed)
    jitter(model, rng)
    mult = config.resolution_multiple
    m = -(-size // mult) * mult
    c = config.in_channels // 2
    y = rng.random((1, c, m, m))
    t = np.array([3])
    res = check_module("net_x_t", lambda v: model(v, y, t), rng.random((1, c, m, m)), model, rng,
                       tol=NET_TOL, max_coords=max_coords)
    x_t = rng.random((1, c, m, m))
    res += check_module("net_y", lambda v: model(x_t, v, t), y, None, rng, tol=NET_TOL)
    return res


def run_suite(config: DenoiserConfig | None = None, seed: int = 0) -> list[CheckResult]:
    return block_checks(seed) + network_check(config, seed)
