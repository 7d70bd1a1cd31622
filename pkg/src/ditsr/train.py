"""Training loop, PSNR evaluation and the spectrum-trajectory analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .architecture import DenoiserConfig, Denoiser, build_denoiser
from .data import PairSet
from .diffusion import ShiftSchedule, build_schedule, sample, training_pair
from .fourier import radial_power_spectrum
from .io import load_tensors, save_tensors
from .tensor import make_rng

PSNR_CAP = 99.0
DIVERGENCE_LOSS = 1e6
SPECTRUM_BINS = 8

# desk-scale recipe for the ``toy`` preset on the synthetic set. kappa=1 on [0, 1]
# images matches the noise-to-signal ratio of the default kappa=2 on [-1, 1] data
TOY_RECIPE = dict(iters=5000, lr=2e-3, batch=8, crop=32, cosine=True, kappa=1.0)


class DivergenceError(RuntimeError):
    """Training loss blew up or went NaN."""


class Adam:
    def __init__(self, params, lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        k = self.step_count
        c1 = 1 - self.b1 ** k
        c2 = 1 - self.b2 ** k
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def config_hash(config: DenoiserConfig, **extra) -> str:
    blob = json.dumps({"config": config.to_dict(), **extra}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    iterations: int
    lr: float
    cosine: bool
    batch: int
    crop: int | None
    loss_curve: list[float]
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    manifest: RunManifest
    model: Denoiser


def _batch(data: PairSet, rng: np.random.Generator, batch: int, crop: int | None):
    idx = rng.integers(0, len(data), size=batch)
    x0, y0 = data.x0[idx], data.y0[idx]
    if crop is None:
        return x0, y0
    H, W = x0.shape[-2:]
    rows = rng.integers(0, H - crop + 1, size=batch)
    cols = rng.integers(0, W - crop + 1, size=batch)
    xs = np.stack([x0[i, :, r:r + crop, c:c + crop] for i, (r, c) in enumerate(zip(rows, cols))])
    ys = np.stack([y0[i, :, r:r + crop, c:c + crop] for i, (r, c) in enumerate(zip(rows, cols))])
    return xs, ys


def train(config: DenoiserConfig, dataset: PairSet, iters: int, lr: float = 5e-5, seed: int = 0,
          batch: int = 8, crop: int | None = None, sched: ShiftSchedule | None = None,
          out_dir: str | Path | None = None, log=None, cosine: bool = False) -> TrainResult:
    """Adam on the x0-prediction MSE. Everything random is drawn from ``seed``.

    ``crop`` trains on random ``crop x crop`` patches; the model is windowed
    and runs on the full image at evaluation time. ``cosine`` anneals the
    learning rate from ``lr`` to zero over the run.
    """
    sched = sched or build_schedule()
    model = build_denoiser(config, seed)
    model.check_resolution(*dataset.x0.shape[-2:])
    if crop is not None:
        model.check_resolution(crop, crop)
    opt = Adam(model.parameters(), lr=lr)
    rng = make_rng(seed + 1)
    losses: list[float] = []
    start = time.perf_counter()
    for it in range(iters):
        x0, y0 = _batch(dataset, rng, batch, crop)
        pair = training_pair(x0, y0, sched, rng)
        model.zero_grad()
        try:
            loss = T.mse(model(pair.x_t, y0, pair.t), T.Tensor(pair.target))
        except FloatingPointError as exc:
            raise DivergenceError(f"non-finite activations at iteration {it}") from exc
        value = loss.item()
        if not np.isfinite(value) or value > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss {value!r} at iteration {it}; try a lower learning rate")
        loss.backward()
        if cosine:
            opt.lr = 0.5 * lr * (1 + np.cos(np.pi * it / iters))
        opt.step()
        losses.append(value)
        if log is not None and (it + 1) % 100 == 0:
            log(f"iter {it + 1}/{iters} loss {np.mean(losses[-100:]):.5f}")
    manifest = RunManifest(
        config_hash=config_hash(config, sched=sched.eta.tolist(), kappa=sched.kappa),
        seed=seed, iterations=iters, lr=lr, cosine=cosine, batch=batch, crop=crop,
        loss_curve=losses, wall_time=time.perf_counter() - start,
    )
    if out_dir is not None:
        write_run(out_dir, config, model, manifest, sched)
    return TrainResult(manifest, model)


def write_run(out_dir: str | Path, config: DenoiserConfig, model: Denoiser, manifest: RunManifest,
              sched: ShiftSchedule | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / "checkpoint.bin", model.state_dict())
    config.to_json(out / "config.json")
    manifest.to_json(out / "manifest.json")
    if sched is not None:
        blob = {"eta": sched.eta.tolist(), "kappa": sched.kappa}
        (out / "schedule.json").write_text(json.dumps(blob, indent=1))


def load_run(run_dir: str | Path) -> tuple[DenoiserConfig, Denoiser]:
    run = Path(run_dir)
    config = DenoiserConfig.from_json(run / "config.json")
    model = build_denoiser(config, 0)
    model.load_state_dict(load_tensors(run / "checkpoint.bin"))
    return config, model


def load_schedule(run_dir: str | Path) -> ShiftSchedule | None:
    """The schedule a run was trained with, or None for runs written without one."""
    path = Path(run_dir) / "schedule.json"
    if not path.exists():
        return None
    blob = json.loads(path.read_text())
    return ShiftSchedule(np.array(blob["eta"], dtype=np.float64), float(blob["kappa"]))


def predictor(model: Denoiser):
    """Wrap ``model`` as the ``denoiser(x_t, y0, t)`` callable the sampler expects."""

    def f(x_t, y0, t):
        with T.no_grad():
            return model(x_t, y0, np.full(len(x_t), t)).data

    return f


# ---------------------------------------------------------------- metrics
def psnr(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    err = float(np.mean((np.asarray(pred, dtype=np.float64) - ref) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / err))


@dataclass
class PsnrReport:
    per_sample: list[float]
    mean: float
    baseline_per_sample: list[float]
    baseline_mean: float

    @property
    def gain(self) -> float:
        return self.mean - self.baseline_mean


def evaluate_psnr(model: Denoiser, dataset: PairSet, sched: ShiftSchedule, seed: int,
                  batch: int = 32) -> PsnrReport:
    """PSNR of sampled reconstructions against ``x0``; the baseline scores ``y0`` itself.

    Reconstructions are clipped to the image range ``[0, 1]`` before scoring.
    """
    f = predictor(model)
    outs = []
    for s in range(0, len(dataset), batch):
        y0 = dataset.y0[s:s + batch]
        outs.append(sample(f, y0, sched, seed + s).x0)
    recon = np.clip(np.concatenate(outs), 0.0, 1.0)
    ours = [psnr(r, x) for r, x in zip(recon, dataset.x0)]
    base = [psnr(y, x) for y, x in zip(dataset.y0, dataset.x0)]
    return PsnrReport(ours, float(np.mean(ours)), base, float(np.mean(base)))


# --------------------------------------------------------------- spectrum
@dataclass
class SpectrumTrajectory:
    steps: np.ndarray  # t = T, ..., 1
    eta: np.ndarray
    centers: np.ndarray
    power: np.ndarray  # (T, n_bins), one row per step in ``steps`` order

    def convergence_steps(self, frac: float = 0.9) -> np.ndarray:
        return convergence_steps(self.power, self.steps, frac)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eta_t"] + [f"band_{i}" for i in range(len(self.centers))])
            for t, e, row in zip(self.steps, self.eta, self.power):
                w.writerow([int(t), repr(float(e))] + [repr(float(v)) for v in row])


def convergence_steps(power: np.ndarray, steps: np.ndarray, frac: float = 0.9) -> np.ndarray:
    """Per band, the first step (scanning ``steps`` in order) whose power reaches ``frac`` of the last row."""
    final = power[-1]
    reached = power >= frac * final
    first = np.argmax(reached, axis=0)  # the last row always qualifies
    return np.asarray(steps)[first]


def spectrum_trajectory(model, y0: np.ndarray, sched: ShiftSchedule, seed: int, n_bins: int = 8) -> SpectrumTrajectory:
    """Radial power spectrum of the predicted x0 at each reverse step.

    ``model`` is a :class:`Denoiser` or any ``denoiser(x_t, y0, t)`` callable;
    ``y0`` is one ``(c, H, W)`` image.
    """
    f = predictor(model) if isinstance(model, Denoiser) else model
    y0 = np.asarray(y0, dtype=np.float64)
    res = sample(f, y0[None], sched, seed, keep_trajectory=True)
    rows, centers = [], None
    for pred in res.trajectory:
        centers, pw = radial_power_spectrum(pred[0], n_bins)
        rows.append(pw)
    steps = np.arange(sched.T, 0, -1)
    return SpectrumTrajectory(steps, sched.eta[steps], centers, np.array(rows))
