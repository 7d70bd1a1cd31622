"""Command-line entry point: ``ditsr <subcommand> [options]``.

Exit status is 0 on success, 2 on invalid input (bad flags, configs or
shapes) and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import architecture as A
from . import data as D
from . import train as TR
from .diffusion import build_schedule, sample
from .fourier import write_spectrum_csv
from .gradcheck import network_check, run_suite
from .io import read_pfm, write_pfm
from .tensor import ShapeError


def _schedule(args, run=None):
    """Schedule from the flags; with none given, the one stored in ``run`` if any."""
    flags = {k: getattr(args, k) for k in ("T", "eta1", "etaT", "kappa")}
    if run is not None and all(v is None for v in flags.values()):
        saved = TR.load_schedule(run)
        if saved is not None:
            return saved
    defaults = dict(T=15, eta1=0.04, etaT=0.999, kappa=TR.TOY_RECIPE["kappa"])
    return build_schedule(**{k: defaults[k] if v is None else v for k, v in flags.items()})


def _dataset_spec(args) -> D.ToyDatasetSpec:
    return D.ToyDatasetSpec(n_samples=args.n_samples, hr_size=args.hr_size, scale=args.scale,
                            blur_sigma=args.blur_sigma, noise_sigma=args.noise_sigma,
                            channels=args.channels, seed=args.data_seed)


def _pairs(args) -> tuple[D.PairSet, D.PairSet]:
    """``(train, held_out)`` from ``--dataset`` or a freshly synthesised toy set."""
    if args.dataset:
        pairs = D.load_pairs(args.dataset)
        if len(pairs) <= args.held_out:
            raise ValueError(f"dataset has {len(pairs)} pairs, need more than --held-out {args.held_out}")
        return pairs.split(len(pairs) - args.held_out)
    return D.toy_split(_dataset_spec(args), args.held_out)


def _config(args) -> A.DenoiserConfig:
    if args.config:
        return A.DenoiserConfig.from_json(args.config)
    return A.preset(args.preset)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------- subcommands
def cmd_synth(args) -> int:
    spec = _dataset_spec(args)
    pairs = D.synth_dataset(spec)
    out = _out(args)
    D.save_pairs(out / "dataset.bin", pairs)
    (out / "dataset_spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1))
    print(f"wrote {len(pairs)} pairs to {out / 'dataset.bin'}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    train_set, _ = _pairs(args)
    sched = _schedule(args)
    res = TR.train(config, train_set, args.iters, lr=args.lr, seed=args.seed, batch=args.batch,
                   crop=args.crop, sched=sched, out_dir=_out(args), log=print, cosine=args.cosine)
    curve = res.manifest.loss_curve
    print(f"trained {args.iters} iterations in {res.manifest.wall_time:.1f}s"
          + (f", final loss {curve[-1]:.5f}" if curve else ""))
    return 0


def cmd_eval(args) -> int:
    _, model = TR.load_run(args.run)
    _, test = _pairs(args)
    rep = TR.evaluate_psnr(model, test, _schedule(args, args.run), args.seed)
    out = _out(args)
    metrics = {"psnr_mean": rep.mean, "bicubic_psnr_mean": rep.baseline_mean, "gain_db": rep.gain,
               "psnr": rep.per_sample, "bicubic_psnr": rep.baseline_per_sample}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(f"PSNR {rep.mean:.3f} dB, bicubic input {rep.baseline_mean:.3f} dB, gain {rep.gain:+.3f} dB")
    return 0


def cmd_sample(args) -> int:
    _, model = TR.load_run(args.run)
    if args.input:
        y0 = read_pfm(args.input)
        if y0.ndim == 2:
            y0 = y0[None]
    else:
        _, test = _pairs(args)
        y0 = test.y0[args.index]
    sched = _schedule(args, args.run)
    res = sample(TR.predictor(model), y0[None], sched, args.seed, keep_trajectory=args.dump_trajectory is not None)
    out = _out(args)
    write_pfm(out / "sample.pfm", np.clip(res.x0[0], 0.0, 1.0))
    if args.dump_trajectory:
        tdir = Path(args.dump_trajectory)
        tdir.mkdir(parents=True, exist_ok=True)
        index = []
        for t, pred in zip(range(sched.T, 0, -1), res.trajectory):
            name = f"x0_pred_t{t:02d}.pfm"
            write_pfm(tdir / name, pred[0])
            index.append({"step": t, "eta_t": float(sched.eta[t]), "file": name})
        (tdir / "index.json").write_text(json.dumps(index, indent=1))
    print(f"wrote {out / 'sample.pfm'}")
    return 0


def cmd_report(args) -> int:
    config = _config(args)
    rows = A.stage_report(config, args.resolution, by=args.share)
    out = _out(args)
    path = out / f"report_{config.name}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "resolution", "params", "flops", "share"])
        for r in rows:
            w.writerow([r.stage, r.resolution, r.params, r.flops, repr(r.share)])
    print(path.read_text(), end="")
    total_p = sum(r.params for r in rows)
    total_f = sum(r.flops for r in rows)
    print(f"# total params {total_p}, FLOPs at {args.resolution}px {total_f}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _config(args)
    results = network_check(config, args.seed) if args.network_only else run_suite(config, args.seed)
    bad = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name} rel_err={r.rel_err:.2e} tol={r.tol:.0e}")
    worst = max(results, key=lambda r: r.rel_err / r.tol)
    print(f"{len(results) - len(bad)}/{len(results)} checks passed; worst {worst.name} rel_err={worst.rel_err:.2e}")
    return 0 if not bad else 1


def cmd_spectrum(args) -> int:
    _, model = TR.load_run(args.run)
    _, test = _pairs(args)
    sched = _schedule(args, args.run)
    out = _out(args)
    for i in args.index:
        traj = TR.spectrum_trajectory(model, test.y0[i], sched, args.seed + i, args.n_bins)
        traj.write_csv(out / f"spectrum_{i}.csv")
        write_spectrum_csv(out / f"spectrum_{i}_final.csv", traj.centers, traj.power[-1])
        conv = traj.convergence_steps()
        print(f"image {i}: convergence step per band (low to high) {conv.tolist()}")
    return 0


# ---------------------------------------------------------------- parser
def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("toy data")
    g.add_argument("--dataset", help="pairs file written by `synth`; default synthesises one")
    g.add_argument("--n-samples", type=int, default=160)
    g.add_argument("--hr-size", type=int, default=64)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--blur-sigma", type=float, default=1.2)
    g.add_argument("--noise-sigma", type=float, default=0.01)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--held-out", type=int, default=D.HELD_OUT)


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("diffusion schedule", "unset flags take the run's stored schedule, "
                             "else T=15, eta1=0.04, etaT=0.999 and the toy kappa")
    g.add_argument("--T", type=int)
    g.add_argument("--eta1", type=float)
    g.add_argument("--etaT", type=float)
    g.add_argument("--kappa", type=float)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without defaults so a value given
        # before the subcommand is not overwritten
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--seed", type=int, default=d(0))
        g.add_argument("--config", default=d(None), help="denoiser config JSON (overrides --preset)")
        g.add_argument("--out", default=d("."), help="output directory")
        return g

    common = global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="ditsr", description=__doc__.splitlines()[0],
                                     parents=[global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the toy dataset")
    _add_data_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a denoiser on toy pairs")
    p.add_argument("--preset", default="toy", choices=sorted(A.PRESETS))
    r = TR.TOY_RECIPE
    p.add_argument("--iters", type=int, default=r["iters"])
    p.add_argument("--lr", type=float, default=r["lr"])
    p.add_argument("--batch", type=int, default=r["batch"])
    p.add_argument("--crop", type=int, default=r["crop"], help="patch size; 0 trains on whole images")
    p.add_argument("--cosine", action=argparse.BooleanOptionalAction, default=r["cosine"])
    _add_data_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="run the reverse chain on one image")
    p.add_argument("--run", required=True, help="directory written by `train`")
    p.add_argument("--input", help="LR-upsampled PFM; default is a held-out toy image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--dump-trajectory", metavar="DIR")
    _add_data_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="PSNR on held-out pairs")
    p.add_argument("--run", required=True)
    _add_data_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="per-stage params/FLOPs CSV")
    p.add_argument("--preset", default="ours_adafm", choices=sorted(A.PRESETS))
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--share", choices=("flops", "params"), default="flops")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--preset", default="micro", choices=sorted(A.PRESETS))
    p.add_argument("--network-only", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("spectrum", parents=[common], help="radial spectra along the reverse chain")
    p.add_argument("--run", required=True)
    p.add_argument("--index", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--n-bins", type=int, default=TR.SPECTRUM_BINS)
    _add_data_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    if getattr(args, "crop", None) == 0:
        args.crop = None
    try:
        return args.func(args)
    except (ValueError, KeyError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
