"""Command-line entry point: ``scoredistill <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness.config import DEFAULTS_2D, DEFAULTS_3D, ConfigError, ExperimentConfig

log = logging.getLogger("scoredistill")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in {"1", "true", "yes", "on"}:
        return True
    if v in {"0", "false", "no", "off"}:
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _config_flags(p: argparse.ArgumentParser, defaults: dict) -> None:
    """One ``--<dotted.key>`` flag per config key; unset flags leave the file/default value."""
    g = p.add_argument_group("config keys (override the config file)")
    for key, default in defaults.items():
        if key in ("experiment", "seed"):
            continue
        kind = _bool if isinstance(default, bool) else type(default)
        g.add_argument(f"--{key}", dest=f"cfg:{key}", type=kind, default=None, metavar=kind.__name__.upper())


def _run_parser(sub, name: str, defaults: dict, help_: str):
    p = sub.add_parser(name, help=help_)
    p.add_argument("--config", type=Path, help="YAML file of config keys")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _config_flags(p, defaults)
    return p


def _experiment_config(args, experiment: str) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    overrides["seed"] = args.seed
    if args.config is not None:
        return ExperimentConfig.load(args.config, overrides, experiment)
    return ExperimentConfig.from_flat(overrides, experiment)


def cmd_train_toy(args) -> int:
    from .backends.training import MixtureDataset, TrainConfig, VoxelViewDataset, train_toy_denoiser
    from .oracles import four_mode_mixture
    from .schedule import make_schedule

    if args.dataset == "mixture":
        dataset, pixel_range = MixtureDataset(four_mode_mixture(args.sigma)), None
    else:
        dataset, pixel_range = VoxelViewDataset(image_size=args.image_size, grid=args.grid), (0.0, 1.0)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                      mse_threshold=args.mse_threshold, log_every=args.log_every)
    model = train_toy_denoiser(dataset, make_schedule(args.T, args.schedule), cfg, seed=args.seed,
                               pixel_range=pixel_range)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(json.dumps({"weights": str(args.out), "heldout_mse": model.metadata["heldout_mse"],
                      "config_hash": model.config_hash()}))
    return 0


def cmd_distill2d(args) -> int:
    from .harness.runs import run_2d_distillation

    rec = run_2d_distillation(_experiment_config(args, "2d"), args.out)
    print(json.dumps({"run": str(rec.run_dir), "config_hash": rec.config_hash, **rec.summary}, default=float))
    return 0


def cmd_distill3d(args) -> int:
    from .harness.runs import run_3d_toy

    rec = run_3d_toy(_experiment_config(args, "3d"), args.out)
    print(json.dumps({"run": str(rec.run_dir), "config_hash": rec.config_hash, **rec.summary}, default=float))
    return 0


def _backend_from_args(args):
    if args.backend == "toy":
        from .backends.toy import ToyDenoiser

        if not args.weights:
            raise ConfigError("--backend toy needs --weights")
        return ToyDenoiser.load(args.weights)
    if args.backend == "mixture_oracle":
        from .oracles import MixtureDenoiser, four_mode_mixture
        from .schedule import make_schedule

        return MixtureDenoiser(four_mode_mixture(), make_schedule(1000))
    from .backends.external import external_adapter

    return external_adapter()


def cmd_invert(args) -> int:
    from .harness.evaluation import round_trip
    from .oracles import four_mode_mixture

    backend = _backend_from_args(args)
    rng = np.random.default_rng(args.seed)
    x0, _ = four_mode_mixture(args.sigma).sample(rng, args.n)
    args.out.mkdir(parents=True, exist_ok=True)
    t = args.t if args.t is not None else backend.schedule.T // 2
    rep = round_trip(backend, x0, t, args.delta_t, rng, trace_path=args.out / "trace.csv")
    summary = {"target_t": rep.target_t, "delta_t": rep.delta_t, "n": args.n,
               "median_rel_l2": rep.median, "control_median_rel_l2": rep.control_median,
               "win_rate_vs_control": rep.win_rate}
    (args.out / "round_trip.json").write_text(json.dumps(summary, indent=2))
    np.savetxt(args.out / "errors.csv", np.c_[rep.errors, rep.control_errors], delimiter=",",
               header="inversion,control", comments="")
    print(json.dumps(summary))
    return 0


def cmd_report(args) -> int:
    from .harness.report import report

    res = report(args.run, args.out)
    for f in res.figures:
        print(f"figure {f}")
    print(f"table {res.table}")
    for m in res.missing:
        print(f"missing snapshot {m}", file=sys.stderr)
    return 0


def cmd_backend_info(args) -> int:
    backend = _backend_from_args(args)
    info = backend.info()
    if hasattr(backend, "config_hash"):
        info["config_hash"] = backend.config_hash()
        info["metadata"] = backend.metadata
    print(json.dumps(info, indent=2, default=str))
    return 0


def cmd_oracle_calibrate(args) -> int:
    from .harness.evaluation import calibrate
    from .oracles import four_mode_mixture
    from .schedule import make_schedule

    values = calibrate(args.out, four_mode_mixture(args.sigma), make_schedule(args.T), seed=args.seed)
    print(json.dumps(values["oracle_reference"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scoredistill", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the toy denoiser")
    p.add_argument("--dataset", choices=("mixture", "voxel_views"), default="mixture")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True, help="weights file (.npz)")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--mse-threshold", type=float, default=None)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--schedule", default="linear", choices=("linear", "scaled_linear", "cosine"))
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    _run_parser(sub, "distill2d", DEFAULTS_2D, "2D distillation run").set_defaults(func=cmd_distill2d)
    _run_parser(sub, "distill3d-toy", DEFAULTS_3D, "toy 3D optimization run").set_defaults(func=cmd_distill3d)

    p = sub.add_parser("invert", help="DDIM inversion round trip on mixture samples")
    p.add_argument("--backend", choices=("toy", "mixture_oracle", "external"), default="toy")
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--t", type=int, default=None, help="target timestep (default T/2)")
    p.add_argument("--delta-t", type=int, default=50)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.05)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("report", help="figures and summary table for runs")
    p.add_argument("run", type=Path, help="run directory or directory of runs")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("backend", help="backend utilities")
    bsub = p.add_subparsers(dest="backend_command", required=True)
    q = bsub.add_parser("info", help="print the capability record")
    q.add_argument("--backend", choices=("toy", "mixture_oracle", "external"), default="toy")
    q.add_argument("--weights")
    q.set_defaults(func=cmd_backend_info)

    p = sub.add_parser("oracle", help="oracle utilities")
    osub = p.add_subparsers(dest="oracle_command", required=True)
    q = osub.add_parser("calibrate", help="re-derive oracle references and write the acceptance config")
    q.add_argument("--out", type=Path, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--sigma", type=float, default=0.05)
    q.add_argument("--T", type=int, default=1000)
    q.set_defaults(func=cmd_oracle_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
