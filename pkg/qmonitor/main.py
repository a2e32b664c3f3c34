"""Main entry point for the qubit-monitor command line."""
import argparse
import logging
import sys
import time
from pathlib import Path

from qmonitor.commands.flow import cmd_cooling, cmd_steady, cmd_sweep_flow
from qmonitor.commands.stochastic import cmd_noise, cmd_spectrum, cmd_trajectory
from qmonitor.commands.validate import (
    DEFAULT_NOISE_TRAJECTORIES,
    DEFAULT_PATH_TRAJECTORIES,
    ValidationContext,
    cmd_validate,
)
from qmonitor.config import Config, RunConfig, load_config
from qmonitor.output import utc_now, write_timing

logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_INTERRUPTED = 130

CONFIG_COMMANDS = ("steady", "sweep-flow", "cooling", "trajectory", "noise", "spectrum")
DEFAULT_OUTPUTS = {
    "steady": "steady.csv",
    "sweep-flow": "sweep_flow.csv",
    "cooling": "cooling.csv",
    "trajectory": "trajectory.csv",
    "noise": "noise.csv",
    "spectrum": "spectrum.csv",
    "validate": "validate.csv",
}

CONFIG_HELP = """\
run config (TOML, angles in units of pi):
  [physics]    delta=1; gamma_plus, gamma_minus  or  temperatures, couplings,
               bath_names (default h, c), omega_c=1000
  [monitor]    gamma; theta_m=0, theta_n=0, phi_m=0, phi_n=0, measurement_only=false
  [trajectory] dt=0.005, t_equilibrate=10/gamma_+, t_window=50/gamma_+,
               n_traj=100000, master_seed=0, batch_size=1000, bin_width=0.1,
               max_lag=20/gamma_+, initial="steady" | "pure"
  [sweep]      theta_m / theta_n lists, or *_points with *_range=[0, 1];
               measurement_only, mirror (theta_n = 1 - theta_m)
  [output]     path, mode="analytic" | "mc"

environment: QMONITOR_THREADS, QMONITOR_LOG_LEVEL, QMONITOR_OUTPUT_DIR, QMONITOR_PROGRESS
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides the config")
    common.add_argument("--traj", type=int, help="trajectory count")
    common.add_argument("--threads", type=int, help="worker processes (default QMONITOR_THREADS)")
    common.add_argument("--out", type=Path, help="output CSV (relative to QMONITOR_OUTPUT_DIR)")

    parser = argparse.ArgumentParser(
        prog="qmonitor",
        description="Qubit under continuous measurement and feedback: flows, trajectories, noise.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("steady", parents=[common], help="steady state and flows at the configured point(s)")
    sub.add_parser("sweep-flow", parents=[common], help="flow over the [sweep] grid")
    sub.add_parser("cooling", parents=[common], help="cold-bath current and COP (two baths)")

    trajectory = sub.add_parser("trajectory", parents=[common], help="dump trajectory records")
    trajectory.add_argument(
        "--mean-state", action="store_true", help="ensemble-mean sigma_z against the Lindblad path"
    )
    trajectory.add_argument("--sample-every", type=int, default=20, help="steps between samples")

    for name, text in (("noise", "S0, S1 and Fano factor over the sweep"),
                       ("spectrum", "S(omega) and c1(tau) at one point")):
        command = sub.add_parser(name, parents=[common], help=text)
        command.add_argument(
            "--sample-mean", action="store_true",
            help="subtract each trajectory's mean energy instead of the solver flow",
        )

    validate = sub.add_parser("validate", parents=[common], help="run the invariant suite")
    validate.add_argument("--quick", action="store_true", help="skip the Monte Carlo checks")
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ValueError(f"--seed {args.seed} is not an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    if args.traj is not None:
        if args.traj < 0:
            raise ValueError("--traj must be non-negative")
        cfg = cfg.with_trajectories(args.traj)
    return cfg


def _output_path(args: argparse.Namespace, cfg: RunConfig | None) -> Path:
    name = args.out or (cfg.output_path if cfg and cfg.output_path else DEFAULT_OUTPUTS[args.command])
    return Config.get_output_path(name)


def run_command(args: argparse.Namespace, cfg: RunConfig | None, out: Path, workers: int) -> int:
    subtract = "sample" if getattr(args, "sample_mean", False) else "solver"
    match args.command:
        case "steady":
            cmd_steady(cfg, out, workers)
        case "sweep-flow":
            cmd_sweep_flow(cfg, out, workers)
        case "cooling":
            cmd_cooling(cfg, out, workers)
        case "trajectory":
            cmd_trajectory(
                cfg, out, workers, n_dump=args.traj, mean_state=args.mean_state,
                sample_every=args.sample_every,
            )
        case "noise":
            cmd_noise(cfg, out, workers, subtract)
        case "spectrum":
            cmd_spectrum(cfg, out, workers, subtract)
        case "validate":
            ctx = ValidationContext(
                seed=args.seed or 0,
                workers=workers,
                path_trajectories=args.traj or DEFAULT_PATH_TRAJECTORIES,
                noise_trajectories=args.traj or DEFAULT_NOISE_TRAJECTORIES,
            )
            report = cmd_validate(out, ctx, quick=args.quick)
            print("\n".join(report.lines()))
            return EXIT_OK if report.passed else EXIT_FAILED
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        Config.validate()
        cfg = None
        if args.command in CONFIG_COMMANDS:
            if args.config is None:
                raise ValueError(f"{args.command} needs --config")
            cfg = _apply_overrides(load_config(args.config), args)
            logger.info(f"Loaded {args.config}")
        workers = Config.get_threads(args.threads)
        if workers < 1:
            raise ValueError("--threads must be positive")
    except (ValueError, OSError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    out = _output_path(args, cfg)
    started_at = utc_now()
    start = time.perf_counter()
    try:
        code = run_command(args, cfg, out, workers)
    except KeyboardInterrupt:
        logger.warning(f"Interrupted; rows already written to {out} are kept")
        return EXIT_INTERRUPTED
    except ValueError as e:
        logger.error(f"Command failed: {e}")
        return EXIT_FAILED

    wall = time.perf_counter() - start
    write_timing(out, started_at, wall, command=args.command, workers=workers)
    logger.info(f"{args.command} finished in {wall:.1f}s -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
