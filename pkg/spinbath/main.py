"""
Command-line entry point.

    spinbath simulate CONFIG [--sw-order 1|2] [--output DIR]
    spinbath delta CONFIG --pairs 9,14 1,3
    spinbath spectrum CONFIG
    spinbath bath-gen SPEC --output FILE
    spinbath oracle CONFIG
    spinbath scan CONFIG --states 0 1 2 [--output FILE]
    spinbath estimate sw-ratio|lambda [parameters]

Exit codes: 0 success, 2 config error, 3 SW-validity abort, 4 numerical
contract violation.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

from pydantic import ValidationError

from spinbath.constants import MU_B, SPECIES, UEV
from spinbath.exceptions import ConfigError, SpinBathError
from spinbath.models.config_models import BathSpec
from spinbath.services import results_writer
from spinbath.services.bath_generator import generate_bath
from spinbath.services.config_loader import ConfigLoader, _format_errors
from spinbath.services.experiment_service import ExperimentService
from spinbath.services.metrics_service import lambda_estimate, sw_ratio_estimate

logger = logging.getLogger("spinbath")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _pair(text: str) -> Tuple[int, int]:
    try:
        alpha, beta = (int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pair must look like 9,14, got {text!r}")
    return alpha, beta


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinbath", description="Spin-bath decoherence engine")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--workers", type=int, default=None, help="cluster work pool size (default: SPINBATH_WORKERS or CPU count)")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="coherence traces and metrics for every configured pair")
    simulate.add_argument("config")
    simulate.add_argument("--sw-order", type=int, choices=[1, 2], default=None)
    simulate.add_argument("--output", default=None, help="output directory (overrides the config)")

    delta = commands.add_parser("delta", help="Delta, clock mismatch and transition moment per pair")
    delta.add_argument("config")
    delta.add_argument("--pairs", type=_pair, nargs="+", default=None)

    spectrum = commands.add_parser("spectrum", help="eigenvalues and local spin expectations")
    spectrum.add_argument("config")

    bath = commands.add_parser("bath-gen", help="generate a random bath file")
    bath.add_argument("spec", help="JSON file with a bath spec (n, radius, min_dist, species, seed, ...)")
    bath.add_argument("--output", required=True)

    oracle = commands.add_parser("oracle", help="compare CCE against exact evaluation on a small bath")
    oracle.add_argument("config")

    scan = commands.add_parser("scan", help="metrics and t_half for every pair of the given states")
    scan.add_argument("config")
    scan.add_argument("--states", type=int, nargs="+", required=True)
    scan.add_argument("--output", default=None, help="CSV file for the table")

    estimate = commands.add_parser("estimate", help="closed-form magnitude estimates")
    estimate.add_argument("quantity", choices=["sw-ratio", "lambda"])
    estimate.add_argument("--m-z", type=float, default=0.5)
    estimate.add_argument("--gap-uev", type=float, default=50.0, help="level gap in µeV")
    estimate.add_argument("--gamma-e", type=float, default=2.0, help="system gyromagnetic value in µ_B")
    estimate.add_argument("--species", default="proton", help="bath species for sw-ratio")
    estimate.add_argument("--r-min", type=float, default=3.0)
    estimate.add_argument("--r-max", type=float, default=None, help="Å; sw-ratio defaults to infinity, lambda to 20")
    estimate.add_argument("--l", type=float, default=3.0, help="minimum bath-bath distance in Å (lambda)")
    return parser


def _print(data):
    print(json.dumps(data, indent=2))


def _load(args) -> Tuple[ConfigLoader, ExperimentService]:
    loader = ConfigLoader()
    return loader, ExperimentService(loader=loader, workers=args.workers)


async def run_simulate(args) -> int:
    loader, service = _load(args)
    config = loader.load_config(args.config)
    updates = {}
    if args.sw_order is not None:
        updates["cce"] = config.cce.model_copy(update={"sw_order": args.sw_order})
    if args.output is not None:
        updates["output"] = config.output.model_copy(update={"directory": args.output})
    if updates:
        config = config.model_copy(update=updates)
    result = await service.run_experiment(config)
    _print({
        "output": config.output.directory,
        "pairs": [
            {
                "pair": list(m.pair),
                "delta": m.delta,
                "clock_mismatch": m.clock_mismatch,
                "transition_moment": m.transition_moment,
                "t_half_us": trace.t_half(),
            }
            for m, trace in zip(result.metrics, result.traces)
        ],
    })
    return 0


def run_delta(args) -> int:
    loader, service = _load(args)
    config = loader.load_config(args.config)
    metrics = service.delta_table(config, args.pairs)
    _print([m.model_dump() for m in metrics])
    return 0


def run_spectrum(args) -> int:
    loader, service = _load(args)
    config = loader.load_config(args.config)
    spectrum = service.spectrum(config)
    _print({
        "energies_rad_per_us": spectrum["energies"].tolist(),
        "energies_ueV": (spectrum["energies"] / UEV).tolist(),
        "total_sz": spectrum["total_sz"].tolist(),
        "local_expectations": spectrum["local_expectations"].tolist(),
    })
    return 0


def run_bath_gen(args) -> int:
    path = Path(args.spec)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"Bath spec not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Bath spec {path} is not valid JSON: {e}")
    try:
        spec = BathSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid bath spec: {_format_errors(e)}")
    sites = generate_bath(spec)
    results_writer.write_bath(args.output, sites, spec.model_dump(mode="json"))
    _print({"output": args.output, "spins": len(sites)})
    return 0


async def run_oracle(args) -> int:
    loader, service = _load(args)
    config = loader.load_config(args.config)
    deviations = await service.oracle(config)
    _print([{"pair": list(pair), **values} for pair, values in deviations.items()])
    return 0


async def run_scan(args) -> int:
    loader, service = _load(args)
    config = loader.load_config(args.config)
    rows = await service.scan_pairs(config, args.states)
    if args.output is not None:
        results_writer.write_scan(rows, args.output)
    _print([dict(row.model_dump(exclude={"t_half"}), t_half_us=row.t_half_label) for row in rows])
    return 0


def run_estimate(args) -> int:
    gap = args.gap_uev * UEV
    gamma_e = args.gamma_e * MU_B
    if args.quantity == "sw-ratio":
        if args.species not in SPECIES:
            raise ConfigError(f"Unknown species '{args.species}'; expected one of {sorted(SPECIES)}")
        r_max = float("inf") if args.r_max is None else args.r_max
        value = sw_ratio_estimate(args.m_z, gap, gamma_e, SPECIES[args.species]["gyro"], args.r_min, r_max)
    else:
        r_max = 20.0 if args.r_max is None else args.r_max
        value = lambda_estimate(args.r_min, r_max, args.l, args.m_z, gap, gamma_e)
    _print({"quantity": args.quantity, "value": value})
    return 0


COMMANDS = {
    "simulate": run_simulate,
    "delta": run_delta,
    "spectrum": run_spectrum,
    "bath-gen": run_bath_gen,
    "oracle": run_oracle,
    "scan": run_scan,
    "estimate": run_estimate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)

    handler = COMMANDS[args.command]
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigError(f"--workers must be at least 1, got {args.workers}")
        if asyncio.iscoroutinefunction(handler):
            return asyncio.run(handler(args))
        return handler(args)
    except SpinBathError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return SpinBathError.exit_code


if __name__ == "__main__":
    sys.exit(main())
