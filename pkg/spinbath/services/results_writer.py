"""
Result persistence: one CSV per pair, a summary table and a manifest.

The manifest holds the resolved config, seeds and package versions; its
sha256 is stamped into every CSV header so each file can be traced back to
the run that produced it.
"""

import csv
import hashlib
import json
import logging
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from spinbath import __version__
from spinbath.constants import MU_N
from spinbath.models.config_models import ExperimentResult
from spinbath.models.dynamics_models import CoherenceTrace, ScanRow
from spinbath.models.spin_models import SpinSite

logger = logging.getLogger(__name__)

COLUMNS = ("t_us", "t_norm", "re_L", "im_L", "abs_L", "abs_L_sq")
NORMALIZATION_THRESHOLD = 1e-3
PACKAGES = ("numpy", "scipy", "pydantic", "scikit-learn")


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "spinbath": __version__}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def build_manifest(result: ExperimentResult) -> Dict[str, Any]:
    """Manifest dict with its own ``sha256`` over the canonical JSON of the rest"""
    manifest = {
        "schema_version": 1,
        "config": result.config.model_dump(mode="json"),
        "seeds": list(result.seeds),
        "versions": package_versions(),
    }
    if result.sw_report is not None:
        manifest["sw_report"] = result.sw_report.model_dump(mode="json")
    manifest["sha256"] = manifest_hash(manifest)
    return manifest


def manifest_hash(manifest: Dict[str, Any]) -> str:
    body = {key: value for key, value in manifest.items() if key != "sha256"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def normalization_time(
    traces: Sequence[CoherenceTrace],
    reference_pair: Optional[Tuple[int, int]] = None,
    threshold: float = NORMALIZATION_THRESHOLD,
) -> Tuple[float, str]:
    """
    Time unit for ``t_norm`` and where it came from.

    The configured reference pair's first crossing of ``threshold`` wins; else
    the fastest trace's; else the grid end.
    """
    if reference_pair is not None:
        for trace in traces:
            if tuple(trace.pair) == tuple(reference_pair):
                crossing = trace.time_below(threshold)
                if crossing is not None and crossing > 0:
                    return crossing, f"pair {reference_pair[0]}-{reference_pair[1]}"
                logger.warning("Reference pair %s never drops below %g", reference_pair, threshold)
                break
    crossings = [(trace.time_below(threshold), trace.pair) for trace in traces]
    crossings = [(t, pair) for t, pair in crossings if t is not None and t > 0]
    if crossings:
        t, pair = min(crossings)
        return t, f"fastest pair {pair[0]}-{pair[1]}"
    grid_end = max(float(trace.times[-1]) for trace in traces) if traces else 1.0
    return grid_end, "grid end"


def _trace_table(trace: CoherenceTrace, t_unit: float) -> np.ndarray:
    values = trace.values
    return np.column_stack([
        trace.times,
        trace.times / t_unit,
        values.real,
        values.imag,
        np.abs(values),
        np.abs(values) ** 2,
    ])


def write_trace(path: Path, trace: CoherenceTrace, t_unit: float, header: List[str]):
    with open(path, "w", newline="") as handle:
        for line in header:
            handle.write(f"# {line}\n")
        np.savetxt(handle, _trace_table(trace, t_unit), fmt="%.12e", delimiter=",", header=",".join(COLUMNS), comments="")


def trace_filename(trace: CoherenceTrace, prefix: str = "pair") -> str:
    return f"{prefix}_{trace.pair[0]}_{trace.pair[1]}.csv"


def write_results(result: ExperimentResult, directory: Optional[Union[str, Path]] = None) -> Dict[str, Path]:
    """Write every trace, ``summary.csv`` and ``manifest.json``; returns the paths by name"""
    directory = Path(directory or result.config.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(result)
    digest = manifest["sha256"]

    t_unit, source = normalization_time(result.traces, result.config.output.reference_pair)
    header = [
        f"manifest_sha256: {digest}",
        f"t_norm unit: {t_unit:.12e} us ({source})",
    ]
    written: Dict[str, Path] = {}
    for trace in result.traces:
        path = directory / trace_filename(trace)
        write_trace(path, trace, t_unit, header + [f"pair: {trace.pair[0]} {trace.pair[1]}"])
        written[path.name] = path
    if result.reference is not None:
        path = directory / trace_filename(result.reference, prefix="reference")
        write_trace(path, result.reference, t_unit, header + [f"reference: {result.config.reference_scenario}"])
        written[path.name] = path

    summary = directory / "summary.csv"
    with open(summary, "w", newline="") as handle:
        handle.write(f"# manifest_sha256: {digest}\n")
        writer = csv.writer(handle)
        writer.writerow(["alpha", "beta", "delta", "clock_mismatch", "transition_moment",
                         "t_half_us", "t_1e-3_us", "min_abs_L", "file"])
        metrics = {tuple(m.pair): m for m in result.metrics}
        for trace in result.traces:
            m = metrics.get(tuple(trace.pair))
            writer.writerow([
                trace.pair[0], trace.pair[1],
                "" if m is None else f"{m.delta:.6g}",
                "" if m is None else f"{m.clock_mismatch:.6g}",
                "" if m is None else f"{m.transition_moment:.6g}",
                _time_label(trace.t_half()),
                _time_label(trace.time_below(NORMALIZATION_THRESHOLD)),
                f"{trace.abs_values.min():.6g}",
                trace_filename(trace),
            ])
        if result.reference is not None:
            ref = result.reference
            writer.writerow([
                ref.pair[0], ref.pair[1], "", "", "",
                _time_label(ref.t_half()),
                _time_label(ref.time_below(NORMALIZATION_THRESHOLD)),
                f"{ref.abs_values.min():.6g}",
                trace_filename(ref, prefix="reference"),
            ])
    written[summary.name] = summary

    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written[manifest_path.name] = manifest_path
    logger.info("Wrote %d files to %s", len(written), directory)
    return written


def _time_label(value: Optional[float]) -> str:
    return "beyond-grid" if value is None else f"{value:.6g}"


def write_scan(rows: Sequence[ScanRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["alpha", "beta", "delta", "clock_mismatch", "transition_moment", "t_half_us"])
        for row in rows:
            writer.writerow([row.alpha, row.beta, f"{row.delta:.6g}", f"{row.clock_mismatch:.6g}",
                             f"{row.transition_moment:.6g}", row.t_half_label])
    return path


def write_bath(path: Union[str, Path], sites: Sequence[SpinSite], spec: Dict[str, Any]) -> Path:
    """Bath file usable as a ``model.bath`` section (explicit sites) with the generating spec alongside"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    species = {site.species_label for site in sites}
    data = {
        "generated_from": spec,
        "bath": {
            "sites": [
                {
                    "position": site.position.tolist(),
                    "s": site.s,
                    "gamma": {"species": site.species_label} if site.species_label else
                             {"tensor": (site.gamma / MU_N).tolist()},
                }
                for site in sites
            ],
        },
    }
    path.write_text(json.dumps(data, indent=2))
    logger.info("Wrote %d bath spins (%s) to %s", len(sites), ", ".join(sorted(species)) or "explicit", path)
    return path
