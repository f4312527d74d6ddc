"""Random nuclear spin baths by rejection sampling in a ball."""

import logging
from typing import List, Optional, Sequence

import numpy as np

from spinbath.constants import SPECIES
from spinbath.exceptions import BathGenerationError, ConfigError
from spinbath.models.config_models import BathSpec
from spinbath.models.spin_models import SpinSite

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10 ** 6
BATCH = 4096


def species_properties(label: str) -> dict:
    try:
        return SPECIES[label]
    except KeyError:
        raise ConfigError(f"Unknown bath species '{label}'; expected one of {sorted(SPECIES)}")


def sample_positions(
    n: int,
    radius: float,
    min_dist: float,
    rng: np.random.Generator,
    exclusion: Optional[np.ndarray] = None,
    center: Optional[np.ndarray] = None,
    max_attempts: int = MAX_ATTEMPTS,
) -> np.ndarray:
    """
    (n, 3) points uniform in the ball, pairwise at least ``min_dist`` apart and
    at least ``min_dist`` from every ``exclusion`` point.

    Candidates are drawn in the bounding cube and accepted one at a time, so
    the sequence depends only on the generator state.
    """
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    blocked = np.zeros((0, 3)) if exclusion is None else np.asarray(exclusion, dtype=float).reshape(-1, 3)
    accepted = np.empty((n, 3))
    count = 0
    attempts = 0
    limit_sq = min_dist * min_dist

    while count < n:
        if attempts >= max_attempts:
            raise BathGenerationError(
                f"Placed {count} of {n} spins in {max_attempts} attempts "
                f"(radius {radius} Å, min_dist {min_dist} Å)"
            )
        batch = rng.uniform(-radius, radius, size=(BATCH, 3))
        for offset in batch:
            attempts += 1
            if offset @ offset > radius * radius:
                continue
            point = center + offset
            if len(blocked) and np.min(np.sum((blocked - point) ** 2, axis=1)) < limit_sq:
                continue
            if count and np.min(np.sum((accepted[:count] - point) ** 2, axis=1)) < limit_sq:
                continue
            accepted[count] = point
            count += 1
            if count == n or attempts >= max_attempts:
                break

    logger.info("Placed %d bath spins in %d attempts", n, attempts)
    return accepted


def generate_bath(spec: BathSpec, exclusion: Optional[Sequence[Sequence[float]]] = None) -> List[SpinSite]:
    """
    Bath sites for ``spec``. ``exclusion`` (usually the system positions)
    overrides ``spec.exclusion``; the seed defaults to 0.
    """
    species = species_properties(spec.species)
    points = spec.exclusion if exclusion is None else exclusion
    rng = np.random.default_rng(0 if spec.seed is None else spec.seed)
    positions = sample_positions(
        spec.n,
        spec.radius,
        spec.min_dist,
        rng,
        exclusion=None if points is None else np.asarray(points, dtype=float),
        center=np.asarray(spec.center, dtype=float),
    )
    gamma = species["gyro"] * np.eye(3)
    return [
        SpinSite(position=position, s=species["spin"], gamma=gamma, species_label=spec.species)
        for position in positions
    ]
