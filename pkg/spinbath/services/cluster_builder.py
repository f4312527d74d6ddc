"""
Bath cluster enumeration.

Singletons are every bath spin; pairs come from a radius query (or every
pair when the cutoff is infinite); higher orders grow by adding a
neighbour of any member. A cluster is kept only when all of its
sub-clusters one size down are present, so the family is closed.
"""

import logging
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np

from spinbath.exceptions import ConfigError
from spinbath.models.dynamics_models import Cluster
from spinbath.models.spin_models import SpinModel
from spinbath.services.hamiltonian_builder import dipolar_tensors, neighbor_pairs, system_bath_array

logger = logging.getLogger(__name__)


def _pair_couplings(model: SpinModel, pairs: np.ndarray) -> np.ndarray:
    if model.bath_couplings is not None:
        return model.bath_couplings.lookup(pairs)
    positions, gammas = model.bath_positions, model.bath_gammas
    return dipolar_tensors(positions[pairs[:, 0]], positions[pairs[:, 1]], gammas[pairs[:, 0]], gammas[pairs[:, 1]])


def cluster_arrays(
    model: SpinModel,
    order: int,
    pair_cutoff: float = np.inf,
    coupling_threshold: Optional[float] = None,
) -> Dict[int, np.ndarray]:
    """Clusters per order as lexicographically sorted (M, order) index arrays"""
    if order < 1:
        raise ConfigError(f"Cluster order must be at least 1, got {order}")
    n = len(model.bath_sites)
    arrays = {1: np.arange(n, dtype=np.int64).reshape(-1, 1)}
    if order == 1 or n < 2:
        return arrays

    pairs = neighbor_pairs(model.bath_positions, pair_cutoff)
    if coupling_threshold is not None and len(pairs):
        norms = np.linalg.norm(_pair_couplings(model, pairs), axis=(1, 2))
        pairs = pairs[norms >= coupling_threshold]
    arrays[2] = pairs
    logger.info("Enumerated %d bath pairs (cutoff %s Å)", len(pairs), pair_cutoff)

    neighbors: Dict[int, set] = {j: set() for j in range(n)}
    for i, j in pairs:
        neighbors[int(i)].add(int(j))
        neighbors[int(j)].add(int(i))

    previous = {tuple(int(m) for m in row) for row in pairs}
    for size in range(3, order + 1):
        grown = set()
        for members in previous:
            reach = set().union(*(neighbors[m] for m in members)) - set(members)
            for extra in reach:
                candidate = tuple(sorted(members + (extra,)))
                if all(sub in previous for sub in combinations(candidate, size - 1)):
                    grown.add(candidate)
        arrays[size] = np.array(sorted(grown), dtype=np.int64).reshape(-1, size)
        logger.info("Enumerated %d clusters of size %d", len(grown), size)
        previous = grown
        if not grown:
            break
    return arrays


def enumerate_clusters(
    model: SpinModel,
    order: int,
    pair_cutoff: float = np.inf,
    coupling_threshold: Optional[float] = None,
) -> List[Cluster]:
    """All clusters up to ``order`` in canonical (size, then lexicographic) order"""
    arrays = cluster_arrays(model, order, pair_cutoff, coupling_threshold)
    return [Cluster(tuple(row)) for size in sorted(arrays) for row in arrays[size].tolist()]


def group_by_order(clusters: List[Cluster]) -> Dict[int, np.ndarray]:
    """Inverse of ``enumerate_clusters``: sorted index arrays per order (empty cluster dropped)"""
    grouped: Dict[int, list] = {}
    for cluster in clusters:
        if cluster.order:
            grouped.setdefault(cluster.order, []).append(cluster.members)
    arrays = {}
    for size, rows in grouped.items():
        array = np.unique(np.array(rows, dtype=np.int64).reshape(-1, size), axis=0)
        arrays[size] = array
    return arrays


def strongest_clusters(model: SpinModel, count: int = 50, pair_cutoff: float = np.inf) -> List[Cluster]:
    """
    The ``count`` bath spins most strongly coupled to the system plus the
    ``count`` most strongly coupled bath pairs.
    """
    n = len(model.bath_sites)
    if n == 0:
        return []
    strength = np.linalg.norm(system_bath_array(model), axis=(2, 3)).sum(axis=0)
    singles = np.sort(np.argsort(-strength, kind="stable")[:count])
    clusters = [Cluster((int(j),)) for j in singles]

    pairs = neighbor_pairs(model.bath_positions, pair_cutoff)
    if len(pairs):
        norms = np.linalg.norm(_pair_couplings(model, pairs), axis=(1, 2))
        chosen = pairs[np.sort(np.argsort(-norms, kind="stable")[:count])]
        clusters.extend(Cluster((int(i), int(j))) for i, j in chosen)
    return clusters
