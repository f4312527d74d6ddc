"""
Cluster correlation expansion of the coherence factor.

L(t) = prod_C Ltilde_C(t) with Ltilde_C = L_C / prod_{S subset of C} Ltilde_S,
where L_C = tr(U_C^beta(t)^dagger U_C^alpha(t) rho_C) is evaluated on the
cluster subspace with every out-of-cluster spin replaced by its mean field.
Clusters are processed in fixed-size chunks on a thread pool; chunking does
not depend on the worker count, so results are identical for any pool size.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from spinbath.exceptions import ClosureError, ConfigError, DimensionGuardError
from spinbath.models.dynamics_models import (
    BathState,
    Cluster,
    CoherenceTrace,
    ConditionalHamiltonian,
    ConvergenceReport,
    PulseSequence,
)
from spinbath.models.spin_models import SpinModel
from spinbath.services import spin_operators
from spinbath.services.cluster_builder import cluster_arrays, group_by_order

logger = logging.getLogger(__name__)

DIVISION_GUARD = 1e-12
EXACT_MAX_DIM = 2 ** 14
DEFAULT_CHUNK_SIZE = 128
# complex entries per propagator stack; longer time grids are evaluated in slices
PROPAGATOR_BUDGET = 2 ** 21
CONVERGENCE_TOLERANCE = 0.01

MIXED = BathState()


def default_workers() -> int:
    """Worker count from SPINBATH_WORKERS, else the CPU count"""
    value = os.environ.get("SPINBATH_WORKERS")
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"SPINBATH_WORKERS must be a positive integer, got {value!r}")
    if workers < 1:
        raise ConfigError(f"SPINBATH_WORKERS must be a positive integer, got {value!r}")
    return workers


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float).reshape(-1)
    if not len(times) or times[0] < 0 or np.any(np.diff(times) <= 0) or not np.all(np.isfinite(times)):
        raise ConfigError("Time grid must be finite, non-negative and strictly ascending")
    return times


@lru_cache(maxsize=32)
def _cluster_operators(dims: Tuple[int, ...]):
    """Embedded spin vectors, on-site products and pair products for one cluster shape"""
    spins = [(d - 1) / 2.0 for d in dims]
    S = np.stack(spin_operators.spin_operators(spins)) if dims else np.zeros((0, 3, 1, 1))
    on_site = np.einsum("amij,anjk->amnik", S, S)
    pairs = list(combinations(range(len(dims)), 2))
    if pairs:
        left = np.array([a for a, _ in pairs])
        right = np.array([b for _, b in pairs])
        between = np.einsum("pmij,pnjk->pmnik", S[left], S[right])
    else:
        left = right = np.zeros(0, dtype=int)
        between = np.zeros((0, 3, 3) + S.shape[-2:], dtype=complex)
    return S, on_site, left, right, between


class MeanField(BaseModel):
    """
    Out-of-cluster background of one conditional Hamiltonian.

    ``mean`` holds <I_j>; ``field`` the field every other spin exerts on j
    through mean values; ``site_energy`` the per-spin scalar removed when a
    spin joins a cluster; ``total`` the scalar of the empty cluster.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    field: np.ndarray
    site_energy: np.ndarray
    total: float

    @property
    def polarized(self) -> bool:
        return bool(np.any(self.mean != 0.0))


def mean_field(h: ConditionalHamiltonian, bath_state: BathState = MIXED) -> MeanField:
    bath = h.bath
    n = h.size
    dims = bath.dims
    bath_state.check_size(n)

    mean = np.zeros((n, 3))
    moments = np.zeros((n, 3, 3), dtype=complex)
    for j in range(n):
        rho = bath_state.site_density(j, int(dims[j]))
        S = np.stack(spin_operators.spin_matrices(bath.spins[j]).vector)
        mean[j] = np.real(np.einsum("ij,mji->m", rho, S))
        moments[j] = np.einsum("ij,mjk,nki->mn", rho, S, S)

    site_tensors = h.site_tensors(np.arange(n))
    quadratic = np.real(np.einsum("jmn,jmn->j", moments, site_tensors))
    linear = np.einsum("jm,jm->j", h.fields, mean)

    field = np.zeros((n, 3))
    if np.any(mean != 0.0):
        table = bath.couplings
        if len(table):
            a, b = table.pairs[:, 0], table.pairs[:, 1]
            np.add.at(field, a, np.einsum("kmn,kn->km", table.tensors, mean[b]))
            np.add.at(field, b, np.einsum("kmn,km->kn", table.tensors, mean[a]))
        if h.has_second_order:
            z = np.einsum("pln,ln->p", h.sw_vectors.conj(), mean)
            field += 2.0 * np.real(np.einsum("p,pjn,p->jn", h.sw_weights, h.sw_vectors, z))
            field -= 2.0 * np.einsum("jmn,jn->jm", np.real(h.induced_site_tensors(np.arange(n))), mean)

    coupling = np.einsum("jm,jm->j", mean, field)
    total = h.offset + float(np.sum(linear + quadratic) + 0.5 * np.sum(coupling))
    return MeanField(mean=mean, field=field, site_energy=linear + quadratic + coupling, total=total)


def _hamiltonian_stack(
    h: ConditionalHamiltonian, background: MeanField, members: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (B, D, D) operator parts and (B,) scalar parts of the cluster Hamiltonians
    for a (B, n) array of clusters sharing one shape.
    """
    members = np.asarray(members, dtype=np.int64)
    B, n = members.shape
    if n == 0:
        return np.zeros((B, 1, 1), dtype=complex), np.full(B, background.total)

    dims = tuple(int(d) for d in h.bath.dims[members[0]])
    S, on_site, left, right, between = _cluster_operators(dims)

    flat = members.ravel()
    fields = (h.fields[flat] + background.field[flat]).reshape(B, n, 3)
    site_tensors = h.site_tensors(flat).reshape(B, n, 3, 3)
    scalar = background.total - background.site_energy[flat].reshape(B, n).sum(axis=1)

    pair_index = np.column_stack([members[:, left].ravel(), members[:, right].ravel()])
    pair_tensors = h.pair_tensors(pair_index).reshape(B, len(left), 3, 3)

    if background.polarized:
        # in-cluster partners were counted in the background field; take them back out
        m_left = background.mean[members[:, left]]
        m_right = background.mean[members[:, right]]
        correction = np.zeros((B, n, 3))
        np.add.at(correction, (slice(None), left), np.einsum("bpmn,bpn->bpm", pair_tensors, m_right))
        np.add.at(correction, (slice(None), right), np.einsum("bpmn,bpm->bpn", pair_tensors, m_left))
        fields -= correction
        scalar += np.einsum("bpm,bpmn,bpn->b", m_left, pair_tensors, m_right)

    H = np.einsum("bam,amij->bij", fields, S).astype(complex)
    H += np.einsum("bamn,amnij->bij", site_tensors, on_site)
    if len(left):
        H += np.einsum("bpmn,pmnij->bij", pair_tensors, between)
    return H, scalar


def cluster_hamiltonians(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    cluster: Cluster,
    bath_state: BathState = MIXED,
) -> Tuple[np.ndarray, np.ndarray]:
    """H^alpha and H^beta restricted to ``cluster`` with mean-field surroundings"""
    members = np.array([cluster.members], dtype=np.int64).reshape(1, cluster.order)
    H_alpha, c_alpha = _hamiltonian_stack(h_alpha, mean_field(h_alpha, bath_state), members)
    H_beta, c_beta = _hamiltonian_stack(h_beta, mean_field(h_beta, bath_state), members)
    identity = np.eye(H_alpha.shape[-1])
    return H_alpha[0] + c_alpha[0] * identity, H_beta[0] + c_beta[0] * identity


def _branch_propagators(E_first, V_first, E_second, V_second, pulses: PulseSequence, times: np.ndarray) -> np.ndarray:
    """Propagator of the branch that starts under the ``first`` Hamiltonian"""
    k = pulses.k
    if pulses.is_uniform and k >= 1:
        step = times / (2 * k)
        W_first = spin_operators.spectral_propagators(E_first, V_first, step)
        W_second = spin_operators.spectral_propagators(E_second, V_second, step)
        X = W_second @ W_first
        Y = W_first @ W_second
        U = np.linalg.matrix_power(Y @ X, k // 2)
        return X @ U if k % 2 else U

    cache: Dict[Tuple[int, float], np.ndarray] = {}
    U = None
    for m, fraction in enumerate(pulses.interval_fractions()):
        parity = m % 2
        key = (parity, float(fraction))
        if key not in cache:
            E, V = (E_first, V_first) if parity == 0 else (E_second, V_second)
            cache[key] = spin_operators.spectral_propagators(E, V, times * fraction)
        U = cache[key] if U is None else cache[key] @ U
    return U


def _coherence_stack(
    H_alpha: np.ndarray,
    H_beta: np.ndarray,
    pulses: PulseSequence,
    times: np.ndarray,
    rho: Optional[np.ndarray] = None,
    scalar_shift: Optional[np.ndarray] = None,
    time_chunk: Optional[int] = None,
) -> np.ndarray:
    """
    (B, T) coherence factors for stacks of cluster Hamiltonian pairs.

    ``scalar_shift`` is the (B,) difference of scalar parts c^alpha - c^beta
    left out of the matrices; it only contributes a phase. Propagators are
    built for at most ``time_chunk`` grid points at a time (default: as many
    as fit PROPAGATOR_BUDGET).
    """
    B, D = H_alpha.shape[0], H_alpha.shape[-1]
    if time_chunk is None:
        time_chunk = max(1, PROPAGATOR_BUDGET // (B * D * D))
    E_a, V_a = spin_operators.eigh(H_alpha)
    E_b, V_b = spin_operators.eigh(H_beta)
    if rho is not None:
        rho = np.broadcast_to(rho, H_alpha.shape)

    values = np.empty((B, len(times)), dtype=complex)
    for start in range(0, len(times), time_chunk):
        block = slice(start, start + time_chunk)
        U_alpha = _branch_propagators(E_a, V_a, E_b, V_b, pulses, times[block])
        U_beta = _branch_propagators(E_b, V_b, E_a, V_a, pulses, times[block])
        if rho is None:
            values[:, block] = np.einsum("btji,btji->bt", U_beta.conj(), U_alpha, optimize=True) / D
        else:
            values[:, block] = np.einsum("btji,btjk,bki->bt", U_beta.conj(), U_alpha, rho, optimize=True)
    if scalar_shift is not None:
        values = values * _scalar_phase(scalar_shift, pulses, times)
    return values


def _scalar_phase(shift: np.ndarray, pulses: PulseSequence, times: np.ndarray) -> np.ndarray:
    """exp(-i (c^alpha - c^beta) (t_even - t_odd)); zero imbalance for a balanced echo"""
    fractions = pulses.interval_fractions()
    imbalance = float(np.sum(fractions[0::2]) - np.sum(fractions[1::2]))
    if abs(imbalance) < 1e-12:
        return np.ones((len(np.atleast_1d(shift)), len(times)))
    return np.exp(-1j * np.asarray(shift, dtype=float).reshape(-1, 1) * imbalance * times[None, :])


def cluster_coherence(
    H_alpha: np.ndarray,
    H_beta: np.ndarray,
    pulses: PulseSequence,
    times: Sequence[float],
    rho: Optional[np.ndarray] = None,
    time_chunk: Optional[int] = None,
) -> np.ndarray:
    """
    L_C(t) = tr(U^beta(t)^dagger U^alpha(t) rho_C) for one cluster.

    ``rho`` is the cluster density matrix; None means maximally mixed.
    """
    H_alpha = np.asarray(H_alpha, dtype=complex)
    H_beta = np.asarray(H_beta, dtype=complex)
    if H_alpha.shape != H_beta.shape:
        raise ConfigError(f"Cluster Hamiltonians differ in shape: {H_alpha.shape} vs {H_beta.shape}")
    times = _check_times(times)
    stack_rho = None if rho is None else np.asarray(rho, dtype=complex)[None]
    return _coherence_stack(H_alpha[None], H_beta[None], pulses, times, stack_rho, time_chunk=time_chunk)[0]


def _stack_density(bath_state: BathState, members: np.ndarray, dims: np.ndarray) -> Optional[np.ndarray]:
    if bath_state.is_mixed:
        return None
    if bath_state.kind == "uniform":
        return bath_state.cluster_density(tuple(int(m) for m in members[0]), dims)[None]
    return np.stack([bath_state.cluster_density(tuple(int(m) for m in row), dims) for row in members])


def _normalize_clusters(clusters: Union[Sequence[Cluster], Dict[int, np.ndarray]]) -> Dict[int, np.ndarray]:
    if isinstance(clusters, dict):
        arrays = {}
        for size, array in clusters.items():
            array = np.asarray(array, dtype=np.int64).reshape(-1, size)
            arrays[size] = np.unique(array, axis=0) if len(array) else array
        return arrays
    return group_by_order(list(clusters))


def check_closure(arrays: Dict[int, np.ndarray]):
    """Every cluster's sub-clusters one size down must be present"""
    for size in sorted(arrays):
        if size < 2 or not len(arrays[size]):
            continue
        lower = arrays.get(size - 1)
        if lower is None or not len(lower):
            raise ClosureError(f"Clusters of size {size} given without any of size {size - 1}")
        if size == 2:
            present = np.isin(arrays[2], lower[:, 0])
            if not present.all():
                row = arrays[2][np.nonzero(~present.all(axis=1))[0][0]]
                raise ClosureError(f"Cluster {tuple(row)} is missing a singleton sub-cluster")
            continue
        known = {tuple(row) for row in lower.tolist()}
        for row in arrays[size].tolist():
            for sub in combinations(row, size - 1):
                if sub not in known:
                    raise ClosureError(f"Cluster {tuple(row)} is missing sub-cluster {sub}")


def _shape_groups(members: np.ndarray, dims: np.ndarray) -> List[np.ndarray]:
    """Row indices of clusters grouped by member dimensions (one group for uniform baths)"""
    if not len(members) or np.all(dims == dims[0]):
        return [np.arange(len(members))]
    shapes = dims[members]
    _, inverse = np.unique(shapes, axis=0, return_inverse=True)
    return [np.nonzero(inverse.reshape(-1) == g)[0] for g in range(inverse.max() + 1)]


def _chunks(members: np.ndarray, dims: np.ndarray, chunk_size: int) -> List[np.ndarray]:
    chunks = []
    for group in _shape_groups(members, dims):
        chunks.extend(group[start:start + chunk_size] for start in range(0, len(group), chunk_size))
    return chunks


def _guarded_ratio(numerator: np.ndarray, denominator: np.ndarray) -> Tuple[np.ndarray, int]:
    small = np.abs(denominator) < DIVISION_GUARD
    ratio = np.ones_like(numerator)
    np.divide(numerator, denominator, out=ratio, where=~small)
    return ratio, int(small.sum())


class _Correlations:
    """Irreducible contributions Ltilde of every evaluated order, indexed by cluster"""

    def __init__(self, arrays: Dict[int, np.ndarray], tilde_empty: np.ndarray):
        self.arrays = arrays
        self.tilde_empty = tilde_empty
        self.tildes: Dict[int, np.ndarray] = {}
        self._lookup: Dict[int, Dict[Tuple[int, ...], int]] = {}

    def store(self, size: int, tildes: np.ndarray):
        self.tildes[size] = tildes
        self._lookup[size] = {tuple(row): n for n, row in enumerate(self.arrays[size].tolist())}

    def denominators(self, block: np.ndarray) -> np.ndarray:
        """prod over proper sub-clusters S of Ltilde_S for a (B, n) block of clusters"""
        B, size = block.shape
        if size == 1:
            return np.broadcast_to(self.tilde_empty, (B, len(self.tilde_empty)))
        if size == 2:
            singles = self.arrays[1][:, 0]
            first = np.searchsorted(singles, block[:, 0])
            second = np.searchsorted(singles, block[:, 1])
            return self.tilde_empty * self.tildes[1][first] * self.tildes[1][second]

        result = np.empty((B, len(self.tilde_empty)), dtype=complex)
        for n, row in enumerate(block.tolist()):
            product = self.tilde_empty.copy()
            for sub_size in range(1, size):
                lookup = self._lookup[sub_size]
                for sub in combinations(row, sub_size):
                    product *= self.tildes[sub_size][lookup[sub]]
            result[n] = product
        return result


def _evaluate_order(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    bg_alpha: MeanField,
    bg_beta: MeanField,
    members: np.ndarray,
    correlations: _Correlations,
    pulses: PulseSequence,
    times: np.ndarray,
    bath_state: BathState,
    workers: int,
    chunk_size: int,
    keep: bool,
    time_chunk: Optional[int] = None,
) -> Tuple[np.ndarray, int]:
    """
    Ltilde for every cluster of one size.

    With ``keep`` the (M, T) array of contributions is returned; otherwise
    only their (T,) product, so the largest order is never held in memory.
    """
    dims = h_alpha.bath.dims
    chunks = _chunks(members, dims, chunk_size)

    def run(rows: np.ndarray):
        block = members[rows]
        H_alpha, c_alpha = _hamiltonian_stack(h_alpha, bg_alpha, block)
        H_beta, c_beta = _hamiltonian_stack(h_beta, bg_beta, block)
        rho = _stack_density(bath_state, block, dims)
        values = _coherence_stack(H_alpha, H_beta, pulses, times, rho, c_alpha - c_beta, time_chunk)
        tildes, hits = _guarded_ratio(values, correlations.denominators(block))
        return (tildes if keep else np.prod(tildes, axis=0)), hits

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(rows) for rows in chunks]
    logger.debug("Evaluated %d clusters of size %d in %d chunks", len(members), members.shape[1], len(chunks))

    hits = sum(count for _, count in results)
    if keep:
        tildes = np.empty((len(members), len(times)), dtype=complex)
        for rows, (block_tildes, _) in zip(chunks, results):
            tildes[rows] = block_tildes
        return tildes, hits
    product = np.ones(len(times), dtype=complex)
    for block_product, _ in results:
        product *= block_product
    return product, hits


def cce_coherence(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    clusters: Union[Sequence[Cluster], Dict[int, np.ndarray]],
    pulses: PulseSequence,
    times: Sequence[float],
    bath_state: BathState = MIXED,
    order: Optional[int] = None,
    workers: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    time_chunk: Optional[int] = None,
) -> CoherenceTrace:
    """CCE product over every cluster up to ``order`` (default: the largest given)"""
    times = _check_times(times)
    arrays = _normalize_clusters(clusters)
    if order is not None:
        arrays = {size: array for size, array in arrays.items() if size <= order}
    arrays = {size: array for size, array in arrays.items() if len(array)}
    check_closure(arrays)
    workers = default_workers() if workers is None else max(1, int(workers))

    bg_alpha = mean_field(h_alpha, bath_state)
    bg_beta = mean_field(h_beta, bath_state)
    empty = np.zeros((1, 0), dtype=np.int64)
    H_alpha, c_alpha = _hamiltonian_stack(h_alpha, bg_alpha, empty)
    H_beta, c_beta = _hamiltonian_stack(h_beta, bg_beta, empty)
    tilde_empty = _coherence_stack(H_alpha, H_beta, pulses, times, scalar_shift=c_alpha - c_beta)[0]

    correlations = _Correlations(arrays, tilde_empty)
    total = tilde_empty.copy()
    guard_hits = 0
    sizes = sorted(arrays)
    for size in sizes:
        keep = size != sizes[-1]
        result, hits = _evaluate_order(
            h_alpha, h_beta, bg_alpha, bg_beta, arrays[size], correlations,
            pulses, times, bath_state, workers, chunk_size, keep, time_chunk,
        )
        guard_hits += hits
        if keep:
            correlations.store(size, result)
            total *= np.prod(result, axis=0)
        else:
            total *= result

    if guard_hits:
        logger.warning("Division guard replaced %d cluster contributions with 1", guard_hits)
    return CoherenceTrace(
        times=times,
        values=total,
        pair=(h_alpha.state_index, h_beta.state_index),
        meta={
            "method": "cce",
            "order": max(arrays) if arrays else 0,
            "clusters": {str(size): int(len(array)) for size, array in sorted(arrays.items())},
            "pulses": pulses.k,
            "second_order": bool(h_alpha.has_second_order or h_beta.has_second_order),
            "guard_hits": guard_hits,
        },
    )


def _full_hamiltonian(h: ConditionalHamiltonian) -> np.ndarray:
    """H^psi on the whole bath space, without the scalar E_psi"""
    dims = [int(d) for d in h.bath.dims]
    n = len(dims)
    D = int(np.prod(dims, dtype=np.int64))
    spin_sets = [spin_operators.spin_matrices(s).vector for s in h.bath.spins]
    H = np.zeros((D, D), dtype=complex)

    fields = h.fields
    site_tensors = h.site_tensors(np.arange(n))
    for j in range(n):
        local = sum(fields[j, m] * spin_sets[j][m] for m in range(3))
        local = local + sum(site_tensors[j, m, k] * spin_sets[j][m] @ spin_sets[j][k] for m in range(3) for k in range(3))
        H += spin_operators.embed(local, j, dims).matrix

    if n > 1:
        pairs = np.column_stack(np.triu_indices(n, k=1))
        tensors = h.pair_tensors(pairs)
        for (j, l), tensor in zip(pairs, tensors):
            for m in range(3):
                for k in range(3):
                    if tensor[m, k] != 0.0:
                        H += tensor[m, k] * spin_operators.embed_product(
                            {int(j): spin_sets[j][m], int(l): spin_sets[l][k]}, dims
                        ).matrix
    return H


def exact_coherence(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    model: SpinModel,
    pulses: PulseSequence,
    times: Sequence[float],
    bath_state: BathState = MIXED,
    max_dim: int = EXACT_MAX_DIM,
) -> CoherenceTrace:
    """Coherence factor on the full bath space, independent of the cluster machinery"""
    times = _check_times(times)
    if h_alpha.size != len(model.bath_sites) or h_beta.size != len(model.bath_sites):
        raise ConfigError("Conditional Hamiltonians do not match the model's bath")
    dims = [int(d) for d in h_alpha.bath.dims]
    D = int(np.prod(dims, dtype=np.int64))
    if D > max_dim:
        raise DimensionGuardError(f"Bath dimension {D} exceeds the exact-evaluation limit {max_dim}")

    E_a, V_a = spin_operators.eigh(_full_hamiltonian(h_alpha))
    E_b, V_b = spin_operators.eigh(_full_hamiltonian(h_beta))
    # work in the eigenbasis of H^alpha; H^beta propagators go through the overlap M
    M = V_a.conj().T @ V_b
    if bath_state.is_mixed:
        rho = None
    else:
        rho_full = np.ones((1, 1), dtype=complex)
        for rho_j in bath_state.densities(np.array(dims)):
            rho_full = np.kron(rho_full, rho_j)
        rho = V_a.conj().T @ rho_full @ V_a

    intervals = pulses.interval_fractions()

    def evolve(t: float, start_alpha: bool) -> np.ndarray:
        U = np.eye(D, dtype=complex)
        for m, fraction in enumerate(intervals):
            under_alpha = (m % 2 == 0) == start_alpha
            if under_alpha:
                U = np.exp(-1j * E_a * fraction * t)[:, None] * U
            else:
                U = M @ (np.exp(-1j * E_b * fraction * t)[:, None] * (M.conj().T @ U))
        return U

    values = np.empty(len(times), dtype=complex)
    hahn_mixed = rho is None and pulses.k == 1 and pulses.is_uniform
    for n, t in enumerate(times):
        if hahn_mixed:
            # tr(X^dag A^dag X A) / D with A = W^alpha(t/2) diagonal and X = W^beta(t/2)
            a = np.exp(-0.5j * E_a * t)
            X = M @ (np.exp(-0.5j * E_b * t)[:, None] * M.conj().T)
            values[n] = np.conj(a) @ (np.abs(X) ** 2 @ a) / D
            continue
        U_alpha = evolve(t, True)
        U_beta = evolve(t, False)
        if rho is None:
            values[n] = np.vdot(U_beta, U_alpha) / D
        else:
            values[n] = np.trace(U_beta.conj().T @ U_alpha @ rho)
    values *= _scalar_phase(np.array([h_alpha.offset - h_beta.offset]), pulses, times)[0]

    logger.info("Exact coherence over a %d-dimensional bath", D)
    return CoherenceTrace(
        times=times,
        values=values,
        pair=(h_alpha.state_index, h_beta.state_index),
        meta={"method": "exact", "bath_dim": D, "pulses": pulses.k},
    )


def cce_for_model(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    model: SpinModel,
    pulses: PulseSequence,
    times: Sequence[float],
    order: int = 2,
    pair_cutoff: float = np.inf,
    coupling_threshold: Optional[float] = None,
    bath_state: BathState = MIXED,
    workers: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> CoherenceTrace:
    """Enumerate clusters for ``model`` and run the expansion"""
    arrays = cluster_arrays(model, order, pair_cutoff, coupling_threshold)
    trace = cce_coherence(h_alpha, h_beta, arrays, pulses, times, bath_state, order, workers, chunk_size)
    meta = dict(trace.meta, pair_cutoff=pair_cutoff)
    return trace.model_copy(update={"meta": meta})


def check_cutoff_convergence(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    model: SpinModel,
    pulses: PulseSequence,
    times: Sequence[float],
    pair_cutoff: float,
    order: int = 2,
    bath_state: BathState = MIXED,
    workers: Optional[int] = None,
    tolerance: float = CONVERGENCE_TOLERANCE,
) -> ConvergenceReport:
    """Re-run at 1.5x the pair cutoff and report the largest change in L"""
    extended = 1.5 * pair_cutoff
    if not np.isfinite(pair_cutoff):
        return ConvergenceReport(pair_cutoff=pair_cutoff, extended_cutoff=extended, max_change=0.0, converged=True)
    base = cce_for_model(h_alpha, h_beta, model, pulses, times, order, pair_cutoff, bath_state=bath_state, workers=workers)
    wide = cce_for_model(h_alpha, h_beta, model, pulses, times, order, extended, bath_state=bath_state, workers=workers)
    change = float(np.max(np.abs(wide.values - base.values)))
    converged = change < tolerance
    if not converged:
        logger.warning(
            "Pair cutoff %.2f Å not converged: |dL| = %.3g at %.2f Å", pair_cutoff, change, extended
        )
    return ConvergenceReport(pair_cutoff=pair_cutoff, extended_cutoff=extended, max_change=change, converged=converged)


class CCEService:
    """
    Coherence factors with fixed evaluation settings.

    ``workers`` defaults to default_workers(); ``chunk_size`` clusters and
    ``time_chunk`` grid points bound the size of each propagator stack.
    """

    def __init__(
        self,
        workers: Optional[int] = None,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        time_chunk: Optional[int] = None,
        max_dim: int = EXACT_MAX_DIM,
    ):
        if chunk_size < 1 or (time_chunk is not None and time_chunk < 1):
            raise ConfigError("Cluster and time chunk sizes must be positive")
        self.workers = default_workers() if workers is None else max(1, int(workers))
        self.chunk_size = chunk_size
        self.time_chunk = time_chunk
        self.max_dim = max_dim

    def coherence(
        self,
        h_alpha: ConditionalHamiltonian,
        h_beta: ConditionalHamiltonian,
        clusters: Union[Sequence[Cluster], Dict[int, np.ndarray]],
        pulses: PulseSequence,
        times: Sequence[float],
        bath_state: BathState = MIXED,
        order: Optional[int] = None,
    ) -> CoherenceTrace:
        return cce_coherence(
            h_alpha, h_beta, clusters, pulses, times, bath_state, order,
            self.workers, self.chunk_size, self.time_chunk,
        )

    def for_model(
        self,
        h_alpha: ConditionalHamiltonian,
        h_beta: ConditionalHamiltonian,
        model: SpinModel,
        pulses: PulseSequence,
        times: Sequence[float],
        order: int = 2,
        pair_cutoff: float = np.inf,
        coupling_threshold: Optional[float] = None,
        bath_state: BathState = MIXED,
    ) -> CoherenceTrace:
        arrays = cluster_arrays(model, order, pair_cutoff, coupling_threshold)
        trace = self.coherence(h_alpha, h_beta, arrays, pulses, times, bath_state, order)
        return trace.model_copy(update={"meta": dict(trace.meta, pair_cutoff=pair_cutoff)})

    def exact(
        self,
        h_alpha: ConditionalHamiltonian,
        h_beta: ConditionalHamiltonian,
        model: SpinModel,
        pulses: PulseSequence,
        times: Sequence[float],
        bath_state: BathState = MIXED,
    ) -> CoherenceTrace:
        return exact_coherence(h_alpha, h_beta, model, pulses, times, bath_state, self.max_dim)

    def convergence(
        self,
        h_alpha: ConditionalHamiltonian,
        h_beta: ConditionalHamiltonian,
        model: SpinModel,
        pulses: PulseSequence,
        times: Sequence[float],
        pair_cutoff: float,
        order: int = 2,
        bath_state: BathState = MIXED,
        tolerance: float = CONVERGENCE_TOLERANCE,
    ) -> ConvergenceReport:
        return check_cutoff_convergence(
            h_alpha, h_beta, model, pulses, times, pair_cutoff, order, bath_state, self.workers, tolerance
        )
