"""
Assembly of the system, bath and system-bath Hamiltonian pieces.

Only the system Hamiltonian is ever formed as a matrix. The bath is
described by per-site fields and pair tensors; cluster matrices are built
by the CCE engine from those.
"""

import logging
from typing import Sequence

import numpy as np
from sklearn.neighbors import NearestNeighbors

from spinbath.constants import DIPOLAR_PREFACTOR
from spinbath.exceptions import NumericalContractError, SingularityError
from spinbath.models.spin_models import BathTerms, InteractionTable, SpinModel
from spinbath.services import spin_operators

logger = logging.getLogger(__name__)

SYSTEM_HERMITIAN_RTOL = 1e-12


def dipolar_tensors(pos_i: np.ndarray, pos_j: np.ndarray, g_i: np.ndarray, g_j: np.ndarray) -> np.ndarray:
    """
    Batched point-dipole tensors in rad/µs.

    Positions are (M, 3) in Å and gyromagnetic tensors (M, 3, 3) in
    rad/µs/T. The tensor multiplies spin i on the left and spin j on the right.
    """
    r = np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float)
    distance = np.linalg.norm(r, axis=-1)
    if np.any(distance <= 0):
        raise SingularityError("Point-dipole kernel evaluated at coincident positions")

    # mu_i = g_i S_i, so S_i . g_i^T (1 - 3 r r) g_j . S_j
    g_i_r = np.einsum("mab,ma->mb", g_i, r)
    g_j_r = np.einsum("mab,ma->mb", g_j, r)
    isotropic = np.einsum("mab,mac->mbc", g_i, g_j)
    radial = np.einsum("mb,mc->mbc", g_i_r, g_j_r) / distance[:, None, None] ** 2
    return DIPOLAR_PREFACTOR / distance[:, None, None] ** 3 * (isotropic - 3.0 * radial)


def dipolar_tensor(pos_i, pos_j, g_i, g_j) -> np.ndarray:
    """Point-dipole tensor coupling spin i (left) to spin j (right)"""
    return dipolar_tensors(
        np.atleast_2d(pos_i), np.atleast_2d(pos_j),
        np.asarray(g_i, dtype=float)[None], np.asarray(g_j, dtype=float)[None],
    )[0]


def zfs_tensor(D: float, E: float = 0.0) -> np.ndarray:
    """Zero-field-splitting tensor diag(-D/3 + E, -D/3 - E, 2D/3)"""
    return np.diag([-D / 3.0 + E, -D / 3.0 - E, 2.0 * D / 3.0])


def exchange_tensor(J: Sequence[float], K: float = 0.0) -> np.ndarray:
    """Anisotropic exchange with a z-axis Dzyaloshinskii-Moriya term"""
    J = np.broadcast_to(np.asarray(J, dtype=float), (3,))
    return np.array([
        [J[0], K, 0.0],
        [-K, J[1], 0.0],
        [0.0, 0.0, J[2]],
    ])


def neighbor_pairs(positions: np.ndarray, cutoff: float = np.inf) -> np.ndarray:
    """Sorted (M, 2) array of index pairs i < j with |r_i - r_j| <= cutoff"""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if not np.isfinite(cutoff):
        return np.column_stack(np.triu_indices(n, k=1)).astype(np.int64)

    nn = NearestNeighbors(radius=cutoff).fit(positions)
    neighborhoods = nn.radius_neighbors(positions, return_distance=False)
    pairs = [(i, j) for i, hood in enumerate(neighborhoods) for j in hood if j > i]
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.array(pairs, dtype=np.int64)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def _pair_operator(left: np.ndarray, tensor: np.ndarray, right: np.ndarray) -> np.ndarray:
    return np.einsum("aij,ab,bjk->ik", left, tensor, right)


def build_system_hamiltonian(model: SpinModel) -> np.ndarray:
    """H_S = sum B.Gamma.S + sum_{i<j} S_i.D.S_j + sum S_i.D_ii.S_i over the product basis"""
    spins = [site.s for site in model.system_sites]
    operators = spin_operators.spin_operators(spins)
    dim = operators[0].shape[-1]
    H = np.zeros((dim, dim), dtype=complex)

    for site, S in zip(model.system_sites, operators):
        H += np.einsum("a,aij->ij", model.field @ site.gamma, S)
        if site.self_tensor is not None:
            H += _pair_operator(S, site.self_tensor, S)

    for (i, j), tensor in model.system_couplings:
        H += _pair_operator(operators[i], tensor, operators[j])

    try:
        H = spin_operators.check_hermitian(H, rtol=SYSTEM_HERMITIAN_RTOL)
    except NumericalContractError as e:
        raise NumericalContractError(f"System Hamiltonian assembly produced a non-Hermitian matrix: {e}")
    logger.debug("Assembled %d-dimensional system Hamiltonian", dim)
    return H


def build_bath_hamiltonian_terms(model: SpinModel, pair_cutoff: float = np.inf) -> BathTerms:
    """Bath Zeeman vectors b_j = B.gamma_j plus the J table (point-dipole when not explicit)"""
    n = len(model.bath_sites)
    self_tensors = np.zeros((n, 3, 3))
    for j, site in enumerate(model.bath_sites):
        if site.self_tensor is not None:
            self_tensors[j] = site.self_tensor

    return BathTerms(
        zeeman=np.einsum("a,jab->jb", model.field, model.bath_gammas) if n else np.zeros((0, 3)),
        positions=model.bath_positions,
        gammas=model.bath_gammas,
        spins=np.array([site.s for site in model.bath_sites], dtype=float),
        self_tensors=self_tensors,
        explicit_couplings=model.bath_couplings,
        pair_cutoff=pair_cutoff,
    )


def system_bath_array(model: SpinModel) -> np.ndarray:
    """A^{ij} as a dense (system, bath, 3, 3) array"""
    n_sys, n_bath = len(model.system_sites), len(model.bath_sites)
    if model.system_bath_couplings is not None:
        return model.system_bath_couplings.dense(n_sys, n_bath)
    if n_bath == 0:
        return np.zeros((n_sys, 0, 3, 3))

    i, j = np.meshgrid(np.arange(n_sys), np.arange(n_bath), indexing="ij")
    i, j = i.ravel(), j.ravel()
    tensors = dipolar_tensors(
        model.system_positions[i], model.bath_positions[j],
        model.system_gammas[i], model.bath_gammas[j],
    )
    return tensors.reshape(n_sys, n_bath, 3, 3)


def system_bath_couplings(model: SpinModel) -> InteractionTable:
    """A^{ij} for every (system, bath) pair as a cross table"""
    if model.system_bath_couplings is not None:
        return model.system_bath_couplings
    n_sys, n_bath = len(model.system_sites), len(model.bath_sites)
    array = system_bath_array(model)
    i, j = np.meshgrid(np.arange(n_sys), np.arange(n_bath), indexing="ij")
    return InteractionTable(
        pairs=np.column_stack([i.ravel(), j.ravel()]),
        tensors=array.reshape(-1, 3, 3),
        cross=True,
    )
