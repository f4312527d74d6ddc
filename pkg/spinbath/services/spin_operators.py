"""
Dense linear-algebra kernels for spin systems.

Basis convention: within a site, states are ordered m = s, s-1, ..., -s;
product spaces list sites in declaration order (first site is the most
significant Kronecker factor). Energies are in rad/µs, times in µs.
"""

from functools import lru_cache
from typing import Dict, List, Sequence

import numpy as np

from spinbath.exceptions import InvalidSpinError, NumericalContractError, ShapeError
from spinbath.models.dynamics_models import ProductOperator, SpinMatrixSet

MAX_SPIN = 20
HERMITIAN_RTOL = 1e-10


def _validate_spin(s: float) -> int:
    two_s = 2.0 * s
    if not np.isfinite(two_s) or two_s < 0 or abs(two_s - round(two_s)) > 1e-12:
        raise InvalidSpinError(f"Spin {s} is not a non-negative half-integer")
    if s > MAX_SPIN:
        raise InvalidSpinError(f"Spin {s} exceeds the supported maximum {MAX_SPIN}")
    return int(round(two_s))


@lru_cache(maxsize=64)
def _spin_matrices_cached(two_s: int) -> SpinMatrixSet:
    s = two_s / 2.0
    dim = two_s + 1
    m = s - np.arange(dim)

    # <m+1|S+|m> = sqrt(s(s+1) - m(m+1)) sits on the superdiagonal for descending m
    ladder = np.sqrt(s * (s + 1) - m[1:] * (m[1:] + 1))
    s_plus = np.diag(ladder, k=1).astype(complex)
    s_minus = s_plus.conj().T

    sx = 0.5 * (s_plus + s_minus)
    sy = -0.5j * (s_plus - s_minus)
    sz = np.diag(m).astype(complex)

    for matrix in (sx, sy, sz):
        matrix.setflags(write=False)
    return SpinMatrixSet(s=s, sx=sx, sy=sy, sz=sz)


def spin_matrices(s: float) -> SpinMatrixSet:
    """Angular-momentum matrices for spin ``s`` in the descending-m basis"""
    return _spin_matrices_cached(_validate_spin(s))


def embed(op: np.ndarray, site: int, site_dims: Sequence[int]) -> ProductOperator:
    """Place ``op`` on ``site`` of a product space: 1 ⊗ ... ⊗ op ⊗ ... ⊗ 1"""
    site_dims = [int(d) for d in site_dims]
    if site < 0 or site >= len(site_dims):
        raise ShapeError(f"Site index {site} outside product of {len(site_dims)} sites")
    op = np.asarray(op)
    if op.shape != (site_dims[site], site_dims[site]):
        raise ShapeError(f"Operator of shape {op.shape} cannot act on a site of dimension {site_dims[site]}")

    left = int(np.prod(site_dims[:site], dtype=np.int64))
    right = int(np.prod(site_dims[site + 1:], dtype=np.int64))
    matrix = np.kron(np.kron(np.eye(left), op), np.eye(right))
    return ProductOperator(site_dims=tuple(site_dims), matrix=matrix)


def embed_product(ops: Dict[int, np.ndarray], site_dims: Sequence[int]) -> ProductOperator:
    """Tensor product with ``ops[site]`` on the listed sites and identities elsewhere"""
    site_dims = [int(d) for d in site_dims]
    for site, op in ops.items():
        if site < 0 or site >= len(site_dims):
            raise ShapeError(f"Site index {site} outside product of {len(site_dims)} sites")
        if np.shape(op) != (site_dims[site], site_dims[site]):
            raise ShapeError(f"Operator of shape {np.shape(op)} cannot act on a site of dimension {site_dims[site]}")

    matrix = np.ones((1, 1), dtype=complex)
    identity_run = 1
    for site, dim in enumerate(site_dims):
        if site in ops:
            matrix = np.kron(np.kron(matrix, np.eye(identity_run)), ops[site])
            identity_run = 1
        else:
            identity_run *= dim
    matrix = np.kron(matrix, np.eye(identity_run))
    return ProductOperator(site_dims=tuple(site_dims), matrix=matrix)


def spin_operators(spins: Sequence[float]) -> List[np.ndarray]:
    """Embedded (3, D, D) spin-vector operators for every site of a product space"""
    dims = [int(round(2 * s)) + 1 for s in spins]
    operators = []
    for site, s in enumerate(spins):
        matrices = spin_matrices(s)
        operators.append(np.stack([embed(component, site, dims).matrix for component in matrices.vector]))
    return operators


def check_hermitian(H: np.ndarray, rtol: float = HERMITIAN_RTOL) -> np.ndarray:
    """Return the Hermitian part of ``H``; raise if the anti-Hermitian residue exceeds ``rtol``"""
    H = np.asarray(H, dtype=complex)
    if H.ndim < 2 or H.shape[-1] != H.shape[-2]:
        raise ShapeError(f"Expected square matrices, got shape {H.shape}")
    H_dag = np.conj(np.swapaxes(H, -1, -2))
    scale = np.linalg.norm(H, axis=(-2, -1))
    residue = np.linalg.norm(H - H_dag, axis=(-2, -1))
    if np.any(residue > rtol * np.maximum(scale, 1e-300)):
        worst = float(np.max(residue / np.maximum(scale, 1e-300)))
        raise NumericalContractError(f"Matrix is not Hermitian (relative residue {worst:.3e})")
    return 0.5 * (H + H_dag)


def eigh(H: np.ndarray):
    """Ascending eigenvalues and unitary eigenvectors of a Hermitian matrix (or stack)"""
    return np.linalg.eigh(check_hermitian(H))


def propagator(H: np.ndarray, t: float) -> np.ndarray:
    """exp(-i H t) through the spectral decomposition of H"""
    if not np.isfinite(t):
        raise NumericalContractError(f"Propagation time must be finite, got {t}")
    energies, vectors = eigh(H)
    return (vectors * np.exp(-1j * energies * t)) @ vectors.conj().T


def propagators(H: np.ndarray, times: np.ndarray) -> np.ndarray:
    """
    Batched exp(-i H t).

    ``H`` has shape (B, d, d) and ``times`` shape (T,); the result has
    shape (B, T, d, d). One eigendecomposition per matrix serves every time.
    """
    energies, vectors = eigh(H)
    return spectral_propagators(energies, vectors, times)


def spectral_propagators(energies: np.ndarray, vectors: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Rebuild exp(-i H t) from precomputed (B, d) eigenvalues and (B, d, d) eigenvectors"""
    times = np.asarray(times, dtype=float)
    phases = np.exp(-1j * energies[:, None, :] * times[None, :, None])
    return np.einsum("bij,btj,bkj->btik", vectors, phases, vectors.conj(), optimize=True)


def commutator(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[A, B] = AB - BA, batched over leading axes"""
    return A @ B - B @ A
