"""
Schrieffer-Wolff conditional bath Hamiltonians.

For a system eigenstate psi the bath sees

    H^psi = E_psi + sum_j (b_j + h_j(psi)).I_j + sum_{j,l} I_j.(J^{jl} + T^{jl}(psi)).I_l

with h_j the first-order field sum_i <psi|S_i|psi>.A^{ij} and T the
second-order tensor sum_{psi'} u_j (x) conj(u_l) / (E_psi - E_psi').
"""

import logging
from functools import cached_property
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from spinbath.exceptions import ConfigError, SWValidityError
from spinbath.models.dynamics_models import (
    ConditionalHamiltonian,
    SWValidityEntry,
    SWValidityReport,
    SystemEigenbasis,
)
from spinbath.models.spin_models import BathTerms, SpinModel
from spinbath.services import spin_operators
from spinbath.services.hamiltonian_builder import (
    build_bath_hamiltonian_terms,
    build_system_hamiltonian,
    neighbor_pairs,
    system_bath_array,
)

logger = logging.getLogger(__name__)

COUPLING_ATOL = 1e-12
GAP_FLOOR_FRACTION = 1e-3


def diagonalize_system(model: SpinModel) -> SystemEigenbasis:
    """Eigenbasis of H_S plus <psi|S_i^mu|psi'> for every site and axis"""
    H = build_system_hamiltonian(model)
    energies, states = spin_operators.eigh(H)
    S = np.stack(spin_operators.spin_operators([site.s for site in model.system_sites]))
    elements = np.einsum("ak,imab,bl->imkl", states.conj(), S, states, optimize=True)

    logger.info("Diagonalized %d-level system (width %.4g rad/µs)", len(energies), energies[-1] - energies[0])
    return SystemEigenbasis(
        energies=energies,
        states=states,
        matrix_elements=elements,
        gammas=model.system_gammas,
        positions=model.system_positions,
    )


def default_gap_floor(basis: SystemEigenbasis) -> float:
    """1e-3 of the median spacing between neighbouring levels"""
    if basis.dim < 2:
        return 0.0
    return GAP_FLOOR_FRACTION * float(np.median(np.diff(basis.energies)))


def _coupled(basis: SystemEigenbasis, psi: int, others: np.ndarray) -> np.ndarray:
    elements = np.abs(basis.matrix_elements[:, :, psi, others])
    return elements.reshape(-1, len(others)).max(axis=0) > COUPLING_ATOL


def sw_validity_report(
    basis: SystemEigenbasis,
    states: Iterable[int],
    gap_floor: Optional[float] = None,
) -> SWValidityReport:
    """Every (state, other) pair closer than gap_floor, flagged as coupled or not"""
    gap_floor = default_gap_floor(basis) if gap_floor is None else float(gap_floor)
    states = [basis.check_state(psi) for psi in states]
    flagged = []
    for psi in states:
        others = np.array([p for p in range(basis.dim) if p != psi], dtype=int)
        if not len(others):
            continue
        gaps = np.abs(basis.energies[psi] - basis.energies[others])
        coupled = _coupled(basis, psi, others)
        for p, gap, is_coupled in zip(others, gaps, coupled):
            if gap < gap_floor:
                flagged.append(SWValidityEntry(state=psi, other=int(p), gap=float(gap), coupled=bool(is_coupled)))
    return SWValidityReport(gap_floor=gap_floor, states=states, flagged=flagged)


def conditional_hamiltonian(
    basis: SystemEigenbasis,
    model: SpinModel,
    psi: int,
    order: int = 2,
    gap_floor: Optional[float] = None,
    exclude: Sequence[int] = (),
    bath: Optional[BathTerms] = None,
    coupling: Optional[np.ndarray] = None,
) -> ConditionalHamiltonian:
    """
    H^psi at first or second order.

    ``bath`` and ``coupling`` (the dense A array) can be passed in to share
    them across states. Coupled intermediate states closer than gap_floor
    raise SWValidityError unless listed in ``exclude``.
    """
    if order not in (1, 2):
        raise ConfigError(f"Schrieffer-Wolff order must be 1 or 2, got {order}")
    psi = basis.check_state(psi)
    bath = build_bath_hamiltonian_terms(model) if bath is None else bath
    A = system_bath_array(model) if coupling is None else coupling

    fields = np.einsum("im,ijmn->jn", basis.local_expectations[psi], A)
    if order == 1:
        return ConditionalHamiltonian(
            state_index=psi,
            offset=float(basis.energies[psi]),
            first_order_fields=fields,
            bath=bath,
        )

    gap_floor = default_gap_floor(basis) if gap_floor is None else float(gap_floor)
    excluded = {int(p) for p in exclude}
    others = np.array([p for p in range(basis.dim) if p != psi and p not in excluded], dtype=int)
    if len(others):
        gaps = basis.energies[psi] - basis.energies[others]
        coupled = _coupled(basis, psi, others)
        too_close = coupled & ((np.abs(gaps) < gap_floor) | (gaps == 0))
        if np.any(too_close):
            flagged = [
                SWValidityEntry(state=psi, other=int(p), gap=float(abs(g)), coupled=True)
                for p, g in zip(others[too_close], gaps[too_close])
            ]
            raise SWValidityError(
                f"State {psi} is within {gap_floor:.3g} rad/µs of coupled states "
                f"{[entry.other for entry in flagged]}",
                flagged=flagged,
            )
        others, gaps = others[coupled], gaps[coupled]
    else:
        gaps = np.zeros(0)

    # u[p, j, nu] = sum_{i, mu} <psi|S_i^mu|p> A^{ij}_{mu nu}
    vectors = np.einsum("imp,ijmn->pjn", basis.matrix_elements[:, :, psi, others], A, optimize=True)
    logger.debug("State %d: %d intermediate states in second order", psi, len(others))
    return ConditionalHamiltonian(
        state_index=psi,
        offset=float(basis.energies[psi]),
        first_order_fields=fields,
        bath=bath,
        includes_second_order=True,
        intermediate_states=[int(p) for p in others],
        sw_weights=1.0 / gaps,
        sw_vectors=vectors,
    )


def first_order_only(h: ConditionalHamiltonian) -> ConditionalHamiltonian:
    """Copy of ``h`` with the second-order part dropped"""
    return ConditionalHamiltonian(
        state_index=h.state_index,
        offset=h.offset,
        first_order_fields=h.first_order_fields,
        bath=h.bath,
    )


def raw_pair_tensors(h: ConditionalHamiltonian, pairs: np.ndarray) -> np.ndarray:
    """Complex T^{jl} for (M, 2) pairs before symmetrization"""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not h.has_second_order:
        return np.zeros((len(pairs), 3, 3), dtype=complex)
    weighted = h.sw_weights[:, None, None] * h.sw_vectors[:, pairs[:, 0]]
    return np.einsum("pmn,pmr->mnr", weighted, h.sw_vectors[:, pairs[:, 1]].conj())


def induced_field_rms(h: ConditionalHamiltonian, chunk: int = 64) -> np.ndarray:
    """
    Per bath spin, the RMS over the mixed bath state of the second-order field
    sum_{l != j} 2 Re T^{jl}.I_l, i.e. sqrt(sum_l |2 Re T^{jl}|_F^2 s_l (s_l + 1) / 3).
    """
    n = h.size
    if not h.has_second_order:
        return np.zeros(n)
    spins = h.bath.spins
    weight = spins * (spins + 1.0) / 3.0
    weighted = h.sw_weights[:, None, None] * h.sw_vectors
    conj = h.sw_vectors.conj()
    rms = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        tensors = 2.0 * np.real(np.einsum("pjm,pln->jlmn", weighted[:, start:stop], conj, optimize=True))
        tensors[np.arange(stop - start), np.arange(start, stop)] = 0.0
        rms[start:stop] = np.sqrt(np.einsum("jlmn,l->j", tensors ** 2, weight))
    return rms


def second_order_field_ratios(h: ConditionalHamiltonian) -> np.ndarray:
    """induced_field_rms / |h_j| per bath spin; nan where the first-order field vanishes"""
    first = np.linalg.norm(h.first_order_fields, axis=1)
    active = first > COUPLING_ATOL
    ratios = np.full(h.size, np.nan)
    ratios[active] = induced_field_rms(h)[active] / first[active]
    return ratios


def second_order_field_ratio(h: ConditionalHamiltonian) -> float:
    """
    max_j of induced_field_rms / |h_j| over bath spins with a nonzero first-order field.

    Returns inf when every first-order field vanishes.
    """
    ratios = second_order_field_ratios(h)
    if np.all(np.isnan(ratios)):
        return float("inf")
    return float(np.nanmax(ratios))


def lambda_from_bath(h: ConditionalHamiltonian, pairs: Optional[np.ndarray] = None, chunk: int = 8192) -> float:
    """Discrete <Lambda> = sum |T_{mu nu}^{jl}| / sum |J_{mu nu}^{jl}| over bath pairs"""
    if pairs is None:
        pairs = neighbor_pairs(h.bath.positions)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    induced, intrinsic = 0.0, 0.0
    for start in range(0, len(pairs), chunk):
        block = pairs[start:start + chunk]
        induced += float(np.abs(raw_pair_tensors(h, block)).sum())
        intrinsic += float(np.abs(h.bath.coupling_tensors(block)).sum())
    if intrinsic == 0.0:
        raise ConfigError("Bath pairs carry no intrinsic coupling; <Lambda> is undefined")
    return induced / intrinsic


class EffectiveHamiltonianService:
    """
    Conditional bath Hamiltonians of one model.

    The system is diagonalized once; bath terms and the dense system-bath
    array are built on first use and shared by every state.
    """

    def __init__(
        self,
        model: SpinModel,
        order: int = 2,
        gap_floor: Optional[float] = None,
        pair_cutoff: float = np.inf,
        basis: Optional[SystemEigenbasis] = None,
    ):
        if order not in (1, 2):
            raise ConfigError(f"Schrieffer-Wolff order must be 1 or 2, got {order}")
        self.model = model
        self.order = order
        self.pair_cutoff = pair_cutoff
        self.basis = diagonalize_system(model) if basis is None else basis
        self.gap_floor = default_gap_floor(self.basis) if gap_floor is None else float(gap_floor)

    @cached_property
    def bath(self) -> BathTerms:
        return build_bath_hamiltonian_terms(self.model, self.pair_cutoff)

    @cached_property
    def coupling(self) -> np.ndarray:
        return system_bath_array(self.model)

    def validity(self, states: Iterable[int]) -> SWValidityReport:
        return sw_validity_report(self.basis, states, self.gap_floor)

    def conditional(self, psi: int, exclude: Sequence[int] = ()) -> ConditionalHamiltonian:
        return conditional_hamiltonian(
            self.basis, self.model, psi,
            order=self.order,
            gap_floor=self.gap_floor,
            exclude=exclude,
            bath=self.bath,
            coupling=self.coupling,
        )

    def conditionals(self, states: Iterable[int], exclude: Sequence[int] = ()) -> Dict[int, ConditionalHamiltonian]:
        """H^psi for every state; a state is never excluded from its own expansion"""
        return {int(psi): self.conditional(psi, [p for p in exclude if p != psi]) for psi in states}

    @staticmethod
    def field_hierarchy(
        hamiltonians: Dict[int, ConditionalHamiltonian], limit: Optional[float] = None
    ) -> Dict[int, float]:
        """Second-order to first-order field ratio per state, warning above ``limit``"""
        ratios = {psi: second_order_field_ratio(h) for psi, h in hamiltonians.items()}
        if limit is not None:
            weak = {psi: ratio for psi, ratio in ratios.items() if ratio > limit}
            if weak:
                logger.warning(
                    "Second-order fields exceed %.3g of first-order ones: %s",
                    limit, ", ".join(f"state {psi} ({ratio:.3g})" for psi, ratio in sorted(weak.items())),
                )
        return ratios
