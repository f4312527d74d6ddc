from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from spinbath.exceptions import ConfigError
from spinbath.models.spin_models import BathTerms, InteractionTable

STATE_ATOL = 1e-12


class SpinMatrixSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    s: float
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def dim(self) -> int:
        return self.sz.shape[0]

    @property
    def vector(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.sx, self.sy, self.sz


class ProductOperator(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    site_dims: Tuple[int, ...]
    matrix: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        dim = int(np.prod(self.site_dims, dtype=np.int64))
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match site dims {self.site_dims}")
        return self


class SystemEigenbasis(BaseModel):
    """Eigenbasis of the central system with per-site spin matrix elements"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    energies: np.ndarray
    states: np.ndarray
    # <psi|S_i^mu|psi'>, shape (sites, 3, D, D)
    matrix_elements: np.ndarray
    gammas: np.ndarray
    positions: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.energies)

    @property
    def n_sites(self) -> int:
        return self.matrix_elements.shape[0]

    @cached_property
    def local_expectations(self) -> np.ndarray:
        """<psi|S_i^mu|psi> as a real (D, sites, 3) array"""
        diagonal = np.einsum("imkk->kim", self.matrix_elements)
        return diagonal.real

    def check_state(self, index: int) -> int:
        if not 0 <= index < self.dim:
            raise ConfigError(f"State {index} outside the {self.dim}-level spectrum")
        return int(index)


class ConditionalHamiltonian(BaseModel):
    """
    Bath Hamiltonian conditioned on the system sitting in one eigenstate.

    The second-order part is kept factorized: for every intermediate state
    p there is a weight 1/(E_psi - E_p) and a complex coupling vector
    u[p, j] per bath spin, so T^{jl} = sum_p w_p u[p, j] (x) conj(u[p, l]).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    state_index: int
    offset: float
    first_order_fields: np.ndarray
    bath: BathTerms
    includes_second_order: bool = False
    intermediate_states: List[int] = []
    sw_weights: np.ndarray = Field(default_factory=lambda: np.zeros(0))
    sw_vectors: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.first_order_fields)

    @property
    def has_second_order(self) -> bool:
        return self.includes_second_order and len(self.sw_weights) > 0

    @property
    def fields(self) -> np.ndarray:
        """Total linear field b_j + h_j on every bath spin"""
        return self.bath.zeeman + self.first_order_fields

    def induced_pair_tensors(self, pairs: np.ndarray) -> np.ndarray:
        """Second-order pair tensors T^{jl} + (T^{lj})^T = 2 Re T^{jl} for (M, 2) pairs"""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if not self.has_second_order:
            return np.zeros((len(pairs), 3, 3))
        weighted = self.sw_weights[:, None, None] * self.sw_vectors[:, pairs[:, 0]]
        tensors = np.einsum("pmn,pmr->mnr", weighted, self.sw_vectors[:, pairs[:, 1]].conj())
        return 2.0 * tensors.real

    def induced_site_tensors(self, sites: np.ndarray) -> np.ndarray:
        """Hermitian single-site tensors T^{jj} for the given bath spins"""
        sites = np.asarray(sites, dtype=np.int64).reshape(-1)
        if not self.has_second_order:
            return np.zeros((len(sites), 3, 3), dtype=complex)
        vectors = self.sw_vectors[:, sites]
        weighted = self.sw_weights[:, None, None] * vectors
        return np.einsum("pmn,pmr->mnr", weighted, vectors.conj())

    def site_tensors(self, sites: np.ndarray) -> np.ndarray:
        """Intrinsic self tensor plus the induced single-site tensor"""
        sites = np.asarray(sites, dtype=np.int64).reshape(-1)
        return self.bath.self_tensors[sites] + self.induced_site_tensors(sites)

    def pair_tensors(self, pairs: np.ndarray) -> np.ndarray:
        """Intrinsic J plus induced tensor for (M, 2) bath pairs with i < j"""
        return self.bath.coupling_tensors(pairs) + self.induced_pair_tensors(pairs)

    def second_order_tensors(self, pairs: Optional[np.ndarray] = None, chunk: int = 4096) -> InteractionTable:
        """Materialize induced pair tensors (all pairs when ``pairs`` is None)"""
        if not self.has_second_order:
            return InteractionTable.empty()
        if pairs is None:
            pairs = np.column_stack(np.triu_indices(self.size, k=1))
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        tensors = [self.induced_pair_tensors(pairs[start:start + chunk]) for start in range(0, len(pairs), chunk)]
        return InteractionTable(pairs=pairs, tensors=np.concatenate(tensors) if tensors else np.zeros((0, 3, 3)))


class PulseSequence(BaseModel):
    """
    k instantaneous pi pulses.

    Without ``fractions`` the uniform CPMG rule applies: pulses at
    t(2j-1)/(2k), i.e. 2k equal segments of t/(2k). ``fractions`` gives the
    k+1 free intervals explicitly as fractions of the total time.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    k: int = Field(default=1, ge=0)
    fractions: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.fractions is not None:
            if len(self.fractions) != self.k + 1:
                raise ValueError(f"{self.k} pulses need {self.k + 1} interval fractions")
            if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-12:
                raise ValueError("interval fractions must be non-negative and sum to 1")
        return self

    @property
    def is_uniform(self) -> bool:
        return self.fractions is None

    def interval_fractions(self) -> np.ndarray:
        """Free-evolution intervals between pulses, as fractions of t"""
        if self.fractions is not None:
            return np.asarray(self.fractions, dtype=float)
        if self.k == 0:
            return np.ones(1)
        intervals = np.full(self.k + 1, 1.0 / self.k)
        intervals[0] = intervals[-1] = 0.5 / self.k
        return intervals

    def segments(self, t: float) -> List[Tuple[str, float]]:
        """(conditional Hamiltonian of the alpha branch, duration) in time order"""
        if self.k == 0:
            return [("alpha", float(t))]
        if self.is_uniform:
            step = t / (2 * self.k)
            # segment n (0-based) follows (n + 1) // 2 pulses
            return [("alpha" if ((n + 1) // 2) % 2 == 0 else "beta", step) for n in range(2 * self.k)]
        return [("alpha" if m % 2 == 0 else "beta", f * t) for m, f in enumerate(self.fractions)]


@dataclass(frozen=True, order=True)
class Cluster:
    """Set of bath spins; the empty cluster has order 0"""

    members: Tuple[int, ...] = ()

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        if any(b <= a for a, b in zip(members, members[1:])) or any(m < 0 for m in members):
            raise ValueError(f"Cluster members must be strictly ascending indices, got {members}")
        object.__setattr__(self, "members", members)

    @property
    def order(self) -> int:
        return len(self.members)


class DensitySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    real: List[List[float]]
    imag: Optional[List[List[float]]] = None

    def matrix(self) -> np.ndarray:
        rho = np.asarray(self.real, dtype=complex)
        if self.imag is not None:
            rho = rho + 1j * np.asarray(self.imag, dtype=float)
        return rho


class BathState(BaseModel):
    """
    Initial product state of the bath.

    ``mixed`` is identity/dim on every spin; ``uniform`` applies one density
    matrix to every spin; ``explicit`` lists one matrix per bath spin.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["mixed", "uniform", "explicit"] = "mixed"
    matrices: List[DensitySpec] = []

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "mixed" and self.matrices:
            raise ValueError("a mixed bath state takes no matrices")
        if self.kind == "uniform" and len(self.matrices) != 1:
            raise ValueError("a uniform bath state takes exactly one matrix")
        if self.kind == "explicit" and not self.matrices:
            raise ValueError("an explicit bath state needs one matrix per bath spin")
        for spec in self.matrices:
            rho = spec.matrix()
            if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
                raise ValueError("density matrices must be square")
            if not np.allclose(rho, rho.conj().T, atol=STATE_ATOL):
                raise ValueError("density matrices must be Hermitian")
            if abs(np.trace(rho) - 1.0) > STATE_ATOL:
                raise ValueError("density matrices must have unit trace")
            if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -STATE_ATOL:
                raise ValueError("density matrices must be positive semidefinite")
        return self

    @property
    def is_mixed(self) -> bool:
        return self.kind == "mixed"

    def site_density(self, site: int, dim: int) -> np.ndarray:
        if self.kind == "mixed":
            return np.eye(dim, dtype=complex) / dim
        spec = self.matrices[0] if self.kind == "uniform" else self.matrices[site]
        rho = spec.matrix()
        if rho.shape != (dim, dim):
            raise ConfigError(f"Bath state for spin {site} has shape {rho.shape}, expected ({dim}, {dim})")
        return rho

    def check_size(self, n_bath: int):
        if self.kind == "explicit" and len(self.matrices) != n_bath:
            raise ConfigError(f"Explicit bath state lists {len(self.matrices)} spins, bath has {n_bath}")

    def densities(self, dims: np.ndarray) -> List[np.ndarray]:
        self.check_size(len(dims))
        return [self.site_density(j, int(d)) for j, d in enumerate(dims)]

    def cluster_density(self, members: Tuple[int, ...], dims: np.ndarray) -> np.ndarray:
        """Kronecker product of the member states"""
        rho = np.ones((1, 1), dtype=complex)
        for j in members:
            rho = np.kron(rho, self.site_density(j, int(dims[j])))
        return rho


class CoherenceTrace(BaseModel):
    """Complex coherence factor L(t) of one eigenstate pair"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    times: np.ndarray
    values: np.ndarray
    pair: Tuple[int, int]
    meta: Dict[str, Any] = {}

    @property
    def abs_values(self) -> np.ndarray:
        return np.abs(self.values)

    def time_below(self, threshold: float) -> Optional[float]:
        """First grid time with |L| < threshold, or None"""
        below = np.nonzero(self.abs_values < threshold)[0]
        return float(self.times[below[0]]) if len(below) else None

    def t_half(self) -> Optional[float]:
        return self.time_below(0.5)


class SWValidityEntry(BaseModel):
    state: int
    other: int
    gap: float
    coupled: bool


class SWValidityReport(BaseModel):
    gap_floor: float
    states: List[int]
    flagged: List[SWValidityEntry] = []
    # second-order to first-order field ratio per state, filled once the bath is known
    hierarchy: Dict[int, float] = {}
    hierarchy_limit: float = 0.1

    @property
    def blocking(self) -> List[SWValidityEntry]:
        return [entry for entry in self.flagged if entry.coupled]

    @property
    def clean(self) -> bool:
        return not self.blocking

    @property
    def weak_hierarchy(self) -> List[int]:
        """States whose second-order fields exceed hierarchy_limit of the first-order ones"""
        return sorted(psi for psi, ratio in self.hierarchy.items() if ratio > self.hierarchy_limit)


class SiteClassPartition(BaseModel):
    classes: List[List[int]]

    @field_validator("classes")
    @classmethod
    def _disjoint(cls, value):
        members = [i for group in value for i in group]
        if len(members) != len(set(members)):
            raise ValueError("site classes must be disjoint")
        return [sorted(group) for group in value]


class CommutatorStatistic(BaseModel):
    clusters: int
    max_norm: float
    mean_norm: float
    max_norm_first_order: float
    mean_norm_first_order: float


class PairMetrics(BaseModel):
    pair: Tuple[int, int]
    delta: float
    clock_mismatch: float
    transition_moment: float
    commutator_norm: Optional[float] = None


class ConvergenceReport(BaseModel):
    pair_cutoff: float
    extended_cutoff: float
    max_change: float
    converged: bool


class ScanRow(BaseModel):
    alpha: int
    beta: int
    delta: float
    clock_mismatch: float
    transition_moment: float
    t_half: Optional[float] = None

    @property
    def t_half_label(self) -> str:
        return "beyond-grid" if self.t_half is None else f"{self.t_half:.6g}"
