"""
JSON configuration schema.

Energies in a model section use ``units``; positions are Å, fields T.
System gyromagnetic values are in µ_B, explicit bath values in µ_N.
"""

from itertools import combinations
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from spinbath.models.dynamics_models import (
    BathState,
    CoherenceTrace,
    ConvergenceReport,
    PairMetrics,
    PulseSequence,
    SWValidityReport,
)

SCHEMA_VERSION = 1

Vector = List[float]
Matrix = List[List[float]]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_vector(value: Optional[Vector], name: str) -> Optional[Vector]:
    if value is not None and len(value) != 3:
        raise ValueError(f"{name} must have 3 components")
    return value


def _check_matrix(value: Optional[Matrix], name: str) -> Optional[Matrix]:
    if value is not None and np.shape(value) != (3, 3):
        raise ValueError(f"{name} must be a 3x3 matrix")
    return value


class GammaSpec(StrictModel):
    """Exactly one of a species label, an isotropic value or a full tensor"""

    species: Optional[str] = None
    isotropic: Optional[float] = None
    tensor: Optional[Matrix] = None

    @model_validator(mode="after")
    def _one_of(self):
        given = [x is not None for x in (self.species, self.isotropic, self.tensor)]
        if sum(given) != 1:
            raise ValueError("gamma needs exactly one of species, isotropic, tensor")
        _check_matrix(self.tensor, "gamma.tensor")
        return self


class ZFSSpec(StrictModel):
    D: float
    E: float = 0.0


class SiteSpec(StrictModel):
    position: Vector
    s: float = 0.5
    gamma: GammaSpec = GammaSpec(isotropic=2.0)
    zfs: Optional[ZFSSpec] = None
    self_tensor: Optional[Matrix] = None

    @field_validator("position")
    @classmethod
    def _position(cls, value):
        return _check_vector(value, "position")

    @model_validator(mode="after")
    def _single_self_term(self):
        if self.zfs is not None and self.self_tensor is not None:
            raise ValueError("give either zfs or self_tensor, not both")
        _check_matrix(self.self_tensor, "self_tensor")
        return self


class CouplingSpec(StrictModel):
    """
    Coupling between site ``i`` and site ``j``.

    ``J`` is a scalar (isotropic) or an (x, y, z) triple; ``K`` is the z-axis
    antisymmetric term. ``tensor`` replaces both.
    """

    i: int = Field(ge=0)
    j: int = Field(ge=0)
    J: Optional[Union[float, Vector]] = None
    K: float = 0.0
    tensor: Optional[Matrix] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.J is None) == (self.tensor is None):
            raise ValueError(f"coupling ({self.i}, {self.j}) needs exactly one of J, tensor")
        if self.tensor is not None and self.K:
            raise ValueError(f"coupling ({self.i}, {self.j}) gives K together with a tensor")
        if isinstance(self.J, list):
            _check_vector(self.J, "J")
        _check_matrix(self.tensor, "tensor")
        return self


class SystemSection(StrictModel):
    sites: List[SiteSpec] = Field(min_length=1)
    couplings: List[CouplingSpec] = []


class BathSpec(StrictModel):
    """Random bath: ``n`` spins uniform in a ball, pairwise and from the system at least ``min_dist`` apart"""

    n: int = Field(ge=1)
    radius: float = Field(gt=0)
    min_dist: float = Field(default=3.0, gt=0)
    species: str = "proton"
    seed: Optional[int] = None
    center: Vector = [0.0, 0.0, 0.0]
    exclusion: Optional[List[Vector]] = None

    @model_validator(mode="after")
    def _geometry(self):
        if self.radius <= self.min_dist:
            raise ValueError(f"bath radius {self.radius} must exceed min_dist {self.min_dist}")
        _check_vector(self.center, "center")
        for point in self.exclusion or []:
            _check_vector(point, "exclusion point")
        return self


class BathSection(StrictModel):
    generate: Optional[BathSpec] = None
    sites: List[SiteSpec] = []
    couplings: Union[Literal["auto"], List[CouplingSpec]] = "auto"
    min_distance: float = Field(default=3.0, ge=0)

    @model_validator(mode="after")
    def _source(self):
        if self.generate is not None and self.sites:
            raise ValueError("bath takes either generate or explicit sites, not both")
        if self.generate is not None and self.couplings != "auto":
            raise ValueError("generated baths use point-dipole couplings")
        return self


class ModelSpec(StrictModel):
    units: Literal["meV", "ueV", "rad_per_us", "MHz"] = "meV"
    system: SystemSection
    bath: BathSection = BathSection()
    system_bath: Union[Literal["auto"], List[CouplingSpec]] = "auto"
    field: Vector = [0.0, 0.0, 0.0]

    @field_validator("field")
    @classmethod
    def _field(cls, value):
        return _check_vector(value, "field")


class GridSpec(StrictModel):
    t_max: float = Field(gt=0)
    points: int = Field(default=200, ge=2)

    def times(self) -> np.ndarray:
        """Uniform grid from 0 to t_max in µs"""
        return np.linspace(0.0, self.t_max, self.points)


class CCESpec(StrictModel):
    order: int = Field(default=2, ge=1)
    pair_cutoff: Optional[float] = Field(default=None, gt=0)
    coupling_threshold: Optional[float] = Field(default=None, ge=0)
    sw_order: Literal[1, 2] = 2
    # rad/µs; None means 1e-3 of the median level spacing
    gap_floor: Optional[float] = Field(default=None, ge=0)
    allow_sw_violation: bool = False
    # warn when second-order bath fields exceed this fraction of first-order ones
    hierarchy_limit: float = Field(default=0.1, gt=0)
    exclude_states: List[int] = []
    realizations: int = Field(default=1, ge=1)
    workers: Optional[int] = Field(default=None, ge=1)
    chunk_size: int = Field(default=128, ge=1)
    # grid points per propagator stack; None sizes slices from the cluster dimension
    time_chunk: Optional[int] = Field(default=None, ge=1)
    convergence_check: bool = False

    @property
    def cutoff(self) -> float:
        return np.inf if self.pair_cutoff is None else self.pair_cutoff


class StateSelection(StrictModel):
    """Pick the ``count`` lowest eigenstates with |total <S^z>| <= total_sz_tol"""

    total_sz_tol: float = Field(default=0.1, ge=0)
    count: int = Field(ge=1)


class OutputSpec(StrictModel):
    directory: str = "results"
    reference_pair: Optional[Tuple[int, int]] = None


class ExperimentConfig(StrictModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    scenario: Optional[str] = None
    model: ModelSpec
    states: Optional[List[int]] = None
    pairs: Optional[List[Tuple[int, int]]] = None
    state_selection: Optional[StateSelection] = None
    pulses: PulseSequence = PulseSequence()
    grid: GridSpec
    cce: CCESpec = CCESpec()
    bath_state: BathState = BathState()
    seed: int = 0
    output: OutputSpec = OutputSpec()
    reference_scenario: Optional[str] = None

    @field_validator("states")
    @classmethod
    def _distinct_states(cls, value):
        if value is not None and len(set(value)) != len(value):
            raise ValueError("states must be distinct")
        return value

    def resolved_pairs(self, states: Optional[List[int]] = None) -> List[Tuple[int, int]]:
        """Explicit pairs, else every pair of ``states`` (or of the configured states)"""
        if self.pairs is not None:
            return [(int(a), int(b)) for a, b in self.pairs]
        states = self.states if states is None else states
        if states is None:
            return []
        return [(int(a), int(b)) for a, b in combinations(states, 2)]


class ExperimentResult(BaseModel):
    """Everything one run produced; ``reference`` is the uncoupled comparison trace"""

    config: ExperimentConfig
    traces: List[CoherenceTrace]
    metrics: List[PairMetrics]
    seeds: List[int]
    reference: Optional[CoherenceTrace] = None
    sw_report: Optional[SWValidityReport] = None
    convergence: List[ConvergenceReport] = []
