"""
Design metrics for eigenstate pairs and magnitude estimates for the
perturbative expansion.

Delta, clock mismatch and transition moments are reported in Bohr
magnetons: gyromagnetic tensors are stored in rad/µs/T and divided by MU_B
here.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.sparse.csgraph import connected_components
from sklearn.metrics import pairwise_distances

from spinbath.constants import DIPOLAR_PREFACTOR, MU_B, PROTON_GYRO, UEV
from spinbath.exceptions import ConfigError, QuadratureError
from spinbath.models.dynamics_models import (
    BathState,
    Cluster,
    CommutatorStatistic,
    ConditionalHamiltonian,
    PairMetrics,
    SiteClassPartition,
    SystemEigenbasis,
)
from spinbath.models.spin_models import SpinModel
from spinbath.services import spin_operators
from spinbath.services.cce_service import MIXED, cluster_hamiltonians
from spinbath.services.effective_hamiltonian import diagonalize_system, first_order_only

logger = logging.getLogger(__name__)

POSITION_TOLERANCE = 1e-6
QUADRATURE_EPSREL = 1e-6
QUADRATURE_FAILURE = 1e-3

# typical molecular values used by the magnitude estimates
TYPICAL_MZ = 0.5
TYPICAL_GAP = 50.0 * UEV
TYPICAL_GAMMA = 2.0 * MU_B


def site_class_partition(
    source: Union[SpinModel, SystemEigenbasis, np.ndarray],
    tol: float = POSITION_TOLERANCE,
) -> SiteClassPartition:
    """Group system sites whose positions coincide within ``tol`` Å"""
    if isinstance(source, SpinModel):
        positions = source.system_positions
    elif isinstance(source, SystemEigenbasis):
        positions = source.positions
    else:
        positions = np.asarray(source, dtype=float).reshape(-1, 3)

    adjacency = pairwise_distances(positions) <= tol
    n_classes, labels = connected_components(adjacency, directed=False)
    classes = [np.nonzero(labels == k)[0].tolist() for k in range(n_classes)]
    classes.sort(key=lambda group: group[0])
    return SiteClassPartition(classes=classes)


def _expectation_shift(basis: SystemEigenbasis, alpha: int, beta: int) -> np.ndarray:
    """Gamma^i . (<beta|S_i|beta> - <alpha|S_i|alpha>) per site, in µ_B"""
    alpha, beta = basis.check_state(alpha), basis.check_state(beta)
    local = basis.local_expectations
    diff = local[beta] - local[alpha]
    return np.einsum("iem,im->ie", basis.gammas, diff) / MU_B


def delta_parameter(
    basis: SystemEigenbasis,
    partition: Optional[SiteClassPartition],
    alpha: int,
    beta: int,
) -> float:
    """
    Delta = sum over position classes W_k and axes eta of
    |sum_{i in W_k} (Gamma^i . (<beta|S_i|beta> - <alpha|S_i|alpha>))_eta|.

    ``partition=None`` derives the classes from the basis positions.
    """
    partition = site_class_partition(basis) if partition is None else partition
    shift = _expectation_shift(basis, alpha, beta)
    total = 0.0
    for group in partition.classes:
        total += float(np.abs(shift[group].sum(axis=0)).sum())
    return total


def clock_mismatch(basis: SystemEigenbasis, alpha: int, beta: int) -> float:
    """|sum_k Gamma_z^k . (<beta|S_k|beta> - <alpha|S_k|alpha>)| in µ_B"""
    return float(abs(_expectation_shift(basis, alpha, beta)[:, 2].sum()))


def transition_moment(basis: SystemEigenbasis, alpha: int, beta: int) -> float:
    """|<alpha| sum_k Gamma^k . S_k |beta>| in µ_B"""
    alpha, beta = basis.check_state(alpha), basis.check_state(beta)
    elements = basis.matrix_elements[:, :, alpha, beta]
    moment = np.einsum("iem,im->e", basis.gammas, elements) / MU_B
    return float(np.linalg.norm(moment))


def commutator_diagnostic(
    h_alpha: ConditionalHamiltonian,
    h_beta: ConditionalHamiltonian,
    sample_clusters: Sequence[Cluster],
    bath_state: BathState = MIXED,
) -> CommutatorStatistic:
    """Frobenius norms of [H^alpha_C, H^beta_C] over clusters of at most two spins"""
    clusters = list(sample_clusters)
    if any(cluster.order > 2 for cluster in clusters):
        raise ConfigError("Commutator diagnostic accepts clusters of at most two spins")
    if not clusters:
        return CommutatorStatistic(
            clusters=0, max_norm=0.0, mean_norm=0.0, max_norm_first_order=0.0, mean_norm_first_order=0.0
        )

    def norms(a: ConditionalHamiltonian, b: ConditionalHamiltonian) -> np.ndarray:
        values = []
        for cluster in clusters:
            H_a, H_b = cluster_hamiltonians(a, b, cluster, bath_state)
            values.append(np.linalg.norm(spin_operators.commutator(H_a, H_b)))
        return np.array(values)

    full = norms(h_alpha, h_beta)
    first = norms(first_order_only(h_alpha), first_order_only(h_beta))
    logger.debug("Commutator norms over %d clusters: max %.3g (first order %.3g)", len(clusters), full.max(), first.max())
    return CommutatorStatistic(
        clusters=len(clusters),
        max_norm=float(full.max()),
        mean_norm=float(full.mean()),
        max_norm_first_order=float(first.max()),
        mean_norm_first_order=float(first.mean()),
    )


def pair_metrics(
    basis: SystemEigenbasis,
    partition: Optional[SiteClassPartition],
    alpha: int,
    beta: int,
    commutator_norm: Optional[float] = None,
) -> PairMetrics:
    return PairMetrics(
        pair=(int(alpha), int(beta)),
        delta=delta_parameter(basis, partition, alpha, beta),
        clock_mismatch=clock_mismatch(basis, alpha, beta),
        transition_moment=transition_moment(basis, alpha, beta),
        commutator_norm=commutator_norm,
    )


def total_sz(basis: SystemEigenbasis) -> np.ndarray:
    """sum_i <psi|S_i^z|psi> for every eigenstate"""
    return basis.local_expectations[:, :, 2].sum(axis=1)


def select_states_by_total_sz(basis: SystemEigenbasis, tol: float = 0.1, count: Optional[int] = None) -> List[int]:
    """The ``count`` lowest eigenstates with |sum_i <S_i^z>| <= tol"""
    chosen = np.nonzero(np.abs(total_sz(basis)) <= tol)[0]
    if count is not None:
        if len(chosen) < count:
            raise ConfigError(f"Only {len(chosen)} eigenstates have |<S^z>| <= {tol}, {count} requested")
        chosen = chosen[:count]
    return [int(p) for p in chosen]


def connectivity(basis: SystemEigenbasis, states: Sequence[int], threshold: float) -> bool:
    """True when every pair of ``states`` has a transition moment of at least ``threshold`` µ_B"""
    states = list(states)
    for n, alpha in enumerate(states):
        for beta in states[n + 1:]:
            if transition_moment(basis, alpha, beta) < threshold:
                return False
    return True


class MetricsService:
    """Design metrics over one diagonalized system"""

    def __init__(self, basis: SystemEigenbasis, partition: Optional[SiteClassPartition] = None):
        self.basis = basis
        self.partition = site_class_partition(basis) if partition is None else partition

    @classmethod
    def from_model(cls, model: SpinModel) -> "MetricsService":
        return cls(diagonalize_system(model), site_class_partition(model))

    def delta(self, alpha: int, beta: int) -> float:
        return delta_parameter(self.basis, self.partition, alpha, beta)

    def clock_mismatch(self, alpha: int, beta: int) -> float:
        return clock_mismatch(self.basis, alpha, beta)

    def transition_moment(self, alpha: int, beta: int) -> float:
        return transition_moment(self.basis, alpha, beta)

    def pair(self, alpha: int, beta: int, commutator_norm: Optional[float] = None) -> PairMetrics:
        return pair_metrics(self.basis, self.partition, alpha, beta, commutator_norm)

    def table(self, pairs: Sequence[Tuple[int, int]]) -> List[PairMetrics]:
        return [self.pair(alpha, beta) for alpha, beta in pairs]

    def total_sz(self) -> np.ndarray:
        return total_sz(self.basis)

    def select_states(self, tol: float = 0.1, count: Optional[int] = None) -> List[int]:
        return select_states_by_total_sz(self.basis, tol, count)

    def connected(self, states: Sequence[int], threshold: float) -> bool:
        return connectivity(self.basis, states, threshold)


def sw_ratio_estimate(
    m_z: float = TYPICAL_MZ,
    gap: float = TYPICAL_GAP,
    gamma_e: float = TYPICAL_GAMMA,
    gamma_n: float = PROTON_GYRO,
    r_min: float = 3.0,
    r_max: float = np.inf,
) -> float:
    """
    Closed-form size of the second-order system-bath term relative to the
    first-order one for bath spins between r_min and r_max.

    ``gap`` is in rad/µs, gyromagnetic ratios in rad/µs/T, radii in Å.
    """
    if not 0 < r_min <= r_max:
        raise ConfigError(f"Need 0 < r_min <= r_max, got {r_min}, {r_max}")
    if gap <= 0:
        raise ConfigError(f"Energy gap must be positive, got {gap}")
    shell = 1.0 / r_min ** 2 - 1.0 / r_max ** 2
    return float(m_z * 4.0 * np.pi * DIPOLAR_PREFACTOR * gamma_e * gamma_n / (2.0 * gap) * shell)


def lambda_integral(r_min: float, r_max: float, l: float, epsrel: float = QUADRATURE_EPSREL):
    """
    I = int dr1 dr2 dtheta (r1^2 + r2^2 - 2 r1 r2 cos theta)^(-3/2)

    over r1, r2 in [r_min, r_max] and theta from arccos((r1^2 + r2^2 - l^2) / (2 r1 r2))
    to pi, so every pair is at least l apart. Returns (value, absolute error).
    """

    def integrand(theta, r2, r1):
        return (r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * np.cos(theta)) ** -1.5

    def theta_range(r2, r1):
        cosine = (r1 * r1 + r2 * r2 - l * l) / (2.0 * r1 * r2)
        return [float(np.arccos(np.clip(cosine, -1.0, 1.0))), np.pi]

    def radial_options(r1):
        # the lower theta limit has a kink where |r1 - r2| = l
        kinks = [p for p in (r1 - l, r1 + l) if r_min < p < r_max]
        options = {"epsrel": epsrel, "limit": 200}
        if kinks:
            options["points"] = kinks
        return options

    return integrate.nquad(
        integrand,
        [theta_range, [r_min, r_max], [r_min, r_max]],
        opts=[{"epsrel": epsrel, "limit": 200}, radial_options, {"epsrel": epsrel, "limit": 200}],
    )


def lambda_estimate(
    r_min: float = 3.0,
    r_max: float = 20.0,
    l: float = 3.0,
    m_z: float = TYPICAL_MZ,
    gap: float = TYPICAL_GAP,
    gamma_e: float = TYPICAL_GAMMA,
    epsrel: float = QUADRATURE_EPSREL,
) -> float:
    """Continuum <Lambda>: mean induced-to-intrinsic bath coupling ratio"""
    if not 0 < r_min < r_max:
        raise ConfigError(f"Need 0 < r_min < r_max, got {r_min}, {r_max}")
    if l <= 0:
        raise ConfigError(f"Minimum bath distance must be positive, got {l}")
    if gap <= 0:
        raise ConfigError(f"Energy gap must be positive, got {gap}")

    value, error = lambda_integral(r_min, r_max, l, epsrel)
    if value <= 0 or not np.isfinite(value):
        raise QuadratureError("Bath pair integral is not positive", achieved=float("inf"))
    achieved = error / value
    if achieved > QUADRATURE_FAILURE:
        raise QuadratureError(f"Bath pair integral did not converge to {epsrel:.1e}", achieved=achieved)
    if achieved > epsrel:
        logger.warning("Bath pair integral reached relative error %.2e, requested %.1e", achieved, epsrel)

    prefactor = 4.0 * np.pi * DIPOLAR_PREFACTOR * (gamma_e * m_z) ** 2 / (8.0 * gap)
    radial = (r_max ** 2 - r_min ** 2) / (r_max ** 4 * r_min ** 4)
    return float(prefactor * radial / value)
