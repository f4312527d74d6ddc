"""Exception hierarchy; every class carries the CLI exit code it maps to."""

from typing import Optional


class SpinBathError(Exception):
    """Base error for the decoherence engine"""

    exit_code = 1


class ConfigError(SpinBathError):
    """Invalid input: config files, model parameters, CLI arguments"""

    exit_code = 2


class InvalidSpinError(ConfigError):
    """Spin quantum number is not a non-negative half-integer within range"""


class ShapeError(ConfigError):
    """Operator dimension does not match the site dimension it is placed on"""


class SingularityError(ConfigError):
    """Two spins share a position, so the point-dipole kernel diverges"""


class DimensionGuardError(ConfigError):
    """Requested Hilbert space is larger than the exact evaluator accepts"""


class BathGenerationError(ConfigError):
    """Random bath could not be packed under the distance constraints"""


class UnknownScenarioError(ConfigError):
    """Scenario name is not in the built-in library"""


class SWValidityError(SpinBathError):
    """Near-degenerate coupled levels invalidate the Schrieffer-Wolff construction"""

    exit_code = 3

    def __init__(self, message: str, flagged: Optional[list] = None):
        super().__init__(message)
        self.flagged = flagged or []


class NumericalContractError(SpinBathError):
    """A numerical invariant (Hermiticity, unitarity, closure, tolerance) was violated"""

    exit_code = 4


class ClosureError(NumericalContractError):
    """Cluster family is not closed under taking sub-clusters"""


class QuadratureError(NumericalContractError):
    """Adaptive quadrature did not reach the requested tolerance"""

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved relative error {achieved:.3e})")
        self.achieved = achieved
