import copy
import logging
from typing import Any, Dict, List

import numpy as np

from spinbath.exceptions import UnknownScenarioError

logger = logging.getLogger(__name__)

# Random proton bath shared by every built-in scenario
DEFAULT_BATH = {"n": 1000, "radius": 20.0, "min_dist": 3.0, "species": "proton"}

TILT = np.pi / 18


def _frustrated_positions(with_center: bool) -> List[List[float]]:
    """Triangle of radius 3 Å in the xy plane (site 1 on +x) plus apexes at z = +-3 Å"""
    angles = 2.0 * np.pi * np.arange(3) / 3.0
    triangle = [[3.0 * float(np.cos(a)), 3.0 * float(np.sin(a)), 0.0] for a in angles]
    positions = triangle + [[0.0, 0.0, 3.0], [0.0, 0.0, -3.0]]
    if with_center:
        positions.append([0.0, 0.0, 0.0])
    return positions


def _couplings(table: Dict[tuple, float]) -> List[Dict[str, Any]]:
    """
    Isotropic exchange with a z-axis antisymmetric term of one tenth; sites
    numbered from 1. A key (i, j) puts S_i on the left, so the triangle runs
    1 -> 2 -> 3 -> 1 and keeps one DMI chirality.
    """
    return [{"i": i - 1, "j": j - 1, "J": J, "K": J / 10.0} for (i, j), J in table.items()]


def _qudit6_exchange() -> Dict[tuple, float]:
    J12, J14 = 0.5, 0.1
    J16 = 1.1 * J12
    J46 = 1.05 * J14
    return {
        (1, 2): J12,
        (2, 3): 1.01 * J12,
        (3, 1): 1.08 * J12,
        (1, 4): J14,
        (2, 4): 0.95 * J14,
        (3, 4): 1.03 * J14,
        (1, 5): 1.10 * J14,
        (2, 5): 0.89 * J14,
        (3, 5): 0.98 * J14,
        (4, 5): 0.1 * J12,
        (1, 6): J16,
        (2, 6): 1.05 * J16,
        (3, 6): 0.93 * J16,
        (4, 6): J46,
        (5, 6): 0.92 * J46,
    }


QUDIT6_GAMMAS = [2.210, 2.200, 2.180, 2.190, 2.205, 2.195]


class ScenarioLibrary:
    """Built-in experiment configurations, returned as plain dicts ready for overrides"""

    def __init__(self):
        self.scenarios = {
            "giant_spin": {
                "description": "S = 10 giant spin with axial and rhombic anisotropy in a weak field",
                "build": self._giant_spin,
            },
            "five_spin": {
                "description": "Frustrated double tetrahedron of five S = 1/2 spins with DMI",
                "build": self._five_spin,
            },
            "qudit6": {
                "description": "Six-spin qudit with slightly broken symmetry and a tilted field",
                "build": self._qudit6,
            },
            "qudit6_uncoupled": {
                "description": "qudit6 geometry and gyromagnetic values with every exchange set to zero",
                "build": self._qudit6_uncoupled,
            },
        }

    def names(self) -> List[str]:
        return sorted(self.scenarios)

    def describe(self) -> Dict[str, str]:
        return {name: entry["description"] for name, entry in sorted(self.scenarios.items())}

    def get(self, name: str) -> Dict[str, Any]:
        """Fresh copy of the scenario's config dict"""
        if name not in self.scenarios:
            raise UnknownScenarioError(f"Unknown scenario '{name}'; available: {', '.join(self.names())}")
        logger.debug("Resolving scenario %s", name)
        return copy.deepcopy(self.scenarios[name]["build"]())

    @staticmethod
    def _bath() -> Dict[str, Any]:
        return {"generate": dict(DEFAULT_BATH), "min_distance": DEFAULT_BATH["min_dist"]}

    def _giant_spin(self) -> Dict[str, Any]:
        D = 25.0
        return {
            "scenario": "giant_spin",
            "model": {
                "units": "ueV",
                "system": {
                    "sites": [{
                        "position": [0.0, 0.0, 0.0],
                        "s": 10.0,
                        "gamma": {"isotropic": 2.0},
                        "zfs": {"D": D, "E": 0.02 * D},
                    }],
                },
                "bath": self._bath(),
                "field": [0.0, 0.0, 0.07],
            },
            "states": list(range(7)),
            "pulses": {"k": 1},
            "grid": {"t_max": 2.0, "points": 200},
        }

    def _five_spin(self) -> Dict[str, Any]:
        triangle, apex = 0.3, 0.1
        table = {(1, 2): triangle, (2, 3): triangle, (3, 1): triangle}
        # no apex-apex bond
        for m in (4, 5):
            for i in (1, 2, 3):
                table[(i, m)] = apex
        return {
            "scenario": "five_spin",
            "model": {
                "units": "meV",
                "system": {
                    "sites": [
                        {"position": position, "s": 0.5, "gamma": {"isotropic": 2.2}}
                        for position in _frustrated_positions(with_center=False)
                    ],
                    "couplings": _couplings(table),
                },
                "bath": self._bath(),
                "field": [0.0, 0.0, 1.0],
            },
            "states": [1, 3, 9, 14, 21, 26],
            "pulses": {"k": 1},
            "grid": {"t_max": 150.0, "points": 200},
            "output": {"reference_pair": [9, 14]},
        }

    def _qudit6_model(self, coupled: bool) -> Dict[str, Any]:
        return {
            "units": "meV",
            "system": {
                "sites": [
                    {"position": position, "s": 0.5, "gamma": {"isotropic": gamma}}
                    for position, gamma in zip(_frustrated_positions(with_center=True), QUDIT6_GAMMAS)
                ],
                "couplings": _couplings(_qudit6_exchange()) if coupled else [],
            },
            "bath": self._bath(),
            "field": [float(np.sin(TILT)), 0.0, float(np.cos(TILT))],
        }

    def _qudit6(self) -> Dict[str, Any]:
        return {
            "scenario": "qudit6",
            "model": self._qudit6_model(coupled=True),
            "state_selection": {"total_sz_tol": 0.1, "count": 7},
            "pulses": {"k": 1},
            "grid": {"t_max": 150.0, "points": 200},
            "reference_scenario": "qudit6_uncoupled",
        }

    def _qudit6_uncoupled(self) -> Dict[str, Any]:
        # reference superposition: the two lowest states with total <S^z> close to zero
        return {
            "scenario": "qudit6_uncoupled",
            "model": self._qudit6_model(coupled=False),
            "state_selection": {"total_sz_tol": 0.1, "count": 2},
            "pulses": {"k": 1},
            "grid": {"t_max": 150.0, "points": 200},
        }
