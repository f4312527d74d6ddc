import pytest
import sys
import os

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from spinbath.constants import MEV, MU_B, PROTON_GYRO
from spinbath.models.spin_models import InteractionTable, SpinModel, SpinSite
from spinbath.services.hamiltonian_builder import exchange_tensor

# Hand-placed protons, pairwise and from the origin more than 3 Å apart
PROTON_POSITIONS = [
    [3.5, 0.0, 0.0],
    [0.0, 3.8, 0.5],
    [-2.0, -1.5, 3.2],
    [1.0, -3.0, -2.5],
    [-3.5, 2.0, -1.0],
    [0.5, 0.5, -4.0],
]


def proton(position):
    return SpinSite(position=position, s=0.5, gamma=PROTON_GYRO * np.eye(3), species_label="proton")


def electron_model(n_bath=4, field=(0.0, 0.0, 0.05)):
    """One S = 1/2 electron at the origin with ``n_bath`` protons around it"""
    electron = SpinSite(position=[0.0, 0.0, 0.0], s=0.5, gamma=2.0 * MU_B * np.eye(3))
    return SpinModel(
        system_sites=[electron],
        bath_sites=[proton(p) for p in PROTON_POSITIONS[:n_bath]],
        field=list(field),
    )


@pytest.fixture
def small_model():
    return electron_model(4)


@pytest.fixture
def dimer_model():
    """Two exchange-coupled S = 1/2 sites with two protons"""
    sites = [
        SpinSite(position=[-1.5, 0.0, 0.0], s=0.5, gamma=2.0 * MU_B * np.eye(3)),
        SpinSite(position=[1.5, 0.0, 0.0], s=0.5, gamma=2.2 * MU_B * np.eye(3)),
    ]
    couplings = InteractionTable.from_entries({(0, 1): exchange_tensor([0.05 * MEV] * 3, 0.005 * MEV)})
    return SpinModel(
        system_sites=sites,
        bath_sites=[proton([0.0, 4.0, 0.0]), proton([0.0, -1.0, 4.5])],
        system_couplings=couplings,
        field=[0.0, 0.0, 0.5],
    )


@pytest.fixture
def giant_spin_config():
    """giant_spin scenario shrunk to a handful of protons and a short grid"""
    return {
        "scenario": "giant_spin",
        "model": {"bath": {"generate": {"n": 5, "radius": 8.0, "min_dist": 3.0, "seed": 7}}},
        "states": [0, 1, 2],
        "grid": {"t_max": 2.0, "points": 21},
        "cce": {"workers": 1},
    }
