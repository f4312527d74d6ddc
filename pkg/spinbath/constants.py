"""
Physical constants and unit conversions in engine units.

Engine units:

- Energy: angular frequency, rad/µs (energy divided by ħ)
- Time: µs
- Distance: Å
- Magnetic field: T
- Gyromagnetic tensors: rad/µs/T

All values derive from the CODATA set shipped with ``scipy.constants``.
"""

import numpy as np
from scipy import constants as sc

from spinbath.exceptions import ConfigError

HBAR = sc.hbar
MU_0 = sc.mu_0
ELEMENTARY_CHARGE = sc.e
BOHR_MAGNETON = sc.physical_constants["Bohr magneton"][0]
NUCLEAR_MAGNETON = sc.physical_constants["nuclear magneton"][0]
PROTON_GYRO_SI = sc.physical_constants["proton gyromag. ratio"][0]
ELECTRON_GYRO_SI = sc.physical_constants["electron gyromag. ratio"][0]

# SI -> engine scale factors
PER_SECOND_TO_PER_US = 1e-6
ANGSTROM = 1e-10

# Energies
JOULE = 1.0 / HBAR * PER_SECOND_TO_PER_US
EV = ELEMENTARY_CHARGE * JOULE
MEV = 1e-3 * EV
UEV = 1e-6 * EV
MHZ = 2.0 * np.pi  # cyclic MHz -> rad/µs

# Magnetons as gyromagnetic ratios, rad/µs/T
MU_B = BOHR_MAGNETON * JOULE
MU_N = NUCLEAR_MAGNETON * JOULE

# Nuclear and electronic species, rad/µs/T (magnitudes)
PROTON_GYRO = PROTON_GYRO_SI * PER_SECOND_TO_PER_US
ELECTRON_GYRO = abs(ELECTRON_GYRO_SI) * PER_SECOND_TO_PER_US

# omega [rad/µs] = DIPOLAR_PREFACTOR * g_i [rad/µs/T] * g_j [rad/µs/T] / r^3 [Å^3]
DIPOLAR_PREFACTOR = (MU_0 / (4.0 * np.pi) * HBAR
                     / PER_SECOND_TO_PER_US ** 2 / ANGSTROM ** 3 * PER_SECOND_TO_PER_US)

ENERGY_UNITS = {
    "meV": MEV,
    "ueV": UEV,
    "rad_per_us": 1.0,
    "MHz": MHZ,
}

SPECIES = {
    "proton": {"gyro": PROTON_GYRO, "spin": 0.5},
    "1H": {"gyro": PROTON_GYRO, "spin": 0.5},
    "electron": {"gyro": ELECTRON_GYRO, "spin": 0.5},
}


def energy_scale(unit: str) -> float:
    """Conversion factor from ``unit`` to rad/µs"""
    try:
        return ENERGY_UNITS[unit]
    except KeyError:
        raise ConfigError(f"Unknown energy unit '{unit}'; expected one of {sorted(ENERGY_UNITS)}")
