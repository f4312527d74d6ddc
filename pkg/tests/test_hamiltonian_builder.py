import pytest
import numpy as np

from spinbath.constants import DIPOLAR_PREFACTOR, MU_B, PROTON_GYRO
from spinbath.exceptions import SingularityError
from spinbath.models.spin_models import InteractionTable, SpinModel, SpinSite
from spinbath.services import spin_operators
from spinbath.services.hamiltonian_builder import (
    build_bath_hamiltonian_terms,
    build_system_hamiltonian,
    dipolar_tensor,
    exchange_tensor,
    neighbor_pairs,
    system_bath_array,
    system_bath_couplings,
    zfs_tensor,
)

from tests.conftest import proton


class TestTensors:
    """Pair and self tensors"""

    def test_proton_pair_along_z(self):
        g = PROTON_GYRO * np.eye(3)
        tensor = dipolar_tensor([0, 0, 0], [0, 0, 3.0], g, g)
        # J_zz = -2 mu0/4pi hbar gamma^2 / r^3, about -0.056 rad/µs at 3 Å
        assert tensor[2, 2] == pytest.approx(-0.0559, rel=5e-3)
        assert tensor[0, 0] == pytest.approx(-0.5 * tensor[2, 2])
        assert np.allclose(tensor, tensor.T)
        assert np.trace(tensor) == pytest.approx(0.0, abs=1e-12)

    def test_scaling_with_distance(self):
        g = PROTON_GYRO * np.eye(3)
        near = dipolar_tensor([0, 0, 0], [0, 0, 3.0], g, g)
        far = dipolar_tensor([0, 0, 0], [0, 0, 6.0], g, g)
        assert np.allclose(far, near / 8.0)

    def test_prefactor(self):
        g = np.eye(3)
        tensor = dipolar_tensor([0, 0, 0], [1.0, 0, 0], g, g)
        assert tensor[1, 1] == pytest.approx(DIPOLAR_PREFACTOR)

    def test_anisotropic_gamma_orientation(self):
        g_i = np.diag([1.0, 2.0, 3.0])
        g_j = np.eye(3)
        forward = dipolar_tensor([0, 0, 0], [1.0, 2.0, 2.0], g_i, g_j)
        backward = dipolar_tensor([1.0, 2.0, 2.0], [0, 0, 0], g_j, g_i)
        assert np.allclose(forward, backward.T)

    def test_coincident_positions(self):
        with pytest.raises(SingularityError):
            dipolar_tensor([1, 1, 1], [1, 1, 1], np.eye(3), np.eye(3))

    def test_zfs_tensor(self):
        tensor = zfs_tensor(3.0, 0.5)
        assert np.allclose(np.diag(tensor), [-0.5, -1.5, 2.0])
        assert np.trace(tensor) == pytest.approx(0.0)

    def test_exchange_tensor(self):
        tensor = exchange_tensor([1.0, 2.0, 3.0], 0.1)
        assert tensor[0, 1] == 0.1 and tensor[1, 0] == -0.1
        assert np.allclose(np.diag(tensor), [1.0, 2.0, 3.0])
        assert np.allclose(exchange_tensor(2.0), 2.0 * np.eye(3))


class TestNeighborPairs:
    """Pair enumeration under a distance cutoff"""

    def setup_method(self):
        self.positions = np.array([[0, 0, 0], [3.0, 0, 0], [10.0, 0, 0], [0, 4.0, 0]])

    def test_all_pairs_without_cutoff(self):
        pairs = neighbor_pairs(self.positions)
        assert len(pairs) == 6
        assert np.all(pairs[:, 0] < pairs[:, 1])

    def test_cutoff(self):
        pairs = neighbor_pairs(self.positions, 5.5)
        assert pairs.tolist() == [[0, 1], [0, 3], [1, 3]]

    def test_single_position(self):
        assert neighbor_pairs(self.positions[:1], 5.0).shape == (0, 2)


class TestSystemHamiltonian:
    """Dense system Hamiltonian"""

    def test_zeeman_ground_state_is_anti_aligned(self):
        site = SpinSite(position=[0, 0, 0], s=0.5, gamma=2.0 * MU_B * np.eye(3))
        H = build_system_hamiltonian(SpinModel(system_sites=[site], field=[0, 0, 1.0]))
        energies, states = spin_operators.eigh(H)
        assert energies[1] - energies[0] == pytest.approx(2.0 * MU_B)
        # descending-m basis: m = -1/2 is the second basis vector
        assert abs(states[1, 0]) == pytest.approx(1.0)

    def test_giant_spin_level_count(self):
        site = SpinSite(position=[0, 0, 0], s=10, gamma=2.0 * MU_B * np.eye(3), self_tensor=zfs_tensor(-1.0e4))
        H = build_system_hamiltonian(SpinModel(system_sites=[site]))
        energies, _ = spin_operators.eigh(H)
        assert len(energies) == 21
        # easy axis without field: ground doublet m = +-10
        assert energies[1] - energies[0] == pytest.approx(0.0, abs=1e-6)

    def test_heisenberg_dimer(self, dimer_model):
        model = dimer_model.with_updates(field=[0.0, 0.0, 0.0])
        coupling = model.system_couplings.get(0, 1)[0, 0]
        model = model.with_updates(
            system_couplings=InteractionTable.from_entries({(0, 1): coupling * np.eye(3)})
        )
        energies, _ = spin_operators.eigh(build_system_hamiltonian(model))
        # singlet at -3J/4, triplet at J/4
        assert np.allclose(energies, [-0.75 * coupling, 0.25 * coupling, 0.25 * coupling, 0.25 * coupling])


class TestBathTerms:
    """Bath pieces and system-bath couplings"""

    def test_bath_zeeman(self, small_model):
        terms = build_bath_hamiltonian_terms(small_model)
        assert terms.size == 4
        assert np.allclose(terms.zeeman, [[0.0, 0.0, 0.05 * PROTON_GYRO]] * 4)
        assert terms.auto

    def test_couplings_respect_cutoff(self, small_model):
        cut = build_bath_hamiltonian_terms(small_model, pair_cutoff=5.0)
        full = build_bath_hamiltonian_terms(small_model)
        pairs = np.array([[0, 1], [0, 3]])
        # 0-1 is 5.19 Å apart, 0-3 is 4.64 Å
        assert np.allclose(cut.coupling_tensors(pairs)[0], 0.0)
        assert np.allclose(cut.coupling_tensors(pairs)[1], full.coupling_tensors(pairs)[1])
        assert len(cut.couplings) < len(full.couplings)

    def test_system_bath_array_matches_table(self, small_model):
        array = system_bath_array(small_model)
        table = system_bath_couplings(small_model)
        assert array.shape == (1, 4, 3, 3)
        assert np.allclose(table.get(0, 2), array[0, 2])

    def test_explicit_system_bath(self):
        electron = SpinSite(position=[0, 0, 0], s=0.5, gamma=np.eye(3))
        model = SpinModel(
            system_sites=[electron],
            bath_sites=[proton([4, 0, 0])],
            system_bath_couplings=InteractionTable.empty(cross=True),
        )
        assert np.allclose(system_bath_array(model), 0.0)
