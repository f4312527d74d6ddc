import pytest
import numpy as np

from spinbath.constants import MEV
from spinbath.exceptions import UnknownScenarioError
from spinbath.services.config_loader import ConfigLoader
from spinbath.services.effective_hamiltonian import EffectiveHamiltonianService, diagonalize_system
from spinbath.services.metrics_service import MetricsService
from spinbath.services.scenario_library import ScenarioLibrary

SMALL_BATH = {"model": {"bath": {"generate": {"n": 4, "radius": 9.0, "min_dist": 3.0}}}}


class TestScenarioLibrary:
    """Built-in scenarios"""

    def setup_method(self):
        self.library = ScenarioLibrary()
        self.loader = ConfigLoader(self.library)

    def build(self, name):
        config = self.loader.from_scenario(name, SMALL_BATH)
        return config, self.loader.build_model(config.model, seed=config.seed)

    def test_names(self):
        assert self.library.names() == ["five_spin", "giant_spin", "qudit6", "qudit6_uncoupled"]
        assert set(self.library.describe()) == set(self.library.names())

    def test_unknown_name(self):
        with pytest.raises(UnknownScenarioError):
            self.library.get("seven_spin")

    def test_copies_are_independent(self):
        first = self.library.get("five_spin")
        first["model"]["system"]["sites"].clear()
        assert len(self.library.get("five_spin")["model"]["system"]["sites"]) == 5

    def test_default_bath(self):
        bath = self.library.get("giant_spin")["model"]["bath"]["generate"]
        assert bath["n"] == 1000 and bath["radius"] == 20.0 and bath["min_dist"] == 3.0

    def test_giant_spin_levels(self):
        _, model = self.build("giant_spin")
        assert diagonalize_system(model).dim == 21

    def test_five_spin_couplings(self):
        config, model = self.build("five_spin")
        table = model.system_couplings
        assert len(model.system_sites) == 5
        # triangle plus six apex bonds, the two apexes are not coupled
        assert len(table) == 9
        assert np.allclose(table.get(3, 4), 0.0)
        J12 = table.get(0, 1)[0, 0]
        assert J12 == pytest.approx(0.3 * MEV)
        assert table.get(3, 0)[0, 0] == pytest.approx(0.1 * J12)
        assert config.output.reference_pair == (9, 14)
        assert diagonalize_system(model).dim == 32

    def test_five_spin_triangle_is_cyclic(self):
        _, model = self.build("five_spin")
        table = model.system_couplings
        K = 0.1 * table.get(0, 1)[0, 0]
        # K_xy of S_1 -> S_2, S_2 -> S_3 and S_3 -> S_1 all carry the same sign
        for i, j in [(0, 1), (1, 2), (2, 0)]:
            assert table.get(i, j)[0, 1] == pytest.approx(K)
            assert table.get(j, i)[0, 1] == pytest.approx(-K)

    def test_qudit6_closing_bond_orientation(self):
        _, model = self.build("qudit6")
        table = model.system_couplings
        for i, j in [(0, 1), (1, 2), (2, 0)]:
            tensor = table.get(i, j)
            assert tensor[0, 1] == pytest.approx(0.1 * tensor[0, 0])

    def test_qudit6(self):
        config, model = self.build("qudit6")
        assert len(model.system_sites) == 6
        assert len(model.system_couplings) == 15
        assert np.allclose(model.system_positions[5], 0.0)
        assert np.linalg.norm(model.field) == pytest.approx(1.0)
        assert model.field[0] == pytest.approx(np.sin(np.pi / 18))
        assert config.state_selection.count == 7
        assert config.reference_scenario == "qudit6_uncoupled"

    def test_qudit6_uncoupled_matches_geometry(self):
        _, coupled = self.build("qudit6")
        _, uncoupled = self.build("qudit6_uncoupled")
        assert len(uncoupled.system_couplings) == 0
        assert np.allclose(uncoupled.system_positions, coupled.system_positions)
        assert np.allclose(uncoupled.system_gammas, coupled.system_gammas)
        assert np.allclose(uncoupled.bath_positions, coupled.bath_positions)


class TestFiveSpinDesign:
    """Delta and clock mismatch of the five-spin levels"""

    def setup_method(self):
        loader = ConfigLoader()
        config = loader.from_scenario("five_spin", SMALL_BATH)
        self.model = loader.build_model(config.model, seed=config.seed)
        self.metrics = MetricsService.from_model(self.model)

    def test_sites_are_distinct_classes(self):
        assert self.metrics.partition.classes == [[0], [1], [2], [3], [4]]

    def test_chirality_pair_has_zero_delta(self):
        assert self.metrics.delta(1, 3) == pytest.approx(0.0, abs=1e-10)

    def test_reference_pair_delta(self):
        assert self.metrics.delta(9, 14) == pytest.approx(2.37, abs=0.01)

    def test_clock_states_share_total_moment(self):
        for alpha, beta in [(9, 21), (9, 26), (21, 26)]:
            assert self.metrics.clock_mismatch(alpha, beta) < 1e-8

    def test_clock_deltas(self):
        assert self.metrics.delta(9, 26) < 0.1
        assert self.metrics.delta(9, 21) > 0.2
        assert self.metrics.delta(21, 26) > 0.2

    def test_second_order_fields_stay_perturbative(self):
        effective = EffectiveHamiltonianService(self.model, basis=self.metrics.basis)
        hamiltonians = effective.conditionals([1, 3, 9, 14])
        ratios = effective.field_hierarchy(hamiltonians)
        assert all(0.0 < ratio < 0.1 for ratio in ratios.values())
