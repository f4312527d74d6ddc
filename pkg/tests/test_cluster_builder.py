import pytest
import numpy as np
from itertools import combinations

from spinbath.exceptions import ConfigError
from spinbath.models.dynamics_models import Cluster
from spinbath.services.cluster_builder import (
    cluster_arrays,
    enumerate_clusters,
    group_by_order,
    strongest_clusters,
)

from tests.conftest import electron_model


class TestClusterEnumeration:
    """Connected clusters under a pair cutoff"""

    def setup_method(self):
        self.model = electron_model(6)

    def test_full_enumeration_without_cutoff(self):
        arrays = cluster_arrays(self.model, 3)
        assert len(arrays[1]) == 6
        assert len(arrays[2]) == 15
        assert len(arrays[3]) == 20

    def test_every_subset_at_full_order(self):
        arrays = cluster_arrays(self.model, 6)
        assert sum(len(a) for a in arrays.values()) == 2 ** 6 - 1

    def test_cutoff_keeps_closure(self):
        arrays = cluster_arrays(self.model, 3, pair_cutoff=5.0)
        pairs = {tuple(row) for row in arrays[2].tolist()}
        positions = self.model.bath_positions
        for i, j in pairs:
            assert np.linalg.norm(positions[i] - positions[j]) <= 5.0
        for row in arrays.get(3, np.zeros((0, 3))).tolist():
            for sub in combinations(row, 2):
                assert sub in pairs

    def test_coupling_threshold(self):
        all_pairs = cluster_arrays(self.model, 2)[2]
        strong = cluster_arrays(self.model, 2, coupling_threshold=0.015)[2]
        assert 0 < len(strong) < len(all_pairs)

    def test_sorted_rows(self):
        arrays = cluster_arrays(self.model, 2)
        assert np.all(arrays[2][:, 0] < arrays[2][:, 1])
        keys = [tuple(row) for row in arrays[2].tolist()]
        assert keys == sorted(keys)

    def test_invalid_order(self):
        with pytest.raises(ConfigError):
            cluster_arrays(self.model, 0)

    def test_canonical_listing(self):
        clusters = enumerate_clusters(self.model, 2)
        assert clusters[0] == Cluster((0,))
        assert [c.order for c in clusters] == sorted(c.order for c in clusters)
        grouped = group_by_order(clusters)
        assert np.array_equal(grouped[2], cluster_arrays(self.model, 2)[2])


class TestClusterModel:
    """Cluster value type and sampling"""

    def test_members_must_ascend(self):
        with pytest.raises(ValueError):
            Cluster((3, 1))
        assert Cluster().order == 0

    def test_strongest_clusters(self):
        clusters = strongest_clusters(electron_model(6), count=2)
        assert [c.order for c in clusters] == [1, 1, 2, 2]
