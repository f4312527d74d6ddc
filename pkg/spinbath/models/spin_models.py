from functools import cached_property
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from spinbath.exceptions import ConfigError, InvalidSpinError, SingularityError

POSITION_ATOL = 1e-9


def _as_real_array(value, shape: Tuple[int, ...], name: str) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if array.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")
    return array


class SpinSite(BaseModel):
    """A single spin of the central system or of the bath"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    position: np.ndarray
    s: float
    gamma: np.ndarray
    self_tensor: Optional[np.ndarray] = None
    species_label: str = ""

    @field_validator("position", mode="before")
    @classmethod
    def _position(cls, value):
        return _as_real_array(value, (3,), "position")

    @field_validator("gamma", mode="before")
    @classmethod
    def _gamma(cls, value):
        return _as_real_array(value, (3, 3), "gamma")

    @field_validator("self_tensor", mode="before")
    @classmethod
    def _self_tensor(cls, value):
        if value is None:
            return None
        tensor = _as_real_array(value, (3, 3), "self_tensor")
        if not np.allclose(tensor, tensor.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(tensor).max())):
            raise ValueError("self_tensor must be symmetric")
        return tensor

    @field_validator("s")
    @classmethod
    def _spin(cls, value):
        two_s = 2.0 * value
        if two_s < 0 or abs(two_s - round(two_s)) > 1e-12:
            raise InvalidSpinError(f"Spin {value} is not a non-negative half-integer")
        return float(value)

    @property
    def dim(self) -> int:
        return int(round(2 * self.s)) + 1


class InteractionTable(BaseModel):
    """
    Pairwise 3x3 tensors stored as dense arrays.

    ``pairs`` is (M, 2) and ``tensors`` is (M, 3, 3); a stored tensor multiplies
    the first index's spin on the left and the second index's spin on the right.
    Same-list tables keep i < j; cross tables (system -> bath) index two lists.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pairs: np.ndarray
    tensors: np.ndarray
    cross: bool = False

    @field_validator("pairs", mode="before")
    @classmethod
    def _pairs(cls, value):
        array = np.asarray(value, dtype=np.int64).reshape(-1, 2)
        return array

    @field_validator("tensors", mode="before")
    @classmethod
    def _tensors(cls, value):
        return np.asarray(value, dtype=float).reshape(-1, 3, 3)

    @model_validator(mode="after")
    def _check(self):
        if len(self.pairs) != len(self.tensors):
            raise ValueError("pairs and tensors must have the same length")
        if len(self.pairs) and np.any(self.pairs < 0):
            raise ValueError("pair indices must be non-negative")
        if not self.cross and len(self.pairs) and np.any(self.pairs[:, 0] >= self.pairs[:, 1]):
            raise ValueError("same-list tables store pairs with i < j and no self-pairs")
        if len(self._index) != len(self.pairs):
            raise ValueError("duplicate pair in interaction table")
        return self

    @classmethod
    def empty(cls, cross: bool = False) -> "InteractionTable":
        return cls(pairs=np.zeros((0, 2), dtype=np.int64), tensors=np.zeros((0, 3, 3)), cross=cross)

    @classmethod
    def from_entries(cls, entries: Dict[Tuple[int, int], np.ndarray], cross: bool = False) -> "InteractionTable":
        """Build a table from {(i, j): tensor}; same-list entries with i > j are transposed"""
        merged: Dict[Tuple[int, int], np.ndarray] = {}
        for (i, j), tensor in entries.items():
            tensor = np.asarray(tensor, dtype=float)
            if not cross:
                if i == j:
                    raise ConfigError(f"Self-pair ({i}, {i}) belongs in the site self_tensor")
                if i > j:
                    i, j, tensor = j, i, tensor.T
            if (i, j) in merged:
                raise ConfigError(f"Pair ({i}, {j}) given twice")
            merged[(i, j)] = tensor
        keys = sorted(merged)
        if not keys:
            return cls.empty(cross=cross)
        return cls(pairs=np.array(keys), tensors=np.stack([merged[key] for key in keys]), cross=cross)

    @cached_property
    def _index(self) -> Dict[Tuple[int, int], int]:
        return {(int(i), int(j)): n for n, (i, j) in enumerate(self.pairs)}

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Tuple[Tuple[int, int], np.ndarray]]:
        for (i, j), tensor in zip(self.pairs, self.tensors):
            yield (int(i), int(j)), tensor

    def get(self, i: int, j: int) -> np.ndarray:
        """Tensor coupling spin i (left) to spin j (right); zeros when absent"""
        n = self._index.get((i, j))
        if n is not None:
            return self.tensors[n]
        if not self.cross:
            n = self._index.get((j, i))
            if n is not None:
                return self.tensors[n].T
        return np.zeros((3, 3))

    def lookup(self, pairs: np.ndarray) -> np.ndarray:
        """Batched ``get`` for an (M, 2) array of pairs"""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.stack([self.get(int(i), int(j)) for i, j in pairs]) if len(pairs) else np.zeros((0, 3, 3))

    def check_indices(self, n_left: int, n_right: Optional[int] = None):
        n_right = n_left if n_right is None else n_right
        if not len(self.pairs):
            return
        if self.pairs[:, 0].max() >= n_left or self.pairs[:, 1].max() >= n_right:
            raise ConfigError(f"Interaction table references a site outside {n_left} x {n_right} sites")

    def dense(self, n_left: int, n_right: int) -> np.ndarray:
        """(n_left, n_right, 3, 3) array with zeros for absent pairs"""
        self.check_indices(n_left, n_right)
        array = np.zeros((n_left, n_right, 3, 3))
        if len(self.pairs):
            array[self.pairs[:, 0], self.pairs[:, 1]] = self.tensors
        return array

    def scaled(self, factor: float) -> "InteractionTable":
        return InteractionTable(pairs=self.pairs, tensors=self.tensors * factor, cross=self.cross)


class SpinModel(BaseModel):
    """
    Central system plus bath.

    ``bath_couplings`` or ``system_bath_couplings`` left as None are filled
    from the point-dipole formula on demand.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    system_sites: List[SpinSite]
    bath_sites: List[SpinSite] = []
    system_couplings: InteractionTable = InteractionTable.empty()
    bath_couplings: Optional[InteractionTable] = None
    system_bath_couplings: Optional[InteractionTable] = None
    field: np.ndarray = np.zeros(3)
    min_distance: float = 3.0

    @field_validator("field", mode="before")
    @classmethod
    def _field(cls, value):
        return _as_real_array(value, (3,), "field")

    @model_validator(mode="after")
    def _check(self):
        if not self.system_sites:
            raise ConfigError("Model needs at least one system site")
        n_sys, n_bath = len(self.system_sites), len(self.bath_sites)
        self.system_couplings.check_indices(n_sys)
        if self.bath_couplings is not None:
            self.bath_couplings.check_indices(n_bath)
        if self.system_bath_couplings is not None:
            if not self.system_bath_couplings.cross:
                raise ConfigError("system_bath_couplings must be a cross table")
            self.system_bath_couplings.check_indices(n_sys, n_bath)
        self._check_distances()
        return self

    def _check_distances(self):
        from sklearn.metrics import pairwise_distances

        positions = np.vstack([self.system_positions, self.bath_positions])
        if len(positions) < 2:
            return
        distances = pairwise_distances(positions)
        # system sites may coincide (site classes); everything else keeps min_distance
        n_sys = len(self.system_sites)
        distances[:n_sys, :n_sys] = np.inf
        np.fill_diagonal(distances, np.inf)
        i, j = np.unravel_index(np.argmin(distances), distances.shape)
        closest = distances[i, j]
        if closest <= POSITION_ATOL:
            raise SingularityError(f"Sites {min(i, j)} and {max(i, j)} share a position")
        if closest < self.min_distance - POSITION_ATOL:
            raise ConfigError(
                f"Sites {min(i, j)} and {max(i, j)} are {closest:.3f} Å apart, "
                f"below the minimum distance {self.min_distance} Å"
            )

    @cached_property
    def system_positions(self) -> np.ndarray:
        return np.array([site.position for site in self.system_sites]).reshape(-1, 3)

    @cached_property
    def bath_positions(self) -> np.ndarray:
        return np.array([site.position for site in self.bath_sites]).reshape(-1, 3)

    @cached_property
    def system_gammas(self) -> np.ndarray:
        return np.array([site.gamma for site in self.system_sites]).reshape(-1, 3, 3)

    @cached_property
    def bath_gammas(self) -> np.ndarray:
        return np.array([site.gamma for site in self.bath_sites]).reshape(-1, 3, 3)

    @cached_property
    def system_dims(self) -> List[int]:
        return [site.dim for site in self.system_sites]

    @cached_property
    def bath_dims(self) -> List[int]:
        return [site.dim for site in self.bath_sites]

    def with_updates(self, **changes) -> "SpinModel":
        """Validated copy with some fields replaced"""
        data = {name: getattr(self, name) for name in type(self).model_fields}
        data.update(changes)
        return SpinModel(**data)


class BathTerms(BaseModel):
    """Intrinsic bath Hamiltonian pieces; the global bath matrix is never formed"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    zeeman: np.ndarray
    positions: np.ndarray
    gammas: np.ndarray
    spins: np.ndarray
    self_tensors: np.ndarray
    explicit_couplings: Optional[InteractionTable] = None
    pair_cutoff: float = np.inf

    @property
    def size(self) -> int:
        return len(self.zeeman)

    @property
    def dims(self) -> np.ndarray:
        return np.rint(2 * self.spins).astype(int) + 1

    @property
    def auto(self) -> bool:
        return self.explicit_couplings is None

    @cached_property
    def couplings(self) -> InteractionTable:
        """J table: explicit entries, or point-dipole tensors for pairs within the cutoff"""
        from spinbath.services.hamiltonian_builder import dipolar_tensors, neighbor_pairs

        if self.explicit_couplings is not None:
            return self.explicit_couplings
        pairs = neighbor_pairs(self.positions, self.pair_cutoff)
        tensors = dipolar_tensors(
            self.positions[pairs[:, 0]], self.positions[pairs[:, 1]],
            self.gammas[pairs[:, 0]], self.gammas[pairs[:, 1]],
        )
        return InteractionTable(pairs=pairs, tensors=tensors)

    def coupling_tensors(self, pairs: np.ndarray) -> np.ndarray:
        """J tensors for an (M, 2) array of bath pairs with i < j"""
        from spinbath.services.hamiltonian_builder import dipolar_tensors

        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if self.explicit_couplings is not None:
            return self.explicit_couplings.lookup(pairs)
        tensors = dipolar_tensors(
            self.positions[pairs[:, 0]], self.positions[pairs[:, 1]],
            self.gammas[pairs[:, 0]], self.gammas[pairs[:, 1]],
        )
        if np.isfinite(self.pair_cutoff):
            distances = np.linalg.norm(self.positions[pairs[:, 1]] - self.positions[pairs[:, 0]], axis=1)
            tensors[distances > self.pair_cutoff] = 0.0
        return tensors
