"""
Reading experiment configs and turning model sections into SpinModels.

A config either spells out its model or names a built-in scenario; in the
latter case every section present in the file deep-merges over the
scenario's config before validation.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from spinbath.constants import MU_B, MU_N, SPECIES, energy_scale
from spinbath.exceptions import ConfigError
from spinbath.models.config_models import (
    BathSection,
    CouplingSpec,
    ExperimentConfig,
    GammaSpec,
    ModelSpec,
    SiteSpec,
    SystemSection,
)
from spinbath.models.spin_models import InteractionTable, SpinModel, SpinSite
from spinbath.services.bath_generator import generate_bath
from spinbath.services.hamiltonian_builder import exchange_tensor, zfs_tensor
from spinbath.services.scenario_library import ScenarioLibrary

logger = logging.getLogger(__name__)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; lists and scalars in ``override`` replace those in ``base``"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _drop_replaced_bath_source(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Explicit bath sites in ``override`` replace a scenario generator, and the other way round"""
    model, base_model = override.get("model"), base.get("model")
    if not isinstance(model, dict) or not isinstance(base_model, dict):
        return base
    bath, base_bath = model.get("bath"), base_model.get("bath")
    if not isinstance(bath, dict) or not isinstance(base_bath, dict):
        return base
    for given, replaced in (("sites", "generate"), ("generate", "sites")):
        if bath.get(given):
            base_bath.pop(replaced, None)
    return base


def _format_errors(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


class ConfigLoader:
    """Config ingestion and model construction"""

    def __init__(self, library: Optional[ScenarioLibrary] = None):
        self.library = library or ScenarioLibrary()

    def load_config(self, path: Union[str, Path]) -> ExperimentConfig:
        """Load a config file or a run manifest (its ``config`` entry)"""
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        if "config" in data and "model" not in data:
            logger.info("Reading config from run manifest %s", path)
            data = data["config"]
        return self.resolve(data)

    def resolve(self, data: Dict[str, Any]) -> ExperimentConfig:
        """Apply scenario defaults, then validate"""
        name = data.get("scenario")
        if name is not None:
            data = deep_merge(_drop_replaced_bath_source(self.library.get(name), data), data)
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {_format_errors(e)}")

    def from_scenario(self, name: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        return self.resolve(deep_merge({"scenario": name}, overrides or {}))

    # model construction

    @staticmethod
    def _gamma(spec: GammaSpec, magneton: float) -> np.ndarray:
        if spec.species is not None:
            if spec.species not in SPECIES:
                raise ConfigError(f"Unknown species '{spec.species}'; expected one of {sorted(SPECIES)}")
            return SPECIES[spec.species]["gyro"] * np.eye(3)
        if spec.isotropic is not None:
            return spec.isotropic * magneton * np.eye(3)
        return np.asarray(spec.tensor, dtype=float) * magneton

    def _site(self, spec: SiteSpec, magneton: float, scale: float) -> SpinSite:
        self_tensor = None
        if spec.zfs is not None:
            self_tensor = zfs_tensor(spec.zfs.D * scale, spec.zfs.E * scale)
        elif spec.self_tensor is not None:
            self_tensor = np.asarray(spec.self_tensor, dtype=float) * scale
        try:
            return SpinSite(
                position=spec.position,
                s=spec.s,
                gamma=self._gamma(spec.gamma, magneton),
                self_tensor=self_tensor,
                species_label=spec.gamma.species or "",
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid site: {_format_errors(e)}")

    @staticmethod
    def _coupling_tensor(spec: CouplingSpec, scale: float) -> np.ndarray:
        if spec.tensor is not None:
            return np.asarray(spec.tensor, dtype=float) * scale
        return exchange_tensor(np.asarray(spec.J, dtype=float) * scale, spec.K * scale)

    def _table(self, specs: List[CouplingSpec], scale: float, cross: bool) -> InteractionTable:
        entries: Dict[Tuple[int, int], np.ndarray] = {}
        for spec in specs:
            key = (spec.i, spec.j)
            if key in entries or (not cross and (spec.j, spec.i) in entries):
                raise ConfigError(f"Coupling ({spec.i}, {spec.j}) given twice")
            entries[key] = self._coupling_tensor(spec, scale)
        return InteractionTable.from_entries(entries, cross=cross)

    def build_model(self, spec: ModelSpec, seed: int = 0) -> SpinModel:
        """SpinModel in engine units; generated baths use ``spec`` seed, else ``seed``"""
        scale = energy_scale(spec.units)
        system = [self._site(site, MU_B, scale) for site in spec.system.sites]
        system_table = self._table(spec.system.couplings, scale, cross=False)

        bath_section = spec.bath
        if bath_section.generate is not None:
            generate = bath_section.generate
            if generate.seed is None:
                generate = generate.model_copy(update={"seed": seed})
            exclusion = generate.exclusion
            if exclusion is None:
                exclusion = [site.position.tolist() for site in system]
            bath = generate_bath(generate, exclusion=exclusion)
        else:
            bath = [self._site(site, MU_N, scale) for site in bath_section.sites]

        bath_table = None
        if bath_section.couplings != "auto":
            bath_table = self._table(bath_section.couplings, scale, cross=False)
        cross_table = None
        if spec.system_bath != "auto":
            cross_table = self._table(spec.system_bath, scale, cross=True)

        try:
            model = SpinModel(
                system_sites=system,
                bath_sites=bath,
                system_couplings=system_table,
                bath_couplings=bath_table,
                system_bath_couplings=cross_table,
                field=spec.field,
                min_distance=bath_section.min_distance,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid model: {_format_errors(e)}")
        logger.info("Built model: %d system sites, %d bath spins", len(system), len(bath))
        return model

    @staticmethod
    def _site_spec(site: SpinSite, magneton: float) -> SiteSpec:
        return SiteSpec(
            position=site.position.tolist(),
            s=site.s,
            gamma=GammaSpec(tensor=(site.gamma / magneton).tolist()),
            self_tensor=None if site.self_tensor is None else site.self_tensor.tolist(),
        )

    @staticmethod
    def _coupling_specs(table: InteractionTable) -> List[CouplingSpec]:
        return [CouplingSpec(i=i, j=j, tensor=tensor.tolist()) for (i, j), tensor in table]

    def to_spec(self, model: SpinModel) -> ModelSpec:
        """Explicit rad/µs re-serialization of ``model``; build_model reproduces it"""
        return ModelSpec(
            units="rad_per_us",
            system=SystemSection(
                sites=[self._site_spec(site, MU_B) for site in model.system_sites],
                couplings=self._coupling_specs(model.system_couplings),
            ),
            bath=BathSection(
                sites=[self._site_spec(site, MU_N) for site in model.bath_sites],
                couplings="auto" if model.bath_couplings is None else self._coupling_specs(model.bath_couplings),
                min_distance=model.min_distance,
            ),
            system_bath=(
                "auto" if model.system_bath_couplings is None
                else self._coupling_specs(model.system_bath_couplings)
            ),
            field=model.field.tolist(),
        )
