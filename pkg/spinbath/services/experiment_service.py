import asyncio
import logging
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from spinbath.exceptions import ConfigError, SpinBathError, SWValidityError
from spinbath.models.config_models import ExperimentConfig, ExperimentResult
from spinbath.models.dynamics_models import (
    CoherenceTrace,
    ConditionalHamiltonian,
    PairMetrics,
    ScanRow,
    SiteClassPartition,
    SWValidityReport,
    SystemEigenbasis,
)
from spinbath.models.spin_models import SpinModel
from spinbath.services import results_writer
from spinbath.services.cce_service import CCEService, default_workers
from spinbath.services.cluster_builder import cluster_arrays
from spinbath.services.config_loader import ConfigLoader
from spinbath.services.effective_hamiltonian import EffectiveHamiltonianService, diagonalize_system
from spinbath.services.metrics_service import MetricsService, site_class_partition

logger = logging.getLogger(__name__)


class PreparedExperiment(BaseModel):
    """System-side results shared by every bath realization of one config"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ExperimentConfig
    model: SpinModel
    basis: SystemEigenbasis
    partition: SiteClassPartition
    states: List[int]
    pairs: List[Tuple[int, int]]
    sw_report: Optional[SWValidityReport] = None
    excluded: List[int] = []

    @property
    def metrics(self) -> MetricsService:
        return MetricsService(self.basis, self.partition)


class ExperimentService:
    """Runs configured experiments: metrics, CCE traces, references and output files"""

    def __init__(self, loader: Optional[ConfigLoader] = None, workers: Optional[int] = None):
        self.loader = loader or ConfigLoader()
        self.workers = workers

    def _workers(self, config: ExperimentConfig) -> int:
        if self.workers is not None:
            return self.workers
        if config.cce.workers is not None:
            return config.cce.workers
        return default_workers()

    def _cce(self, config: ExperimentConfig) -> CCEService:
        cce = config.cce
        return CCEService(workers=self._workers(config), chunk_size=cce.chunk_size, time_chunk=cce.time_chunk)

    def _effective(
        self, config: ExperimentConfig, model: SpinModel, basis: SystemEigenbasis, pair_cutoff: float
    ) -> EffectiveHamiltonianService:
        return EffectiveHamiltonianService(model, config.cce.sw_order, config.cce.gap_floor, pair_cutoff, basis)

    def resolve_states(self, config: ExperimentConfig, basis: SystemEigenbasis) -> List[int]:
        if config.state_selection is not None:
            selection = config.state_selection
            states = MetricsService(basis).select_states(selection.total_sz_tol, selection.count)
        elif config.states is not None:
            states = list(config.states)
        elif config.pairs is not None:
            states = sorted({int(p) for pair in config.pairs for p in pair})
        else:
            raise ConfigError("Config needs states, pairs or a state_selection")
        for psi in states:
            basis.check_state(psi)
        return states

    def prepare(self, config: ExperimentConfig) -> PreparedExperiment:
        """Build the first realization, diagonalize and apply the SW validity gate"""
        model = self.loader.build_model(config.model, seed=config.seed)
        basis = diagonalize_system(model)
        states = self.resolve_states(config, basis)
        pairs = config.resolved_pairs(states)
        for pair in pairs:
            for psi in pair:
                basis.check_state(psi)

        report = None
        excluded = list(config.cce.exclude_states)
        if config.cce.sw_order == 2:
            involved = sorted({p for pair in pairs for p in pair})
            report = self._effective(config, model, basis, config.cce.cutoff).validity(involved)
            report = report.model_copy(update={"hierarchy_limit": config.cce.hierarchy_limit})
            blocking = [entry for entry in report.blocking if entry.other not in excluded]
            if blocking:
                details = ", ".join(f"{e.state}~{e.other} (gap {e.gap:.3g})" for e in blocking)
                if not config.cce.allow_sw_violation:
                    raise SWValidityError(f"Near-degenerate coupled levels: {details}", flagged=blocking)
                logger.warning("Continuing despite near-degenerate coupled levels: %s", details)
                excluded.extend(sorted({entry.other for entry in blocking}))

        return PreparedExperiment(
            config=config,
            model=model,
            basis=basis,
            partition=site_class_partition(model),
            states=states,
            pairs=pairs,
            sw_report=report,
            excluded=excluded,
        )

    def conditional_hamiltonians(
        self, prepared: PreparedExperiment, model: SpinModel, pair_cutoff: Optional[float] = None
    ) -> Dict[int, ConditionalHamiltonian]:
        config = prepared.config
        pair_cutoff = config.cce.cutoff if pair_cutoff is None else pair_cutoff
        effective = self._effective(config, model, prepared.basis, pair_cutoff)
        involved = sorted({p for pair in prepared.pairs for p in pair})
        return effective.conditionals(involved, prepared.excluded)

    def _record_hierarchy(self, prepared: PreparedExperiment, hamiltonians: Dict[int, ConditionalHamiltonian]):
        """Second-order field ratios of the first realization go into the SW report"""
        report = prepared.sw_report
        if report is None:
            return
        ratios = EffectiveHamiltonianService.field_hierarchy(hamiltonians, report.hierarchy_limit)
        prepared.sw_report = report.model_copy(update={"hierarchy": ratios})

    async def _realization_traces(
        self, prepared: PreparedExperiment, model: SpinModel, record_hierarchy: bool = False
    ) -> List[CoherenceTrace]:
        config = prepared.config
        hamiltonians = self.conditional_hamiltonians(prepared, model)
        if record_hierarchy:
            self._record_hierarchy(prepared, hamiltonians)
        arrays = cluster_arrays(model, config.cce.order, config.cce.cutoff, config.cce.coupling_threshold)
        times = config.grid.times()
        cce = self._cce(config)

        async def one_pair(alpha: int, beta: int) -> CoherenceTrace:
            logger.info("Pair (%d, %d): CCE-%d over %d bath spins", alpha, beta, config.cce.order, len(model.bath_sites))
            return await asyncio.to_thread(
                cce.coherence,
                hamiltonians[alpha], hamiltonians[beta], arrays, config.pulses, times,
                config.bath_state, config.cce.order,
            )

        return list(await asyncio.gather(*(one_pair(a, b) for a, b in prepared.pairs)))

    @staticmethod
    def bath_seed(config: ExperimentConfig) -> int:
        """Seed of the first generated bath: the bath spec's own, else the run seed"""
        generate = config.model.bath.generate
        if generate is not None and generate.seed is not None:
            return generate.seed
        return config.seed

    def _realization_model(self, prepared: PreparedExperiment, index: int) -> SpinModel:
        if index == 0:
            return prepared.model
        spec = prepared.config.model
        generate = spec.bath.generate
        if generate is None:
            return prepared.model
        seed = self.bath_seed(prepared.config) + index
        bath = spec.bath.model_copy(update={"generate": generate.model_copy(update={"seed": seed})})
        return self.loader.build_model(spec.model_copy(update={"bath": bath}), seed=seed)

    async def compute_traces(self, prepared: PreparedExperiment) -> Tuple[List[CoherenceTrace], List[int]]:
        """Traces for every pair, averaged (complex) over bath realizations"""
        config = prepared.config
        realizations = config.cce.realizations
        if realizations > 1 and config.model.bath.generate is None:
            logger.warning("Explicit bath given; %d realizations repeat the same bath", realizations)
        seeds = [self.bath_seed(config) + r for r in range(realizations)]
        if not prepared.pairs:
            return [], seeds

        runs = []
        for r in range(realizations):
            model = self._realization_model(prepared, r)
            runs.append(await self._realization_traces(prepared, model, record_hierarchy=r == 0))

        traces = []
        for n, (alpha, beta) in enumerate(prepared.pairs):
            first = runs[0][n]
            values = np.mean([run[n].values for run in runs], axis=0)
            meta = dict(first.meta, realizations=realizations, pair_cutoff=config.cce.cutoff, sw_order=config.cce.sw_order)
            traces.append(CoherenceTrace(times=first.times, values=values, pair=(alpha, beta), meta=meta))
        return traces, seeds

    def metrics(self, prepared: PreparedExperiment, pairs: Optional[Sequence[Tuple[int, int]]] = None) -> List[PairMetrics]:
        pairs = prepared.pairs if pairs is None else pairs
        return prepared.metrics.table(pairs)

    async def reference_trace(self, config: ExperimentConfig) -> Optional[CoherenceTrace]:
        """First trace of the reference scenario on the same bath, grid and pulses"""
        if config.reference_scenario is None:
            return None
        overrides = {
            "model": {"bath": config.model.bath.model_dump(mode="json")},
            "seed": config.seed,
            "grid": config.grid.model_dump(mode="json"),
            "pulses": config.pulses.model_dump(mode="json"),
            "cce": config.cce.model_dump(mode="json", exclude={"exclude_states"}),
            "bath_state": config.bath_state.model_dump(mode="json"),
        }
        reference = self.loader.from_scenario(config.reference_scenario, overrides)
        result = await self.run_experiment(reference, write=False)
        return result.traces[0] if result.traces else None

    async def run_experiment(self, config: ExperimentConfig, write: bool = True) -> ExperimentResult:
        prepared = self.prepare(config)
        logger.info("Running %d pairs over states %s", len(prepared.pairs), prepared.states)
        traces, seeds = await self.compute_traces(prepared)

        convergence = []
        if config.cce.convergence_check and np.isfinite(config.cce.cutoff):
            # bath couplings uncut so the widened run sees the extra pairs
            hamiltonians = self.conditional_hamiltonians(prepared, prepared.model, pair_cutoff=np.inf)
            cce = self._cce(config)
            for alpha, beta in prepared.pairs:
                report = await asyncio.to_thread(
                    cce.convergence,
                    hamiltonians[alpha], hamiltonians[beta], prepared.model, config.pulses,
                    config.grid.times(), config.cce.cutoff, config.cce.order, config.bath_state,
                )
                convergence.append(report)

        result = ExperimentResult(
            config=config,
            traces=traces,
            metrics=self.metrics(prepared),
            seeds=seeds,
            reference=await self.reference_trace(config),
            sw_report=prepared.sw_report,
            convergence=convergence,
        )
        if write:
            try:
                results_writer.write_results(result)
            except OSError as e:
                raise SpinBathError(f"Could not write results to {config.output.directory}: {e}")
        return result

    async def scan_pairs(self, config: ExperimentConfig, states: Sequence[int]) -> List[ScanRow]:
        """Every pair of ``states`` with its metrics and t_half, sorted by Delta"""
        states = list(states)
        if len(states) < 2:
            return []
        config = config.model_copy(update={
            "states": states,
            "pairs": list(combinations(states, 2)),
            "state_selection": None,
        })
        result = await self.run_experiment(config, write=False)
        metrics = {tuple(m.pair): m for m in result.metrics}
        rows = []
        for trace in result.traces:
            m = metrics[tuple(trace.pair)]
            rows.append(ScanRow(
                alpha=trace.pair[0],
                beta=trace.pair[1],
                delta=m.delta,
                clock_mismatch=m.clock_mismatch,
                transition_moment=m.transition_moment,
                t_half=trace.t_half(),
            ))
        rows.sort(key=lambda row: row.delta)
        return rows

    def spectrum(self, config: ExperimentConfig) -> Dict[str, np.ndarray]:
        """Eigenvalues (rad/µs) and per-site <S_i> of every eigenstate"""
        model = self.loader.build_model(config.model, seed=config.seed)
        basis = diagonalize_system(model)
        return {
            "energies": basis.energies,
            "local_expectations": basis.local_expectations,
            "total_sz": MetricsService(basis).total_sz(),
        }

    def delta_table(self, config: ExperimentConfig, pairs: Optional[Sequence[Tuple[int, int]]] = None) -> List[PairMetrics]:
        """Metrics only, no bath dynamics; ``pairs`` defaults to the configured ones"""
        model = self.loader.build_model(config.model, seed=config.seed)
        basis = diagonalize_system(model)
        if pairs is None:
            pairs = config.resolved_pairs(self.resolve_states(config, basis))
        return MetricsService(basis, site_class_partition(model)).table(pairs)

    async def oracle(self, config: ExperimentConfig) -> Dict[Tuple[int, int], Dict[str, float]]:
        """Max |L_cce - L_exact| per pair, at full cluster order and at the configured order"""
        prepared = self.prepare(config)
        model = prepared.model
        hamiltonians = self.conditional_hamiltonians(prepared, model)
        times = config.grid.times()
        n_bath = len(model.bath_sites)
        full_arrays = cluster_arrays(model, max(n_bath, 1), config.cce.cutoff)
        cce = self._cce(config)

        deviations = {}
        for alpha, beta in prepared.pairs:
            h_alpha, h_beta = hamiltonians[alpha], hamiltonians[beta]
            exact = await asyncio.to_thread(cce.exact, h_alpha, h_beta, model, config.pulses, times, config.bath_state)
            full = await asyncio.to_thread(cce.coherence, h_alpha, h_beta, full_arrays, config.pulses, times, config.bath_state)
            truncated = await asyncio.to_thread(
                cce.coherence, h_alpha, h_beta, full_arrays, config.pulses, times, config.bath_state, config.cce.order
            )
            deviations[(alpha, beta)] = {
                "full_order": float(np.max(np.abs(full.values - exact.values))),
                f"order_{config.cce.order}": float(np.max(np.abs(truncated.values - exact.values))),
            }
            logger.info("Oracle (%d, %d): %s", alpha, beta, deviations[(alpha, beta)])
        return deviations
