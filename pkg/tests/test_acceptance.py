"""
Large-bath runs against the published behaviour of the three molecular
scenarios. Run with ``pytest -m slow``; the full suite takes hours.
"""

import pytest
import numpy as np
from scipy import stats

from spinbath.services.cce_service import CCEService, cce_coherence
from spinbath.services.cluster_builder import cluster_arrays
from spinbath.services.config_loader import ConfigLoader
from spinbath.services.effective_hamiltonian import first_order_only
from spinbath.services.experiment_service import ExperimentService

pytestmark = pytest.mark.slow


def bath(n, radius=20.0, seed=None):
    return {"model": {"bath": {"generate": {"n": n, "radius": radius, "min_dist": 3.0, "seed": seed}}}}


def decay_time(trace, threshold):
    """First crossing, or twice the grid end when the trace never gets there"""
    t = trace.time_below(threshold)
    return 2.0 * float(trace.times[-1]) if t is None else t


class TestAcceptance:
    """Published behaviour of the built-in scenarios"""

    def setup_method(self):
        self.loader = ConfigLoader()
        self.service = ExperimentService(loader=self.loader)

    @pytest.mark.parametrize("n_bath, seed", [(6, 1), (8, 2), (10, 3)])
    def test_full_order_matches_exact_on_giant_spin(self, n_bath, seed):
        overrides = dict(bath(n_bath, radius=9.0, seed=seed), states=[0, 1])
        config = self.loader.from_scenario("giant_spin", overrides)
        prepared = self.service.prepare(config)
        hamiltonians = self.service.conditional_hamiltonians(prepared, prepared.model)
        h_alpha, h_beta = hamiltonians[0], hamiltonians[1]
        times = config.grid.times()
        cce = CCEService(workers=2, chunk_size=2, time_chunk=7)

        exact = cce.exact(h_alpha, h_beta, prepared.model, config.pulses, times)
        arrays = cluster_arrays(prepared.model, n_bath)
        full = cce.coherence(h_alpha, h_beta, arrays, config.pulses, times)
        assert np.max(np.abs(full.values - exact.values)) < 1e-8

        pairs_only = cce.coherence(h_alpha, h_beta, arrays, config.pulses, times, order=2)
        visible = np.abs(exact.values) >= 0.05
        assert np.max(np.abs(pairs_only.values - exact.values)[visible]) < 0.02

    @pytest.mark.asyncio
    async def test_zero_delta_pair_stays_flat(self):
        overrides = dict(bath(200, seed=5), states=None, pairs=[[1, 3], [9, 14]])
        config = self.loader.from_scenario("five_spin", overrides)
        result = await self.service.run_experiment(config, write=False)
        flat, reference = result.traces
        window = flat.times <= decay_time(reference, 1e-3)
        assert np.all(flat.abs_values[window] > 0.99)

        prepared = self.service.prepare(config)
        hamiltonians = self.service.conditional_hamiltonians(prepared, prepared.model)
        arrays = cluster_arrays(prepared.model, 2)
        first_order = cce_coherence(
            first_order_only(hamiltonians[1]), first_order_only(hamiltonians[3]),
            arrays, config.pulses, config.grid.times(),
        )
        assert np.max(np.abs(first_order.abs_values - 1.0)) < 1e-9

    @pytest.mark.asyncio
    async def test_delta_orders_decay_on_giant_spin(self):
        config = self.loader.from_scenario("giant_spin", bath(200, seed=6))
        result = await self.service.run_experiment(config, write=False)
        assert len(result.traces) == 21
        deltas = [m.delta for m in result.metrics]
        halves = [decay_time(trace, 0.5) for trace in result.traces]
        correlation = stats.spearmanr(deltas, halves).correlation
        assert correlation <= -0.9

    @pytest.mark.asyncio
    async def test_qudit_outlasts_uncoupled_reference(self):
        config = self.loader.from_scenario("qudit6", bath(200, seed=7))
        result = await self.service.run_experiment(config, write=False)
        assert len(result.traces) == 21
        reference = decay_time(result.reference, 0.5)
        for trace in result.traces:
            assert decay_time(trace, 0.5) > reference

    @pytest.mark.asyncio
    @pytest.mark.parametrize("scenario, expected", [
        ("giant_spin", 0.1),
        ("five_spin", 50.0),
        ("qudit6_uncoupled", 30.0),
    ])
    async def test_full_bath_timescales(self, scenario, expected):
        config = self.loader.from_scenario(scenario, {"seed": 8})
        result = await self.service.run_experiment(config, write=False)
        if scenario == "five_spin":
            traces = [trace for trace in result.traces if trace.pair == (9, 14)]
        else:
            traces = result.traces
        fastest = min(decay_time(trace, 1e-3) for trace in traces)
        assert expected / 3.0 <= fastest <= 3.0 * expected
