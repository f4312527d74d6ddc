import pytest
import numpy as np

from spinbath.exceptions import ConfigError, SWValidityError
from spinbath.services.config_loader import ConfigLoader, deep_merge
from spinbath.services.experiment_service import ExperimentService


class TestExperimentService:
    """End-to-end runs on a shrunk giant-spin scenario"""

    def setup_method(self):
        self.loader = ConfigLoader()
        self.service = ExperimentService(loader=self.loader)

    def config(self, base, **overrides):
        return self.loader.resolve(deep_merge(base, overrides))

    def test_prepare(self, giant_spin_config):
        prepared = self.service.prepare(self.config(giant_spin_config))
        assert prepared.states == [0, 1, 2]
        assert prepared.pairs == [(0, 1), (0, 2), (1, 2)]
        assert prepared.sw_report is not None and prepared.sw_report.clean
        assert len(prepared.model.bath_sites) == 5
        assert prepared.partition.classes == [[0]]

    def test_missing_states(self, giant_spin_config):
        config = self.config(giant_spin_config, states=None)
        with pytest.raises(ConfigError):
            self.service.prepare(config)

    def test_state_out_of_range(self, giant_spin_config):
        with pytest.raises(ConfigError):
            self.service.prepare(self.config(giant_spin_config, states=[0, 40]))

    def test_explicit_pairs(self, giant_spin_config):
        prepared = self.service.prepare(self.config(giant_spin_config, states=None, pairs=[[2, 0]]))
        assert prepared.states == [0, 2]
        assert prepared.pairs == [(2, 0)]

    def test_sw_gate(self, giant_spin_config):
        strict = self.config(giant_spin_config, cce={"gap_floor": 1e12})
        with pytest.raises(SWValidityError) as info:
            self.service.prepare(strict)
        assert info.value.flagged

        lenient = self.config(giant_spin_config, cce={"gap_floor": 1e12, "allow_sw_violation": True})
        prepared = self.service.prepare(lenient)
        assert prepared.excluded

        first_order = self.config(giant_spin_config, cce={"gap_floor": 1e12, "sw_order": 1})
        assert self.service.prepare(first_order).sw_report is None

    @pytest.mark.asyncio
    async def test_run_experiment(self, giant_spin_config):
        result = await self.service.run_experiment(self.config(giant_spin_config), write=False)
        assert [trace.pair for trace in result.traces] == [(0, 1), (0, 2), (1, 2)]
        assert [m.pair for m in result.metrics] == [(0, 1), (0, 2), (1, 2)]
        assert result.seeds == [0]
        assert result.reference is None
        for trace in result.traces:
            assert len(trace.times) == 21
            assert trace.values[0] == pytest.approx(1.0)
            assert np.all(trace.abs_values <= 1.0 + 1e-9)
            assert trace.meta["realizations"] == 1
            assert trace.meta["sw_order"] == 2

    @pytest.mark.asyncio
    async def test_field_hierarchy_is_reported(self, giant_spin_config, caplog):
        result = await self.service.run_experiment(self.config(giant_spin_config), write=False)
        report = result.sw_report
        assert set(report.hierarchy) == {0, 1, 2}
        assert all(ratio > 0.0 for ratio in report.hierarchy.values())
        assert report.hierarchy_limit == 0.1

        strict = self.config(giant_spin_config, cce={"hierarchy_limit": 1e-12})
        result = await self.service.run_experiment(strict, write=False)
        assert result.sw_report.weak_hierarchy == [0, 1, 2]
        assert "Second-order fields exceed" in caplog.text

    @pytest.mark.asyncio
    async def test_writes_output(self, giant_spin_config, tmp_path):
        config = self.config(giant_spin_config, output={"directory": str(tmp_path)})
        await self.service.run_experiment(config)
        assert (tmp_path / "pair_0_1.csv").exists()
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "manifest.json").exists()

    @pytest.mark.asyncio
    async def test_realizations_average(self, giant_spin_config):
        config = self.config(giant_spin_config, states=[0, 1], cce={"realizations": 2})
        result = await self.service.run_experiment(config, write=False)
        # the bath spec carries seed 7; realization r uses 7 + r
        assert result.seeds == [7, 8]
        first = await self.service.run_experiment(self.config(giant_spin_config, states=[0, 1]), write=False)
        second_bath = {"model": {"bath": {"generate": {"seed": 8}}}}
        second = await self.service.run_experiment(
            self.config(deep_merge(giant_spin_config, second_bath), states=[0, 1]), write=False
        )
        expected = 0.5 * (first.traces[0].values + second.traces[0].values)
        assert np.allclose(result.traces[0].values, expected, atol=1e-12)
        assert not np.allclose(first.traces[0].values, second.traces[0].values)

    @pytest.mark.asyncio
    async def test_run_seed_drives_unseeded_baths(self, giant_spin_config):
        unseeded = deep_merge(giant_spin_config, {"model": {"bath": {"generate": {"seed": None}}}})
        result = await self.service.run_experiment(self.config(unseeded, states=[0, 1], seed=3), write=False)
        assert result.seeds == [3]

    @pytest.mark.asyncio
    async def test_worker_count_does_not_change_results(self, giant_spin_config):
        config = self.config(giant_spin_config, cce={"chunk_size": 2})
        serial = await ExperimentService(self.loader, workers=1).run_experiment(config, write=False)
        pooled = await ExperimentService(self.loader, workers=3).run_experiment(config, write=False)
        for a, b in zip(serial.traces, pooled.traces):
            assert np.allclose(a.values, b.values, rtol=0.0, atol=1e-13)

    @pytest.mark.asyncio
    async def test_time_chunk_does_not_change_results(self, giant_spin_config):
        whole = await self.service.run_experiment(self.config(giant_spin_config), write=False)
        sliced = await self.service.run_experiment(self.config(giant_spin_config, cce={"time_chunk": 4}), write=False)
        for a, b in zip(whole.traces, sliced.traces):
            assert np.allclose(a.values, b.values, rtol=0.0, atol=1e-13)

    @pytest.mark.asyncio
    async def test_convergence_check(self, giant_spin_config):
        config = self.config(giant_spin_config, states=[0, 1], cce={"pair_cutoff": 5.0, "convergence_check": True})
        result = await self.service.run_experiment(config, write=False)
        assert len(result.convergence) == 1
        assert result.convergence[0].extended_cutoff == pytest.approx(7.5)

    @pytest.mark.asyncio
    async def test_reference_trace(self, giant_spin_config):
        config = self.config(giant_spin_config, states=[0, 1], reference_scenario="giant_spin")
        result = await self.service.run_experiment(config, write=False)
        # the reference runs the same scenario on the same bath, so its first pair repeats (0, 1)
        assert result.reference.pair == (0, 1)
        assert np.allclose(result.reference.values, result.traces[0].values, atol=1e-12)

    @pytest.mark.asyncio
    async def test_scan(self, giant_spin_config):
        rows = await self.service.scan_pairs(self.config(giant_spin_config), [0, 1, 2])
        assert len(rows) == 3
        deltas = [row.delta for row in rows]
        assert deltas == sorted(deltas)
        assert await self.service.scan_pairs(self.config(giant_spin_config), [1]) == []

    @pytest.mark.asyncio
    async def test_oracle(self, giant_spin_config):
        config = self.config(giant_spin_config, states=[0, 1])
        deviations = await self.service.oracle(config)
        assert set(deviations) == {(0, 1)}
        assert deviations[(0, 1)]["full_order"] < 1e-8
        assert "order_2" in deviations[(0, 1)]

    def test_spectrum(self, giant_spin_config):
        spectrum = self.service.spectrum(self.config(giant_spin_config))
        assert len(spectrum["energies"]) == 21
        assert np.all(np.diff(spectrum["energies"]) >= 0)
        assert spectrum["local_expectations"].shape == (21, 1, 3)
        assert np.all(np.abs(spectrum["total_sz"]) <= 10.0 + 1e-9)

    def test_delta_table(self, giant_spin_config):
        config = self.config(giant_spin_config)
        table = self.service.delta_table(config, [(0, 1)])
        assert [m.pair for m in table] == [(0, 1)]
        assert len(self.service.delta_table(config)) == 3
        assert self.service.delta_table(config, [(1, 1)])[0].delta == 0.0
