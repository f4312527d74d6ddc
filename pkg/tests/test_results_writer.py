import csv
import json

import pytest
import numpy as np

from spinbath.models.config_models import ExperimentResult
from spinbath.models.dynamics_models import CoherenceTrace, PairMetrics, ScanRow, SWValidityReport
from spinbath.services.config_loader import ConfigLoader, deep_merge
from spinbath.services.results_writer import (
    COLUMNS,
    build_manifest,
    manifest_hash,
    normalization_time,
    write_bath,
    write_results,
    write_scan,
)

from tests.conftest import proton

TIMES = np.linspace(0.0, 10.0, 11)


def decaying(pair, rate):
    return CoherenceTrace(times=TIMES, values=np.exp(-rate * TIMES) + 0j, pair=pair)


def flat(pair):
    return CoherenceTrace(times=TIMES, values=np.ones_like(TIMES, dtype=complex), pair=pair)


class TestNormalization:
    """Choice of the t_norm unit"""

    def test_reference_pair_wins(self):
        traces = [decaying((0, 1), 2.0), decaying((1, 2), 1.0)]
        t_unit, source = normalization_time(traces, reference_pair=(1, 2))
        assert t_unit == pytest.approx(7.0)
        assert source == "pair 1-2"

    def test_fastest_pair_fallback(self):
        traces = [decaying((0, 1), 2.0), decaying((1, 2), 1.0)]
        t_unit, source = normalization_time(traces)
        assert t_unit == pytest.approx(4.0)
        assert "0-1" in source

    def test_reference_that_never_decays(self):
        traces = [flat((0, 1)), decaying((1, 2), 1.0)]
        t_unit, _ = normalization_time(traces, reference_pair=(0, 1))
        assert t_unit == pytest.approx(7.0)

    def test_grid_end(self):
        t_unit, source = normalization_time([flat((0, 1))])
        assert t_unit == 10.0 and source == "grid end"


class TestWriteResults:
    """Trace CSVs, summary and manifest"""

    def setup_method(self):
        loader = ConfigLoader()
        self.config = loader.from_scenario("five_spin", {"grid": {"t_max": 10.0, "points": 11}})
        self.result = ExperimentResult(
            config=self.config,
            traces=[decaying((9, 14), 1.0), flat((1, 3))],
            metrics=[
                PairMetrics(pair=(9, 14), delta=0.1, clock_mismatch=0.0, transition_moment=0.5),
                PairMetrics(pair=(1, 3), delta=2.0, clock_mismatch=1.0, transition_moment=0.0),
            ],
            seeds=[0],
        )

    def test_files(self, tmp_path):
        written = write_results(self.result, tmp_path)
        assert set(written) == {"pair_9_14.csv", "pair_1_3.csv", "summary.csv", "manifest.json"}

    def test_trace_csv(self, tmp_path):
        write_results(self.result, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        lines = (tmp_path / "pair_9_14.csv").read_text().splitlines()
        assert lines[0] == f"# manifest_sha256: {manifest['sha256']}"
        header = next(line for line in lines if not line.startswith("#"))
        assert header.split(",") == list(COLUMNS)
        table = np.loadtxt(tmp_path / "pair_9_14.csv", delimiter=",", skiprows=4)
        assert table.shape == (11, 6)
        # reference pair (9, 14) reaches 1e-3 at t = 7
        assert np.allclose(table[:, 1], TIMES / 7.0)
        assert np.allclose(table[:, 5], table[:, 4] ** 2)

    def test_summary(self, tmp_path):
        write_results(self.result, tmp_path)
        with open(tmp_path / "summary.csv") as handle:
            rows = list(csv.reader(line for line in handle if not line.startswith("#")))
        assert rows[0][:3] == ["alpha", "beta", "delta"]
        assert rows[1][:2] == ["9", "14"]
        assert rows[2][5] == "beyond-grid"

    def test_manifest(self, tmp_path):
        write_results(self.result, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["sha256"] == manifest_hash(manifest)
        assert manifest["seeds"] == [0]
        assert manifest["config"]["scenario"] == "five_spin"
        assert "numpy" in manifest["versions"]

    def test_manifest_records_sw_report(self):
        report = SWValidityReport(gap_floor=0.5, states=[9, 14], hierarchy={9: 0.002, 14: 0.003})
        manifest = build_manifest(self.result.model_copy(update={"sw_report": report}))
        assert manifest["sw_report"]["hierarchy"] == {"9": 0.002, "14": 0.003}
        assert manifest["sw_report"]["hierarchy_limit"] == 0.1
        assert "sw_report" not in build_manifest(self.result)

    def test_manifest_hash_tracks_config(self):
        other = self.result.model_copy(update={"seeds": [1]})
        assert build_manifest(self.result)["sha256"] != build_manifest(other)["sha256"]

    def test_manifest_reloads_as_config(self, tmp_path):
        write_results(self.result, tmp_path)
        config = ConfigLoader().load_config(tmp_path / "manifest.json")
        assert config.grid == self.config.grid
        assert config.model == self.config.model


class TestOtherOutputs:
    """Scan tables and bath files"""

    def test_write_scan(self, tmp_path):
        rows = [
            ScanRow(alpha=0, beta=1, delta=0.5, clock_mismatch=0.1, transition_moment=0.2, t_half=3.0),
            ScanRow(alpha=0, beta=2, delta=1.5, clock_mismatch=0.1, transition_moment=0.0),
        ]
        path = write_scan(rows, tmp_path / "nested" / "scan.csv")
        with open(path) as handle:
            table = list(csv.reader(handle))
        assert table[0][-1] == "t_half_us"
        assert table[1][-1] == "3" and table[2][-1] == "beyond-grid"

    def test_write_bath_is_loadable(self, tmp_path):
        sites = [proton([0.0, 0.0, 5.0]), proton([0.0, 5.0, 0.0])]
        path = write_bath(tmp_path / "bath.json", sites, {"n": 2, "radius": 6.0})
        data = json.loads(path.read_text())
        assert data["generated_from"]["n"] == 2
        model_data = {
            "system": {"sites": [{"position": [0.0, 0.0, 0.0]}]},
            "bath": data["bath"],
        }
        config = ConfigLoader().resolve(deep_merge({"grid": {"t_max": 1.0}}, {"model": model_data}))
        model = ConfigLoader().build_model(config.model)
        assert np.allclose(model.bath_positions, [[0.0, 0.0, 5.0], [0.0, 5.0, 0.0]])
