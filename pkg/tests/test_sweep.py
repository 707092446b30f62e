import numpy as np
import pytest

from clapaug.config import load_config
from clapaug.sweep import (FIELDS, METRICS, cell_stats, peak, run_sweep, sweep_csv, sweep_table, train_toy,
                           zsac_metrics)


@pytest.fixture(scope="module")
def quick_cfg():
    return load_config(None, {"train.steps": 15})


@pytest.fixture(scope="module")
def p_rows(quick_cfg):
    return run_sweep("p", [0.4], [0, 1], quick_cfg)


class TestRunSweep:
    def test_schema(self, p_rows):
        assert all(tuple(r) == FIELDS for r in p_rows)
        assert {r["metric"] for r in p_rows} == set(METRICS)
        # one swept value plus the control, two seeds, two metrics
        assert len(p_rows) == 2 * 2 * 2
        assert [r["axis_value"] for r in p_rows[:4]] == [0.4, 0.4, 1.0, 1.0]

    def test_control_matches_direct_run(self, quick_cfg, p_rows):
        run = train_toy(1, quick_cfg, p=1.0)
        direct = zsac_metrics(run, quick_cfg["eval"]["n_prompts"], quick_cfg["eval"]["seed"] + 1)
        cell = {r["metric"]: r["value"] for r in p_rows if r["seed"] == 1 and r["axis_value"] == 1.0}
        assert cell == direct

    def test_no_control(self, quick_cfg):
        rows = run_sweep("p", [0.5], [0], quick_cfg, control=False)
        assert {r["axis_value"] for r in rows} == {0.5}

    def test_n_prompts_axis(self, quick_cfg):
        seen = []
        rows = run_sweep("n_prompts", [1, 3], [0], quick_cfg, on_row=seen.append)
        assert seen == rows
        assert [r["axis_value"] for r in rows] == [1, 1, 3, 3]

    @pytest.mark.parametrize("axis,values", [("temperature", [1]), ("p", [1.5]), ("n_prompts", [0]), ("p", [])])
    def test_bad_input(self, axis, values):
        with pytest.raises(ValueError):
            run_sweep(axis, values, [0])


class TestSummaries:
    ROWS = [{"axis": "p", "axis_value": v, "seed": s, "metric": "m", "value": x}
            for v, s, x in [(0.2, 0, 0.5), (0.2, 1, 0.7), (0.4, 0, 0.8), (0.4, 1, 0.8), (1.0, 0, 0.9), (1.0, 1, 0.9)]]

    def test_cell_stats(self):
        stats = cell_stats(self.ROWS, "m")
        assert stats[0.2] == pytest.approx((0.6, 0.1, 2), abs=1e-12)
        assert stats[0.4][1] == 0.0

    def test_peak_ignores_control(self):
        assert peak(self.ROWS, "m") == 0.4

    def test_table(self):
        lines = sweep_table(self.ROWS).splitlines()
        assert lines[0] == "p"
        assert lines[1].split() == ["metric", "0.2", "0.4", "1.0", "(control)"]
        assert "0.6000 ± 0.1000" in lines[3]

    def test_csv(self):
        text = sweep_csv(self.ROWS)
        assert text.splitlines()[0] == ",".join(FIELDS)
        assert text.splitlines()[1] == "p,0.2,0,m,0.5"


class TestToyTraining:
    @pytest.mark.parametrize("seed", [0, 3])
    def test_loss_drops_and_trends_down(self, seed):
        losses = np.array(train_toy(seed).result.losses)
        assert len(losses) == 500
        assert losses[-1] < 0.1 * losses[0]
        windows = losses.reshape(10, 50).mean(axis=1)
        assert np.all(np.diff(windows) <= 0)
