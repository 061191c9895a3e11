import logging

import numpy as np
import pytest

from pidenet import jumpsim, metrics, nn, problems
from pidenet.jumpsim import TimeGrid

from test_scheme import linear_net


def identity_params():
    # network equal to u(t, x) = x on positive states
    return linear_net(1, [0.0, 1.0])


def scaled_params(factor):
    return linear_net(1, [0.0, factor])


def offset_params(offset):
    return linear_net(1, [0.0, 1.0], bias=offset)


@pytest.fixture(scope="module")
def pure_jump_batch():
    prob = problems.pure_jump_1d()
    return prob, jumpsim.simulate_forward(prob, TimeGrid(1.0, 10), 512, seed=3)


class TestPointwiseMetrics:
    def test_perfect_fit_is_zero(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        params = identity_params()
        assert metrics.mean_relative_error(params, batch, prob) == 0.0
        assert metrics.max_square_error(params, batch, prob) == 0.0
        assert np.all(metrics.error_by_time(params, batch, prob) == 0.0)

    def test_uniform_inflation(self, pure_jump_batch):
        # net = 1.01 u with u bounded away from zero gives exactly 1%
        prob, batch = pure_jump_batch
        assert batch.states.min() > 0.01
        err = metrics.mean_relative_error(scaled_params(1.01), batch, prob)
        assert err == pytest.approx(0.01, rel=1e-9)

    def test_constant_offset_squared(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        err = metrics.max_square_error(offset_params(0.1), batch, prob)
        assert err == pytest.approx(0.01, rel=1e-9)

    def test_node_zero_is_initial_state_error(self, pure_jump_batch):
        # all paths start at x0, so the first entry equals the pointwise
        # relative error at (0, x0)
        prob, batch = pure_jump_batch
        params = scaled_params(1.05)
        by_time = metrics.error_by_time(params, batch, prob)
        x0 = prob.x0[None, :]
        expected = abs(nn.evaluate(params, 0.0, x0)[0, 0] - 1.0) / 1.0
        assert by_time[0] == pytest.approx(expected, rel=1e-12)
        assert by_time.shape == (11,)

    def test_max_square_dominates_single_node_mean(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        params = scaled_params(0.9)
        approx_err = metrics.max_square_error(params, batch, prob)
        # batch-mean absolute gap at any single node, squared, is a lower bound
        for n in (0, 5, 10):
            vals = nn.evaluate(params, batch.grid.times[n], batch.states[:, n, :])[:, 0]
            exact = prob.exact(batch.grid.times[n], batch.states[:, n, :])[:, 0]
            assert approx_err >= np.mean(np.abs(vals - exact)) ** 2 - 1e-15

    def test_permutation_invariance(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        params = scaled_params(1.2)
        perm = np.random.default_rng(1).permutation(batch.batch_size)
        shuffled = batch.permuted(perm)
        a = metrics.mean_relative_error(params, batch, prob)
        b = metrics.mean_relative_error(params, shuffled, prob)
        assert a == pytest.approx(b, abs=1e-12)
        assert metrics.max_square_error(params, batch, prob) == pytest.approx(
            metrics.max_square_error(params, shuffled, prob), abs=1e-12
        )

    def test_missing_exact_solution(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        stripped = problems.ProblemSpec(
            name="no_exact",
            dim=1,
            x0=prob.x0,
            total_time=prob.total_time,
            intensity=prob.intensity,
            mark_dim=1,
            drift=prob.drift,
            diffusion=prob.diffusion,
            jump_size=prob.jump_size,
            sample_marks=prob.sample_marks,
            compensator=prob.compensator,
            driver=prob.driver,
            terminal=prob.terminal,
        )
        with pytest.raises(metrics.MissingExactSolutionError):
            metrics.mean_relative_error(identity_params(), batch, stripped)


class TestErrorGrid:
    def test_grid_rows_cover_time_nodes(self, pure_jump_batch):
        prob, batch = pure_jump_batch
        rows = metrics.error_grid(identity_params(), batch, prob, bins=8)
        ts = {r[0] for r in rows}
        assert ts == set(float(t) for t in batch.grid.times)
        assert all(r[2] >= 0 for r in rows)

    def test_rejects_multidimensional(self):
        prob = problems.highdim_pide(dim=2)
        batch = jumpsim.simulate_forward(prob, TimeGrid(1.0, 2), 8, seed=0)
        params = nn.init(nn.MlpArchitecture(3, (4,)), seed=0)
        with pytest.raises(ValueError):
            metrics.error_grid(params, batch, prob)


class TestConvergenceTable:
    def test_order_formula(self):
        rows = metrics.convergence_table({2: [4e-3], 4: [2e-3]}, total_time=1.0, keep=1)
        assert rows[0].order is None
        assert rows[1].order == pytest.approx(1.0, rel=1e-12)

    def test_identical_errors_give_zero_order(self):
        rows = metrics.convergence_table({2: [1e-3], 4: [1e-3]}, total_time=1.0, keep=1)
        assert rows[1].order == 0.0

    def test_keep_best_subset(self):
        rows = metrics.convergence_table(
            {2: [5.0, 1.0, 3.0, 2.0], 4: [0.5, 0.25, 4.0, 9.0]}, total_time=1.0, keep=2
        )
        assert rows[0].max_sq_err == pytest.approx(1.5)
        assert rows[1].max_sq_err == pytest.approx(0.375)

    def test_nonfinite_runs_excluded_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            rows = metrics.convergence_table(
                {2: [np.nan, 2.0], 4: [1.0, np.inf]}, total_time=1.0, keep=2
            )
        assert rows[0].max_sq_err == 2.0
        assert rows[1].max_sq_err == 1.0
        assert any("non-finite" in r.message for r in caplog.records)

    def test_single_row_table(self):
        rows = metrics.convergence_table({8: [1e-3, 2e-3]}, total_time=1.0, keep=1)
        assert len(rows) == 1 and rows[0].order is None


class TestCsvWriters:
    def test_metrics_csv_schema_and_determinism(self, tmp_path):
        reports = [
            metrics.MetricsReport(
                iteration=1000, loss=1.5e-7, mean_rel_err=0.01,
                rel_err_t0=0.002, node_errors=np.zeros(3),
                max_sq_err=3e-4, lr=1e-3, wall_clock=12.5,
            )
        ]
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        metrics.write_metrics_csv(p1, reports)
        metrics.write_metrics_csv(p2, reports)
        text = p1.read_text()
        assert text.splitlines()[0] == "iteration,loss,mean_rel_err,rel_err_t0,max_sq_err,lr"
        assert text == p2.read_text()
        row = text.splitlines()[1].split(",")
        assert row[0] == "1000"
        assert float(row[1]) == 1.5e-7
        # wall clock stays out of the deterministic file
        assert len(row) == 6

    def test_error_by_time_csv(self, tmp_path):
        path = tmp_path / "ebt.csv"
        metrics.write_error_by_time_csv(path, np.array([0.0, 0.5, 1.0]), np.array([0.1, 0.2, 0.3]))
        lines = path.read_text().splitlines()
        assert lines[0] == "node,t,rel_err"
        assert lines[2].startswith("1,0.5,")

    def test_convergence_csv(self, tmp_path):
        rows = metrics.convergence_table({2: [4e-3], 32: [1e-3]}, total_time=1.0, keep=1)
        path = tmp_path / "conv.csv"
        metrics.write_convergence_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "N,dt,max_sq_err,order"
        assert lines[1].endswith(",")  # first row has empty order
        assert lines[2].split(",")[0] == "32"

    def test_error_grid_csv(self, tmp_path):
        path = tmp_path / "grid.csv"
        metrics.write_error_grid_csv(path, [(0.0, 1.0, 0.05)])
        assert path.read_text().splitlines()[0] == "t,x_bin,mean_abs_err"
