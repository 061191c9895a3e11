import numpy as np
import pytest

from pidenet import jumpsim, nn, problems, scheme
from pidenet.autodiff import Tape
from pidenet.jumpsim import TimeGrid

from test_autodiff import finite_diff, rel_gap


def linear_net(d, w, bias=0.0):
    """Exactly affine network: identity hidden layer behind relu.

    Valid as long as every (t, x) input coordinate stays positive.
    """
    k = 1 + d
    arch = nn.MlpArchitecture(input_dim=k, hidden=(k,), activation="relu")
    w_out = np.asarray(w, dtype=np.float64).reshape(k, 1)
    return nn.MlpParams(arch, [np.eye(k), w_out], [np.zeros(k), np.array([bias])])


def toy_batch(problem, n_steps=2, batch_size=4, seed=101, require_jumps=True):
    grid = TimeGrid(problem.total_time, n_steps)
    batch = jumpsim.simulate_forward(problem, grid, batch_size, seed)
    if require_jumps:
        assert batch.counts.sum() > 0, "seed produced no jumps; pick another"
    return batch


class TestTransfer:
    def setup_method(self):
        self.tape = Tape()
        self.y = self.tape.constant(np.full((3, 1), 1.0))
        self.zero_z = self.tape.constant(np.zeros((3, 2)))
        self.zero_i = self.tape.constant(np.zeros((3, 1)))
        self.x = np.ones((3, 2))

    def test_identity_step(self):
        out = scheme.transfer(
            0.0, self.x, self.y, self.zero_z, self.zero_i,
            np.zeros((3, 2)), lambda *a: 0.0, 0.02,
        )
        np.testing.assert_array_equal(out.value, self.y.value)

    def test_constant_driver(self):
        out = scheme.transfer(
            0.0, self.x, self.y, self.zero_z, self.zero_i,
            np.zeros((3, 2)), lambda t, x, y, z, i: np.ones((3, 1)), 0.02,
        )
        np.testing.assert_allclose(out.value, 0.98, rtol=1e-15)

    def test_all_terms(self):
        tape = self.tape
        z = tape.constant(np.tile([[1.0, 2.0]], (3, 1)))
        i_term = tape.constant(np.full((3, 1), 3.0))
        dw = np.tile([[0.1, -0.1]], (3, 1))
        out = scheme.transfer(0.0, self.x, self.y, z, i_term, dw, lambda *a: 0.0, 0.02)
        np.testing.assert_allclose(out.value, 1.0 + (0.1 - 0.2) + 0.06, rtol=1e-14)


class TestIntegralTerm:
    def test_no_jumps_linear_network(self):
        prob = problems.pure_jump_1d()
        params = linear_net(1, [0.0, 2.0])
        x = np.array([[1.0], [2.0]])
        tape = Tape()
        net = nn.bind(tape, params)
        y, g = net.value_and_grad(0.5, x)
        out = scheme.integral_term(
            net, 0.5, x, np.zeros(0, dtype=int), np.zeros((0, 1)),
            np.zeros(2, dtype=int), y, g, prob, 0.02,
        )
        expected = -2.0 * prob.compensator(0.5, x)
        np.testing.assert_allclose(out.value, expected, rtol=1e-14)

    def test_constant_network_gives_zero(self):
        prob = problems.pure_jump_1d()
        params = linear_net(1, [0.0, 0.0], bias=5.0)
        x = np.array([[1.0], [2.0]])
        tape = Tape()
        net = nn.bind(tape, params)
        y, g = net.value_and_grad(0.5, x)
        out = scheme.integral_term(
            net, 0.5, x, np.array([0, 1]), np.array([[0.3], [-0.2]]),
            np.array([1, 1]), y, g, prob, 0.02,
        )
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_linear_network_single_jump(self):
        prob = problems.pure_jump_1d()
        w_x = 2.0
        params = linear_net(1, [0.0, w_x])
        x = np.array([[1.0]])
        dt = 0.02
        mark = np.array([[0.4]])
        tape = Tape()
        net = nn.bind(tape, params)
        y, g = net.value_and_grad(0.5, x)
        out = scheme.integral_term(
            net, 0.5, x, np.array([0]), mark, np.array([1]), y, g, prob, dt
        )
        beta = 1.0 * (np.exp(0.4) - 1.0)
        expected = w_x * beta / dt - w_x * prob.compensator(0.5, x)[0, 0]
        np.testing.assert_allclose(out.value[0, 0], expected, rtol=1e-12)

    def test_taylor_exactness_for_affine_network(self):
        # with an affine value function the first-order expansion of the
        # jump increment is exact, so the tape integral must match the
        # directly computed compensated jump integral on the same marks
        prob = problems.pide_1d()
        params = linear_net(1, [0.3, 1.7], bias=0.4)
        batch = toy_batch(prob, n_steps=4, batch_size=32, seed=7)
        dt = batch.grid.dt
        w_x = 1.7
        for n in range(4):
            ids, marks = batch.events(n)
            x = batch.states[:, n, :]
            tape = Tape()
            net = nn.bind(tape, params)
            y, g = net.value_and_grad(batch.grid.times[n], x)
            out = scheme.integral_term(
                net, batch.grid.times[n], x, ids, marks,
                batch.counts[:, n], y, g, prob, dt,
            )
            jump_dot = np.zeros((32, 1))
            if ids.size:
                sizes = prob.jump_size(batch.grid.times[n], x[ids], marks)
                np.add.at(jump_dot, ids, w_x * sizes)
            exact = jump_dot / dt - w_x * prob.compensator(batch.grid.times[n], x)
            np.testing.assert_allclose(out.value, exact, atol=1e-12)


class TestLoss:
    def test_everything_vanishes(self):
        # zero network, zero terminal, zero driver, one step
        base = problems.pure_jump_1d(lam=0.0)
        prob = problems.ProblemSpec(
            name="null",
            dim=1,
            x0=np.array([1.0]),
            total_time=1.0,
            intensity=0.0,
            mark_dim=1,
            drift=base.drift,
            diffusion=base.diffusion,
            jump_size=base.jump_size,
            sample_marks=base.sample_marks,
            compensator=base.compensator,
            driver=lambda t, x, y, z, i: 0.0,
            terminal=lambda x: np.zeros((x.shape[0], 1)),
        )
        params = linear_net(1, [0.0, 0.0], bias=0.0)
        batch = jumpsim.simulate_forward(prob, TimeGrid(1.0, 1), 8, seed=0)
        tape = Tape()
        total, breakdown = scheme.loss(nn.bind(tape, params), batch, prob)
        assert float(total.value) == 0.0
        assert breakdown.terminal_term == 0.0

    def test_loss_nonnegative_and_breakdown_identity(self):
        prob = problems.pide_1d()
        params = nn.init(nn.MlpArchitecture(2, (8, 8), "tanh"), seed=3)
        batch = toy_batch(prob, n_steps=5, batch_size=16, seed=41)
        tape = Tape()
        total, breakdown = scheme.loss(nn.bind(tape, params), batch, prob)
        assert float(total.value) >= 0.0
        assert np.all(breakdown.interval_terms >= 0.0)
        assert breakdown.terminal_term >= 0.0
        recomputed = (breakdown.interval_terms.sum() + breakdown.terminal_term) / 6
        assert breakdown.total == pytest.approx(recomputed, rel=1e-14)
        assert float(total.value) == breakdown.total

    def test_permutation_invariance(self):
        prob = problems.bsb_jumps(dim=2)
        params = nn.init(nn.MlpArchitecture(3, (6,), "tanh"), seed=9)
        batch = toy_batch(prob, n_steps=3, batch_size=32, seed=77)
        perm = np.random.default_rng(0).permutation(32)
        t1, t2 = Tape(), Tape()
        l1, _ = scheme.loss(nn.bind(t1, params), batch, prob)
        l2, _ = scheme.loss(nn.bind(t2, params), batch.permuted(perm), prob)
        assert float(l1.value) == pytest.approx(float(l2.value), abs=1e-12)

    def test_oracle_loss_vanishes_for_identity_solution(self):
        # the one-step map reproduces the forward recursion exactly when
        # the value function is linear, leaving only rounding noise
        prob = problems.pure_jump_1d()
        batch = toy_batch(prob, n_steps=8, batch_size=256, seed=5)
        tape = Tape()
        total, breakdown = scheme.loss(scheme.OracleNetwork(tape, prob), batch, prob)
        assert breakdown.terminal_term == 0.0
        assert float(total.value) <= 1e-25

    def test_nonfinite_loss_aborts_with_interval(self):
        prob = problems.pide_1d()
        bad = problems.ProblemSpec(
            name="bad_driver",
            dim=1,
            x0=prob.x0,
            total_time=1.0,
            intensity=prob.intensity,
            mark_dim=1,
            drift=prob.drift,
            diffusion=prob.diffusion,
            jump_size=prob.jump_size,
            sample_marks=prob.sample_marks,
            compensator=prob.compensator,
            driver=lambda t, x, y, z, i: np.full((x.shape[0], 1), np.nan),
            terminal=prob.terminal,
            exact=prob.exact,
            exact_grad=prob.exact_grad,
        )
        params = nn.init(nn.MlpArchitecture(2, (4,), "tanh"), seed=0)
        batch = jumpsim.simulate_forward(bad, TimeGrid(1.0, 3), 4, seed=1)
        with pytest.raises(scheme.NumericalAbortError) as err:
            tape = Tape()
            scheme.loss(nn.bind(tape, params), batch, bad)
        assert err.value.interval == 0
        assert err.value.breakdown is not None

    @pytest.mark.parametrize("batch_size", [1, 4])
    def test_loss_gradient_matches_finite_differences(self, batch_size):
        prob = problems.pide_1d()
        arch = nn.MlpArchitecture(2, (5, 4), "tanh")
        params = nn.init(arch, seed=11)
        batch = toy_batch(prob, n_steps=2, batch_size=batch_size, seed=29, require_jumps=False)
        assert jumpsim.simulate_forward(prob, batch.grid, 4, 29).counts.sum() > 0

        def loss_value(p: nn.MlpParams) -> float:
            tape = Tape()
            total, _ = scheme.loss(nn.bind(tape, p), batch, prob)
            return float(total.value)

        tape = Tape()
        net = nn.bind(tape, params)
        total, _ = scheme.loss(net, batch, prob)
        grads = tape.backward(total, net.param_vars)

        flat = params.flat_list()
        for k, base in enumerate(flat):
            fd = finite_diff(
                lambda arr, k=k: loss_value(
                    params.replace_flat([arr if j == k else a for j, a in enumerate(flat)])
                ),
                base,
            )
            assert rel_gap(grads[k], fd) <= 1e-5

    def test_loss_gradient_with_value_coupled_driver(self):
        # the driver of the Black-Scholes-Barenblatt problem feeds y back
        # into the one-step map, exercising the variable path through f
        prob = problems.bsb_jumps(dim=2)
        arch = nn.MlpArchitecture(3, (5,), "tanh")
        params = nn.init(arch, seed=13)
        batch = toy_batch(prob, n_steps=2, batch_size=4, seed=3)

        def loss_value(p: nn.MlpParams) -> float:
            tape = Tape()
            total, _ = scheme.loss(nn.bind(tape, p), batch, prob)
            return float(total.value)

        tape = Tape()
        net = nn.bind(tape, params)
        total, _ = scheme.loss(net, batch, prob)
        grads = tape.backward(total, net.param_vars)
        flat = params.flat_list()
        for k, base in enumerate(flat):
            fd = finite_diff(
                lambda arr, k=k: loss_value(
                    params.replace_flat([arr if j == k else a for j, a in enumerate(flat)])
                ),
                base,
            )
            assert rel_gap(grads[k], fd) <= 1e-5


def one_step_reference(problem, params, batch, n):
    """The benchmark's explicit next-step recursion, computed in numpy."""
    grid = batch.grid
    t, dt = grid.times[n], grid.dt
    x = batch.states[:, n, :]
    y = nn.evaluate(params, t, x)
    tape = Tape()
    _, g_var = nn.bind(tape, params).value_and_grad(t, x)
    grad = g_var.value
    sigma = problem.diffusion(t, x)
    z = np.einsum("bji,bj->bi", sigma, grad)
    z_dw = np.sum(z * batch.brownian[:, n, :], axis=1, keepdims=True)

    ids, marks = batch.events(n)
    jump_sum = np.zeros_like(y)
    if ids.size:
        sizes = problem.jump_size(t, x[ids], marks)
        shifted = nn.evaluate(params, t, x[ids] + sizes)
        base = nn.evaluate(params, t, x[ids])
        np.add.at(jump_sum, ids, shifted - base)

    p = problem.params
    lam = problem.intensity
    comp_dot = np.sum(grad * problem.compensator(t, x), axis=1, keepdims=True)
    if problem.name == "pure_jump_1d":
        source = 0.0
    elif problem.name == "pide_1d":
        source = p["eps"] * x[:, :1]
    elif problem.name == "highdim_pide":
        msq = p["mark_mean"] ** 2 + p["mark_std"] ** 2
        source = lam * msq + p["tau"] ** 2 + (p["eps"] / problem.dim) * np.sum(
            x * x, axis=1, keepdims=True
        )
    elif problem.name == "bsb_jumps":
        msq = p["mark_mean"] ** 2 + p["mark_std"] ** 2
        horizon = np.exp((p["r"] + p["tau"] ** 2) * (problem.total_time - t))
        source = p["r"] * y + lam * horizon * msq
    else:
        raise AssertionError(problem.name)
    return y + source * dt + z_dw + jump_sum - comp_dot * dt


@pytest.mark.parametrize(
    "problem",
    [
        problems.pure_jump_1d(),
        problems.pide_1d(),
        problems.highdim_pide(dim=3),
        problems.bsb_jumps(dim=3),
    ],
    ids=lambda p: p.name,
)
def test_transfer_matches_benchmark_recursions(problem):
    # the stored drivers negate each benchmark's source term, so the
    # generic one-step map must reproduce the explicit recursions
    params = nn.init(nn.MlpArchitecture(1 + problem.dim, (6,), "tanh"), seed=55)
    batch = toy_batch(problem, n_steps=3, batch_size=16, seed=91)
    for n in range(3):
        t = batch.grid.times[n]
        x = batch.states[:, n, :]
        tape = Tape()
        net = nn.bind(tape, params)
        y, g = net.value_and_grad(t, x)
        sigma_t = np.transpose(problem.diffusion(t, x), (0, 2, 1))
        z = tape.batch_matvec(sigma_t, g)
        ids, marks = batch.events(n)
        i_term = scheme.integral_term(
            net, t, x, ids, marks, batch.counts[:, n], y, g, problem, batch.grid.dt
        )
        prediction = scheme.transfer(
            t, x, y, z, i_term, batch.brownian[:, n, :], problem.driver, batch.grid.dt
        )
        reference = one_step_reference(problem, params, batch, n)
        np.testing.assert_allclose(prediction.value, reference, atol=1e-12)


class TestEvaluateSolution:
    def test_matches_tape_forward_bitwise(self):
        params = nn.init(nn.MlpArchitecture(3, (7, 7), "leaky_relu"), seed=2)
        x = np.random.default_rng(1).normal(size=(9, 2))
        tape = Tape()
        out = nn.bind(tape, params).value(0.3, x)
        assert np.array_equal(scheme.evaluate_solution(params, 0.3, x), out.value)

    def test_single_point_returns_float(self):
        params = nn.init(nn.MlpArchitecture(2, (4,), "tanh"), seed=0)
        val = scheme.evaluate_solution(params, 0.1, np.array([0.5]))
        assert isinstance(val, float)
