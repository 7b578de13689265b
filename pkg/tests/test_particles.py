import math

import numpy as np
import pytest

from switchmc.chain import path_weights, simulate_path
from switchmc.estimators import switching_draws, switching_estimate
from switchmc.model import Payoff, builtin_case, constant_model, drift_of, sigma_of
from switchmc.numerics import RngStream
from switchmc.particles import (
    DegeneratePopulationError,
    PotentialParams,
    beta_terminal,
    c_factor,
    default_n_iter,
    g_check,
    h_norm,
    init_system,
    ips_iteration,
    multinomial_select,
    path_potentials,
    potential_G,
    resampling_estimate,
    resampling_run,
)
from switchmc.switching import gamma, sample, simulate_mesh, survival

LAW = gamma(0.5, 2.5)
PARAMS = PotentialParams.for_law(LAW)
IDENTITY = Payoff(g=lambda x: x[:, 0], name="x")


def _nodes(path, k):
    return [(float(path.mesh.times[j]), path.states[j]) for j in range(k + 1)]


def _paths(case, law, n, seed, min_switch=0):
    out = []
    i = 0
    while len(out) < n:
        s = RngStream(seed, i)
        i += 1
        p = simulate_path(case.model, simulate_mesh(law, case.model.t0, case.model.T, s), s)
        if p.n_switch >= min_switch:
            out.append(p)
    return out


# -- parameters ----------------------------------------------------------------

def test_potential_params_range():
    assert PotentialParams.for_law(gamma(0.3, 2.5)).rho == pytest.approx(0.7)
    assert PotentialParams(0.5, 0.5, 2.5).rho == 0.5
    with pytest.raises(ValueError):
        PotentialParams(0.4, 0.5, 2.5)
    with pytest.raises(ValueError):
        PotentialParams(0.75, 0.3, 2.5)
    with pytest.raises(ValueError, match="no admissible"):
        PotentialParams.for_law(gamma(0.6, 2.5))


# -- node-level functions ----------------------------------------------------

def test_c_factor_examples():
    m = constant_model(0.1, 0.3, [1.0])
    assert c_factor(m, (0.0, [1.0]), (0.5, [7.0])) == 0.5
    assert c_factor(m, (0.5, [1.0]), (0.5, [7.0])) == 0.0
    c2 = builtin_case(2).model
    # b = 1 - x; sigma = 0.5 + 0.2 min(x^2, 1); a = sigma^2
    x0, x1 = 0.8, 1.3
    db = (1 - x1) - (1 - x0)
    da = (0.5 + 0.2 * 1.0) ** 2 - (0.5 + 0.2 * 0.64) ** 2
    expected = 0.25 + db ** 2 + da ** 2
    assert c_factor(c2, (0.1, [x0]), (0.35, [x1])) == pytest.approx(expected, rel=1e-14)


def test_c_factor_uses_infinity_norms():
    c5 = builtin_case(5).model
    x0, x1 = np.full(4, 0.2), np.array([0.1, 0.5, 0.3, 0.4])
    db = np.max(np.abs((1 - x1) - (1 - x0)))
    s0 = 0.5 + 0.4 * min(np.sum(x0) ** 2, 1.0)
    s1 = 0.5 + 0.4 * min(np.sum(x1) ** 2, 1.0)
    da = abs(s1 ** 2 - s0 ** 2)  # diagonal matrix: max row sum = |entry|
    assert c_factor(c5, (0.0, x0), (0.1, x1)) == pytest.approx(0.1 + db ** 2 + da ** 2)


def test_g_check_trivial_branches():
    m = builtin_case(3).model
    assert g_check(m, LAW, [None, (0.0, [1.0]), (0.3, [1.2])]) == 1.0
    assert g_check(m, LAW, [(0.0, [1.0]), (0.3, [1.2])]) == 1.0
    assert g_check(m, LAW, [(0.0, [1.0]), (0.3, [1.2]), (0.3, [1.2])]) == 1.0


def test_g_check_equals_path_weight():
    case = builtin_case(3)
    checked = 0
    for p in _paths(case, LAW, 300, seed=11, min_switch=2):
        P = path_weights(case.model, LAW, p).P
        nodes = _nodes(p, p.n_switch + 1)
        for k in range(2, p.n_switch + 2):
            assert g_check(case.model, LAW, nodes[k - 2:k + 1]) == pytest.approx(
                P[k - 2], rel=1e-10, abs=1e-10)
            checked += 1
    assert checked > 600


def test_potential_g_branches():
    assert potential_G(PARAMS, 5.0, 4.0, None, 0.25, None, k=1) == pytest.approx(0.25 ** 0.5 * 2)
    assert potential_G(PARAMS, -2.0, 4.0, 1.0, 0.25, 0.0625) == pytest.approx(2 * 2 * 2)
    assert potential_G(PARAMS, 3.0, 1.0, 1.0, 0.0, 0.1) == 1.0
    p = PotentialParams(0.6, 0.3, 2.5)
    assert potential_G(p, 1.0, 1.0, 1.0, 0.2, 0.1) == pytest.approx(2 ** 0.6)
    v = potential_G(PARAMS, np.array([-1.0, 2.0]), np.ones(2), np.ones(2),
                    np.array([0.1, 0.0]), np.array([0.1, 0.1]))
    np.testing.assert_allclose(v, [1.0, 1.0])
    rng = np.random.default_rng(0)
    vals = potential_G(PARAMS, rng.normal(size=100), rng.random(100), rng.random(100) + 0.1,
                       rng.random(100), rng.random(100) + 0.01)
    assert np.all(vals >= 0)


def test_h_norm():
    assert h_norm(PotentialParams(0.5, 0.5, 2.5), 4.0, 0.25) == pytest.approx(1.0)
    p = PotentialParams(0.7, 0.3, 2.5)
    dt, c = 0.37, 0.81
    assert h_norm(p, c, dt) * dt ** 0.7 * math.sqrt(c) == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(ValueError):
        h_norm(p, 0.0, 0.1)
    with pytest.raises(ValueError):
        h_norm(p, 1.0, 0.0)


@pytest.mark.parametrize("kappa,rho", [(0.5, 0.5), (0.3, 0.5), (0.3, 0.7), (0.4, 0.55)])
def test_telescoping_identity(kappa, rho):
    case = builtin_case(3)
    law = gamma(kappa, 2.5)
    params = PotentialParams(rho, kappa, 2.5)
    for p in _paths(case, law, 300, seed=int(kappa * 10), min_switch=2):
        lhs = math.prod(path_weights(case.model, law, p).P[:-1].tolist())
        pot = path_potentials(case.model, law, params, p)
        assert pot.G.size == p.n_switch + 1
        assert np.all(pot.G >= 0) and set(np.unique(pot.S)) <= {-1.0, 1.0}
        assert pot.product() == pytest.approx(lhs, rel=1e-9)


def test_beta_terminal_matches_estimator():
    case = builtin_case(2)
    batch = switching_draws(case.model, case.payoff, LAW, 4000, RngStream(8, 0), record=True)
    seen = {0: 0, 1: 0, 2: 0}
    for i, p in enumerate(batch.paths):
        n = p.n_switch
        if n > 2:
            continue
        nodes = _nodes(p, n + 1)
        beta = beta_terminal(case.model, case.payoff, LAW, ([None] + nodes)[-3:])
        prod = math.prod(path_weights(case.model, LAW, p).P[:-1].tolist())
        assert beta * prod == pytest.approx(batch.antithetic[i], rel=1e-10, abs=1e-12)
        seen[n] += 1
    assert min(seen.values()) > 100


def test_beta_terminal_trivial_cases():
    m = builtin_case(3).model
    g = builtin_case(3).payoff
    assert beta_terminal(m, g, LAW, [None, (0.0, [1.0]), (1.0, [1.5])]) == \
        pytest.approx(0.5 / survival(LAW, 1.0))
    const = Payoff(g=lambda x: np.full(x.shape[0], 3.0))
    assert beta_terminal(m, const, LAW, [(0.0, [1.0]), (0.4, [1.2]), (1.0, [0.9])]) == 0.0


def test_conditional_second_moment_bounded():
    """E[G_{k+1}^2 | parent] does not grow as the parent's last step shrinks."""
    m = builtin_case(3).model
    s = RngStream(3, 0)
    means = []
    for dtk in (1e-3, 1e-5):
        n0, n1 = (0.2, np.array([1.1])), (0.2 + dtk, np.array([1.3]))
        c1 = c_factor(m, n0, n1)
        tau = sample(LAW, s, 20000)
        vals = []
        for t in tau:
            t2 = n1[0] + t
            if t2 >= 1.0:
                vals.append(1.0)
                continue
            x2 = n1[1] + drift_of(m, n1[0], n1[1]) * t + sigma_of(m, n1[0], n1[1]) @ (
                math.sqrt(t) * s.normal(1))
            gc = g_check(m, LAW, [n0, n1, (t2, x2)])
            vals.append(potential_G(PARAMS, gc, c_factor(m, n1, (t2, x2)), c1, t, dtk))
        means.append(np.mean(np.square(vals)))
    assert max(means) < 20
    assert means[1] < 1.5 * means[0]


# -- selection and iterations ------------------------------------------------------

def test_multinomial_selection_proportions():
    s = RngStream(1, 0)
    w = np.array([0.2, 0.3, 0.5])
    counts = np.zeros(3)
    for _ in range(10_000):
        counts += np.bincount(multinomial_select(w * 7.0, s), minlength=3)
    np.testing.assert_allclose(counts / counts.sum(), w, atol=0.02)


def test_multinomial_selection_properties():
    s = RngStream(2, 0)
    idx = multinomial_select(np.array([0.0, 1.0, 0.0, 3.0]), s)
    assert idx.size == 4 and set(idx) <= {1, 3} and np.all(np.diff(idx) >= 0)
    assert np.array_equal(multinomial_select(np.array([2.0]), s), [0])
    with pytest.raises(DegeneratePopulationError):
        multinomial_select(np.zeros(5), s)


def test_all_absorbed_population_has_unit_potential():
    case = builtin_case(3)
    sys = init_system(case.model, 500, RngStream(4, 0))
    for _ in range(40):
        ips_iteration(sys, case.model, case.payoff, LAW, PARAMS)
    assert sys.absorbed.all()
    before = sys.terminal.copy()
    ips_iteration(sys, case.model, case.payoff, LAW, PARAMS)
    assert sys.potential_means[-1] == 1.0
    assert sys.diagnostics[-1].effective_sample_size == pytest.approx(500)
    assert set(sys.terminal) <= set(before)


def test_population_preserved_and_absorption_monotone():
    case = builtin_case(3)
    sys = init_system(case.model, 1000, RngStream(5, 0))
    fracs = []
    for _ in range(8):
        ips_iteration(sys, case.model, case.payoff, LAW, PARAMS)
        assert sys.size == 1000
        fracs.append(sys.absorbed_fraction)
        assert np.all((sys.sign == 1) | (sys.sign == -1))
    assert np.all(np.diff(fracs) >= 0)
    assert sys.potential_means[0] == 1.0
    assert len(sys.diagnostics) == 8 and "absorbed=" in sys.diagnostics[-1].line()
    p = sys.particle(int(np.flatnonzero(sys.absorbed)[0]))
    assert p.absorbed and p.state_cur[0] == 1.0


def test_single_particle_system_is_antithetic_draw():
    """With N = 1 the particle estimate reduces to one antithetic draw."""
    case = builtin_case(3)
    const = Payoff(g=lambda x: np.full(x.shape[0], 2.0))
    vals = np.array([resampling_estimate(case.model, const, LAW, PARAMS, 1, 6, RngStream(6, i))
                     for i in range(4000)])
    nonzero = vals[vals != 0.0]
    np.testing.assert_allclose(nonzero, 2.0 / survival(LAW, 1.0))
    p0 = survival(LAW, 1.0)
    assert abs(nonzero.size / vals.size - p0) < 4 * math.sqrt(p0 * (1 - p0) / vals.size)


def test_estimate_argument_checks():
    case = builtin_case(3)
    with pytest.raises(ValueError):
        resampling_estimate(case.model, case.payoff, LAW, PARAMS, 0, 5, RngStream(0, 0))
    with pytest.raises(ValueError):
        resampling_run(case.model, case.payoff, LAW, PARAMS, 4, workers=8)


def test_default_n_iter_covers_absorption():
    n = default_n_iter(LAW, 1.0, RngStream(0, 0))
    assert 3 <= n <= 10
    case = builtin_case(3)
    _, sys = resampling_estimate(case.model, case.payoff, LAW, PARAMS, 5000, n, RngStream(1, 0),
                                 return_system=True)
    assert sys.diagnostics[-1].absorbed_fraction > 0.9


# -- estimator ------------------------------------------------------------------

def test_constant_model_closed_form():
    m = constant_model(0.1, 0.3, [1.0])
    res = resampling_run(m, IDENTITY, LAW, PARAMS, 10_000, reps=30, seed=2)
    assert abs(res.mean - 1.1) < 3 * res.std_error


def test_case3_reference_value():
    case = builtin_case(3)
    res = resampling_run(case.model, case.payoff, LAW, PotentialParams(0.5, 0.5, 2.5),
                         10_000, reps=100, seed=3)
    assert abs(res.mean - 0.21408) < 3 * res.std_error


def test_unbiased_against_antithetic_case2():
    case = builtin_case(2)
    ips = resampling_run(case.model, case.payoff, LAW, PARAMS, 10_000, reps=60, seed=4)
    anti = switching_estimate(case.model, case.payoff, LAW, 10**6, seed=4)
    assert abs(ips.mean - anti.mean) < 3 * math.hypot(ips.std_error, anti.std_error)


def test_run_is_reproducible_and_worker_structured():
    case = builtin_case(3)
    a = resampling_run(case.model, case.payoff, LAW, PARAMS, 2000, reps=2, workers=4, seed=5)
    b = resampling_run(case.model, case.payoff, LAW, PARAMS, 2000, reps=2, workers=4, seed=5)
    assert a.mean == b.mean and a.n_part == 2000
    single = resampling_run(case.model, case.payoff, LAW, PARAMS, 2000, reps=1, workers=4, seed=5)
    assert np.isfinite(single.std_error)
    assert math.isnan(resampling_run(case.model, case.payoff, LAW, PARAMS, 500, seed=5).std_error)


def test_resampling_nearly_halves_case3_stdev():
    """Resampled replication stdev is close to half the antithetic one."""
    case = builtin_case(3)
    ips = resampling_run(case.model, case.payoff, LAW, PARAMS, 10_000, reps=100, seed=6)
    anti = switching_estimate(case.model, case.payoff, LAW, 10_000, reps=100, seed=6)
    assert ips.replication_stdev < 0.65 * anti.replication_stdev


@pytest.mark.slow
def test_case4_resampled_stdev_slope():
    case = builtin_case(4)
    n_parts, sds = [], []
    for q in range(4):
        n = 2500 * 4 ** q
        res = resampling_run(case.model, case.payoff, LAW, PARAMS, n, reps=40, seed=q)
        n_parts.append(n)
        sds.append(res.replication_stdev)
    slope = np.polyfit(np.log(n_parts), np.log(sds), 1)[0]
    assert abs(slope + 0.5) < 0.1
