import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from helpers import random_mdp, random_policy, tv
from robustpg import fixtures
from robustpg.mdp import (
    CapExceeded,
    FeatureMap,
    MixturePolicy,
    ResetDistribution,
    SoftmaxLinearPolicy,
    TabularMdp,
    Unbounded,
    d_nu_sample,
    exact_occupancy,
    exact_q,
    exact_v,
    flow_residual,
    optimal_value,
    policy_value,
    q_estimate,
    relative_condition_number,
    softmax,
    value_iteration,
)


def chain_mdp(gamma=0.5):
    """s1 -> s2 deterministically; s2 absorbing with reward 1."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    return TabularMdp(P, np.array([[0.0], [1.0]]), gamma, np.array([1.0, 0.0]))


def cycle_mdp(gamma=0.9):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    return TabularMdp(P, np.array([[0.3], [0.7]]), gamma, np.array([1.0, 0.0]))


def point_reset(S, A, s, a):
    w = np.zeros((S, A))
    w[s, a] = 1.0
    return ResetDistribution(w)


# ---------------------------------------------------------------------------
# construction


def test_transition_rows_must_sum_to_one():
    P = np.full((2, 1, 2), 0.6)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 1)), 0.9, np.array([1.0, 0.0]))


def test_reward_mean_range_checked():
    P = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        TabularMdp(P, np.array([[1.5]]), 0.9, np.ones(1))


def test_discount_must_be_below_one():
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0, np.ones(1))


def test_features_limited_to_unit_norm():
    with pytest.raises(ValueError):
        FeatureMap(np.full((1, 1, 2), 1.0))


def test_mdp_arrays_are_read_only():
    m = chain_mdp()
    with pytest.raises(ValueError):
        m.transition[0, 0, 0] = 0.5


def test_zero_theta_gives_uniform_policy():
    phi = FeatureMap.one_hot(3, 4)
    pi = SoftmaxLinearPolicy.zeros(phi.dim).probs(phi)
    assert np.allclose(pi, 0.25)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows_normalized(seed, scale):
    r = np.random.default_rng(seed)
    pi = softmax(scale * r.standard_normal((5, 3)))
    assert np.abs(pi.sum(axis=1) - 1).max() <= 1e-12
    assert (pi >= 0).all()


def test_softmax_survives_huge_logits():
    pi = softmax(np.array([[1e4, 0.0, -1e4]]))
    assert np.isfinite(pi).all()
    assert pi[0, 0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# exact oracles


def test_exact_q_constant_reward():
    m = fixtures.constant_reward(n_states=3, n_actions=2, discount=0.9)
    pi = np.full((3, 2), 0.5)
    assert np.allclose(exact_q(m, pi), 10.0, atol=1e-10)
    assert policy_value(m, pi) == pytest.approx(10.0, abs=1e-10)


def test_exact_q_myopic_equals_reward(rng):
    m = random_mdp(rng, gamma=0.0)
    pi = random_policy(rng, m.n_states, m.n_actions)
    assert np.allclose(exact_q(m, pi), m.reward_mean, atol=1e-12)
    expected = float(m.init_dist @ (pi * m.reward_mean).sum(axis=1))
    assert policy_value(m, pi) == pytest.approx(expected, abs=1e-12)


def test_exact_q_two_state_chain_by_hand():
    m = chain_mdp(0.5)
    q = exact_q(m, np.ones((2, 1)))
    assert q[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert q[1, 0] == pytest.approx(2.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_exact_q_satisfies_bellman(seed):
    r = np.random.default_rng(seed)
    m = random_mdp(r, S=5, A=3, gamma=0.95)
    pi = random_policy(r, 5, 3)
    q = exact_q(m, pi)
    v = (pi * q).sum(axis=1)
    resid = q - (m.reward_mean + m.discount * m.transition @ v)
    assert np.abs(resid).max() <= 1e-10
    assert np.allclose(v, exact_v(m, pi), atol=1e-10)


def test_policy_value_matches_value_iteration_on_gridworld():
    m = fixtures.gridworld()
    v, q = value_iteration(m)
    greedy = np.zeros_like(q)
    greedy[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    assert policy_value(m, greedy) == pytest.approx(optimal_value(m), abs=1e-8)
    assert optimal_value(m) == pytest.approx(0.9**8, abs=1e-10)


def test_mixture_value_is_average_of_components(rng):
    m = random_mdp(rng)
    tables = [random_policy(rng, 4, 3) for _ in range(3)]
    mix = MixturePolicy.uniform(tables)
    assert policy_value(m, mix) == pytest.approx(np.mean([policy_value(m, t) for t in tables]), abs=1e-12)


def test_occupancy_myopic_equals_reset(rng):
    m = random_mdp(rng, gamma=0.0)
    nu = ResetDistribution(rng.dirichlet(np.ones(12)).reshape(4, 3))
    d = exact_occupancy(m, random_policy(rng, 4, 3), nu)
    assert np.allclose(d, nu.weights, atol=1e-12)


def test_occupancy_two_state_chain_by_hand():
    m = chain_mdp(0.5)
    d = exact_occupancy(m, np.ones((2, 1)), point_reset(2, 1, 0, 0))
    assert d[:, 0] == pytest.approx([0.5, 0.5], abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.99))
def test_occupancy_flow_and_normalization(seed, gamma):
    r = np.random.default_rng(seed)
    m = random_mdp(r, S=4, A=2, gamma=gamma)
    pi = random_policy(r, 4, 2)
    nu = ResetDistribution(r.dirichlet(np.ones(8)).reshape(4, 2))
    d = exact_occupancy(m, pi, nu)
    assert abs(d.sum() - 1) <= 1e-10
    assert flow_residual(m, pi, nu, d) <= 1e-10
    # (1 - g) V(nu) = <d, r> with V(nu) = E_nu Q(s, a)
    v_nu = float((nu.weights * exact_q(m, pi)).sum())
    assert (1 - gamma) * v_nu == pytest.approx(float((d * m.reward_mean).sum()), abs=1e-10)


# ---------------------------------------------------------------------------
# condition number


def test_kappa_identical_distributions():
    A = np.diag([0.3, 0.7])
    assert relative_condition_number(A, A) == pytest.approx(1.0)


def test_kappa_hand_example():
    assert relative_condition_number(np.diag([0.5, 0.5]), np.diag([0.25, 0.75])) == pytest.approx(2.0)


def test_kappa_disjoint_support_unbounded():
    with pytest.raises(Unbounded):
        relative_condition_number(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))


@given(st.integers(0, 2**32 - 1))
def test_kappa_is_generalized_eigenvalue(seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((3, 3))
    Y = r.standard_normal((3, 3))
    A = X @ X.T
    B = Y @ Y.T + 0.1 * np.eye(3)
    kappa = relative_condition_number(A, B)
    ref = np.linalg.eigvals(np.linalg.solve(B, A)).real.max()
    assert kappa == pytest.approx(ref, rel=1e-8)


# ---------------------------------------------------------------------------
# samplers


def test_d_sampler_myopic_returns_reset_pair(rng):
    m = random_mdp(rng, gamma=0.0)
    nu = point_reset(4, 3, 2, 1)
    for _ in range(20):
        assert d_nu_sample(m, None, random_policy(rng, 4, 3), nu, rng) == (2, 1)


def test_d_sampler_stop_step_is_geometric():
    # the state counter of a deterministic line records the stop step
    n = 60
    P = np.zeros((n, 1, n))
    for s in range(n):
        P[s, 0, min(s + 1, n - 1)] = 1.0
    m = TabularMdp(P, np.zeros((n, 1)), 0.5, np.eye(n)[0])
    s, _ = d_nu_sample(m, None, np.ones((n, 1)), point_reset(n, 1, 0, 0), np.random.default_rng(7), size=100_000)
    counts = np.bincount(s, minlength=n)[:8]
    probs = 0.5 ** (np.arange(8) + 1)
    observed = np.append(counts, 100_000 - counts.sum())
    expected = 100_000 * np.append(probs, 1 - probs.sum())
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_d_sampler_matches_occupancy_on_cycle():
    m = cycle_mdp(0.9)
    nu = point_reset(2, 1, 0, 0)
    s, a = d_nu_sample(m, None, np.ones((2, 1)), nu, np.random.default_rng(3), size=100_000)
    freq = np.bincount(s * 1 + a, minlength=2) / 100_000
    assert tv(freq, exact_occupancy(m, np.ones((2, 1)), nu).ravel()) <= 0.01


def test_d_sampler_accepts_softmax_policy(rng):
    fx = fixtures.builtin("bandit")
    theta = np.array([2.0, -1.0])
    s, a = d_nu_sample(fx.mdp, fx.phi, SoftmaxLinearPolicy(theta), fx.nu, rng, size=10)
    assert s.shape == a.shape == (10,)


def test_cap_exceeded_is_raised():
    m = cycle_mdp(0.9)

    class Forced:
        def geometric(self, p, size):
            return np.full(size, 10_000)

        def __getattr__(self, name):
            return getattr(np.random.default_rng(0), name)

    with pytest.raises(CapExceeded):
        q_estimate(m, None, np.ones((2, 1)), 0, 0, Forced())
    with pytest.raises(CapExceeded):
        d_nu_sample(m, None, np.ones((2, 1)), point_reset(2, 1, 0, 0), Forced())


def test_q_estimate_zero_reward_is_exactly_zero(rng):
    m = fixtures.constant_reward(n_states=2, n_actions=2, reward=0.0)
    assert np.all(q_estimate(m, None, np.full((2, 2), 0.5), 0, 1, rng, size=1000) == 0.0)


def test_q_estimate_constant_reward_tight_variance():
    m = fixtures.constant_reward(discount=0.9)
    q = q_estimate(m, None, np.ones((1, 1)), 0, 0, np.random.default_rng(11), size=100_000)
    se = q.std(ddof=1) / np.sqrt(q.size)
    assert abs(q.mean() - 10.0) <= 3 * se
    assert 0.95 * 90 <= q.var(ddof=1) <= 1.05 * 90


def test_q_estimate_unbiased_on_two_state_chain():
    m = chain_mdp(0.5)
    q = q_estimate(m, None, np.ones((2, 1)), 0, 0, np.random.default_rng(5), size=100_000)
    se = q.std(ddof=1) / np.sqrt(q.size)
    assert abs(q.mean() - 1.0) <= 3 * se


@pytest.mark.parametrize("name", ["gridworld", "combination_lock", "lowerbound", "bandit"])
def test_q_estimate_unbiased_and_variance_bounded_on_fixtures(name):
    fx = fixtures.builtin(name)
    m = fx.mdp
    r = np.random.default_rng(21)
    pi = random_policy(r, m.n_states, m.n_actions)
    q_true = exact_q(m, pi)
    g, sigma = m.discount, m.reward_noise_std
    bound = g / (1 - g) ** 2 + sigma**2 / (1 - g)
    # a handful of pairs keeps this fast while covering every fixture
    pairs = [(0, 0), (m.n_states - 1, m.n_actions - 1), (m.n_states // 2, 0)]
    for s, a in pairs:
        q = q_estimate(m, None, pi, s, a, np.random.default_rng([s, a]), size=100_000)
        se = q.std(ddof=1) / np.sqrt(q.size)
        assert abs(q.mean() - q_true[s, a]) <= 3 * se + 1e-12
        assert q.var(ddof=1) <= 1.05 * bound


def test_q_estimate_bonus_adds_to_reward():
    m = fixtures.constant_reward(discount=0.5, reward=0.25)
    q = q_estimate(m, None, np.ones((1, 1)), 0, 0, np.random.default_rng(2), size=50_000, bonus=np.array([[0.75]]))
    assert q.mean() == pytest.approx(2.0, abs=0.03)


def test_mixture_sampler_matches_average_occupancy():
    fx = fixtures.builtin("lowerbound")
    m = fx.mdp
    r = np.random.default_rng(9)
    tables = [random_policy(r, 3, 2) for _ in range(3)]
    mix = MixturePolicy.uniform(tables)
    s, a = d_nu_sample(m, None, mix, fx.nu, r, size=100_000)
    freq = np.bincount(s * 2 + a, minlength=6) / 100_000
    exact = np.mean([exact_occupancy(m, t, fx.nu) for t in tables], axis=0).ravel()
    assert tv(freq, exact) <= 0.01


def test_samplers_are_deterministic_given_stream():
    from robustpg.rng import stream

    fx = fixtures.builtin("gridworld")
    pi = np.full((fx.mdp.n_states, 4), 0.25)
    a = d_nu_sample(fx.mdp, None, pi, fx.nu, stream(3, "sample", 1), size=500)
    b = d_nu_sample(fx.mdp, None, pi, fx.nu, stream(3, "sample", 1), size=500)
    c = d_nu_sample(fx.mdp, None, pi, fx.nu, stream(3, "sample", 2), size=500)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
