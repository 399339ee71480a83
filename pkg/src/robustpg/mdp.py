"""Tabular MDP model, episode samplers and exact oracles.

Policies are handled as probability tables of shape ``(S, A)``.  A
:class:`SoftmaxLinearPolicy` is turned into a table through its feature map,
and a :class:`MixturePolicy` stacks several tables with mixing weights; the
samplers draw one component per episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ATOL_PROB = 1e-12


class CapExceeded(RuntimeError):
    """A geometric rollout did not stop within the safety cap."""


class Unbounded(ValueError):
    """Relative condition number is infinite."""


def _readonly(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward_mean: np.ndarray  # (S, A)
    discount: float
    init_dist: np.ndarray  # (S,)
    reward_noise_std: float = 0.0

    def __post_init__(self):
        P = _readonly(self.transition)
        r = _readonly(self.reward_mean)
        mu = _readonly(self.init_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", r)
        object.__setattr__(self, "init_dist", mu)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ValueError(f"reward_mean shape {r.shape} does not match {P.shape[:2]}")
        if mu.shape != (P.shape[0],):
            raise ValueError(f"init_dist shape {mu.shape} does not match S={P.shape[0]}")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1).max() > ATOL_PROB:
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if (mu < 0).any() or abs(mu.sum() - 1) > ATOL_PROB:
            raise ValueError("init_dist must be a probability vector")
        if (r < 0).any() or (r > 1).any():
            raise ValueError("reward_mean entries must lie in [0, 1]")
        if not 0 <= self.discount < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.reward_noise_std < 0:
            raise ValueError("reward_noise_std must be >= 0")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def rollout_cap(self) -> int:
        return math.ceil(50 / (1 - self.discount))

    @cached_property
    def _cum_transition(self):
        c = np.cumsum(self.transition, axis=2)
        c[..., -1] = 1.0
        return c

    def replace(self, **changes) -> "TabularMdp":
        kw = dict(
            transition=self.transition,
            reward_mean=self.reward_mean,
            discount=self.discount,
            init_dist=self.init_dist,
            reward_noise_std=self.reward_noise_std,
        )
        kw.update(changes)
        return TabularMdp(**kw)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (S, A, d)

    def __post_init__(self):
        v = _readonly(self.values)
        object.__setattr__(self, "values", v)
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"feature values must have shape (S, A, d), got {v.shape}")
        if np.linalg.norm(v, axis=2).max() > 1 + 1e-9:
            raise ValueError("features must satisfy ||phi(s, a)|| <= 1")

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def __call__(self, s, a):
        return self.values[s, a]

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "FeatureMap":
        d = n_states * n_actions
        return cls(np.eye(d).reshape(n_states, n_actions, d))


@dataclass(frozen=True, eq=False)
class SoftmaxLinearPolicy:
    """pi(a|s) proportional to exp(theta . phi(s, a))."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _readonly(self.theta))

    @classmethod
    def zeros(cls, dim: int) -> "SoftmaxLinearPolicy":
        return cls(np.zeros(dim))

    def logits(self, phi: FeatureMap) -> np.ndarray:
        return phi.values @ self.theta

    def probs(self, phi: FeatureMap) -> np.ndarray:
        return softmax(self.logits(phi))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """Trajectory-level mixture: one component is drawn per episode."""

    tables: np.ndarray  # (C, S, A)
    weights: np.ndarray  # (C,)

    def __post_init__(self):
        t = _readonly(self.tables)
        w = _readonly(self.weights)
        object.__setattr__(self, "tables", t)
        object.__setattr__(self, "weights", w)
        if t.ndim != 3 or w.shape != (t.shape[0],) or t.shape[0] < 1:
            raise ValueError("mixture needs tables (C, S, A) and weights (C,)")
        if (w < 0).any() or abs(w.sum() - 1) > 1e-9:
            raise ValueError("mixture weights must be a probability vector")

    @classmethod
    def uniform(cls, tables) -> "MixturePolicy":
        t = np.asarray(tables, dtype=float)
        return cls(t, np.full(t.shape[0], 1.0 / t.shape[0]))

    @classmethod
    def combine(cls, mixtures) -> "MixturePolicy":
        """Uniform mixture over mixtures, flattened into one level."""
        mixtures = list(mixtures)
        k = len(mixtures)
        tables = np.concatenate([m.tables for m in mixtures])
        weights = np.concatenate([m.weights / k for m in mixtures])
        return cls(tables, weights)

    @property
    def n_components(self) -> int:
        return self.tables.shape[0]

    @cached_property
    def _cum_tables(self) -> np.ndarray:
        cum = np.cumsum(self.tables, axis=2)
        cum[..., -1] = 1.0
        cum.flags.writeable = False
        return cum


@dataclass(frozen=True, eq=False)
class ResetDistribution:
    weights: np.ndarray  # (S, A)

    def __post_init__(self):
        w = _readonly(self.weights)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or (w < 0).any() or abs(w.sum() - 1) > ATOL_PROB:
            raise ValueError("reset weights must be a probability table over (s, a)")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "ResetDistribution":
        return cls(np.full((n_states, n_actions), 1.0 / (n_states * n_actions)))

    @classmethod
    def from_states(cls, state_dist, n_actions: int) -> "ResetDistribution":
        """State distribution times a uniform action."""
        mu = np.asarray(state_dist, dtype=float)
        return cls(np.outer(mu, np.full(n_actions, 1.0 / n_actions)))


@dataclass
class EpisodeSample:
    state: int
    action: int
    q_hat: float
    truth_q_hat: float
    truth_corrupted: bool = False


@dataclass
class EpisodeBatch:
    """Column-wise batch of episode samples, ordered by episode index."""

    states: np.ndarray
    actions: np.ndarray
    q_hat: np.ndarray
    truth_q_hat: np.ndarray
    corrupted: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.corrupted is None:
            self.corrupted = np.zeros(len(self.states), dtype=bool)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> EpisodeSample:
        return EpisodeSample(
            int(self.states[i]),
            int(self.actions[i]),
            float(self.q_hat[i]),
            float(self.truth_q_hat[i]),
            bool(self.corrupted[i]),
        )

    @classmethod
    def from_samples(cls, samples) -> "EpisodeBatch":
        samples = list(samples)
        return cls(
            np.array([x.state for x in samples], dtype=np.int64),
            np.array([x.action for x in samples], dtype=np.int64),
            np.array([x.q_hat for x in samples], dtype=float),
            np.array([x.truth_q_hat for x in samples], dtype=float),
            np.array([x.truth_corrupted for x in samples], dtype=bool),
        )


def policy_table(policy, phi: FeatureMap | None = None) -> np.ndarray:
    """Resolve a policy argument to an (S, A) table; mixtures stay (C, S, A)."""
    if isinstance(policy, SoftmaxLinearPolicy):
        if phi is None:
            raise ValueError("a feature map is required to evaluate a softmax policy")
        return policy.probs(phi)
    if isinstance(policy, MixturePolicy):
        return policy.tables
    return np.asarray(policy, dtype=float)


# ---------------------------------------------------------------------------
# samplers


def _stop_steps(mdp: TabularMdp, rng: np.random.Generator, n: int) -> np.ndarray:
    """Number of transitions taken before the geometric stop."""
    if mdp.discount == 0:
        return np.zeros(n, dtype=np.int64)
    t = rng.geometric(1 - mdp.discount, size=n) - 1
    if n and t.max() >= mdp.rollout_cap:
        raise CapExceeded(f"rollout exceeded the cap of {mdp.rollout_cap} steps")
    return t


def _draw_index(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def _next_states(mdp, s, a, rng):
    return _draw_index(mdp._cum_transition[s, a], rng.random(len(s)))


def _actions(cum_pi, s, rng):
    return _draw_index(cum_pi[s], rng.random(len(s)))


def _mixture_setup(table, rng, n):
    """Return cumulative tables (C, S, A) and a component per episode."""
    if isinstance(table, MixturePolicy):
        comp = rng.choice(table.n_components, size=n, p=table.weights)
        return table._cum_tables, comp
    comp = np.zeros(n, dtype=np.int64)
    cum = np.cumsum(table, axis=1)[None]
    cum[..., -1] = 1.0
    return cum, comp


def d_nu_sample(mdp: TabularMdp, phi, policy, nu: ResetDistribution, rng, size=None):
    """Draw (s, a) from the discounted occupancy d^pi_nu.

    Starts at (s0, a0) ~ nu, follows ``policy`` and returns the current pair
    at each step with probability 1 - gamma.  Returns a pair of ints, or a
    pair of arrays when ``size`` is given.
    """
    n = 1 if size is None else int(size)
    table = policy if isinstance(policy, MixturePolicy) else policy_table(policy, phi)
    cum_pi, comp = _mixture_setup(table, rng, n)
    flat = rng.choice(nu.weights.size, size=n, p=nu.weights.ravel())
    s, a = np.divmod(flat, mdp.n_actions)
    stops = _stop_steps(mdp, rng, n)
    for k in range(1, int(stops.max(initial=0)) + 1):
        idx = np.flatnonzero(stops >= k)
        s_next = _next_states(mdp, s[idx], a[idx], rng)
        s[idx] = s_next
        a[idx] = _draw_index(cum_pi[comp[idx], s_next], rng.random(len(idx)))
    if size is None:
        return int(s[0]), int(a[0])
    return s, a


def q_estimate(mdp: TabularMdp, phi, policy, s, a, rng, size=None, bonus=None):
    """Unbiased single-rollout estimate of Q^pi(s, a).

    Sums rewards along a rollout from (s, a) that terminates with
    probability 1 - gamma after each step.  ``s`` and ``a`` may be arrays, in
    which case one estimate per pair is returned; ``size`` repeats a scalar
    pair.  ``bonus`` is an optional (S, A) table added to the mean reward.
    """
    table = policy_table(policy, phi)
    scalar = np.isscalar(s) and size is None
    s = np.asarray(s, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    if size is not None:
        s = np.full(int(size), s, dtype=np.int64)
        a = np.full(int(size), a, dtype=np.int64)
    s = np.atleast_1d(s).copy()
    a = np.atleast_1d(a).copy()
    n = len(s)
    cum_pi = np.cumsum(table, axis=1)
    cum_pi[:, -1] = 1.0
    r_mean = mdp.reward_mean if bonus is None else mdp.reward_mean + bonus
    sigma = mdp.reward_noise_std
    stops = _stop_steps(mdp, rng, n)
    total = r_mean[s, a].copy()
    if sigma > 0:
        total += sigma * rng.standard_normal(n)
    for k in range(1, int(stops.max(initial=0)) + 1):
        idx = np.flatnonzero(stops >= k)
        s_next = _next_states(mdp, s[idx], a[idx], rng)
        a_next = _actions(cum_pi, s_next, rng)
        s[idx] = s_next
        a[idx] = a_next
        total[idx] += r_mean[s_next, a_next]
        if sigma > 0:
            total[idx] += sigma * rng.standard_normal(len(idx))
    if scalar:
        return float(total[0])
    return total


def sample_episodes(mdp, phi, policy, nu, rng, m, q_policy=None, bonus=None) -> EpisodeBatch:
    """M episodes: (s, a) from the d-sampler then one Q rollout each.

    ``q_policy`` defaults to ``policy``; it differs when resets come from a
    policy cover while the critic targets the current policy.
    """
    s, a = d_nu_sample(mdp, phi, policy, nu, rng, size=m)
    q = q_estimate(mdp, phi, policy if q_policy is None else q_policy, s, a, rng, bonus=bonus)
    return EpisodeBatch(s, a, q, q.copy())


# ---------------------------------------------------------------------------
# exact oracles


def _state_transition(mdp, pi):
    return np.einsum("sa,sat->st", pi, mdp.transition)


def exact_v(mdp: TabularMdp, policy, phi=None, reward=None) -> np.ndarray:
    pi = policy_table(policy, phi)
    r = mdp.reward_mean if reward is None else reward
    P_pi = _state_transition(mdp, pi)
    r_pi = (pi * r).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P_pi, r_pi)


def exact_q(mdp: TabularMdp, policy, phi=None, reward=None) -> np.ndarray:
    """Q^pi as an (S, A) array by a direct solve of the Bellman equations."""
    r = mdp.reward_mean if reward is None else reward
    v = exact_v(mdp, policy, phi, reward=r)
    return r + mdp.discount * mdp.transition @ v


def policy_value(mdp: TabularMdp, policy, phi=None) -> float:
    """V^pi(mu0); mixtures are averaged component-wise."""
    if isinstance(policy, MixturePolicy):
        vals = [policy_value(mdp, t) for t in policy.tables]
        return float(np.dot(policy.weights, vals))
    return float(mdp.init_dist @ exact_v(mdp, policy, phi))


def sa_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """(S*A, S*A) matrix with entries P(s'|s,a) pi(a'|s')."""
    S, A = mdp.n_states, mdp.n_actions
    return np.einsum("sat,tb->satb", mdp.transition, pi).reshape(S * A, S * A)


def exact_occupancy(mdp: TabularMdp, policy, nu: ResetDistribution, phi=None) -> np.ndarray:
    """Discounted state-action occupancy d^pi_nu as an (S, A) array."""
    if isinstance(policy, MixturePolicy):
        return sum(
            w * exact_occupancy(mdp, t, nu) for w, t in zip(policy.weights, policy.tables)
        )
    pi = policy_table(policy, phi)
    M = sa_transition(mdp, pi)
    g = mdp.discount
    d = np.linalg.solve(np.eye(M.shape[0]) - g * M.T, (1 - g) * nu.weights.ravel())
    return d.reshape(mdp.n_states, mdp.n_actions)


def flow_residual(mdp, policy, nu, d, phi=None) -> float:
    pi = policy_table(policy, phi)
    M = sa_transition(mdp, pi)
    g = mdp.discount
    rhs = (1 - g) * nu.weights.ravel() + g * M.T @ d.ravel()
    return float(np.abs(d.ravel() - rhs).max())


def state_occupancy(mdp, policy, phi=None) -> np.ndarray:
    """d^pi_{mu0}(s) for starts drawn from the initial distribution."""
    pi = policy_table(policy, phi)
    nu = ResetDistribution(mdp.init_dist[:, None] * pi)
    return exact_occupancy(mdp, pi, nu).sum(axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000):
    """Optimal (V*, Q*) by value iteration to sup-norm tolerance ``tol``."""
    g = mdp.discount
    v = np.zeros(mdp.n_states)
    thresh = tol * (1 - g) / max(g, 1e-300) if g > 0 else np.inf
    for _ in range(max_iter):
        q = mdp.reward_mean + g * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() <= thresh:
            v = v_new
            break
        v = v_new
    q = mdp.reward_mean + g * mdp.transition @ v
    return v, q


def greedy_policy(q: np.ndarray) -> np.ndarray:
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return pi


def optimal_value(mdp: TabularMdp, tol: float = 1e-10) -> float:
    v, _ = value_iteration(mdp, tol)
    return float(mdp.init_dist @ v)


def feature_covariance(phi: FeatureMap, dist: np.ndarray) -> np.ndarray:
    """E_{(s,a) ~ dist}[phi phi^T]."""
    X = phi.values.reshape(-1, phi.dim)
    w = np.asarray(dist, dtype=float).ravel()
    return (X * w[:, None]).T @ X


def relative_condition_number(sigma_dstar, sigma_nu, tol: float = 1e-12) -> float:
    """Largest generalized eigenvalue sup_w (w'A w)/(w'B w).

    Directions where ``sigma_nu`` is numerically zero are dropped; any mass of
    ``sigma_dstar`` along them makes the ratio infinite.
    """
    A = np.asarray(sigma_dstar, dtype=float)
    B = np.asarray(sigma_nu, dtype=float)
    A = (A + A.T) / 2
    B = (B + B.T) / 2
    lam, U = np.linalg.eigh(B)
    scale = max(abs(lam).max(), np.abs(A).max(), 1.0)
    keep = lam > tol * scale
    null = U[:, ~keep]
    if null.size and np.abs(null.T @ A @ null).max() > tol * scale:
        raise Unbounded("sigma_dstar has mass outside the range of sigma_nu")
    if not keep.any():
        return 0.0
    Ur = U[:, keep] / np.sqrt(lam[keep])
    return float(max(np.linalg.eigvalsh(Ur.T @ A @ Ur).max(), 0.0))


def condition_number(mdp: TabularMdp, phi: FeatureMap, nu: ResetDistribution) -> float:
    """kappa of ``nu`` against d*(s,a) = d^{pi*}_{mu0}(s) x Unif(a)."""
    _, q = value_iteration(mdp)
    d_state = state_occupancy(mdp, greedy_policy(q))
    dstar = np.outer(d_state, np.full(mdp.n_actions, 1.0 / mdp.n_actions))
    return relative_condition_number(
        feature_covariance(phi, dstar), feature_covariance(phi, nu.weights)
    )
