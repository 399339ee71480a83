"""Robust policy-cover policy gradient.

Each epoch estimates the feature covariance of the current policy cover,
turns poorly covered directions into an exploration bonus, and runs a
bonus-driven robust NPG inner loop whose resets come from the cover.  The
learned policy joins the cover and the process repeats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import regression as reg
from .contamination import AdversaryBudget, AttackConfig, corrupt_batch, effective_horizon
from .mdp import (
    FeatureMap,
    MixturePolicy,
    ResetDistribution,
    TabularMdp,
    d_nu_sample,
    policy_value,
    sample_episodes,
    softmax,
)
from .npg import NpgConfig, fit_critic
from .rng import stream


@dataclass
class PolicyCover:
    """Policies pi^0..pi^n; rho_cov is the uniform average of their occupancies."""

    policies: list

    def __post_init__(self):
        if not self.policies:
            raise ValueError("a policy cover needs at least one policy")
        self.policies = [p if isinstance(p, MixturePolicy) else MixturePolicy.uniform([p]) for p in self.policies]

    def __len__(self):
        return len(self.policies)

    def mixture(self) -> MixturePolicy:
        return MixturePolicy.combine(self.policies)

    def add(self, policy) -> None:
        self.policies.append(policy if isinstance(policy, MixturePolicy) else MixturePolicy.uniform([policy]))


@dataclass(frozen=True, eq=False)
class CoverCovariance:
    sigma_hat: np.ndarray
    lam: float
    n_plus_1: int

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.sigma_hat)


def cover_covariance(phi_samples: np.ndarray, n_plus_1: int, lam: float) -> CoverCovariance:
    """(n+1) * mean(phi phi') + lam I from an array of sampled features."""
    X = np.atleast_2d(np.asarray(phi_samples, dtype=float))
    emp = X.T @ X / X.shape[0]
    sigma = n_plus_1 * emp + lam * np.eye(X.shape[1])
    return CoverCovariance(0.5 * (sigma + sigma.T), lam, n_plus_1)


def _sampled_features(policy, mdp, phi, nu, K, attack, rng) -> np.ndarray:
    s, a = d_nu_sample(mdp, phi, policy, nu, rng, size=K)
    X = phi.values[s, a].copy()
    if attack.kind != "none" and attack.epsilon > 0:
        # the most one pair can move a second moment of norm-1 features
        k = math.floor(attack.epsilon * K + 1e-9)
        X[:k] = 0.0
        X[:k, 0] = 1.0
    return X


def estimate_cover_covariance(
    cover: PolicyCover,
    mdp: TabularMdp,
    phi: FeatureMap,
    nu: ResetDistribution,
    K: int,
    lam: float,
    attack: AttackConfig = AttackConfig(),
    rng=None,
) -> CoverCovariance:
    """Estimate from K pairs drawn from rho_cov.

    An active attack replaces the features of floor(eps K) pairs by a unit
    vector along the first axis.
    """
    if K < 1:
        raise ValueError("K must be positive")
    rng = np.random.default_rng() if rng is None else rng
    X = _sampled_features(cover.mixture(), mdp, phi, nu, K, attack, rng)
    return cover_covariance(X, len(cover), lam)


class CoverAccumulator:
    """Stratified covariance estimate that reuses earlier samples.

    Each cover member contributes the empirical second moment of K pairs
    drawn once when it joins, so sigma_hat = sum_i mean_i(phi phi') + lam I.
    This has the same expectation as (n+1) * mean over rho_cov and only
    grows as the cover grows, which makes the known set monotone.
    """

    def __init__(self, dim: int, lam: float):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.total = np.zeros((dim, dim))
        self.lam = lam
        self.count = 0

    def add(self, policy, mdp, phi, nu, K, attack, rng) -> None:
        X = _sampled_features(policy, mdp, phi, nu, K, attack, rng)
        self.total += X.T @ X / K
        self.count += 1

    def covariance(self) -> CoverCovariance:
        sigma = self.total + self.lam * np.eye(self.total.shape[0])
        return CoverCovariance(0.5 * (sigma + sigma.T), self.lam, self.count)


def bonus(cov: CoverCovariance, phi_sa, beta: float, gamma: float) -> float:
    """1{phi' Sigma^-1 phi >= beta} / (1 - gamma)."""
    x = np.asarray(phi_sa, dtype=float)
    q = float(x @ np.linalg.solve(cov.sigma_hat, x))
    return 1.0 / (1.0 - gamma) if q >= beta else 0.0


def bonus_table(cov: CoverCovariance, phi: FeatureMap, beta: float, gamma: float) -> np.ndarray:
    """Bonus for every (s, a) as an (S, A) array."""
    F = phi.values
    q = np.einsum("sad,sad->sa", F, np.linalg.solve(cov.sigma_hat, F.reshape(-1, phi.dim).T).T.reshape(F.shape))
    return np.where(q >= beta, 1.0 / (1.0 - gamma), 0.0)


def known_set(cov: CoverCovariance, phi: FeatureMap, beta: float, gamma: float = 0.0) -> np.ndarray:
    """Boolean mask over states where every action's bonus is zero."""
    return ~(bonus_table(cov, phi, beta, gamma) > 0).any(axis=1)


def initial_policy(bonuses: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Uniform on known states; uniform over bonus-positive actions elsewhere."""
    S, A = bonuses.shape
    pi = np.full((S, A), 1.0 / A)
    for s in np.flatnonzero(~known):
        pos = bonuses[s] > 0
        pi[s] = pos / pos.sum()
    return pi


@dataclass
class InnerRecord:
    corrupted: int
    filtered: int
    true_positives: int


def robust_npg_update(
    cover: PolicyCover,
    bonuses: np.ndarray,
    mdp: TabularMdp,
    phi: FeatureMap,
    nu: ResetDistribution,
    cfg: NpgConfig,
    attack: AttackConfig = AttackConfig(),
    seed: int = 0,
    epoch: int = 0,
    budget: AdversaryBudget | None = None,
):
    """Bonus-driven NPG inner loop with resets from the cover.

    Returns the uniform mixture over pi^0..pi^(T-1) and per-iteration
    detection counts.  Policies on unknown states never move from pi^0.
    """
    known = ~(bonuses > 0).any(axis=1)
    pi = initial_policy(bonuses, known)
    T, M = cfg.iterations, cfg.episodes_per_iter
    if budget is None:
        budget = AdversaryBudget(attack.epsilon, max(T * M, 1))
    h_eff = attack.h_eff if attack.h_eff is not None else effective_horizon(attack.confidence, M, mdp.discount)
    rho = cover.mixture()
    logits = np.zeros_like(pi)
    scale = 1.0 + float(bonuses.max(initial=0.0))
    tables = [pi]
    records = []
    for t in range(T - 1 if T > 0 else 0):
        batch = sample_episodes(mdp, phi, rho, nu, stream(seed, "sample", epoch, t), M, q_policy=pi, bonus=bonuses)
        batch = corrupt_batch(budget, attack, batch, stream(seed, "attack", epoch, t), h_eff)
        X = phi.values[batch.states, batch.actions]
        y = batch.q_hat - bonuses[batch.states, batch.actions]
        w, kept = fit_critic(
            reg.RegressionProblem(X, y, cfg.radius), cfg, stream(seed, "solver", epoch, t), mdp.discount, mdp.reward_noise_std, h_eff, scale
        )
        removed = np.ones(M, dtype=bool)
        removed[kept] = False
        records.append(InnerRecord(int(batch.corrupted.sum()), int(removed.sum()), int((removed & batch.corrupted).sum())))
        # unknown states stay bitwise at pi^0
        logits[known] += cfg.step_size * (bonuses[known] + phi.values[known] @ w)
        pi = pi.copy()
        pi[known] = softmax(logits[known])
        tables.append(pi)
    return MixturePolicy.uniform(tables), records


@dataclass
class EpochRecord:
    epoch: int
    known_states: int
    value: float
    mixture_value: float
    corrupted: int
    filtered: int
    true_positives: int


@dataclass
class PcpgTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def pcpg_train(
    mdp: TabularMdp,
    phi: FeatureMap,
    nu: ResetDistribution,
    N: int,
    beta: float,
    lam: float,
    K: int,
    inner_cfg: NpgConfig,
    attack: AttackConfig = AttackConfig(),
    seed: int = 0,
    cover_estimate: str = "incremental",
):
    """Run N epochs; returns Uniform{pi^0..pi^(N-1)} and the per-epoch trace.

    pi^0 is the uniform policy.  Epoch n builds the bonus from the cover
    {pi^0..pi^n} and produces pi^(n+1) by :func:`robust_npg_update`.
    ``cover_estimate="incremental"`` uses :class:`CoverAccumulator`;
    ``"resample"`` draws K fresh pairs from the whole cover every epoch.
    """
    if cover_estimate not in ("incremental", "resample"):
        raise ValueError("cover_estimate must be 'incremental' or 'resample'")
    if N < 1:
        raise ValueError("N must be at least 1")
    S, A = mdp.n_states, mdp.n_actions
    uniform = MixturePolicy.uniform([np.full((S, A), 1.0 / A)])
    cover = PolicyCover([uniform])
    T, M = inner_cfg.iterations, inner_cfg.episodes_per_iter
    budget = AdversaryBudget(attack.epsilon, max(N * max(T - 1, 1) * M, 1))
    trace = PcpgTrace()
    outputs = [uniform]
    value_sum = policy_value(mdp, uniform)
    trace.records.append(EpochRecord(0, 0, value_sum, value_sum, 0, 0, 0))
    acc = CoverAccumulator(phi.dim, lam)
    for n in range(N - 1):
        if cover_estimate == "incremental":
            acc.add(cover.policies[-1], mdp, phi, nu, K, attack, stream(seed, "cover", n))
            cov = acc.covariance()
        else:
            cov = estimate_cover_covariance(cover, mdp, phi, nu, K, lam, attack, stream(seed, "cover", n))
        b = bonus_table(cov, phi, beta, mdp.discount)
        policy, inner = robust_npg_update(cover, b, mdp, phi, nu, inner_cfg, attack, seed, n, budget)
        cover.add(policy)
        outputs.append(policy)
        v = policy_value(mdp, policy)
        value_sum += v
        trace.records.append(
            EpochRecord(
                n + 1,
                int((~(b > 0).any(axis=1)).sum()),
                v,
                value_sum / (n + 2),
                sum(r.corrupted for r in inner),
                sum(r.filtered for r in inner),
                sum(r.true_positives for r in inner),
            )
        )
    return MixturePolicy.combine(outputs), trace


def derive_pcpg_schedule(alpha, W, gamma, d, delta=0.1, d_tilde=None) -> dict:
    """Epoch count, bonus threshold and sample sizes guaranteeing an O(alpha) gap.

    lambda = 1, beta = alpha^2 (1-g)^2 / (4 W^2), inner T = 4 W^2 log A / ((1-g)^2 alpha^2)
    is left to the caller (it needs |A|), N = 4 W^2 d log(N+1) / (alpha^3 (1-g)^3)
    resolved by two sweeps from N0 = 4 W^2 d / (alpha^3 (1-g)^3),
    M = 2 d^2 log^2(N+1) (W^2 + W H)^2 log(4d/delta) / (alpha^6 (1-g)^6) with
    H = 1/(1-g), and K = 128 N^2 log(8 d_tilde / delta).
    """
    if not 0 < alpha < 1 or W <= 0 or d < 1 or not 0 < gamma < 1 or not 0 < delta < 1:
        raise ValueError("need 0 < alpha, gamma, delta < 1 and positive W, d")
    g1 = 1 - gamma
    d_tilde = d if d_tilde is None else d_tilde
    beta = alpha**2 * g1**2 / (4 * W**2)
    N = 4 * W**2 * d / (alpha**3 * g1**3)
    for _ in range(2):
        N = 4 * W**2 * d * math.log(N + 1) / (alpha**3 * g1**3)
    H = 1 / g1
    M = 2 * d**2 * math.log(N + 1) ** 2 * (W**2 + W * H) ** 2 * math.log(4 * d / delta) / (alpha**6 * g1**6)
    K = 128 * N**2 * math.log(8 * d_tilde / delta)
    return {"lambda": 1.0, "beta": beta, "N": math.ceil(N), "M": math.ceil(M), "K": math.ceil(K), "N_exact": N}


def inner_iterations(alpha, W, gamma, n_actions) -> int:
    """Inner NPG iterations 4 W^2 log|A| / ((1-g)^2 alpha^2)."""
    return math.ceil(4 * W**2 * math.log(n_actions) / ((1 - gamma) ** 2 * alpha**2))
