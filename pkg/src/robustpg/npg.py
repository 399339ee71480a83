"""Natural policy gradient with a pluggable critic solver.

With ``solver="sever"`` the loop is Filtered Policy Gradient: the critic's
least-squares fit is replaced by the SEVER filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import regression as reg
from .contamination import AdversaryBudget, AttackConfig, corrupt_batch, effective_horizon
from .mdp import (
    FeatureMap,
    MixturePolicy,
    ResetDistribution,
    SoftmaxLinearPolicy,
    TabularMdp,
    policy_value,
    sample_episodes,
)
from .rng import stream

SOLVERS = ("ols", "projected_ogd", "sever", "deterministic_filter")


@dataclass(frozen=True)
class NpgConfig:
    iterations: int
    episodes_per_iter: int
    step_size: float
    radius: float
    solver: str = "ols"
    solver_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 0 or self.episodes_per_iter < 1:
            raise ValueError("need iterations >= 0 and episodes_per_iter >= 1")
        if not self.step_size > 0 or not self.radius > 0:
            raise ValueError("step_size and radius must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")

    def scaled(self, factor: float) -> "NpgConfig":
        """Shrink T and M by the same factor (never below 1 episode)."""
        if not 0 < factor <= 1:
            raise ValueError("scale factor must lie in (0, 1]")
        return replace(
            self,
            iterations=max(int(math.ceil(self.iterations * factor)), 0),
            episodes_per_iter=max(int(math.ceil(self.episodes_per_iter * factor)), 1),
        )


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    value: float
    mixture_value: float
    corrupted: int
    filtered: int
    true_positives: int
    critic_residual: float

    @property
    def precision(self) -> float:
        return self.true_positives / self.filtered if self.filtered else 0.0

    @property
    def recall(self) -> float:
        return self.true_positives / self.corrupted if self.corrupted else 0.0


@dataclass
class TrainingTrace:
    records: list = field(default_factory=list)
    initial_value: float = float("nan")

    def __len__(self):
        return len(self.records)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])


def softmax_update(theta, eta, w) -> np.ndarray:
    """theta + eta * w; for softmax-linear policies this is the per-state
    multiplicative-weights step pi'(a|s) ~ pi(a|s) exp(eta w.phi(s, a))."""
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    if theta.shape != w.shape:
        raise ValueError(f"theta {theta.shape} and w {w.shape} differ in shape")
    return theta + eta * w


def multiplicative_weights(pi, eta, w, phi: FeatureMap) -> np.ndarray:
    """Renormalized pi(a|s) exp(eta w.phi(s, a))."""
    logits = np.log(pi) + eta * (phi.values @ w)
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    return out / out.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# schedules


def q_variance_bound(gamma: float, sigma: float, reward_scale: float = 1.0) -> float:
    """Upper bound on Var(Q-hat) for mean rewards in [0, reward_scale]."""
    return reward_scale**2 * gamma / (1 - gamma) ** 2 + sigma**2 / (1 - gamma)


def derive_npg_schedule(alpha, W, n_actions, gamma, kappa, d, sigma=0.0) -> NpgConfig:
    """Hyperparameters guaranteeing an O(alpha) gap under bounded attacks.

    T = 2 W^2 log|A| / (alpha^2 (1-g)^2), delta = alpha^2 (1-g)^3 / (32 W^2 |A| kappa),
    M = 512 |A|^2 W^2 (W+H)^2 kappa^2 / (alpha^4 (1-g)^6) log(4d/delta) and
    eta = sqrt(2 log|A| / (W^2 T)).  H depends on M; it is resolved by two
    fixed-point sweeps from H = 1/(1-g).  Nothing here depends on epsilon.
    """
    _check_schedule_args(alpha, W, n_actions, gamma, kappa, d)
    A = n_actions
    g1 = 1 - gamma
    T = 2 * W**2 * math.log(A) / (alpha**2 * g1**2)
    delta = alpha**2 * g1**3 / (32 * W**2 * A * kappa)
    H = 1 / g1
    for _ in range(2):
        M = 512 * A**2 * W**2 * (W + H) ** 2 * kappa**2 / (alpha**4 * g1**6) * math.log(4 * d / delta)
        H = effective_horizon(delta, M, gamma)
    iterations = math.ceil(T)
    eta = math.sqrt(2 * math.log(A) / (W**2 * iterations))
    return NpgConfig(
        iterations,
        math.ceil(M),
        eta,
        W,
        "ols",
        {"confidence": delta, "h_eff": H, "iterations_exact": T, "episodes_exact": M},
    )


def derive_fpg_schedule(alpha, W, n_actions, gamma, kappa, d, sigma=0.0) -> NpgConfig:
    """Same T and eta as NPG; b = W^2 + sigma W/(1-g),
    tau = alpha^2 (1-g)^3 / (4|A| b kappa),
    M = 16 |A|^2 b^2 kappa^2 / (alpha^4 (1-g)^6) max(d log d, log 1/tau)."""
    _check_schedule_args(alpha, W, n_actions, gamma, kappa, d)
    A = n_actions
    g1 = 1 - gamma
    T = 2 * W**2 * math.log(A) / (alpha**2 * g1**2)
    b = W**2 + sigma * W / g1
    tau = alpha**2 * g1**3 / (4 * A * b * kappa)
    M = 16 * A**2 * b**2 * kappa**2 / (alpha**4 * g1**6) * max(d * math.log(d), math.log(1 / tau))
    iterations = math.ceil(T)
    eta = math.sqrt(2 * math.log(A) / (W**2 * iterations))
    return NpgConfig(
        iterations,
        math.ceil(M),
        eta,
        W,
        "sever",
        {"tau": tau, "b": b, "iterations_exact": T, "episodes_exact": M},
    )


def _check_schedule_args(alpha, W, n_actions, gamma, kappa, d):
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if W <= 0 or kappa <= 0 or d < 1:
        raise ValueError("W, kappa and d must be positive")
    if n_actions < 2:
        raise ValueError("need at least two actions (log|A| > 0)")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")


# ---------------------------------------------------------------------------
# critic


def critic_sigma_prime(X: np.ndarray, gamma: float, sigma: float, reward_scale: float = 1.0) -> float:
    """sigma' from the Q-hat variance bound: 2 sqrt(V_max lambda_max(E x x'))."""
    lam = float(np.linalg.eigvalsh(X.T @ X / X.shape[0]).max())
    return 2.0 * math.sqrt(q_variance_bound(gamma, sigma, reward_scale) * max(lam, 0.0))


def fit_critic(problem: reg.RegressionProblem, cfg: NpgConfig, rng, gamma=0.9, sigma=0.0, h_eff=None, reward_scale=1.0):
    """Return (w, kept indices) using the configured solver.

    For sever, ``solver_params["sigma_prime"]`` is a number, ``"auto"``
    (robust per-round estimate) or ``"variance_bound"`` (derived from the
    worst-case Q-hat variance for rewards in [0, reward_scale]).
    """
    params = cfg.solver_params
    everything = np.arange(problem.n)
    if cfg.solver == "ols":
        return reg.constrained_ols(problem), everything
    if cfg.solver == "projected_ogd":
        h = params.get("h_eff", h_eff if h_eff is not None else 1 / (1 - gamma))
        return reg.projected_ogd(problem, h), everything
    if cfg.solver == "sever":
        sp = params.get("sigma_prime", "auto")
        if sp == "variance_bound":
            sp = critic_sigma_prime(problem.xs, gamma, sigma, reward_scale)
        elif sp == "auto":
            sp = None
        res = reg.sever(problem, sp, params.get("c0", 2.0), rng)
        return res.w, res.kept
    if cfg.solver == "deterministic_filter":
        res = reg.deterministic_filter(problem, int(params.get("rounds", 4)), float(params.get("frac", 0.05)))
        return res.w, res.kept
    raise ValueError(cfg.solver)


# ---------------------------------------------------------------------------
# training


def npg_train(
    mdp: TabularMdp,
    phi: FeatureMap,
    nu: ResetDistribution,
    cfg: NpgConfig,
    attack: AttackConfig = AttackConfig(),
    seed: int = 0,
    check_update: bool = False,
):
    """Run T iterations of (robust) NPG from theta = 0.

    Returns the uniform mixture over the post-update policies pi^(1..T)
    (the initial policy alone when T = 0) and the training trace.
    """
    T, M = cfg.iterations, cfg.episodes_per_iter
    theta = np.zeros(phi.dim)
    budget = AdversaryBudget(attack.epsilon, max(T * M, 1))
    h_eff = attack.h_eff
    if h_eff is None:
        h_eff = effective_horizon(attack.confidence, M, mdp.discount)
    trace = TrainingTrace(initial_value=policy_value(mdp, SoftmaxLinearPolicy(theta), phi))
    tables = []
    value_sum = 0.0
    for t in range(T):
        pi = SoftmaxLinearPolicy(theta).probs(phi)
        batch = sample_episodes(mdp, phi, pi, nu, stream(seed, "sample", t), M)
        batch = corrupt_batch(budget, attack, batch, stream(seed, "attack", t), h_eff)
        X = phi.values[batch.states, batch.actions]
        problem = reg.RegressionProblem(X, batch.q_hat, cfg.radius)
        w, kept = fit_critic(problem, cfg, stream(seed, "solver", t), mdp.discount, mdp.reward_noise_std, h_eff)
        removed = np.ones(M, dtype=bool)
        removed[kept] = False
        resid = X[kept] @ w - batch.q_hat[kept]
        new_theta = softmax_update(theta, cfg.step_size, w)
        new_pi = SoftmaxLinearPolicy(new_theta).probs(phi)
        if check_update:
            mw = multiplicative_weights(pi, cfg.step_size, w, phi)
            if np.abs(mw - new_pi).max() > 1e-12 * max(1.0, np.abs(new_pi).max()):
                raise AssertionError(f"parameter and multiplicative-weights updates disagree at t={t}")
        theta = new_theta
        tables.append(new_pi)
        v = policy_value(mdp, new_pi)
        value_sum += v
        trace.records.append(
            IterationRecord(
                iteration=t + 1,
                theta=theta.copy(),
                value=v,
                mixture_value=value_sum / (t + 1),
                corrupted=int(batch.corrupted.sum()),
                filtered=int(removed.sum()),
                true_positives=int((removed & batch.corrupted).sum()),
                critic_residual=float(np.mean(resid**2)) if len(resid) else 0.0,
            )
        )
    if not tables:
        tables.append(SoftmaxLinearPolicy(theta).probs(phi))
    return MixturePolicy.uniform(tables), trace
