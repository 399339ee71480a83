"""Epsilon-contamination adversaries acting on episode data.

An adversary may corrupt at most ceil(epsilon * K) of K episodes.  Reward
attacks replace the episode's Q estimate, which is everything the learner
sees of the episode's rewards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .mdp import EpisodeBatch, EpisodeSample, TabularMdp

ATTACK_KINDS = ("none", "reward_flip", "bounded_flip", "mimic")


@dataclass
class AdversaryBudget:
    epsilon: float
    horizon_episodes: int
    used: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.horizon_episodes < 1:
            raise ValueError("horizon_episodes must be positive")

    @property
    def limit(self) -> int:
        # guard against 0.07 * 100 = 7.000000000000001
        return math.ceil(self.epsilon * self.horizon_episodes - 1e-9)

    @property
    def remaining(self) -> int:
        return self.limit - self.used

    def spend(self, n: int = 1) -> None:
        if n > self.remaining:
            raise RuntimeError("adversary budget exceeded")
        self.used += n


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    delta: float = 0.0
    epsilon: float = 0.0
    # "greedy": corrupt the first floor(eps*M) episodes of every batch;
    # a number f: corrupt a uniformly random floor(f*M) of them
    target_fraction_per_iter: float | str = "greedy"
    # range of the bounded adversary's Q estimates; None -> supplied per batch
    h_eff: float | None = None
    confidence: float = 0.01

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.delta) or self.delta < 0:
            raise ValueError("delta must be finite and >= 0")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        f = self.target_fraction_per_iter
        if f != "greedy" and not (isinstance(f, (int, float)) and 0 <= f <= 1):
            raise ValueError("target_fraction_per_iter must be 'greedy' or in [0, 1]")

    @property
    def active(self) -> bool:
        return self.kind in ("reward_flip", "bounded_flip") and self.epsilon > 0


def effective_horizon(confidence: float, m: int, gamma: float) -> float:
    """(log delta - log M) / log gamma: high-probability rollout length."""
    if gamma <= 0:
        return 1.0
    return (math.log(confidence) - math.log(m)) / math.log(gamma)


def corrupt_value(cfg: AttackConfig, truth, h_eff=None):
    if cfg.kind == "reward_flip":
        return -cfg.delta * np.asarray(truth, dtype=float)
    if cfg.kind == "bounded_flip":
        h = cfg.h_eff if h_eff is None else h_eff
        return np.clip(h - cfg.delta * np.asarray(truth, dtype=float), 0.0, h)
    raise ValueError(f"attack kind {cfg.kind!r} does not rewrite Q estimates")


def maybe_corrupt(budget: AdversaryBudget, cfg: AttackConfig, sample: EpisodeSample, rng, h_eff=None) -> EpisodeSample:
    """Corrupt one episode if the strategy elects to and budget remains.

    Greedy strategies attack whenever budget remains; a numeric
    ``target_fraction_per_iter`` attacks with that probability.
    """
    if sample.truth_corrupted:
        raise ValueError("sample is already corrupted")
    if not cfg.active or budget.epsilon == 0 or budget.remaining <= 0:
        return sample
    f = cfg.target_fraction_per_iter
    if f != "greedy" and rng.random() >= f:
        return sample
    budget.spend()
    q = float(corrupt_value(cfg, sample.truth_q_hat, h_eff))
    return replace(sample, q_hat=q, truth_corrupted=True)


def attack_indices(cfg: AttackConfig, budget: AdversaryBudget, m: int, rng) -> np.ndarray:
    """Episode indices of a batch of size m chosen for corruption."""
    if not cfg.active or budget.epsilon == 0:
        return np.zeros(0, dtype=np.int64)
    f = cfg.target_fraction_per_iter
    n = math.floor((cfg.epsilon if f == "greedy" else f) * m + 1e-9)
    n = max(0, min(n, budget.remaining, m))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if f == "greedy":
        return np.arange(n)
    return np.sort(rng.choice(m, size=n, replace=False))


def corrupt_batch(budget: AdversaryBudget, cfg: AttackConfig, batch: EpisodeBatch, rng, h_eff=None) -> EpisodeBatch:
    """Batch version of :func:`maybe_corrupt` following the attack schedule."""
    idx = attack_indices(cfg, budget, len(batch), rng)
    if len(idx) == 0:
        return batch
    if cfg.kind == "bounded_flip" and h_eff is None and cfg.h_eff is None:
        raise ValueError("bounded_flip needs h_eff (set AttackConfig.h_eff or pass h_eff)")
    budget.spend(len(idx))
    q = batch.q_hat.copy()
    q[idx] = corrupt_value(cfg, batch.truth_q_hat[idx], h_eff)
    corrupted = batch.corrupted.copy()
    corrupted[idx] = True
    return EpisodeBatch(batch.states, batch.actions, q, batch.truth_q_hat, corrupted)


# ---------------------------------------------------------------------------
# lower-bound construction


def build_lowerbound_pair(epsilon: float, gamma: float) -> tuple[TabularMdp, TabularMdp]:
    """Two 3-state, 2-action MDPs an epsilon-adversary cannot tell apart.

    States: 0 = s1 (start), 1 = s2 (absorbing, reward 1), 2 = s3
    (absorbing, reward 0).  From s1, a1 (index 0) reaches s2 w.p.
    (1 -/+ eps)/2 in M1/M2 and a2 reaches s2 w.p. 1/2.  The reward of s2
    is credited on entry: r(s1, a) = P(s2 | s1, a), which makes the gap
    between the two actions at s1 exactly eps / (2 (1 - gamma)).
    """
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")

    def make(p_good):
        P = np.zeros((3, 2, 3))
        P[0, 0] = [0.0, p_good, 1 - p_good]
        P[0, 1] = [0.0, 0.5, 0.5]
        P[1, :, 1] = 1.0
        P[2, :, 2] = 1.0
        R = np.array([[p_good, 0.5], [1.0, 1.0], [0.0, 0.0]])
        return TabularMdp(P, R, gamma, np.array([1.0, 0.0, 0.0]), 0.0)

    return make((1 - epsilon) / 2), make((1 + epsilon) / 2)


@dataclass
class MimicCoupling:
    """Shared-uniform coupling of M1's and M2's (s1, a1) rows.

    X = s2 iff U <= (1-eps)/2 and Y = s2 iff U <= (1+eps)/2, so the two
    disagree only when X = s3 and Y = s2, which happens w.p. eps.
    """

    epsilon: float
    good: int = 1
    bad: int = 2
    visits: int = 0
    flips: int = 0


def mimic_adversary_step(coupling: MimicCoupling, observed_next_state: int, rng) -> tuple[int, bool]:
    """Replace an M1 draw by the coupled M2 draw."""
    coupling.visits += 1
    if observed_next_state == coupling.good:
        return observed_next_state, False
    eps = coupling.epsilon
    # U | X = s3 is uniform on ((1-eps)/2, 1]; Y = s2 iff U <= (1+eps)/2
    if rng.random() < 2 * eps / (1 + eps):
        coupling.flips += 1
        return coupling.good, True
    return observed_next_state, False


def mimic_run(epsilon: float, n_episodes: int, rng, p_a1: float = 1.0, gamma: float = 0.9):
    """One learning run against the mimic adversary.

    Each episode starts at s1; the learner takes a1 with probability
    ``p_a1``.  Returns (flips, delivered next states at (s1, a1), within
    budget).
    """
    m1, _ = build_lowerbound_pair(epsilon, gamma)
    coupling = MimicCoupling(epsilon)
    delivered = []
    row = m1.transition[0, 0]
    for _ in range(n_episodes):
        if rng.random() >= p_a1:
            continue
        x = int(rng.choice(3, p=row))
        y, _ = mimic_adversary_step(coupling, x, rng)
        delivered.append(y)
    within = coupling.flips <= epsilon * n_episodes + 1e-9
    return coupling.flips, np.array(delivered, dtype=np.int64), within
