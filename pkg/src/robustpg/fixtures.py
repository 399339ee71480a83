"""Built-in environments and the plain-text MDP table format.

File format (``.mdp``), whitespace separated, ``#`` starts a comment::

    n_states 3
    n_actions 2
    discount 0.9
    reward_noise_std 0.0
    init_dist 1 0 0
    reset init            # optional: "uniform" (over all (s,a)) or "init"
    # one row per (s, a): s a reward_mean p(0) p(1) ... p(S-1)
    0 0 0.45 0 0.45 0.55
    ...

Features are one-hot over (s, a).  ``reset init`` means mu0 times a
uniform action; ``reset uniform`` is the exploratory choice.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import FeatureMap, ResetDistribution, TabularMdp

FIXTURE_DIR = Path(__file__).resolve().parents[2] / "fixtures"


@dataclass(frozen=True)
class Fixture:
    name: str
    mdp: TabularMdp
    phi: FeatureMap
    nu: ResetDistribution
    reset: str = "uniform"


def _reset(mdp, kind):
    if kind == "uniform":
        return ResetDistribution.uniform(mdp.n_states, mdp.n_actions)
    if kind == "init":
        return ResetDistribution.from_states(mdp.init_dist, mdp.n_actions)
    raise ValueError(f"unknown reset kind {kind!r}")


def make_fixture(name, mdp, reset="uniform") -> Fixture:
    return Fixture(name, mdp, FeatureMap.one_hot(mdp.n_states, mdp.n_actions), _reset(mdp, reset), reset)


# ---------------------------------------------------------------------------
# builtins

GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def gridworld(size=5, discount=0.9, slip=0.0, goal_reward=1.0, noise=0.0) -> TabularMdp:
    """size x size grid, start (0, 0), goal in the far corner.

    Any action at the goal pays ``goal_reward`` and moves to an absorbing
    zero-reward sink (state ``size * size``), so Q values lie in
    [0, goal_reward] and rollout estimates stay low-variance.  With
    probability ``slip`` a move is replaced by a uniformly random one.
    """
    cells = size * size
    S = cells + 1
    A = len(GRID_MOVES)
    goal, sink = cells - 1, cells
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(cells):
        if s == goal:
            P[s, :, sink] = 1.0
            R[s] = goal_reward
            continue
        r, c = divmod(s, size)
        dest = []
        for dr, dc in GRID_MOVES:
            rr = min(max(r + dr, 0), size - 1)
            cc = min(max(c + dc, 0), size - 1)
            dest.append(rr * size + cc)
        for a in range(A):
            P[s, a, dest[a]] += 1 - slip
            for b in range(A):
                P[s, a, dest[b]] += slip / A
    P[sink, :, sink] = 1.0
    mu = np.zeros(S)
    mu[0] = 1.0
    return TabularMdp(P, R, discount, mu, noise)


LOCK_CODE = (0, 1, 1, 0, 1, 0, 0, 1, 0)


def combination_lock(code=LOCK_CODE, discount=0.9, distractor=0.1, noise=0.0) -> TabularMdp:
    """Chain where only the right action advances and any other resets to 0.

    States 0..len(code)-1 form the lock and the last state is an absorbing
    goal paying 1 per step.  A wrong action pays ``distractor``, so looping
    on wrong actions at the start is a local optimum that myopic learners
    settle into.  Start is state 0.
    """
    n = len(code)
    S = n + 1
    A = 2
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s, right in enumerate(code):
        for a in range(A):
            P[s, a, s + 1 if a == right else 0] = 1.0
            if a != right:
                R[s, a] = distractor
    P[n, :, n] = 1.0
    R[n] = 1.0
    mu = np.zeros(S)
    mu[0] = 1.0
    return TabularMdp(P, R, discount, mu, noise)


def bandit(means=(0.2, 0.8), discount=0.5, noise=0.1) -> TabularMdp:
    A = len(means)
    P = np.ones((1, A, 1))
    return TabularMdp(P, np.array([means], dtype=float), discount, np.ones(1), noise)


def constant_reward(n_states=1, n_actions=1, discount=0.9, reward=1.0, noise=0.0) -> TabularMdp:
    """Every pair pays ``reward``; transitions are uniform.  Q = reward / (1 - discount)."""
    P = np.full((n_states, n_actions, n_states), 1.0 / n_states)
    mu = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, np.full((n_states, n_actions), float(reward)), discount, mu, noise)


def _lowerbound(epsilon=0.1, discount=0.9):
    from .contamination import build_lowerbound_pair

    return build_lowerbound_pair(epsilon, discount)[0]


BUILTINS = {
    "gridworld": (gridworld, "uniform"),
    "combination_lock": (combination_lock, "init"),
    "lowerbound": (_lowerbound, "uniform"),
    "bandit": (bandit, "uniform"),
}


def builtin(name: str) -> Fixture:
    try:
        factory, reset = BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(BUILTINS)}") from None
    return make_fixture(name, factory(), reset)


def resolve(name_or_path) -> Fixture:
    """Builtin name, or path to an ``.mdp`` file."""
    if str(name_or_path) in BUILTINS:
        return builtin(str(name_or_path))
    path = Path(name_or_path)
    mdp, reset = load_mdp(path)
    return make_fixture(path.stem, mdp, reset)


# ---------------------------------------------------------------------------
# text format


def dump_mdp(mdp: TabularMdp, reset: str = "uniform") -> str:
    fmt = repr
    lines = [
        "# robustpg tabular MDP",
        f"n_states {mdp.n_states}",
        f"n_actions {mdp.n_actions}",
        f"discount {fmt(float(mdp.discount))}",
        f"reward_noise_std {fmt(float(mdp.reward_noise_std))}",
        "init_dist " + " ".join(fmt(float(x)) for x in mdp.init_dist),
        f"reset {reset}",
        "# s a reward_mean p(s'=0) ... p(s'=S-1)",
    ]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            row = [str(s), str(a), fmt(float(mdp.reward_mean[s, a]))]
            row += [fmt(float(p)) for p in mdp.transition[s, a]]
            lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def save_mdp(mdp: TabularMdp, path, reset: str = "uniform") -> None:
    Path(path).write_text(dump_mdp(mdp, reset))


def parse_mdp(text: str):
    """Parse the table format; returns (mdp, reset kind)."""
    header = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0][0].isalpha():
            header[tok[0]] = tok[1:]
        else:
            try:
                rows.append((lineno, [float(t) for t in tok]))
            except ValueError:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}") from None
    for key in ("n_states", "n_actions", "discount", "init_dist"):
        if key not in header:
            raise ValueError(f"missing header field {key!r}")
    S = int(header["n_states"][0])
    A = int(header["n_actions"][0])
    P = np.full((S, A, S), np.nan)
    R = np.full((S, A), np.nan)
    for lineno, vals in rows:
        if len(vals) != S + 3:
            raise ValueError(f"line {lineno}: expected {S + 3} fields, got {len(vals)}")
        s, a = int(vals[0]), int(vals[1])
        if not (0 <= s < S and 0 <= a < A):
            raise ValueError(f"line {lineno}: (s, a) = ({s}, {a}) out of range")
        R[s, a] = vals[2]
        P[s, a] = vals[3:]
    if np.isnan(R).any():
        missing = np.argwhere(np.isnan(R))[0]
        raise ValueError(f"no row for (s, a) = {tuple(int(x) for x in missing)}")
    mdp = TabularMdp(
        P,
        R,
        float(header["discount"][0]),
        np.array([float(x) for x in header["init_dist"]]),
        float(header.get("reward_noise_std", ["0"])[0]),
    )
    reset = header.get("reset", ["uniform"])[0]
    return mdp, reset


def load_mdp(path):
    return parse_mdp(Path(path).read_text())


def write_builtin_files(directory=FIXTURE_DIR) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name in BUILTINS:
        fx = builtin(name)
        path = directory / f"{name}.mdp"
        save_mdp(fx.mdp, path, fx.reset)
        out.append(path)
    return out
