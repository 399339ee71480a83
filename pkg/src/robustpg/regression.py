"""Ball-constrained least squares and spectral outlier filters.

The filters score each point by the squared projection of its (centered)
loss gradient onto the top right singular vector of the gradient matrix and
remove high scorers.  :func:`sever` uses randomized thresholds and a variance
test; :func:`deterministic_filter` and :func:`filtered_cg` drop a fixed
fraction per round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

JITTER = 1e-10


class EmptyData(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RegressionProblem:
    xs: np.ndarray  # (n, d)
    ys: np.ndarray  # (n,)
    radius: float

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        ys = np.asarray(self.ys, dtype=float).ravel()
        if xs.shape[0] == 0 or ys.size == 0:
            raise EmptyData("regression problem has no data")
        if xs.shape[0] != ys.size:
            raise ValueError(f"{xs.shape[0]} feature rows but {ys.size} targets")
        if np.linalg.norm(xs, axis=1).max() > 1 + 1e-9:
            raise ValueError("every feature vector must have norm <= 1")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]

    def subset(self, idx) -> "RegressionProblem":
        return RegressionProblem(self.xs[idx], self.ys[idx], self.radius)

    def loss(self, w) -> float:
        r = self.xs @ w - self.ys
        return float(r @ r)


@dataclass(frozen=True, eq=False)
class FilterResult:
    w: np.ndarray
    kept: np.ndarray  # sorted indices into the original problem
    rounds: int
    kept_history: tuple = ()


# ---------------------------------------------------------------------------
# solvers


def _ball_solve(G, b, radius):
    """argmin w'Gw - 2b'w over ||w|| <= radius, G symmetric PSD."""
    d = G.shape[0]
    if radius == 0:
        return np.zeros(d)
    w = np.linalg.solve(G + JITTER * np.eye(d), b)
    if np.linalg.norm(w) <= radius:
        return w
    # boundary solution: w(mu) = (G + mu I)^-1 b with ||w(mu)|| = radius
    lam, U = np.linalg.eigh(G)
    lam = np.maximum(lam, 0.0) + JITTER
    c = U.T @ b

    def norm(mu):
        return math.sqrt(float(np.sum((c / (lam + mu)) ** 2)))

    lo, hi = 0.0, max(float(np.linalg.norm(c)) / radius, 1e-300)
    while norm(hi) > radius:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm(mid) > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(hi, 1e-300):
            break
    w = U @ (c / (lam + hi))
    nrm = np.linalg.norm(w)
    if nrm > radius:
        w *= radius / nrm
    return w


def constrained_ols(p: RegressionProblem) -> np.ndarray:
    """argmin sum (y_i - w.x_i)^2 subject to ||w|| <= radius.

    Solves the jittered normal equations; if that lands outside the ball the
    boundary solution is found from the secular equation in the Lagrange
    multiplier.
    """
    X, y = p.xs, p.ys
    return _ball_solve(X.T @ X, X.T @ y, p.radius)


def project_ball(w, radius):
    n = np.linalg.norm(w)
    return w if n <= radius else w * (radius / n)


def projected_ogd(p: RegressionProblem, h_eff: float, return_iterates: bool = False):
    """One pass of projected online gradient descent, averaged iterates.

    Step size W^2 / ((W + H) sqrt(n)) on the losses (w.x_i - y_i)^2, starting
    from zero.
    """
    W = p.radius
    n, d = p.xs.shape
    eta = W * W / ((W + h_eff) * math.sqrt(n)) if W > 0 else 0.0
    w = np.zeros(d)
    iterates = np.empty((n, d))
    for i in range(n):
        x = p.xs[i]
        iterates[i] = w
        w = project_ball(w - eta * (w @ x - p.ys[i]) * x, W)
    avg = iterates.mean(axis=0)
    if return_iterates:
        return avg, iterates
    return avg


# ---------------------------------------------------------------------------
# spectral scores


def top_right_singular_vector(G: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Power iteration on G'G from the all-ones vector.

    The sign is fixed so the first nonzero coordinate is positive.
    """
    n, d = G.shape
    C = G.T @ G if n >= d else None
    v = np.ones(d) / math.sqrt(d)
    for _ in range(max_iter):
        u = C @ v if C is not None else G.T @ (G @ v)
        nrm = np.linalg.norm(u)
        if nrm == 0:
            break
        u /= nrm
        change = np.linalg.norm(u - v)
        v = u
        if change < tol:
            break
    nz = np.flatnonzero(np.abs(v) > 1e-15)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def gradient_scores(p: RegressionProblem, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Squared projections of centered loss gradients on their top direction."""
    X = p.xs[idx]
    resid = X @ w - p.ys[idx]
    grads = 2.0 * resid[:, None] * X
    G = grads - grads.mean(axis=0)
    v = top_right_singular_vector(G)
    return (G @ v) ** 2


def default_sigma_prime(p: RegressionProblem, w: np.ndarray | None = None, idx=None) -> float:
    """Gradient-noise scale implied by a robust residual scale.

    Clean gradients 2 r x have second moment about 4 s^2 E[x x'] when the
    residual r has scale s, so the default is 2 s sqrt(lambda_max(E x x'))
    with s the normal-consistent median absolute deviation of the residuals
    at ``w``.  Clipped below at 1e-6.
    """
    idx = np.arange(p.n) if idx is None else idx
    X = p.xs[idx]
    if w is None:
        w = constrained_ols(p.subset(idx))
    resid = X @ w - p.ys[idx]
    s = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
    lam = float(np.linalg.eigvalsh(X.T @ X / len(idx)).max())
    return max(2.0 * s * math.sqrt(max(lam, 0.0)), 1e-6)


def sever(p: RegressionProblem, sigma_prime: float | None = None, c0: float = 2.0, rng=None, max_rounds: int | None = None) -> FilterResult:
    """SEVER robust regression with randomized thresholds.

    Each round fits on the kept set S, scores every point and stops once the
    mean score is at most c0 * sigma_prime**2.  With ``sigma_prime=None`` the
    scale is re-estimated each round by :func:`default_sigma_prime`.  Otherwise a threshold T is
    drawn uniformly from [0, max score] and points scoring >= T are dropped.
    """
    if c0 <= 1:
        raise ValueError("c0 must exceed 1")
    if sigma_prime is not None and sigma_prime <= 0:
        raise ValueError("sigma_prime must be positive")
    if rng is None:
        rng = np.random.default_rng()
    limit = p.n if max_rounds is None else max_rounds
    S = np.arange(p.n)
    history = [S]
    rounds = 0
    while True:
        rounds += 1
        w = constrained_ols(p.subset(S))
        tau = gradient_scores(p, w, S)
        sp = default_sigma_prime(p, w, S) if sigma_prime is None else sigma_prime
        if tau.mean() <= c0 * sp**2 or rounds >= limit:
            break
        T = rng.uniform(0.0, tau.max())
        S_new = S[tau < T]
        if S_new.size == 0:
            # every point scored alike: keep the lowest-scoring group
            S = S[tau <= tau.min()]
            history.append(S)
            w = constrained_ols(p.subset(S))
            break
        S = S_new
        history.append(S)
    return FilterResult(w, S, rounds, tuple(history))


def deterministic_filter(p: RegressionProblem, rounds: int, frac: float) -> FilterResult:
    """Drop the ceil(frac * |S|) highest-scoring points each round.

    Ties are broken by dropping the higher index first.
    """
    if rounds < 0 or not 0 <= frac < 1:
        raise ValueError("need rounds >= 0 and 0 <= frac < 1")
    S = np.arange(p.n)
    history = [S]
    for _ in range(rounds):
        k = math.ceil(frac * S.size - 1e-12)
        if k == 0 or S.size <= 1:
            break
        k = min(k, S.size - 1)
        w = constrained_ols(p.subset(S))
        tau = gradient_scores(p, w, S)
        # ascending by (score, index): the tail is dropped
        order = np.lexsort((S, tau))
        S = np.sort(S[order[:-k]])
        history.append(S)
    w = constrained_ols(p.subset(S))
    return FilterResult(w, S, rounds, tuple(history))


# ---------------------------------------------------------------------------
# conjugate gradient


def conjugate_gradient(matvec, b, tol: float = 1e-12, max_iter: int | None = None, x0=None):
    """Solve A x = b for symmetric positive definite A given as a matvec."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    p = r.copy()
    rs = r @ r
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x
    limit = 10 * b.size if max_iter is None else max_iter
    for _ in range(limit):
        if math.sqrt(rs) <= tol * bnorm:
            break
        Ap = matvec(p)
        alpha = rs / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def damped_fisher_solve(gs, advs, damping):
    """CG solution of (F + damping I) x = g with F = mean g_i g_i', g = mean g_i A_i."""
    gs = np.asarray(gs, dtype=float)
    advs = np.asarray(advs, dtype=float)
    n = gs.shape[0]
    g_bar = gs.T @ advs / n

    def matvec(v):
        return gs.T @ (gs @ v) / n + damping * v

    return conjugate_gradient(matvec, g_bar), g_bar


def filtered_cg(gs, advs, damping: float = 0.1, rounds: int = 4, frac: float = 0.05):
    """Filtered conjugate gradient.

    Each round solves the damped system on the kept samples, forms the
    per-sample residues g_i g_i' x - g_i A_i, scores them along their top
    right singular vector and removes the ceil(frac * n) highest scorers.
    Returns the final solve and the kept indices.
    """
    gs = np.atleast_2d(np.asarray(gs, dtype=float))
    advs = np.asarray(advs, dtype=float).ravel()
    n = gs.shape[0]
    if n == 0:
        raise EmptyData("no samples")
    if damping <= 0:
        raise ValueError("damping must be positive")
    k = math.ceil(frac * n - 1e-12)
    S = np.arange(n)
    for _ in range(rounds):
        if k == 0 or S.size <= k:
            break
        x, _ = damped_fisher_solve(gs[S], advs[S], damping)
        g = gs[S]
        R = (g @ x)[:, None] * g - advs[S][:, None] * g
        v = top_right_singular_vector(R)
        tau = (R @ v) ** 2
        order = np.lexsort((S, tau))
        S = np.sort(S[order[:-k]])
    x, _ = damped_fisher_solve(gs[S], advs[S], damping)
    return x, S


def sever_rate_factor(d: int, tau: float) -> float:
    """sqrt(d log d) + sqrt(log 1/tau); appears only in SEVER's error bound."""
    return math.sqrt(d * math.log(d)) + math.sqrt(math.log(1 / tau))
