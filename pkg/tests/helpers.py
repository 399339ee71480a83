"""Small builders shared by the test modules."""

import numpy as np


def random_mdp(rng, S=4, A=3, gamma=0.8, noise=0.0):
    from robustpg.mdp import TabularMdp

    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.random((S, A))
    mu = rng.dirichlet(np.ones(S))
    return TabularMdp(P, R, gamma, mu, noise)


def random_policy(rng, S, A):
    return rng.dirichlet(np.ones(A), size=S)


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
