import numpy as np


def random_problem(rng, N, C, M):
    """Unit-scale scores, one-hot labels and a row-stochastic prior."""
    S = rng.uniform(size=(N, C * M))
    Y = np.eye(C)[rng.integers(0, C, N)]
    V = rng.uniform(size=(C * M, C))
    V /= V.sum(axis=1, keepdims=True)
    return S, Y, V
