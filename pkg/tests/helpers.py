"""Shared fixtures-in-spirit: seeded matrix generators used across test modules."""

import numpy as np


def rand_cond_matrix(rng, rows, cols, cond):
    """Random rows x cols matrix with condition number exactly `cond`."""
    r = min(rows, cols)
    qu, _ = np.linalg.qr(rng.standard_normal((rows, r)))
    qv, _ = np.linalg.qr(rng.standard_normal((cols, r)))
    if r == 1:
        sigma = np.array([1.0])
    else:
        sigma = np.geomspace(1.0, 1.0 / cond, r)
    sigma = sigma * rng.uniform(0.5, 2.0)
    return (qu * sigma) @ qv.T


def ns_test_ensemble(seed=1234, per_shape=25, shapes=((4, 4), (16, 8), (8, 16), (64, 64)), cond=10.0):
    """The seeded ensemble used for Newton-Schulz vs SVD-oracle comparisons."""
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        for _ in range(per_shape):
            out.append(rand_cond_matrix(rng, shape[0], shape[1], cond))
    return out
