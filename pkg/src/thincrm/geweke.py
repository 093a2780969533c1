"""Getting-it-right checks for Gibbs samplers.

Two simulators of the joint distribution are compared:

* marginal-conditional: independent draws (params ~ prior, data ~ model)
* successive-conditional: a chain alternating data ~ model | params and
  one Gibbs sweep params ~ sampler | data

If the sampler is correct both produce the prior on the parameters, so
every test statistic has matching means.  The chain is autocorrelated, so
its standard error uses batch means.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Standard error of the mean of each column of a correlated chain."""
    x = np.asarray(x, dtype=float)
    n = (len(x) // n_batches) * n_batches
    batches = x[len(x) - n:].reshape(n_batches, -1, *x.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def geweke_z(forward: np.ndarray, chain: np.ndarray, n_batches: int = 50) -> np.ndarray:
    forward = np.asarray(forward, dtype=float)
    chain = np.asarray(chain, dtype=float)
    se_f = forward.std(axis=0, ddof=1) / np.sqrt(len(forward))
    se_c = batch_means_se(chain, n_batches)
    diff = forward.mean(axis=0) - chain.mean(axis=0)
    se = np.sqrt(se_f**2 + se_c**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))
    return z


def getting_it_right(
    prior_draw: Callable[[np.random.Generator], object],
    simulate: Callable[[object, np.random.Generator], object],
    gibbs: Callable[[object, object, np.random.Generator], object],
    statistics: Callable[[object, object], np.ndarray],
    n_rounds: int,
    rng: np.random.Generator,
):
    """Run both simulators and return (forward_stats, chain_stats).

    ``simulate(params, rng)`` returns data and ``gibbs(params, data, rng)``
    returns the updated parameters; ``statistics(params, data)`` maps a
    joint draw to a vector.
    """
    forward = []
    for _ in range(n_rounds):
        params = prior_draw(rng)
        forward.append(statistics(params, simulate(params, rng)))

    chain = []
    params = prior_draw(rng)
    for _ in range(n_rounds):
        data = simulate(params, rng)
        params = gibbs(params, data, rng)
        chain.append(statistics(params, data))
    return np.array(forward), np.array(chain)
