"""Information criteria and predictive loss for fitted chains.

Three families, all cheaper than marginal likelihoods and all "smaller is
better":

* ``dic`` -- deviance at the posterior-mode estimate plus twice an effective
  -parameter count, measured either as twice the gap between the mode's and
  the average log-likelihood (variant 1) or twice the posterior variance of
  the log-likelihood (variant 2).
* ``waic`` -- the data partitioned by individual: minus twice the sum of log
  posterior-mean per-individual likelihoods, plus twice a penalty measured
  per individual by the log-mean/mean-log gap (1), the variance of the
  log-likelihood (2), or twice its mean absolute deviation (3).
* ``posterior_predictive_loss`` -- one replicate dataset per retained draw;
  the loss is the squared distance between data and replicate means plus the
  total replicate variance, summed over every binary cell of both capture
  lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError
from .marglik import MapEstimate
from .mcmc import Chain
from .model import CaptureDataset
from .simulate import simulate_histories

VARIANTS = ("DIC1", "DIC2", "WAIC1", "WAIC2", "WAIC3", "PPL")


@dataclass(frozen=True)
class CriterionResult:
    """A model-selection criterion value split into fit and complexity parts.

    ``value = fit_term + penalty``; the penalty holds the full additive
    complexity term (twice the effective parameter count for DIC/WAIC, the
    total replicate variance for the predictive loss).
    """

    criterion: str
    value: float
    fit_term: float
    penalty: float


def dic(chain: Chain, map_estimate: MapEstimate, variant: int = 1) -> CriterionResult:
    """Deviance information criterion anchored at the refined posterior mode.

    ``DIC = -2 loglik(mode) + 2 p`` with ``p`` either twice the gap between
    the mode log-likelihood and the posterior mean log-likelihood (variant
    1) or twice the posterior variance of the log-likelihood (variant 2).
    """
    if variant not in (1, 2):
        raise ValueError(f"dic variant must be 1 or 2, got {variant}")
    mean_ll = float(chain.loglik.mean())
    if variant == 1:
        p = 2.0 * (map_estimate.loglik - mean_ll)
    else:
        p = 2.0 * float(chain.loglik.var())
    fit = -2.0 * map_estimate.loglik
    return CriterionResult(f"DIC{variant}", fit + 2.0 * p, fit, 2.0 * p)


def waic(chain: Chain, variant: int = 1) -> CriterionResult:
    """Widely applicable information criterion over the per-individual cache.

    The fit term is ``-2 sum_i log(mean over draws of the likelihood of
    individual i)`` (log-mean by log-sum-exp); the penalty is twice
    ``p_WAIC`` with ``p`` summed over individuals from, per variant:
    1. twice the gap between log-mean-likelihood and mean log-likelihood;
    2. the population variance of the log-likelihood;
    3. twice its mean absolute deviation from the mean.
    """
    if variant not in (1, 2, 3):
        raise ValueError(f"waic variant must be 1, 2, or 3, got {variant}")
    ll = chain.perind  # (n_draws, M)
    dead = np.isneginf(ll).all(axis=0)
    if dead.any():
        row = int(np.flatnonzero(dead)[0])
        raise NumericalError(
            f"individual {row} has zero likelihood in every draw; "
            "its log posterior-mean likelihood is undefined"
        )
    n = chain.n_draws
    log_mean_lik = logsumexp(ll, axis=0) - math.log(n)  # (M,)
    mean_ll = ll.mean(axis=0)
    fit = -2.0 * float(log_mean_lik.sum())
    if variant == 1:
        p = 2.0 * float((log_mean_lik - mean_ll).sum())
    elif variant == 2:
        p = float(ll.var(axis=0).sum())
    else:
        p = 2.0 * float(np.abs(ll - mean_ll).mean(axis=0).sum())
    return CriterionResult(f"WAIC{variant}", fit + 2.0 * p, fit, 2.0 * p)


def posterior_predictive_loss(
    chain: Chain, data: CaptureDataset, seed: int = 0
) -> CriterionResult:
    """Squared-error posterior predictive loss over all binary capture cells.

    Simulates one replicate pair of capture lists per retained draw, at that
    draw's scalars and latent state.  Writing q for the per-cell replicate
    mean, the loss is ``sum (y - q)^2 + sum q (1 - q)`` over the 2 M J K
    cells of both lists (the variance term uses the population form, exact
    for binary replicates).
    """
    if chain.n_draws == 0:
        raise ValueError("cannot compute predictive loss from an empty chain")
    rng = np.random.default_rng(seed)
    count1 = np.zeros(data.y1.shape, dtype=np.int64)
    count2 = np.zeros(data.y2.shape, dtype=np.int64)
    for d in range(chain.n_draws):
        rep1, rep2 = simulate_histories(
            chain.model,
            chain.params_at(d),
            chain.z[d],
            chain.u[d],
            chain.s[d],
            chain.perm[d].astype(np.int64),
            data.traps,
            data.n_occasions,
            rng,
        )
        count1 += rep1
        count2 += rep2
    mean1 = count1 / chain.n_draws
    mean2 = count2 / chain.n_draws
    fit = float(((data.y1 - mean1) ** 2).sum() + ((data.y2 - mean2) ** 2).sum())
    penalty = float((mean1 * (1.0 - mean1)).sum() + (mean2 * (1.0 - mean2)).sum())
    return CriterionResult("PPL", fit + penalty, fit, penalty)
