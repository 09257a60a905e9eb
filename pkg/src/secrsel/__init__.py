"""Spatial capture-recapture with two collocated detector lists and partial identity.

Modules cover the full pipeline: data simulation under a known truth
(`simulate`), hierarchical model likelihoods (`model`), Metropolis-within-Gibbs
fitting (`mcmc`), marginal-likelihood estimation (`marglik`), information
criteria and predictive loss (`criteria`), the replicated selection study
(`study`), file formats (`io`), and a command line front end (`cli`).
"""

__version__ = "0.1.0"
