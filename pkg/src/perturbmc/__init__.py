"""Exact and perturbed MCMC samplers with finite-state oracles.

Modules:

* ``densities``: log-targets and bounded perturbations of them
* ``samplers``: RWM, MALA and parallel tempering
* ``finite_oracle``: exact finite-chain quantities (gaps, norms, divergences)
* ``diagnostics``: autocorrelation time, ESS, burn-in, error bounds
* ``inverse_problem``: predator-prey posterior with an RK2 forward model
* ``runner`` / ``cli``: config-driven experiments
"""

__version__ = "0.1.0"
