"""scikit-learn style facade for the sampler."""

import numpy as np
from sklearn.base import BaseEstimator

from .engine import RunConfig, run_apps
from .potentials import LearnedPotential, RolloutConfig, RolloutPotential
from .proposal import ProposalConfig


class APPSSampler(BaseEstimator):
    """Sampler with estimator-style parameters.

    There is nothing to fit: ``sample(model)`` draws completions.  Parameters
    are exposed through ``get_params``/``set_params`` so that the sampler can
    be cloned and swept like any estimator.
    """

    def __init__(self, alpha=4.0, block_size=16, n_particles=32, min_particles=8, max_tokens=3072, temperature=0.25,
                 eta=0.5, apf_mode="none", n_rollouts=2, horizon=16, ess_threshold=0.5, resample_scheme="systematic",
                 correction_mode="heuristic", elite_preservation=False, dynamic_allocation=False,
                 finalize_rule="weighted-sample", head=None, random_state=0):
        self.alpha = alpha
        self.block_size = block_size
        self.n_particles = n_particles
        self.min_particles = min_particles
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.eta = eta
        self.apf_mode = apf_mode
        self.n_rollouts = n_rollouts
        self.horizon = horizon
        self.ess_threshold = ess_threshold
        self.resample_scheme = resample_scheme
        self.correction_mode = correction_mode
        self.elite_preservation = elite_preservation
        self.dynamic_allocation = dynamic_allocation
        self.finalize_rule = finalize_rule
        self.head = head
        self.random_state = random_state

    def run_config(self, seed=None):
        return RunConfig(
            alpha=self.alpha, block_size=self.block_size, max_particles=self.n_particles,
            min_particles=min(self.min_particles, self.n_particles), max_tokens=self.max_tokens,
            proposal=ProposalConfig(self.temperature), apf_mode=self.apf_mode, apf_strength=self.eta,
            ess_threshold=self.ess_threshold, resample_scheme=self.resample_scheme,
            correction_mode=self.correction_mode, elite_preservation=self.elite_preservation,
            dynamic_allocation=self.dynamic_allocation, finalize_rule=self.finalize_rule,
            seed=self.random_state if seed is None else seed,
        )

    def potential(self):
        if self.apf_mode == "rollout":
            return RolloutPotential(RolloutConfig(self.n_rollouts, self.horizon))
        if self.apf_mode == "learned":
            return LearnedPotential(self.head)
        return None

    def fit(self, X=None, y=None):
        """No-op, present for pipeline compatibility."""
        return self

    def run(self, model, prompt=(), seed=None):
        """Full run result (completion, population, trace)."""
        return run_apps(model, prompt, self.run_config(seed), self.potential())

    def sample(self, model, prompt=(), n_samples=1):
        """``n_samples`` completions from runs seeded ``random_state + k``."""
        return [self.run(model, prompt, self.random_state + k).completion for k in range(n_samples)]
