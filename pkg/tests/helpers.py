"""Shared test plumbing."""

import math

import numpy as np


class BernoulliModel:
    """One-parameter two-token model with p(token 1) = sigmoid(phi).

    Implements just enough of the generator protocol for the Fisher
    estimator and the enumeration oracle; its exact Fisher is the
    closed form sigma * (1 - sigma).
    """

    def __init__(self, phi):
        self.phi = float(phi)
        self.vocab = ["t0", "t1"]
        self.param_count = 1

    @property
    def p1(self):
        return 1.0 / (1.0 + math.exp(-self.phi))

    def exact_fisher(self):
        return self.p1 * (1.0 - self.p1)

    def model_digest(self):
        return f"bernoulli-{self.phi}"

    def next_token_logprobs(self, history):
        return np.log([1.0 - self.p1, self.p1])

    def sample_segment(self, history, settings, rng):
        return [int(rng.random() < self.p1) for _ in range(settings.tokens_per_segment)]

    def adapter_gradient(self, batch):
        # d log p(1)/dphi = 1 - p1 ; d log p(0)/dphi = -p1
        total = 0.0
        for _, target in batch:
            for y in target:
                total += (1.0 - self.p1) if y == 1 else -self.p1
        return np.array([-total / len(batch)])


class ZeroFeatureMap:
    """Feature map that is identically zero; gradients vanish everywhere."""

    kind = "zero"
    order = 0
    context_window = 0

    def __init__(self, dimension):
        self.dimension = dimension

    def active_indices(self, history):
        return []

    def __call__(self, history):
        return np.zeros(self.dimension)


class FixedScorer:
    """Returns a canned score per text (default for unknown texts)."""

    kind = "fixed"

    def __init__(self, scorer_id, table=None, default=0.0, role="both"):
        self.id = scorer_id
        self.role = role
        self.table = dict(table or {})
        self.default = default

    def score(self, text):
        return self.table.get(text, self.default)
