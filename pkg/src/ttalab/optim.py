"""Update rules for the adapter: preconditioned, SGD, AdamW.

All rules are pure functions of (state, phi, g) returning a StepOutcome;
gradient clipping and delta capping are separate so the episode loop can
apply them in the documented order (clip the gradient, take the rule step,
cap the step). The closed-form trust-region step solves

    minimize g . delta   subject to   (1/2) delta^T I delta <= eps

for diagonal I, giving delta* = -eta * I^{-1} g with
eta = sqrt(2 eps / (g^T I^{-1} g)); the constraint is tight at delta*.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_LR = {"precond": 1e-3, "sgd": 5e-4, "adamw": 3e-4}


@dataclass
class UpdateRuleConfig:
    kind: str = "precond"
    learning_rate: float | None = None
    steps: int = 10
    clip_coef: float = 1.0
    max_delta_norm: float = 0.25
    lambda_reg: float = 1e-3
    trust_region_eps: float | None = None
    precond_max: int | None = 384
    flush_every: int = 1

    def validate(self) -> None:
        if self.kind not in _DEFAULT_LR:
            raise ValueError(f"unknown update kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.steps < 1 or self.flush_every < 1:
            raise ValueError("steps and flush_every must be >= 1")
        if self.clip_coef <= 0 or self.max_delta_norm <= 0:
            raise ValueError("clip_coef and max_delta_norm must be > 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.trust_region_eps is not None and self.trust_region_eps <= 0:
            raise ValueError("trust_region_eps must be > 0 when set")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return _DEFAULT_LR[self.kind]


@dataclass
class StepOutcome:
    phi: np.ndarray
    delta: np.ndarray
    grad_norm: float
    wall_time: float


def clip_gradient(g: np.ndarray, c: float) -> np.ndarray:
    """g * min(1, c / ||g||); direction preserved, zero stays zero."""
    if c <= 0:
        raise ValueError("clip coefficient must be > 0")
    norm = float(np.linalg.norm(g))
    if norm <= c or norm == 0.0:
        return np.array(g, copy=True)
    return g * (c / norm)


def cap_delta(delta: np.ndarray, max_delta_norm: float) -> np.ndarray:
    """Same rescaling as clip_gradient, applied to a step."""
    return clip_gradient(delta, max_delta_norm)


def _outcome(phi, delta, g, t0) -> StepOutcome:
    return StepOutcome(phi=phi + delta, delta=delta,
                       grad_norm=float(np.linalg.norm(g)),
                       wall_time=time.perf_counter() - t0)


def sgd_step(phi: np.ndarray, g: np.ndarray, lr: float) -> StepOutcome:
    t0 = time.perf_counter()
    return _outcome(phi, -lr * g, g, t0)


def precond_step(phi: np.ndarray, g: np.ndarray, preconditioner: np.ndarray,
                 lr: float) -> StepOutcome:
    """phi' = phi - lr * (P o g), elementwise preconditioning."""
    if preconditioner.shape != g.shape:
        raise ValueError(
            f"preconditioner shape {preconditioner.shape} does not match "
            f"gradient shape {g.shape}")
    t0 = time.perf_counter()
    return _outcome(phi, -lr * (preconditioner * g), g, t0)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adamw_step(state: AdamWState, phi: np.ndarray, g: np.ndarray, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps_num: float = 1e-8,
               weight_decay: float = 0.0) -> StepOutcome:
    """Bias-corrected AdamW with decoupled weight decay.

    With eps_num = 0 the first step from zero state is exactly
    -lr * sign(g) (0/0 coordinates resolve to 0), which is the sign-step
    behavior the preconditioned rule is built to avoid on cold starts.
    """
    t0 = time.perf_counter()
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    denom = np.sqrt(v_hat) + eps_num
    ratio = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom != 0.0)
    delta = -lr * (ratio + weight_decay * phi)
    return _outcome(phi, delta, g, t0)


@dataclass
class TrustRegionStep:
    delta: np.ndarray
    eta: float
    degenerate: bool = False


def trust_region_step(g: np.ndarray, fisher_diag: np.ndarray,
                      eps: float) -> TrustRegionStep:
    """Closed-form minimizer of g.delta on the Fisher ellipsoid of radius eps.

    Returns delta* = -eta * g / I and eta = sqrt(2 eps / sum(g^2 / I));
    a zero gradient yields the zero step flagged degenerate (eta undefined).
    """
    if eps <= 0:
        raise ValueError("trust region radius must be > 0")
    fisher_diag = np.asarray(fisher_diag, dtype=np.float64)
    if fisher_diag.shape != np.shape(g):
        raise ValueError("fisher diagonal and gradient shapes differ")
    if np.any(fisher_diag <= 0):
        raise ValueError("fisher diagonal must be positive")
    quad = float(np.dot(g, g / fisher_diag))
    if quad == 0.0:
        return TrustRegionStep(delta=np.zeros_like(fisher_diag),
                               eta=float("nan"), degenerate=True)
    eta = math.sqrt(2.0 * eps / quad)
    return TrustRegionStep(delta=-eta * (g / fisher_diag), eta=eta)
