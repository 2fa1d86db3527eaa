"""
Adam ascent with per-group learning rates, and learning-rate selection.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class LearningRateSelectionError(RuntimeError):
    """No candidate learning rate produced a finite objective."""


@dataclass
class AdamConfig:
    """Adam hyperparameters.

    ``group_scale`` multiplies ``base_lr`` per parameter group; groups not
    listed use ``base_lr`` itself. By default the latent-covariance group
    (``"precision"``) moves at ``sigma_lr_factor * base_lr``.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3
    base_lr: float = 0.1
    sigma_lr_factor: float = 0.1
    sigma_group: str = "precision"

    def __post_init__(self):
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.base_lr > 0 or not self.sigma_lr_factor > 0:
            raise ValueError("learning rates must be positive")

    def lr(self, group):
        scale = self.sigma_lr_factor if group == self.sigma_group else 1.0
        return self.base_lr * scale


@dataclass
class AdamState:
    """First (``v``) and second (``r``) moment accumulators per group."""

    v: dict = field(default_factory=dict)
    r: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, grads):
        return cls(
            {k: np.zeros_like(g, dtype=float) for k, g in grads.items()},
            {k: np.zeros_like(g, dtype=float) for k, g in grads.items()},
            0,
        )


def adam_step(state, grads, cfg):
    """One Adam ascent step.

    Parameters
    ----------
    state : AdamState
        Moments from the previous step (empty on the first call).
    grads : dict of str -> array
        Gradient of the objective for each parameter group.
    cfg : AdamConfig

    Returns
    -------
    deltas : dict of str -> array
        Amounts to *add* to each group.
    state : AdamState
        Updated moments; the input state is not modified.
    """
    if state.t == 0 and not state.v:
        state = AdamState.zeros_like(grads)
    if set(grads) != set(state.v):
        raise ValueError(f"gradient groups {sorted(grads)} do not match state {sorted(state.v)}")
    t = state.t + 1
    v, r, deltas = {}, {}, {}
    for k, g in grads.items():
        g = np.asarray(g, dtype=float)
        if g.shape != state.v[k].shape:
            raise ValueError(f"shape mismatch for group {k!r}: {g.shape} vs {state.v[k].shape}")
        v[k] = cfg.beta1 * state.v[k] + (1 - cfg.beta1) * g
        r[k] = cfg.beta2 * state.r[k] + (1 - cfg.beta2) * g * g
        v_hat = v[k] / (1 - cfg.beta1**t)
        r_hat = r[k] / (1 - cfg.beta2**t)
        deltas[k] = cfg.lr(k) * v_hat / (np.sqrt(r_hat) + cfg.epsilon)
    return deltas, AdamState(v, r, t)


DEFAULT_LR_GRID = (0.01, 0.05, 0.1, 0.5)


def select_learning_rate(candidates, fit_fn, evaluate):
    """Pick the learning rate whose short fit scores highest.

    Parameters
    ----------
    candidates : sequence of float
    fit_fn : callable
        ``fit_fn(lr)`` runs the optimizer from a common starting point and
        returns whatever ``evaluate`` accepts.
    evaluate : callable
        Maps the result of ``fit_fn`` to an objective value (higher is better).

    Returns
    -------
    chosen : float
    scores : dict of float -> float
        Objective for every candidate (``nan``/``-inf`` for failures).

    Ties go to the smaller rate; non-finite scores are excluded.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate learning rates")
    if len(candidates) == 1:
        return candidates[0], {candidates[0]: float("nan")}
    scores = {}
    for lr in candidates:
        try:
            with np.errstate(all="ignore"):
                scores[lr] = float(evaluate(fit_fn(lr)))
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            logger.info("learning rate %g failed: %s", lr, exc)
            scores[lr] = float("nan")
    finite = [lr for lr in sorted(candidates) if math.isfinite(scores[lr])]
    if not finite:
        raise LearningRateSelectionError("every candidate learning rate diverged")
    best = max(finite, key=lambda lr: (scores[lr], -lr))
    return best, scores
