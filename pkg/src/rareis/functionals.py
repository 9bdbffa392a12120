"""Path functionals: work, Girsanov log-likelihood, and control inner products.

All time integrals use left-endpoint quadrature, consistent with the explicit
Euler scheme: an integral of ``f`` over a path stopped at index ``eta``
becomes ``dt * sum_{n < eta} f(X_n)``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sde import TrajectoryBatch


@dataclass(frozen=True)
class CostSpec:
    """Running cost f, terminal cost g and (optionally) its gradient.

    ``running_cost=None`` means f = 0.  ``terminal_gradient=None`` means the
    gradient is taken to be identically zero, which is the right convention
    for indicator-type terminal costs whose gradient vanishes almost
    everywhere.  Both callables are vectorized over leading axes:
    f, g map (..., d) -> (...), the gradient maps (..., d) -> (..., d).
    """

    terminal_cost: Callable[[np.ndarray], np.ndarray]
    running_cost: Optional[Callable[[np.ndarray], np.ndarray]] = None
    terminal_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    regularization_eps: float = 0.0

    def __post_init__(self):
        if self.regularization_eps < 0:
            raise ValueError("regularization_eps must be >= 0")

    def terminal(self, x):
        return np.asarray(self.terminal_cost(x), dtype=float)

    def running(self, x):
        if self.running_cost is None:
            return np.zeros(np.shape(x)[:-1])
        return np.asarray(self.running_cost(x), dtype=float)

    def terminal_grad(self, x):
        if self.terminal_gradient is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return np.asarray(self.terminal_gradient(x), dtype=float)


def indicator_log_cost(indicator, eps: float) -> CostSpec:
    """Terminal cost -log(1_C + eps) for a set indicator, running cost zero.

    With eps > 0 the cost is finite everywhere; with eps = 0 trajectories
    missing the set carry an infinite cost, which downstream estimators treat
    as zero weight.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")

    def g(x):
        ind = np.asarray(indicator(x), dtype=float)
        with np.errstate(divide="ignore"):
            return -np.log(ind + eps)

    return CostSpec(terminal_cost=g, regularization_eps=eps)


def work_functional(states, eta: int, cost: CostSpec, dt: float) -> float:
    """Work along a single trajectory: dt * sum_{n<eta} f(X_n) + g(X_eta).

    ``states`` has shape (n_steps+1, d) and ``eta`` is the exit index.  An
    infinite value is legitimate only for unregularized indicator costs.
    """
    states = np.asarray(states, dtype=float)
    w = float(cost.terminal(states[eta]))
    if cost.running_cost is not None and eta > 0:
        w += dt * float(np.sum(cost.running(states[:eta])))
    return w


def work_functionals(batch: TrajectoryBatch, cost: CostSpec) -> np.ndarray:
    """Vectorized :func:`work_functional` over a batch; shape (M,)."""
    w = cost.terminal(batch.terminal_states())
    if cost.running_cost is not None:
        f_vals = cost.running(batch.states[:, :-1, :])
        mask = np.arange(batch.n_max)[None, :] < batch.exit_index[:, None]
        w = w + batch.dt * np.sum(f_vals * mask, axis=1)
    return w


def girsanov_log_likelihood(controls, noises, eta: int, dt: float) -> float:
    """Log likelihood ratio of a controlled versus uncontrolled path.

    Discretizes -int u.dB - (1/2) int |u|^2 dt with dB ~ sqrt(dt) xi:

        -sum_{n<eta} u_n . sqrt(dt) xi_n  -  (dt/2) sum_{n<eta} |u_n|^2

    ``controls`` and ``noises`` have shape (n_steps, m) covering at least the
    first ``eta`` steps.
    """
    u = np.asarray(controls, dtype=float)[:eta]
    xi = np.asarray(noises, dtype=float)[:eta]
    if u.shape != xi.shape:
        raise ValueError("controls and noises must have matching shapes")
    return float(-np.sqrt(dt) * np.sum(u * xi) - 0.5 * dt * np.sum(u * u))


def girsanov_log_likelihoods(batch: TrajectoryBatch,
                             controls: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorized Girsanov log-likelihoods over a batch; shape (M,).

    Uses the batch's applied controls unless ``controls`` (M, n_steps, m)
    overrides them, e.g. to evaluate a control-variate process along an
    uncontrolled batch.
    """
    u = batch.controls if controls is None else np.asarray(controls, dtype=float)
    mask = (np.arange(batch.n_max)[None, :] < batch.exit_index[:, None])[..., None]
    u = u * mask
    stoch = np.sum(u * batch.noises, axis=(1, 2))
    quad = np.sum(u * u, axis=(1, 2))
    return -np.sqrt(batch.dt) * stoch - 0.5 * batch.dt * quad


def control_inner_product(v, z, eta: int, dt: float) -> float:
    """Left-endpoint quadrature of int v.z dt: dt * sum_{n<eta} v_n . z_n."""
    v = np.asarray(v, dtype=float)[:eta]
    z = np.asarray(z, dtype=float)[:eta]
    if v.shape != z.shape:
        raise ValueError("v and z must have matching shapes")
    return float(dt * np.sum(v * z))


def control_inner_products(batch: TrajectoryBatch, v: np.ndarray,
                           z: np.ndarray) -> np.ndarray:
    """Vectorized :func:`control_inner_product`; v, z shaped (M, n_steps, m)."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if v.shape != z.shape:
        raise ValueError("v and z must have matching shapes")
    mask = (np.arange(batch.n_max)[None, :] < batch.exit_index[:, None])[..., None]
    return batch.dt * np.sum(v * z * mask, axis=(1, 2))
