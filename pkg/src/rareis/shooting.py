"""Forward shooting solver for the value-function BSDE on a fixed horizon.

The scalar Y_0 and per-step controls Z_n (small MLPs or linear expansions)
are trained by stochastic gradient descent on the terminal mismatch

    loss = mean |Y_eta - g(X_eta)|^2,

where Y follows the explicit recursion
Y_{n+1} = Y_n - dt h(X_n, Y_n, Z_n) + sqrt(dt) Z_n . xi_{n+1}.  Gradients are
accumulated by hand through the unrolled recursion; no autodiff involved.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .approximators import BasisSet, MlpBlock, mlp_eval, mlp_forward, mlp_param_grads
from .functionals import CostSpec
from .sde import SdeModel, StopRule, TrajectoryBatch, simulate_batch


@dataclass(frozen=True)
class ShootingConfig:
    """Training configuration for the shooting solver.

    ``learning_rate`` is either a positive constant or a callable mapping the
    gradient-step index to a positive step size (for plain SGD a constant
    keeps the usual divergent-sum condition).  With ``controlled_forward`` the
    forward minibatches are simulated with the drift u = -Z of the current
    parameters (treated as data), and the Y recursion uses the matching
    drifted driver.
    """

    M_batch: int
    n_steps: int
    dt: float
    x0: Union[float, np.ndarray]
    optimizer: str = "adam"                 # or "sgd"
    learning_rate: Union[float, Callable[[int], float]] = 1e-2
    max_gradient_steps: int = 2000
    controlled_forward: bool = False
    z_parametrisation: str = "mlp"          # or "basis"
    hidden: int = 32
    basis: Optional[BasisSet] = None        # basis mode; default: constant
    target_loss: Optional[float] = None     # optional early stop
    divergence_loss: float = 1e6

    def __post_init__(self):
        if self.M_batch < 1 or self.n_steps < 1:
            raise ValueError("M_batch and n_steps must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.z_parametrisation not in ("mlp", "basis"):
            raise ValueError(f"unknown z_parametrisation {self.z_parametrisation!r}")
        if not callable(self.learning_rate) and self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def rate(self, step: int) -> float:
        lr = self.learning_rate(step) if callable(self.learning_rate) \
            else self.learning_rate
        if lr <= 0:
            raise ValueError(f"learning rate at step {step} must be positive")
        return float(lr)


class ShootingState:
    """Trainable parameters plus training history.

    ``theta_y`` is the current estimate of the value at the initial state;
    ``z_blocks[n]`` parametrizes Z_n either as an :class:`MlpBlock` or as a
    coefficient matrix (K, m) over ``basis``.
    """

    def __init__(self, config: ShootingConfig, theta_y, z_blocks, basis=None):
        self.config = config
        self.theta_y = np.asarray(theta_y, dtype=float).reshape(())
        self.z_blocks = z_blocks
        self.basis = basis
        self.loss_history: List[float] = []
        self.diverged = False
        self.notes: List[str] = []

    @classmethod
    def init(cls, config: ShootingConfig, model: SdeModel, seed):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(7,))))
        if config.z_parametrisation == "mlp":
            blocks = [MlpBlock.init(rng, model.dim, model.noise_dim, config.hidden)
                      for _ in range(config.n_steps)]
            basis = None
        else:
            basis = config.basis or BasisSet.constant(model.dim)
            blocks = [np.zeros((basis.K, model.noise_dim))
                      for _ in range(config.n_steps)]
        return cls(config, 0.0, blocks, basis)

    def z_eval(self, n: int, x) -> np.ndarray:
        if self.config.z_parametrisation == "mlp":
            return mlp_eval(self.z_blocks[n], x)
        return self.basis.design_matrix(x) @ self.z_blocks[n]

    def policy(self):
        """Forward drift u(x, n) = -Z_n(x) under the current parameters."""
        def u(x, n):
            return -self.z_eval(n, x)
        return u

    # flat parameter views, used by the optimizers and finite-difference tests
    def param_arrays(self) -> List[np.ndarray]:
        out = [self.theta_y]
        for blk in self.z_blocks:
            out.extend(blk.params() if isinstance(blk, MlpBlock) else [blk])
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_flat_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        i = 0
        for p in self.param_arrays():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != vec.size:
            raise ValueError("parameter vector has wrong length")


@dataclass
class ShootingGradient:
    theta_y: float
    blocks: List
    loss: float

    def flat(self) -> np.ndarray:
        parts = [np.array([self.theta_y])]
        for blk in self.blocks:
            parts.append(blk.flat() if isinstance(blk, MlpBlock) else blk.ravel())
        return np.concatenate(parts)


def _forward_pass(state: ShootingState, batch: TrajectoryBatch, cost: CostSpec,
                  controlled: bool):
    M, m = batch.M, batch.noise_dim
    dt, sqdt = batch.dt, math.sqrt(batch.dt)
    n_run = min(state.config.n_steps, batch.n_max)
    Y = np.full(M, float(state.theta_y))
    caches = []
    for n in range(n_run):
        act = n < batch.exit_index
        x_n = batch.states[:, n, :]
        if state.config.z_parametrisation == "mlp":
            z, cache = mlp_forward(state.z_blocks[n], x_n)
        else:
            phi = state.basis.design_matrix(x_n)
            z, cache = phi @ state.z_blocks[n], phi
        v = batch.controls[:, n, :] if controlled else None
        h = -0.5 * np.sum(z * z, axis=1) + cost.running(x_n)
        if v is not None:
            h = h - np.sum(z * v, axis=1)
        incr = -dt * h + sqdt * np.sum(z * batch.noises[:, n, :], axis=1)
        Y = Y + incr * act
        caches.append((act, x_n, z, v, cache))
    return Y, caches


def forward_y(state: ShootingState, batch: TrajectoryBatch, cost: CostSpec,
              controlled: Optional[bool] = None) -> np.ndarray:
    """Terminal values Y_eta of the shooting recursion; shape (M,).

    Every trajectory starts at Y_0 = theta_y and is iterated to its own
    horizon.  ``controlled=None`` follows the config's forward mode.
    """
    if controlled is None:
        controlled = state.config.controlled_forward
    Y, _ = _forward_pass(state, batch, cost, controlled)
    return Y


def loss(state: ShootingState, batch: TrajectoryBatch, cost: CostSpec,
         controlled: Optional[bool] = None) -> float:
    """Mean squared terminal mismatch; zero exactly at the solution."""
    Y = forward_y(state, batch, cost, controlled)
    g = cost.terminal(batch.terminal_states())
    return float(np.mean((Y - g) ** 2))


def gradient(state: ShootingState, batch: TrajectoryBatch, cost: CostSpec,
             controlled: Optional[bool] = None) -> ShootingGradient:
    """Exact gradient of the minibatch loss through the unrolled recursion.

    The driver has no y-dependence, so the adjoint of Y is constant along
    each path: a = 2 (Y_eta - g) / M.  Each step contributes
    dY/dZ_n = dt (Z_n + v_n) + sqrt(dt) xi_{n+1} on its active rows.
    """
    if controlled is None:
        controlled = state.config.controlled_forward
    dt, sqdt = batch.dt, math.sqrt(batch.dt)
    Y, caches = _forward_pass(state, batch, cost, controlled)
    g = cost.terminal(batch.terminal_states())
    mismatch = Y - g
    a = 2.0 * mismatch / batch.M
    block_grads = []
    for n, (act, x_n, z, v, cache) in enumerate(caches):
        dz = dt * (z + (v if v is not None else 0.0)) + sqdt * batch.noises[:, n, :]
        upstream = (a * act)[:, None] * dz
        if state.config.z_parametrisation == "mlp":
            block_grads.append(mlp_param_grads(state.z_blocks[n], cache, upstream))
        else:
            block_grads.append(cache.T @ upstream)
    return ShootingGradient(theta_y=float(np.sum(a)), blocks=block_grads,
                            loss=float(np.mean(mismatch ** 2)))


class SgdOptimizer:
    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float):
        for p, g in zip(params, grads):
            p -= lr * g


class AdamOptimizer:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _grad_arrays(grad: ShootingGradient) -> List[np.ndarray]:
    out = [np.asarray(grad.theta_y)]
    for blk in grad.blocks:
        out.extend(blk.params() if isinstance(blk, MlpBlock) else [blk])
    return out


def train(model: SdeModel, cost: CostSpec, config: ShootingConfig,
          seed) -> ShootingState:
    """Stochastic gradient descent on fresh minibatches of forward paths.

    Each gradient step simulates a new batch (uncontrolled, or drifted by
    -Z of the current parameters when ``controlled_forward``), computes the
    exact minibatch gradient, and applies the configured optimizer.  Training
    halts with a flag if the loss turns non-finite or exceeds the divergence
    threshold; the partial history is kept.
    """
    state = ShootingState.init(config, model, seed)
    stop = StopRule(None, config.n_steps)
    opt = AdamOptimizer() if config.optimizer == "adam" else SgdOptimizer()
    for i in range(config.max_gradient_steps):
        policy = state.policy() if config.controlled_forward else None
        batch = simulate_batch(model, policy, stop, config.dt, config.M_batch,
                               (seed, i), config.x0)
        grad = gradient(state, batch, cost)
        state.loss_history.append(grad.loss)
        if not math.isfinite(grad.loss) or grad.loss > config.divergence_loss:
            state.diverged = True
            state.notes.append(f"training halted at step {i}: loss={grad.loss!r}")
            break
        opt.step(state.param_arrays(), _grad_arrays(grad), config.rate(i))
        if config.target_loss is not None and grad.loss < config.target_loss:
            break
    return state
