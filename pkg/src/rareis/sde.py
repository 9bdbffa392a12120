"""Euler-Maruyama simulation of (optionally controlled) diffusions with stopping.

The central object is :func:`simulate_batch`, which integrates M trajectories of

    dX = (b(X) + sigma(X) u(X, n)) dt + sigma(X) dB

up to a stopping rule (first exit from an open set, capped at ``n_max`` steps)
and records states, noises, applied controls and exit bookkeeping in a
:class:`TrajectoryBatch`.

Randomness is counter-based: trajectory ``i`` of a run with seed ``s`` draws
its noise from a Philox stream keyed by ``(s, i)``, so results are bit-identical
regardless of chunking or execution order.  Pass ``traj_offset`` to continue
the same logical run across several calls.
"""

from dataclasses import dataclass
from typing import Callable, Optional
import math
import warnings

import numpy as np


class SimulationWarning(UserWarning):
    """Raised for suspicious but non-fatal simulation conditions."""


_PATH_STREAM = 0
_INIT_STREAM = 1


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion pair defining an SDE.

    Parameters
    ----------
    dim : int
        State dimension d.
    drift : callable
        Maps an array of states with shape (..., d) to drifts of shape (..., d).
    diffusion : callable
        Maps states (..., d) to diffusion matrices (..., d, m).
    noise_dim : int
        Number of driving Brownian motions m.
    time_augmented : bool
        If True, the last state coordinate is clock time: it advances by
        exactly dt per step and carries no noise.  Use :func:`with_time` to
        build such a model from an autonomous one.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    noise_dim: int
    time_augmented: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ValueError("dim and noise_dim must be positive")


@dataclass(frozen=True)
class StopRule:
    """Exit rule: first grid index outside the open set, capped at n_max.

    ``in_domain`` is a vectorized predicate mapping states (..., d) to booleans;
    ``in_domain=None`` means a pure deterministic horizon (no spatial boundary),
    in which case every trajectory runs exactly n_max steps and the
    survival-fraction warning does not apply.
    """

    in_domain: Optional[Callable[[np.ndarray], np.ndarray]]
    n_max: int

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be positive")

    @property
    def horizon_only(self) -> bool:
        return self.in_domain is None


class TrajectoryBatch:
    """Immutable container for M simulated trajectories.

    Attributes
    ----------
    states : (M, n_max+1, d) array
        Trajectory states; frozen (constant) from the exit index onward.
    noises : (M, n_max, m) array
        Standard normal draws; ``noises[i, n]`` drives the update n -> n+1.
    controls : (M, n_max, m) array
        Controls applied at each step (zero where uncontrolled or stopped).
    exit_index : (M,) int array
        First grid index outside the domain, or n_max if none.
    exited : (M,) bool array
        True where the trajectory left the domain (rather than timing out).
    faulted : (M,) bool array
        True where a non-finite state aborted the trajectory.
    """

    def __init__(self, states, noises, controls, exit_index, exited, faulted,
                 dt, seed, traj_offset=0):
        self.states = states
        self.noises = noises
        self.controls = controls
        self.exit_index = exit_index
        self.exited = exited
        self.faulted = faulted
        self.dt = float(dt)
        self.seed = seed
        self.traj_offset = traj_offset
        for arr in (states, noises, controls, exit_index, exited, faulted):
            arr.setflags(write=False)

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def n_max(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def noise_dim(self) -> int:
        return self.noises.shape[2]

    @property
    def alive_mask(self) -> np.ndarray:
        """(M, n_max+1) booleans: alive strictly before exit, and at the exit
        step itself only if the trajectory genuinely exited."""
        steps = np.arange(self.n_max + 1)[None, :]
        eta = self.exit_index[:, None]
        return (steps < eta) | ((steps == eta) & self.exited[:, None])

    def terminal_states(self) -> np.ndarray:
        """(M, d) states at each trajectory's exit index."""
        return self.states[np.arange(self.M), self.exit_index]

    def timeout_fraction(self) -> float:
        return float(np.mean(~self.exited))


def brownian_motion(dim: int) -> SdeModel:
    """Standard Brownian motion in R^dim (zero drift, identity diffusion)."""
    eye = np.eye(dim)

    def drift(x):
        return np.zeros_like(x)

    def diffusion(x):
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim))

    return SdeModel(dim, drift, diffusion, dim)


def ornstein_uhlenbeck(mu: float, sigma: float) -> SdeModel:
    """One-dimensional dX = (mu - X) dt + sigma dB."""

    def drift(x):
        return mu - x

    def diffusion(x):
        return np.full(x.shape[:-1] + (1, 1), sigma)

    return SdeModel(1, drift, diffusion, 1)


def overdamped_langevin(grad_potential, sigma: float, dim: int = 1) -> SdeModel:
    """Gradient system dX = -grad U(X) dt + sigma dB with scalar noise level."""
    eye = sigma * np.eye(dim)

    def drift(x):
        return -grad_potential(x)

    def diffusion(x):
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim))

    return SdeModel(dim, drift, diffusion, dim)


def with_time(model: SdeModel) -> SdeModel:
    """Augment a model with a clock coordinate (last component, noiseless)."""
    d = model.dim

    def drift(x):
        b = model.drift(x[..., :d])
        clock = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([b, clock], axis=-1)

    def diffusion(x):
        sig = model.diffusion(x[..., :d])
        zero_row = np.zeros(x.shape[:-1] + (1, model.noise_dim))
        return np.concatenate([sig, zero_row], axis=-2)

    return SdeModel(d + 1, drift, diffusion, model.noise_dim,
                    time_augmented=True)


def euler_step(x, model: SdeModel, u, dt: float, xi):
    """One explicit Euler-Maruyama update.

    Returns ``x + dt (b(x) + sigma(x) u) + sqrt(dt) sigma(x) xi``.  Works on a
    single state of shape (d,) or a batch (..., d); ``u`` and ``xi`` must then
    have matching leading shape and trailing dimension m.  A non-finite result
    signals model blow-up and is the caller's responsibility to handle.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != model.noise_dim:
        raise ValueError("xi must have noise_dim entries")
    sig = model.diffusion(x)
    drift = model.drift(x) + np.einsum("...dm,...m->...d", sig, u)
    return x + dt * drift + math.sqrt(dt) * np.einsum("...dm,...m->...d", sig, xi)


def _path_generator(seed, index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_PATH_STREAM, index))
    return np.random.Generator(np.random.Philox(ss))


def _init_generator(seed, index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM, index))
    return np.random.Generator(np.random.Philox(ss))


def _draw_noises(seed, traj_offset, M, n_max, m):
    noises = np.empty((M, n_max, m))
    for i in range(M):
        gen = _path_generator(seed, traj_offset + i)
        noises[i] = gen.standard_normal((n_max, m))
    return noises


def _initial_states(x0, model, M, seed, traj_offset):
    if callable(x0):
        out = np.empty((M, model.dim))
        for i in range(M):
            gen = _init_generator(seed, traj_offset + i)
            out[i] = np.asarray(x0(gen), dtype=float).reshape(model.dim)
        return out
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        return np.broadcast_to(x0, (M, model.dim)).copy()
    if x0.shape != (M, model.dim):
        raise ValueError(f"x0 must have shape ({model.dim},) or ({M}, {model.dim})")
    return x0.copy()


def simulate_batch(model: SdeModel, policy, stop: StopRule, dt: float, M: int,
                   seed, x0, traj_offset: int = 0,
                   timeout_warn: float = 0.1) -> TrajectoryBatch:
    """Simulate M controlled Euler-Maruyama trajectories.

    Parameters
    ----------
    policy : callable or None
        ``policy(x, n) -> (len(x), m)`` control for the still-running
        trajectories at step n; None means the zero (uncontrolled) policy.
    x0 : array or callable
        Shared initial state (d,), per-trajectory states (M, d), or a sampler
        ``x0(rng) -> (d,)`` drawn from a dedicated per-trajectory stream.
    traj_offset : int
        Global index of the first trajectory; lets chunked runs reproduce a
        single large run bit-exactly.
    timeout_warn : float
        Warn if more than this fraction of trajectories survives to the
        horizon (only for rules with a spatial boundary).

    Trajectories whose update turns non-finite are frozen at their last finite
    state and flagged in ``faulted``; the rest of the batch continues.
    """
    if M < 1:
        raise ValueError("M must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    d, m, n_max = model.dim, model.noise_dim, stop.n_max
    sqdt = math.sqrt(dt)

    noises = _draw_noises(seed, traj_offset, M, n_max, m)
    states = np.empty((M, n_max + 1, d))
    controls = np.zeros((M, n_max, m))
    exit_index = np.full(M, n_max, dtype=np.int64)
    exited = np.zeros(M, dtype=bool)
    faulted = np.zeros(M, dtype=bool)

    x = _initial_states(x0, model, M, seed, traj_offset)
    states[:, 0] = x
    running = np.ones(M, dtype=bool)
    if stop.in_domain is not None:
        inside = np.asarray(stop.in_domain(x), dtype=bool)
        out0 = running & ~inside
        exit_index[out0] = 0
        exited[out0] = True
        running &= inside

    for n in range(n_max):
        step_mask = running.copy()
        if step_mask.any():
            xa = x[step_mask]
            if policy is not None:
                u = np.asarray(policy(xa, n), dtype=float).reshape(xa.shape[0], m)
                controls[step_mask, n] = u
            else:
                u = np.zeros((xa.shape[0], m))
            sig = model.diffusion(xa)
            step = dt * (model.drift(xa) + np.einsum("...dm,...m->...d", sig, u)) \
                + sqdt * np.einsum("...dm,...m->...d", sig, noises[step_mask, n])
            if model.time_augmented:
                # keep the clock exact: a bare +dt increment, no drift round-off
                step[..., -1] = dt
            x_new = xa + step
            bad = ~np.isfinite(x_new).all(axis=1)
            if bad.any():
                idx = np.flatnonzero(step_mask)[bad]
                x_new[bad] = xa[bad]
                controls[idx, n] = 0.0
                faulted[idx] = True
                exit_index[idx] = n
                running[idx] = False
            x = x.copy()
            x[step_mask] = x_new
        states[:, n + 1] = x
        if stop.in_domain is not None and running.any():
            inside = np.asarray(stop.in_domain(x[running]), dtype=bool)
            if not inside.all():
                idx = np.flatnonzero(running)[~inside]
                exit_index[idx] = n + 1
                exited[idx] = True
                running[idx] = False
        if not running.any():
            if n + 1 < n_max:
                states[:, n + 2:] = x[:, None, :]
            break

    if not stop.horizon_only:
        timed_out = float(np.mean(~exited))
        if timed_out > timeout_warn:
            warnings.warn(
                f"{timed_out:.1%} of trajectories survived to the horizon "
                f"(n_max={n_max}); consider increasing the maximum simulation time",
                SimulationWarning, stacklevel=2)

    return TrajectoryBatch(states, noises, controls, exit_index, exited,
                           faulted, dt, seed, traj_offset)


def exit_statistics(batch: TrajectoryBatch):
    """Hit fraction and mean exit time of a batch.

    Returns ``(hit_fraction, mean_exit_time)`` where the mean is over exited
    trajectories only; it is NaN (undefined) when no trajectory exited.
    """
    hit_fraction = float(np.mean(batch.exited))
    if batch.exited.any():
        mean_exit = float(np.mean(batch.exit_index[batch.exited]) * batch.dt)
    else:
        mean_exit = math.nan
    return hit_fraction, mean_exit
