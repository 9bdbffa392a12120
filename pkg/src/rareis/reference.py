"""Analytic and finite-difference reference solutions used as oracles.

Contents: radial committor values and the conditioned (h-transform) drift for
Brownian motion between two spheres, the Ornstein-Uhlenbeck value function and
optimal control in closed form, a Crank-Nicolson solver for the double-well
exit-probability equation, and a finite-dimensional change-of-measure check.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .sde import SimulationWarning, StopRule, brownian_motion, simulate_batch


# ---------------------------------------------------------------------------
# radial committor between concentric spheres


@dataclass(frozen=True)
class CommittorSpec:
    """Brownian committor between |x| = a (inner) and |x| = c (outer)."""

    d: int
    a: float
    c: float
    eps: float = 0.0

    def __post_init__(self):
        if not 0 < self.a < self.c:
            raise ValueError("need 0 < a < c")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


def committor_value(r, spec: CommittorSpec):
    """Probability of hitting the outer sphere before the inner one.

    Solves h'' + (d-1)/r h' = 0 with h(a) = 0, h(c) = 1:
    linear for d = 1, logarithmic for d = 2, and
    (a^(2-d) - r^(2-d)) / (a^(2-d) - c^(2-d)) otherwise.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < spec.a - 1e-12) or np.any(r > spec.c + 1e-12):
        raise ValueError("r must lie in [a, c]")
    a, c, d = spec.a, spec.c, spec.d
    if d == 1:
        out = (r - a) / (c - a)
    elif d == 2:
        out = np.log(r / a) / np.log(c / a)
    else:
        p = 2.0 - d
        out = (a**p - r**p) / (a**p - c**p)
    return out if out.ndim else float(out)


def committor_radial_derivative(r, spec: CommittorSpec):
    """dh/dr of :func:`committor_value`; positive on (a, c)."""
    r = np.asarray(r, dtype=float)
    a, c, d = spec.a, spec.c, spec.d
    if d == 1:
        out = np.full_like(r, 1.0 / (c - a))
    elif d == 2:
        out = 1.0 / (r * np.log(c / a))
    else:
        p = 2.0 - d
        out = -p * r ** (p - 1.0) / (a**p - c**p)
    return out if out.ndim else float(out)


def committor_drift(x, spec: CommittorSpec):
    """Conditioned-process drift grad log(h + eps) for Brownian motion.

    Vectorized over rows: x (..., d) -> (..., d).  Radial by symmetry:
    h'(r) / (h(r) + eps) times the unit radial vector.
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    r_safe = np.clip(r, spec.a, spec.c)
    h = committor_value(r_safe, spec)
    hp = committor_radial_derivative(r_safe, spec)
    scale = hp / (np.asarray(h) + spec.eps) / np.maximum(r, 1e-300)
    return np.asarray(scale)[..., None] * x


def h_transform_hitting_test(spec: CommittorSpec, M: int, dt: float, seed,
                             r0=None, t_max=None) -> float:
    """Fraction of conditioned-drift trajectories exiting through the outer
    sphere; near one for small eps, up to discretization.

    Starts on the sphere of radius ``r0`` (default midway between a and c).
    Trajectories that neither exit nor finish by ``t_max`` count as misses.
    """
    if r0 is None:
        r0 = 0.5 * (spec.a + spec.c)
    if t_max is None:
        t_max = 2.0 * (spec.c**2 - spec.a**2) / spec.d
    n_max = int(math.ceil(t_max / dt - 1e-12))
    model = brownian_motion(spec.d)
    x0 = np.zeros(spec.d)
    x0[0] = r0

    def in_domain(x):
        r = np.linalg.norm(x, axis=-1)
        return (r > spec.a) & (r < spec.c)

    def policy(x, n):
        return committor_drift(x, spec)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SimulationWarning)
        batch = simulate_batch(model, policy, StopRule(in_domain, n_max),
                               dt, M, seed, x0)
    terminal_r = np.linalg.norm(batch.terminal_states(), axis=-1)
    hit_outer = batch.exited & (terminal_r >= spec.c)
    return float(np.mean(hit_outer))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck closed forms


@dataclass(frozen=True)
class OuSpec:
    """Exponential terminal functional exp(-alpha X_T) of dX = (mu-X)dt + sigma dB."""

    alpha: float
    mu: float
    sigma: float
    T: float


def ou_transition(x, t, spec: OuSpec):
    """Mean and variance of X_T given X_t = x (exact Gaussian law)."""
    decay = np.exp(t - spec.T)
    mean = (x - spec.mu) * decay + spec.mu
    var = 0.5 * spec.sigma**2 * (1.0 - decay**2)
    return mean, var


def ou_value(x, t, spec: OuSpec):
    """Value function -log E[exp(-alpha X_T) | X_t = x] in closed form."""
    decay = np.exp(t - spec.T)
    return spec.alpha * ((x - spec.mu) * decay + spec.mu) \
        - 0.25 * spec.alpha**2 * spec.sigma**2 * (1.0 - decay**2)


def ou_value_mgf(x, t, spec: OuSpec):
    """Same value via the Gaussian moment generating function of the
    transition law; independent cross-check of :func:`ou_value`."""
    mean, var = ou_transition(x, t, spec)
    return spec.alpha * mean - 0.5 * spec.alpha**2 * var


def ou_optimal_control(x, t, spec: OuSpec):
    """Optimal importance-sampling drift -sigma alpha e^(t-T); x-independent."""
    return -spec.sigma * spec.alpha * np.exp(np.asarray(t, dtype=float) - spec.T)


def ou_euler_chain_value(x, spec: OuSpec, dt: float):
    """-log E[exp(-alpha X_n_max)] for the explicit Euler chain of the model.

    The Euler chain is Gaussian, so this is exact; it differs from
    :func:`ou_value` at t=0 by an O(dt) discretization bias and is the right
    reference for estimates computed on Euler trajectories.
    """
    n = round(spec.T / dt)
    decay = (1.0 - dt) ** n
    mean = (x - spec.mu) * decay + spec.mu
    var = spec.sigma**2 * dt * (1.0 - (1.0 - dt) ** (2 * n)) / (1.0 - (1.0 - dt) ** 2)
    return spec.alpha * mean - 0.5 * spec.alpha**2 * var


# ---------------------------------------------------------------------------
# double-well exit probability (1-d parabolic PDE)


@dataclass(frozen=True)
class DoubleWellSpec:
    """Exit of dX = -U'(X) dt + sigma dW from (-inf, 0) before time T,
    with U(x) = (x^2 - 1)^2; the PDE grid truncates the domain at x_left."""

    sigma: float
    T: float
    eps: float = 0.01
    x_left: float = -3.0

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return (x * x - 1.0) ** 2

    def grad_potential(self, x):
        x = np.asarray(x, dtype=float)
        return 4.0 * x * (x * x - 1.0)


def psi_from_regularized(psi_eps, eps):
    """Bare exit probability from its regularized counterpart: psi = psi^eps - eps."""
    return np.asarray(psi_eps) - eps


def regularized_from_psi(psi, eps):
    return np.asarray(psi) + eps


def value_from_regularized(v_eps, eps):
    """Bare value -log psi from the regularized value: -log(exp(-v_eps) - eps)."""
    return -np.log(np.exp(-np.asarray(v_eps)) - eps)


def regularized_from_value(v, eps):
    return -np.log(np.exp(-np.asarray(v)) + eps)


@dataclass
class PdeSolution:
    """Gridded solution of the exit-probability equation.

    ``psi[j, i]`` is the probability of exiting before T starting from
    ``x[i]`` at time ``t[j]``; ``value_eps = -log(psi + eps)`` and
    ``tilted_potential = U - sigma^2 log(psi + eps)``.
    """

    spec: DoubleWellSpec
    x: np.ndarray
    t: np.ndarray
    psi: np.ndarray
    refinement_gap: float
    converged: bool

    @property
    def value_eps(self):
        return -np.log(self.psi + self.spec.eps)

    @property
    def tilted_potential(self):
        return self.spec.potential(self.x)[None, :] \
            - self.spec.sigma**2 * np.log(self.psi + self.spec.eps)

    def at(self, x_query, t_query=0.0):
        """Bilinear interpolation of psi at (x_query, t_query)."""
        j = np.searchsorted(self.t, t_query)
        j = min(max(j, 0), len(self.t) - 1)
        return float(np.interp(x_query, self.x, self.psi[j]))


def _cn_sweep(spec: DoubleWellSpec, nx: int, nt: int, rannacher: int = 4):
    # backward equation psi_t + 0.5 sigma^2 psi_xx + b psi_x = 0, b = -U'
    # Dirichlet psi(0, t) = 1, terminal psi(x, T) = 0, zero flux at x_left.
    # A few fully implicit startup steps damp the corner discontinuity at
    # (0, T) so Crank-Nicolson keeps its second-order convergence.
    x = np.linspace(spec.x_left, 0.0, nx)
    dx = x[1] - x[0]
    dt = spec.T / nt
    b = -spec.grad_potential(x)
    diff = 0.5 * spec.sigma**2
    lo = diff / dx**2 - b / (2.0 * dx)
    di = np.full(nx, -2.0 * diff / dx**2)
    hi = diff / dx**2 + b / (2.0 * dx)
    # zero-flux at x_left via reflected ghost node: psi_{-1} = psi_1
    lo_edge = 0.0
    hi_edge = hi[0] + lo[0]

    def banded(theta):
        ab = np.zeros((3, nx))
        ab[1, :] = 1.0 - theta * dt * di
        ab[0, 1:] = -theta * dt * hi[:-1]
        ab[2, :-1] = -theta * dt * lo[1:]
        ab[1, 0] = 1.0 - theta * dt * di[0]
        ab[0, 1] = -theta * dt * hi_edge
        # Dirichlet row: psi(0) = 1 (its superdiagonal neighbor entry
        # ab[0, nx-1] belongs to the last interior row and must stay)
        ab[1, nx - 1] = 1.0
        ab[2, nx - 2] = 0.0
        return ab

    def explicit_part(theta, psi):
        rhs = (1.0 + (1 - theta) * dt * di) * psi
        rhs[1:-1] += (1 - theta) * dt * (lo[1:-1] * psi[:-2] + hi[1:-1] * psi[2:])
        rhs[0] = (1.0 + (1 - theta) * dt * di[0]) * psi[0] \
            + (1 - theta) * dt * hi_edge * psi[1]
        rhs[nx - 1] = 1.0
        return rhs

    ab_cn = banded(0.5)
    ab_be = banded(1.0)
    psi = np.zeros(nx)
    snapshots = np.empty((nt + 1, nx))
    snapshots[nt] = psi
    for k in range(nt):
        theta_implicit = 1.0 if k < rannacher else 0.5
        ab = ab_be if k < rannacher else ab_cn
        rhs = explicit_part(theta_implicit, psi)
        psi = solve_banded((1, 1), ab, rhs)
        snapshots[nt - 1 - k] = psi
    t = np.linspace(0.0, spec.T, nt + 1)
    return x, t, snapshots


def pde_reference(spec: DoubleWellSpec, nx: int = 1201, nt: int = 1600,
                  check_refinement: bool = True, probe_x: float = -1.0) -> PdeSolution:
    """Crank-Nicolson solve of the exit-probability equation.

    When ``check_refinement`` is set, a half-resolution solve is compared at
    ``(probe_x, 0)``; disagreement above 1% flags the grid as unconverged.
    """
    x, t, psi = _cn_sweep(spec, nx, nt)
    gap = 0.0
    converged = True
    if check_refinement:
        xc, tc, psic = _cn_sweep(spec, nx // 2 + 1, nt // 2)
        fine = np.interp(probe_x, x, psi[0])
        coarse = np.interp(probe_x, xc, psic[0])
        gap = abs(fine - coarse) / max(abs(fine), 1e-300)
        converged = gap <= 0.01
        if not converged:
            warnings.warn(f"PDE grid not converged: refinement gap {gap:.2%} "
                          f"at x={probe_x}", UserWarning, stacklevel=2)
    return PdeSolution(spec, x, t, psi, gap, converged)


# ---------------------------------------------------------------------------
# finite-dimensional change of measure


@dataclass(frozen=True)
class GirsanovCheck:
    lhs: float
    rhs: float
    diff: float
    std_error: float
    z_score: float


def finite_dim_girsanov_check(b, sigma, u, f, N: int, seed) -> GirsanovCheck:
    """Monte Carlo check of E[f(X)] = E[f(X^u) exp(-u.B - |u|^2/2)] where
    X = b + sigma B and X^u = (b + sigma u) + sigma B for standard normal B.

    Both sides share the same draws of B, so the difference is exactly zero
    when u = 0 and the per-sample differences give a paired z-score otherwise.
    """
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d, m = sigma.shape
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    B = rng.standard_normal((N, m))
    X = b[None, :] + B @ sigma.T
    Xu = (b + sigma @ u)[None, :] + B @ sigma.T
    weight = np.exp(-B @ u - 0.5 * float(u @ u))
    lhs_samples = np.asarray(f(X), dtype=float)
    rhs_samples = np.asarray(f(Xu), dtype=float) * weight
    diffs = lhs_samples - rhs_samples
    diff = float(np.mean(diffs))
    se = float(np.std(diffs, ddof=1) / math.sqrt(N))
    z = 0.0 if se == 0.0 else diff / se
    return GirsanovCheck(lhs=float(np.mean(lhs_samples)),
                         rhs=float(np.mean(rhs_samples)),
                         diff=diff, std_error=se, z_score=z)
