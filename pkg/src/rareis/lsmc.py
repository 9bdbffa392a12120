"""Backward least-squares Monte Carlo solver for the value-function BSDE.

The backward sweep regresses, step by step, the explicit targets

    b_n = Y_{n+1} + dt * h(X_n, Y_{n+1}, Z_{n+1})

onto a per-step basis over the still-active trajectories, where the driver is
h(x, z) = -|z|^2/2 + f(x) (plain) or h(x, z) = -|z|^2/2 - z.v + f(x) when the
forward trajectories were simulated with an extra drift v.  Exited
trajectories keep their terminal value g(X_eta) pinned at the exit step and
contribute regression rows only while inside the domain.
"""

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .approximators import (BasisSet, ConditioningWarning, LinearValueApprox,
                            place_gaussian_basis)
from .functionals import CostSpec
from .sde import SdeModel, SimulationWarning, StopRule, TrajectoryBatch, simulate_batch


@dataclass(frozen=True)
class LsmcConfig:
    """Numerical parameters of the backward regression solver.

    ``timeout_mode`` decides what happens to trajectories that never leave the
    domain: ``penalize`` applies the terminal cost at the horizon (the
    straightforward finite-horizon problem), ``discard`` drops them from every
    regression, which estimates the exit-conditioned functional instead and
    removes the horizon-truncation bias of committor-type quantities.  For
    pure-horizon problems the modes coincide.
    """

    K: int
    M: int
    dt: float
    n_max: int
    ridge: float = 1e-8
    z_mode: str = "gradient"            # or "implicit"
    iterations: int = 1
    driver_mode: str = "plain"          # or "drifted"
    placement: str = "mean_offset"      # or "minmax"
    delta: Optional[float] = 1.0        # None: per-step empirical std
    variance: float = 1.0
    timeout_mode: str = "penalize"      # or "discard"
    clip_values: bool = True            # truncate fitted Y at the terminal range
    z_cap: Optional[float] = None       # absolute |Z| cap; None: span/sqrt(dt)

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if self.K > self.M:
            raise ValueError(f"rank condition violated: K={self.K} > M={self.M}")
        if self.dt <= 0 or self.n_max < 1:
            raise ValueError("dt must be positive and n_max >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.z_mode not in ("gradient", "implicit"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")
        if self.driver_mode not in ("plain", "drifted"):
            raise ValueError(f"unknown driver_mode {self.driver_mode!r}")
        if self.placement not in ("mean_offset", "minmax"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.timeout_mode not in ("penalize", "discard"):
            raise ValueError(f"unknown timeout_mode {self.timeout_mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.variance <= 0:
            raise ValueError("variance must be positive")


@dataclass
class LstsqInfo:
    condition: float
    rank: int
    rank_deficient: bool


@dataclass
class LsmcDiagnostics:
    condition_numbers: np.ndarray
    active_counts: np.ndarray
    carried_steps: List[int] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


@dataclass
class LsmcSolution:
    """Backward-sweep output: per-step value approximation and its control."""

    approx: LinearValueApprox
    y0: float
    diagnostics: LsmcDiagnostics
    config: LsmcConfig
    z_coeffs: Optional[List[Optional[np.ndarray]]] = None

    def value(self, n, x):
        return self.approx.value(n, np.atleast_2d(x))

    def control(self, n, x, sigma):
        """Z_n(x) = sigma^T grad V_n(x), or the regressed Z in implicit mode."""
        x2 = np.atleast_2d(x)
        if self.config.z_mode == "implicit" and self.z_coeffs is not None:
            coeffs = self.z_coeffs[n]
            if coeffs is None:
                return np.zeros((x2.shape[0], 1))
            return self.approx.bases[n].design_matrix(x2) @ coeffs
        return self.approx.control(n, x2, sigma)


def control_policy(solution: LsmcSolution, model: SdeModel):
    """Importance-sampling drift u(x, n) = -Z_n(x) induced by a solution."""

    def policy(x, n):
        sigma = model.diffusion(x)
        return -solution.control(n, x, sigma)

    return policy


def solve_least_squares(A, b, ridge: float = 0.0):
    """Minimizer of |A alpha - b|^2 + ridge |alpha|^2 via SVD least squares.

    Never forms the normal equations; with ridge = 0 and full column rank the
    result coincides with (A^T A)^{-1} A^T b.  Rank-deficient unregularized
    systems return the minimum-norm solution and flag the conditioning.
    Returns ``(alpha, LstsqInfo)``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("A must be a nonempty 2-d array")
    K = A.shape[1]
    s = np.linalg.svd(A, compute_uv=False)
    smax = s[0] if len(s) else 0.0
    smin = s[-1] if len(s) else 0.0
    condition = math.inf if smin == 0.0 else float(smax / smin)
    if ridge > 0.0:
        A_aug = np.vstack([A, math.sqrt(ridge) * np.eye(K)])
        b_aug = np.concatenate([b, np.zeros((K,) + b.shape[1:])], axis=0)
        alpha, _, rank, _ = np.linalg.lstsq(A_aug, b_aug, rcond=None)
        deficient = False
    else:
        alpha, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        deficient = rank < K
        if deficient:
            warnings.warn(f"rank-deficient regression (rank {rank} < {K}); "
                          "returning the minimum-norm solution",
                          ConditioningWarning, stacklevel=2)
    return alpha, LstsqInfo(condition=condition, rank=int(rank),
                            rank_deficient=deficient)


def _driver(x_n, z, cost: CostSpec, v=None):
    h = -0.5 * np.sum(z * z, axis=-1) + cost.running(x_n)
    if v is not None:
        h = h - np.sum(z * v, axis=-1)
    return h


def regression_targets(batch: TrajectoryBatch, n: int, y_next, z_next,
                       cost: CostSpec, dt: float, v=None, active=None):
    """Explicit-scheme regression data b_n over the active trajectories.

    ``y_next`` (M,) and ``z_next`` (M, m) hold the step-(n+1) values and
    controls (fitted for interior trajectories, terminal data for those
    exiting at n+1).  ``v`` (M, m), when given, is the extra forward drift
    applied at step n and switches the driver to its drifted form.
    """
    if active is None:
        active = batch.alive_mask[:, n]
    x_n = batch.states[active, n, :]
    z = np.asarray(z_next, dtype=float)[active]
    y = np.asarray(y_next, dtype=float)[active]
    v_act = None if v is None else np.asarray(v, dtype=float)[active]
    return y + dt * _driver(x_n, z, cost, v_act)


def implicit_z(batch: TrajectoryBatch, n: int, values_next, basis: BasisSet,
               ridge: float = 0.0, active=None):
    """Regression estimate of Z_n without basis gradients.

    Componentwise least-squares fit of xi_{n+1} * Y_{n+1} / sqrt(dt) onto the
    basis at step n, evaluated over the active trajectories.  Returns
    ``(z_fit, coeffs, info)`` with z_fit of shape (n_active, m).
    """
    if active is None:
        active = batch.alive_mask[:, n]
    y = np.asarray(values_next, dtype=float)[active]
    xi = batch.noises[active, n, :]
    targets = xi * y[:, None] / math.sqrt(batch.dt)
    A = basis.design_matrix(batch.states[active, n, :])
    coeffs, info = solve_least_squares(A, targets, ridge)
    return A @ coeffs, coeffs, info


def _default_basis_builder(config: LsmcConfig):
    def build(batch, n, active):
        return place_gaussian_basis(batch, n, config.K, config.delta,
                                    config.variance, mode=config.placement,
                                    active=active)
    return build


def backward_sweep(batch: TrajectoryBatch, model: SdeModel, config: LsmcConfig,
                   cost: CostSpec, basis_builder=None,
                   x_eval=None) -> LsmcSolution:
    """Backward regression sweep over a simulated batch.

    For n = n_max-1 down to 0: build the step basis from the active cloud,
    assemble targets from the step-(n+1) values/controls, and solve the ridge
    least-squares problem.  Terminal values are the exact costs g; exited
    trajectories stay pinned to g at their exit state.  Steps with fewer than
    K active trajectories carry the next step's basis and coefficients
    (recorded in the diagnostics).
    """
    if basis_builder is None:
        basis_builder = _default_basis_builder(config)
    n_max, m = batch.n_max, batch.noise_dim
    eta = batch.exit_index
    drifted = config.driver_mode == "drifted"

    keep = ~batch.faulted
    if config.timeout_mode == "discard":
        keep &= batch.exited | (eta < n_max)

    terminal = batch.terminal_states()
    pinned_y = cost.terminal(terminal)
    sig_term = model.diffusion(terminal)
    pinned_z = np.einsum("ndm,nd->nm", sig_term, cost.terminal_grad(terminal))

    y_vals = pinned_y.copy()
    z_vals = pinned_z.copy()

    # runaway guard: the exact value stays within the terminal-cost range
    # (maximum principle, extended by the running-cost contribution), so
    # fitted values are truncated at that range widened by one full span,
    # and |Z| is capped at span/sqrt(dt) (a single noise increment cannot
    # move Y by more than the value range).  The widening keeps ordinary
    # regression noise untouched; only divergence through the quadratic
    # driver is blocked.
    y_lo = y_hi = z_cap = None
    if config.clip_values and keep.any():
        finite = pinned_y[keep & np.isfinite(pinned_y)]
        if finite.size:
            lo, hi = float(finite.min()), float(finite.max())
            if cost.running_cost is not None:
                f_all = cost.running(batch.states[keep].reshape(-1, batch.dim))
                horizon = config.n_max * config.dt
                lo += horizon * min(0.0, float(np.min(f_all)))
                hi += horizon * max(0.0, float(np.max(f_all)))
            span = hi - lo
            y_lo, y_hi = lo - span, hi + span
            z_cap = config.z_cap if config.z_cap is not None \
                else span / math.sqrt(config.dt)

    bases: List[Optional[BasisSet]] = [None] * (n_max + 1)
    coeffs: List[Optional[np.ndarray]] = [None] * (n_max + 1)
    z_coeffs: List[Optional[np.ndarray]] = [None] * (n_max + 1)
    diag = LsmcDiagnostics(condition_numbers=np.full(n_max + 1, np.nan),
                           active_counts=np.zeros(n_max + 1, dtype=int))

    # terminal-step fit: pure projection of g onto the basis (reporting only;
    # the recursion itself uses the exact terminal values)
    act_T = keep & (eta == n_max)
    diag.active_counts[n_max] = int(act_T.sum())
    if act_T.sum() >= config.K:
        basis_T = basis_builder(batch, n_max, act_T)
        A_T = basis_T.design_matrix(batch.states[act_T, n_max, :])
        alpha_T, info = solve_least_squares(A_T, pinned_y[act_T], config.ridge)
        bases[n_max], coeffs[n_max] = basis_T, alpha_T
        diag.condition_numbers[n_max] = info.condition
    else:
        bases[n_max] = BasisSet.constant(batch.dim)
        coeffs[n_max] = np.array([float(np.mean(pinned_y[act_T]))]) \
            if act_T.any() else np.zeros(1)
        diag.carried_steps.append(n_max)

    for n in range(n_max - 1, -1, -1):
        act = keep & (eta > n)
        count = int(act.sum())
        diag.active_counts[n] = count
        if count < config.K:
            bases[n] = bases[n + 1]
            coeffs[n] = coeffs[n + 1]
            z_coeffs[n] = z_coeffs[n + 1]
            diag.carried_steps.append(n)
            if count > 0 and coeffs[n] is not None:
                x_n = batch.states[act, n, :]
                y_carry = bases[n].design_matrix(x_n) @ coeffs[n]
                if y_lo is not None:
                    y_carry = np.clip(y_carry, y_lo, y_hi)
                y_vals[act] = y_carry
                if config.z_mode == "gradient":
                    approx_n = LinearValueApprox([bases[n]], [coeffs[n]])
                    z_carry = approx_n.control(0, x_n, model.diffusion(x_n))
                elif z_coeffs[n] is not None:
                    z_carry = bases[n].design_matrix(x_n) @ z_coeffs[n]
                else:
                    z_carry = np.zeros((x_n.shape[0], m))
                if z_cap is not None:
                    z_carry = np.clip(z_carry, -z_cap, z_cap)
                z_vals[act] = z_carry
            continue

        basis_n = basis_builder(batch, n, act)
        x_n = batch.states[act, n, :]
        A_n = basis_n.design_matrix(x_n)
        v = batch.controls[:, n, :] if drifted else None

        if config.z_mode == "implicit":
            z_fit, zc, _ = implicit_z(batch, n, y_vals, basis_n,
                                      config.ridge, active=act)
            z_coeffs[n] = zc
            if z_cap is not None:
                z_fit = np.clip(z_fit, -z_cap, z_cap)
            z_for_driver = np.zeros_like(z_vals)
            z_for_driver[act] = z_fit
            b_n = regression_targets(batch, n, y_vals, z_for_driver, cost,
                                     config.dt, v=v, active=act)
        else:
            b_n = regression_targets(batch, n, y_vals, z_vals, cost,
                                     config.dt, v=v, active=act)

        alpha_n, info = solve_least_squares(A_n, b_n, config.ridge)
        bases[n], coeffs[n] = basis_n, alpha_n
        diag.condition_numbers[n] = info.condition

        y_fit = A_n @ alpha_n
        if y_lo is not None:
            y_fit = np.clip(y_fit, y_lo, y_hi)
        y_vals[act] = y_fit
        if config.z_mode == "gradient":
            approx_n = LinearValueApprox([basis_n], [alpha_n])
            z_fit_n = approx_n.control(0, x_n, model.diffusion(x_n))
        else:
            z_fit_n = A_n @ z_coeffs[n] if z_coeffs[n] is not None \
                else np.zeros((x_n.shape[0], m))
        if z_cap is not None:
            z_fit_n = np.clip(z_fit_n, -z_cap, z_cap)
        z_vals[act] = z_fit_n

    # any step left without a basis (fully empty tail) falls back to constants
    for n in range(n_max + 1):
        if bases[n] is None:
            bases[n] = BasisSet.constant(batch.dim)
            coeffs[n] = np.zeros(1)
            diag.notes.append(f"no basis at step {n}; zero constant substituted")

    approx = LinearValueApprox(bases, coeffs)
    if x_eval is None:
        x_eval = batch.states[keep, 0, :].mean(axis=0) if keep.any() \
            else batch.states[:, 0, :].mean(axis=0)
    y0 = float(approx.value(0, np.atleast_2d(x_eval))[0])
    return LsmcSolution(approx=approx, y0=y0, diagnostics=diag, config=config,
                        z_coeffs=z_coeffs if config.z_mode == "implicit" else None)


def iterate_lsmc(model: SdeModel, stop: StopRule, x0, cost: CostSpec,
                 config: LsmcConfig, seed, basis_builder=None,
                 x_eval=None) -> List[LsmcSolution]:
    """Iterated LSMC: re-simulate under the previous control and re-solve.

    Iteration 1 runs the plain solver on uncontrolled trajectories; iteration
    i+1 simulates with drift u = -Z_i and solves with the drifted driver.
    Stops early (with a note in the diagnostics) if the value estimate turns
    non-finite or grows by more than a factor of ten between iterations.
    """
    solutions: List[LsmcSolution] = []
    policy = None
    for it in range(config.iterations):
        cfg_it = replace(config, driver_mode="plain" if it == 0 else "drifted")
        batch = simulate_batch(model, policy, stop, config.dt, config.M,
                               (seed, it), x0)
        sol = backward_sweep(batch, model, cfg_it, cost,
                             basis_builder=basis_builder, x_eval=x_eval)
        if solutions:
            prev = abs(solutions[-1].y0)
            if not math.isfinite(sol.y0) or abs(sol.y0) > 10.0 * max(prev, 1.0):
                sol.diagnostics.notes.append(
                    f"iteration {it + 1} diverged (y0={sol.y0!r}); stopping early")
                solutions.append(sol)
                break
        solutions.append(sol)
        policy = control_policy(sol, model)
    return solutions
