"""Monte Carlo estimators with variance and relative-error reporting.

Every estimator returns an :class:`EstimateReport`.  Exponential averages are
accumulated in log space so rare-event weights spanning many orders of
magnitude cannot overflow.  Two relative-error conventions are recorded:

- ``relative_error``: std error of the estimator, divided by |estimate|
  (i.e. per-sample std / sqrt(N) / |estimate|);
- ``relative_error_per_sample``: per-sample std / |estimate|, the
  N-independent figure commonly quoted for hitting-probability tables.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .sde import TrajectoryBatch


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with sampling diagnostics.

    ``sample_variance`` is the variance of the per-sample contributions, so
    ``relative_error = sqrt(sample_variance / N) / |estimate|`` is
    recomputable from the stored fields.
    """

    estimate: float
    sample_variance: float
    N: int
    estimator_kind: str
    hit_fraction: float = math.nan
    notes: Tuple[str, ...] = ()

    @property
    def std_error(self) -> float:
        return math.sqrt(max(self.sample_variance, 0.0) / self.N)

    @property
    def relative_error(self) -> float:
        if self.estimate == 0.0:
            return math.nan
        return self.std_error / abs(self.estimate)

    @property
    def relative_error_per_sample(self) -> float:
        if self.estimate == 0.0:
            return math.nan
        return math.sqrt(max(self.sample_variance, 0.0)) / abs(self.estimate)


def _mean_report(values, kind, hit_fraction=math.nan, notes=()) -> EstimateReport:
    values = np.asarray(values, dtype=float)
    return EstimateReport(
        estimate=float(np.mean(values)),
        sample_variance=float(np.var(values, ddof=1)) if values.size > 1 else 0.0,
        N=values.size,
        estimator_kind=kind,
        hit_fraction=hit_fraction,
        notes=tuple(notes),
    )


def _log_mean_exp(exponents) -> Tuple[float, float]:
    """(log mean exp(s), sample variance of exp(s)) without overflow."""
    s = np.asarray(exponents, dtype=float)
    log_mean = float(logsumexp(s) - math.log(s.size))
    shift = np.max(s)
    if not np.isfinite(shift):
        shift = 0.0
    t = np.exp(s - shift)
    var = float(np.var(t, ddof=1) * math.exp(2.0 * shift)) if s.size > 1 else 0.0
    return log_mean, var


def naive_mc(batch: TrajectoryBatch, event_indicator) -> EstimateReport:
    """Plain hitting-probability estimator: mean of the event indicator over
    terminal states.  Variance is the exact Bernoulli p(1-p)."""
    if np.any(batch.controls):
        warnings.warn("naive_mc expects an uncontrolled batch; applied "
                      "controls are ignored without reweighting", UserWarning,
                      stacklevel=2)
    hits = np.asarray(event_indicator(batch.terminal_states()), dtype=bool)
    p = float(np.mean(hits))
    notes = []
    if p == 0.0:
        notes.append("no hits: relative error undefined")
    return EstimateReport(estimate=p, sample_variance=p * (1.0 - p),
                          N=batch.M, estimator_kind="naive_mc",
                          hit_fraction=p, notes=tuple(notes))


def is_mgf_estimate(W, L, hit_fraction=math.nan):
    """Importance-sampling estimators of the moment generating function
    Psi = E[exp(-W)] and the free energy F = -log Psi.

    ``W`` and ``L`` are per-trajectory work and Girsanov log-likelihood on the
    *controlled* batch.  Returns ``(psi_report, free_energy_report)``; the
    free-energy report's variance is the delta-method (per-sample) variance
    and its notes record the upward Jensen bias of -log of a mean.
    """
    W = np.asarray(W, dtype=float)
    L = np.asarray(L, dtype=float)
    s = L - W
    log_psi, var_terms = _log_mean_exp(s)
    psi = math.exp(log_psi)
    psi_report = EstimateReport(estimate=psi, sample_variance=var_terms,
                                N=s.size, estimator_kind="is_mgf",
                                hit_fraction=hit_fraction)
    f_var = var_terms / psi**2 if psi > 0 else math.nan
    f_report = EstimateReport(
        estimate=-log_psi, sample_variance=f_var, N=s.size,
        estimator_kind="is_free_energy", hit_fraction=hit_fraction,
        notes=("biased upward for finite N (Jensen direction of -log)",))
    return psi_report, f_report


def direct_free_energy(W, L, hit_fraction=math.nan) -> EstimateReport:
    """Direct free-energy estimator: sample mean of W - L on the controlled
    batch.  Biased unless the control is optimal, but often lower-variance."""
    vals = np.asarray(W, dtype=float) - np.asarray(L, dtype=float)
    return _mean_report(vals, "direct_free_energy", hit_fraction,
                        notes=("bias shrinks with the control's distance "
                               "from optimality",))


def control_variate_identity(W, Lz, hit_fraction=math.nan) -> EstimateReport:
    """Control-variate estimator on the *uncontrolled* batch.

    ``Lz`` is the Girsanov functional evaluated with the candidate control
    process along uncontrolled paths; with the exact control every summand
    L^Z + W equals the free energy, so the per-trajectory spread measures the
    control's quality.
    """
    vals = np.asarray(Lz, dtype=float) + np.asarray(W, dtype=float)
    return _mean_report(vals, "control_variate", hit_fraction)


def general_estimators(W_v, L_H, inner_vZ, hit_fraction=math.nan):
    """Drifted-family estimators from a batch simulated with drift v.

    Per-trajectory exponent e = <v, Z^v> - L^H - W^v with H = Z^v:
    G_hat = -log mean exp(e) and G_tilde = mean(-e).  Neither is unbiased for
    fixed N because of the bilinear term.  Returns ``(g_hat, g_tilde)``.
    """
    e = np.asarray(inner_vZ, dtype=float) - np.asarray(L_H, dtype=float) \
        - np.asarray(W_v, dtype=float)
    log_phi, var_terms = _log_mean_exp(e)
    phi = math.exp(log_phi)
    g_hat = EstimateReport(
        estimate=-log_phi,
        sample_variance=var_terms / phi**2 if phi > 0 else math.nan,
        N=e.size, estimator_kind="drifted_log_mean",
        hit_fraction=hit_fraction,
        notes=("biased for finite N (bilinear term)",))
    g_tilde = _mean_report(-e, "drifted_mean", hit_fraction,
                           notes=("biased for finite N (bilinear term)",))
    return g_hat, g_tilde


def zero_variance_exponents(W_v, L_H, inner_vZ) -> np.ndarray:
    """Per-trajectory exponents of the drifted-family identity; with exact
    controls they are constant up to discretization error."""
    return np.asarray(inner_vZ, dtype=float) - np.asarray(L_H, dtype=float) \
        - np.asarray(W_v, dtype=float)


def summary_table(reports, labels) -> str:
    """Plain-text comparison table: estimate / relative error / trajectories
    hit, one row per report (relative error in the per-sample convention)."""
    rows = ["{:<10s} {:>14s} {:>16s} {:>18s}".format(
        "", "estimate", "relative error", "trajectories hit")]
    for label, rep in zip(labels, reports):
        hit = "-" if math.isnan(rep.hit_fraction) else f"{rep.hit_fraction:.2%}"
        rel = rep.relative_error_per_sample
        rel_s = "-" if math.isnan(rel) else f"{rel:.2f}"
        rows.append("{:<10s} {:>14.3e} {:>16s} {:>18s}".format(
            label, rep.estimate, rel_s, hit))
    return "\n".join(rows)


def report_fields():
    return ["estimator_kind", "estimate", "sample_variance", "N",
            "std_error", "relative_error", "relative_error_per_sample",
            "hit_fraction", "notes"]


def report_row(rep: EstimateReport):
    return [rep.estimator_kind, f"{rep.estimate:.17e}",
            f"{rep.sample_variance:.17e}", rep.N,
            f"{rep.std_error:.17e}", f"{rep.relative_error:.17e}",
            f"{rep.relative_error_per_sample:.17e}",
            f"{rep.hit_fraction:.17e}", "; ".join(rep.notes)]
