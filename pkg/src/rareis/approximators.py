"""Value-function approximators: linear basis expansions and small MLPs.

Both kinds expose deterministic evaluation and analytic gradients; the MLP's
parameter gradients are written out by hand for its fixed one-hidden-layer
form (no autodiff dependency).
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ConditioningWarning(UserWarning):
    """Raised when a basis or regression is at risk of rank deficiency."""


class BasisSet:
    """A finite family of differentiable scalar basis functions on R^d.

    Supported kinds:

    - ``gaussian_rbf``: phi_k(x) = N(m_k, v^2 I) density, shared variance;
    - ``constant``: the single function phi(x) = 1;
    - ``custom``: user-supplied callables with gradients.
    """

    def __init__(self, kind, dim, centers=None, variance=None,
                 functions=None, gradients=None):
        self.kind = kind
        self.dim = dim
        self.centers = None if centers is None else np.asarray(centers, dtype=float)
        self.variance = variance
        self._functions = functions
        self._gradients = gradients
        if kind == "gaussian_rbf":
            if self.centers is None or variance is None or variance <= 0:
                raise ValueError("gaussian_rbf needs centers and variance > 0")
            self.K = self.centers.shape[0]
        elif kind == "constant":
            self.K = 1
        elif kind == "custom":
            if not functions or not gradients or len(functions) != len(gradients):
                raise ValueError("custom basis needs matching function/gradient lists")
            self.K = len(functions)
        else:
            raise ValueError(f"unknown basis kind {kind!r}")

    @classmethod
    def gaussian_rbf(cls, centers, variance):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls("gaussian_rbf", centers.shape[1], centers=centers,
                   variance=float(variance))

    @classmethod
    def constant(cls, dim):
        return cls("constant", dim)

    @classmethod
    def custom(cls, dim, functions, gradients):
        return cls("custom", dim, functions=list(functions),
                   gradients=list(gradients))

    def design_matrix(self, x) -> np.ndarray:
        """phi_k(x_i) for all rows; x (N, d) -> (N, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            return np.ones((x.shape[0], 1))
        if self.kind == "gaussian_rbf":
            diff = x[:, None, :] - self.centers[None, :, :]          # (N, K, d)
            sq = np.sum(diff * diff, axis=2)
            norm = (2.0 * math.pi * self.variance) ** (-self.dim / 2.0)
            return norm * np.exp(-sq / (2.0 * self.variance))
        return np.column_stack([np.asarray(f(x), dtype=float) for f in self._functions])

    def gradients(self, x) -> np.ndarray:
        """grad phi_k(x_i); x (N, d) -> (N, K, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            return np.zeros((x.shape[0], 1, self.dim))
        if self.kind == "gaussian_rbf":
            diff = x[:, None, :] - self.centers[None, :, :]
            phi = self.design_matrix(x)
            return phi[:, :, None] * (-diff / self.variance)
        return np.stack([np.asarray(g(x), dtype=float) for g in self._gradients], axis=1)


def place_gaussian_basis(batch, n, K, delta, variance, mode="mean_offset",
                         active=None) -> BasisSet:
    """Adaptive RBF placement from the forward cloud at step ``n``.

    ``mean_offset`` puts K centers component-wise on
    [mean - delta, mean + delta] over the active trajectories; with
    ``delta=None`` the spread is the per-component empirical standard
    deviation.  ``minmax`` equidistributes centers between the per-component
    minimum and maximum of the active states.

    Raises ValueError when no trajectory is active at step n; callers are
    expected to fall back to the previous step's basis.
    """
    if K < 2:
        raise ValueError("K must be >= 2 for adaptive placement")
    if active is None:
        active = batch.alive_mask[:, n]
    if not np.any(active):
        raise ValueError(f"no active trajectories at step {n}")
    pts = batch.states[active, n, :]
    ticks = np.arange(K, dtype=float) / (K - 1)          # 0 .. 1
    if mode == "mean_offset":
        mean = pts.mean(axis=0)
        if delta is None:
            spread = pts.std(axis=0)
        else:
            spread = np.full(pts.shape[1], float(delta))
        if np.all(spread == 0):
            warnings.warn("degenerate basis spread: all centers coincide "
                          "(rank-deficient regression likely)",
                          ConditioningWarning, stacklevel=2)
        centers = mean[None, :] + (2.0 * ticks[:, None] - 1.0) * spread[None, :]
    elif mode == "minmax":
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        centers = lo[None, :] + ticks[:, None] * (hi - lo)[None, :]
    else:
        raise ValueError(f"unknown placement mode {mode!r}")
    return BasisSet.gaussian_rbf(centers, variance)


class LinearValueApprox:
    """Per-step linear value approximation V_n(x) = sum_k alpha_{k,n} phi_k(x).

    Holds one basis and one coefficient vector per time index 0..n_steps.
    The induced control is the diffusion-weighted gradient sigma^T grad V_n.
    """

    def __init__(self, bases: Sequence[BasisSet], coeffs: Sequence[np.ndarray]):
        if len(bases) != len(coeffs):
            raise ValueError("one coefficient vector per basis required")
        self.bases = list(bases)
        self.coeffs = [np.asarray(c, dtype=float) for c in coeffs]

    @property
    def n_steps(self) -> int:
        return len(self.bases) - 1

    def value(self, n, x) -> np.ndarray:
        return self.bases[n].design_matrix(x) @ self.coeffs[n]

    def value_gradient(self, n, x) -> np.ndarray:
        return np.einsum("nkd,k->nd", self.bases[n].gradients(x), self.coeffs[n])

    def control(self, n, x, sigma) -> np.ndarray:
        """sigma^T grad V_n(x); sigma of shape (d, m) or (N, d, m)."""
        grad = self.value_gradient(n, x)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 2:
            return grad @ sigma
        return np.einsum("ndm,nd->nm", sigma, grad)


def eval_value(approx: LinearValueApprox, n, x):
    """Value of the approximation at step n; scalar for a single state."""
    out = approx.value(n, np.atleast_2d(x))
    return float(out[0]) if np.ndim(x) == 1 else out


def eval_control(approx: LinearValueApprox, n, x, sigma):
    """sigma^T grad V_n at a single state (d,) with sigma (d, m)."""
    out = approx.control(n, np.atleast_2d(x), sigma)
    return out[0] if np.ndim(x) == 1 else out


@dataclass
class MlpBlock:
    """One-hidden-layer tanh network R^d -> R^m."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, dim, out_dim, hidden):
        bound1 = 1.0 / math.sqrt(dim)
        bound2 = 1.0 / math.sqrt(hidden)
        return cls(
            w1=rng.uniform(-bound1, bound1, size=(hidden, dim)),
            b1=np.zeros(hidden),
            w2=rng.uniform(-bound2, bound2, size=(out_dim, hidden)),
            b2=np.zeros(out_dim),
        )

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        i = 0
        for p in self.params():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != vec.size:
            raise ValueError("parameter vector has wrong length")


def mlp_eval(block: MlpBlock, x) -> np.ndarray:
    """Deterministic forward pass; x (N, d) -> (N, m)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hidden = np.tanh(x @ block.w1.T + block.b1)
    return hidden @ block.w2.T + block.b2


def mlp_forward(block: MlpBlock, x):
    """Forward pass returning (output, cache) for backprop."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hidden = np.tanh(x @ block.w1.T + block.b1)
    return hidden @ block.w2.T + block.b2, (x, hidden)


def mlp_param_grads(block: MlpBlock, cache, upstream) -> MlpBlock:
    """Gradients of sum(upstream * output) w.r.t. the block parameters.

    ``upstream`` is dL/d(output), shape (N, m); returns gradients packed in an
    MlpBlock of the same shapes.
    """
    x, hidden = cache
    upstream = np.asarray(upstream, dtype=float)
    gw2 = upstream.T @ hidden
    gb2 = upstream.sum(axis=0)
    dhidden = (upstream @ block.w2) * (1.0 - hidden * hidden)
    gw1 = dhidden.T @ x
    gb1 = dhidden.sum(axis=0)
    return MlpBlock(gw1, gb1, gw2, gb2)


def save_params_csv(path, blocks):
    """Dump per-step parameter blocks as rows (step, param index, value).

    ``blocks`` is a sequence whose elements are either flat arrays or objects
    with a ``flat()`` method (MlpBlock, coefficient vectors).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "param_index", "value"])
        for step, blk in enumerate(blocks):
            flat = getattr(blk, "flat", None)
            vec = flat() if callable(flat) else np.asarray(blk).ravel()
            for j, val in enumerate(vec):
                writer.writerow([step, j, f"{val:.17e}"])


def load_params_csv(path):
    """Inverse of :func:`save_params_csv`; returns a list of flat arrays."""
    per_step = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["step", "param_index", "value"]:
            raise ValueError(f"unrecognized parameter file header: {header}")
        for step, idx, val in reader:
            per_step.setdefault(int(step), {})[int(idx)] = float(val)
    out = []
    for step in sorted(per_step):
        vals = per_step[step]
        vec = np.empty(len(vals))
        for idx, val in vals.items():
            vec[idx] = val
        out.append(vec)
    return out
