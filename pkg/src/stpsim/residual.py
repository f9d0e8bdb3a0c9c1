"""Numerical check of the fused residual in tensor-parallel Attn/MLP units.

Each of t ranks computes its shard F_r of the unit on the shared normalised
input and adds ``detach(X) / t``; the all-reduce (an exact sum here) then
yields ``sum_r F_r(LN(X)) + X`` without a separate residual add. Because X
is detached inside the ranks, the residual reaches the input gradient only
through the identity path, which :func:`fused_backward` adds explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch

LN_EPS = 1e-5


@dataclass(frozen=True)
class RankShardedOp:
    """Per-rank parameters of a smooth surrogate for the Attn or MLP unit.

    ``kind="attn"``: F_r(Y) = tanh(Y @ w1[r] + b[r]).
    ``kind="mlp"``:  F_r(Y) = tanh(Y @ w1[r] + b[r]) @ w2[r].
    """

    w1: tuple  # t matrices of shape (d, h)
    b: tuple  # t vectors of shape (h,)
    w2: tuple | None  # mlp only: t matrices of shape (h, d)
    gain: np.ndarray
    bias: np.ndarray
    kind: str = "attn"

    @property
    def t(self) -> int:
        return len(self.w1)

    @property
    def d(self) -> int:
        return self.gain.shape[0]

    def rank_out(self, r: int, y: np.ndarray) -> np.ndarray:
        h = np.tanh(y @ self.w1[r] + self.b[r])
        return h if self.kind == "attn" else h @ self.w2[r]

    def rank_grad(self, r: int, y: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of <F_r(y), g> with respect to y."""
        h = np.tanh(y @ self.w1[r] + self.b[r])
        if self.kind == "mlp":
            g = g @ self.w2[r].T
        return (g * (1 - h * h)) @ self.w1[r].T

    def zeroed(self) -> "RankShardedOp":
        z = lambda ms: tuple(np.zeros_like(m) for m in ms)  # noqa: E731
        return RankShardedOp(z(self.w1), z(self.b), None if self.w2 is None else z(self.w2),
                             self.gain, self.bias, self.kind)


def random_op(d: int, t: int, rng: np.random.Generator, kind: str = "attn", hidden: int | None = None) -> RankShardedOp:
    if kind not in ("attn", "mlp"):
        raise ValueError(f"unknown unit kind {kind!r}")
    h = d if kind == "attn" else (hidden or 2 * d)
    w1 = tuple(rng.normal(scale=1 / np.sqrt(d), size=(d, h)) for _ in range(t))
    b = tuple(rng.normal(scale=0.1, size=h) for _ in range(t))
    w2 = tuple(rng.normal(scale=1 / np.sqrt(h), size=(h, d)) for _ in range(t)) if kind == "mlp" else None
    gain = 1 + rng.normal(scale=0.1, size=d)
    bias = rng.normal(scale=0.1, size=d)
    return RankShardedOp(w1, b, w2, gain, bias, kind)


def _check(x: np.ndarray, op: RankShardedOp):
    if x.ndim != 2 or x.shape[1] != op.d:
        raise DimensionMismatch(f"input of shape {x.shape} does not match model width {op.d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def layer_norm_grad(x: np.ndarray, gain: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of <layer_norm(x), g> with respect to x."""
    mu = x.mean(axis=1, keepdims=True)
    inv = 1 / np.sqrt(x.var(axis=1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    gh = g * gain
    return inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))


def all_reduce(parts) -> np.ndarray:
    return np.sum(parts, axis=0)


def fused_forward(x: np.ndarray, op: RankShardedOp) -> np.ndarray:
    _check(x, op)
    y = layer_norm(x, op.gain, op.bias)
    skip = x.copy()  # detached: treated as a constant by the backward
    return all_reduce([op.rank_out(r, y) + skip / op.t for r in range(op.t)])


def unfused_forward(x: np.ndarray, op: RankShardedOp) -> np.ndarray:
    _check(x, op)
    y = layer_norm(x, op.gain, op.bias)
    return all_reduce([op.rank_out(r, y) for r in range(op.t)]) + x


def fused_backward(x: np.ndarray, op: RankShardedOp, upstream: np.ndarray, residual: bool = True) -> np.ndarray:
    """Input gradient of the fused unit for upstream gradient ``upstream``.

    The rank outputs' gradients are all-reduced and pulled back through the
    LayerNorm; the detached residual contributes the identity path once,
    independent of t. ``residual=False`` drops that path (used to show the
    term is necessary).
    """
    _check(x, op)
    if upstream.shape != x.shape:
        raise DimensionMismatch(f"upstream gradient {upstream.shape} does not match input {x.shape}")
    y = layer_norm(x, op.gain, op.bias)
    g_y = all_reduce([op.rank_grad(r, y, upstream) for r in range(op.t)])
    g = layer_norm_grad(x, op.gain, g_y)
    return g + upstream if residual else g


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(x)
        x[idx] = orig - eps
        lo = f(x)
        x[idx] = orig
        out[idx] = (hi - lo) / (2 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


@dataclass(frozen=True)
class ResidualReport:
    trials: int
    seed: int
    worst_forward_diff: float
    worst_grad_rel_err: float
    mutation_min_rel_err: float  # smallest FD error seen with the identity path removed
    forward_tol: float = 1e-12
    grad_tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return (self.worst_forward_diff <= self.forward_tol and self.worst_grad_rel_err < self.grad_tol
                and self.mutation_min_rel_err >= self.grad_tol)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "worst_forward_diff": self.worst_forward_diff,
            "worst_grad_rel_err": self.worst_grad_rel_err,
            "mutation_min_rel_err": self.mutation_min_rel_err,
            "result": "PASS" if self.passed else "FAIL",
        }

    def render(self) -> str:
        return "\n".join([
            f"trials: {self.trials} (seed {self.seed})",
            f"fused vs unfused forward, worst max-abs diff: {self.worst_forward_diff:.3e} (limit {self.forward_tol:g})",
            f"analytic vs finite-difference gradient, worst rel err: {self.worst_grad_rel_err:.3e} "
            f"(limit {self.grad_tol:g})",
            f"without the identity path, smallest rel err: {self.mutation_min_rel_err:.3e} (must reach {self.grad_tol:g})",
            "PASS" if self.passed else "FAIL",
        ])


def verify_residual(trials: int = 100, seed: int = 0, ranks=(1, 2, 4, 8), shape=(3, 4),
                    eps: float = 1e-5) -> ResidualReport:
    """Run the forward-equivalence, gradient and mutation checks over seeded trials.

    Trials cycle over rank counts and alternate the Attn and MLP surrogates.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    fwd = grad = 0.0
    mut = float("inf")
    for i in range(trials):
        t = ranks[i % len(ranks)]
        kind = "attn" if (i // len(ranks)) % 2 == 0 else "mlp"
        op = random_op(shape[1], t, rng, kind)
        x = rng.normal(size=shape)
        g = rng.normal(size=shape)
        fwd = max(fwd, float(np.abs(fused_forward(x, op) - unfused_forward(x, op)).max()))
        fd = finite_difference_grad(lambda z: float(np.sum(fused_forward(z, op) * g)), x, eps)
        grad = max(grad, relative_error(fused_backward(x, op, g), fd))
        mut = min(mut, relative_error(fused_backward(x, op, g, residual=False), fd))
    return ResidualReport(trials, seed, fwd, grad, mut)
