"""ADAM optimizer, global-norm clipping and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected ADAM update of ``params`` (name -> Tensor) in place.

    ``grads`` maps the same names to arrays; missing names count as zero
    gradient.  Raises :class:`NonFiniteError` before touching anything if
    a gradient is NaN or Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; update aborted")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if not g.any() and not m.any():
            # exact no-op keeps parameters bit-identical under zero gradient
            continue
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: str
    finite: bool

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:g}) over {self.n_checked} coords, worst at {self.worst}")


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
               step: float = 1e-5, max_coords: int | None = 24, seed: int = 0,
               floor: float = 1e-6, analytic: dict | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    ``fn`` closes over ``params`` (float64 tensors, ``requires_grad=True``).
    Up to ``max_coords`` random coordinates per parameter are probed
    (``None`` probes all).  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  ``analytic`` lets a caller inject
    precomputed gradients (used for negative controls).
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    if analytic is None:
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = fn()
        analytic = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst_err, worst_at, n_checked, finite = 0.0, "-", 0, True
    for pi, p in enumerate(params):
        a_full = analytic.get(p)
        if a_full is None:
            a_full = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = np.asarray(a_full).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * step)
            ana = float(a_flat[i])
            n_checked += 1
            if not (np.isfinite(num) and np.isfinite(ana)):
                finite = False
                worst_at = f"{p.name or f'param{pi}'}[{i}]"
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst_err:
                worst_err, worst_at = err, f"{p.name or f'param{pi}'}[{i}]"
    return GradCheckReport(worst_err, tol, n_checked, worst_at, finite)
