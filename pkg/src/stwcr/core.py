"""Kernel, smoothed-indicator, and quadrature primitives.

Every estimand in this package is built from three ingredients:

* a Gaussian kernel ``K_h(u) = (1/h) * pdf_std(u/h)`` that smooths across
  the continuous marker,
* a normal-CDF softening ``Phi((p - t)/eps)`` of the trimming indicator
  ``1{p > t}``, which restores differentiability in the conditional
  density ``p``, and
* Gauss-Legendre quadrature of kernel-weighted integrands over a window
  of ``window_halfwidth_in_h`` bandwidths around the kernel center,
  clipped to the marker support.

All functions here are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .errors import EvaluationError, InvalidParameterError

__all__ = [
    "DENSITY_FLOOR",
    "SmoothingParams",
    "Interval",
    "kernel_weight",
    "smooth_indicator",
    "smooth_indicator_deriv",
    "integrate_kernel_weighted",
    "integrate_kernel_weighted_2d",
]

# Densities below this are floored before any division by them.
DENSITY_FLOOR = 1e-12

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SmoothingParams:
    """Tuning tuple shared by every estimand computation.

    ``h`` is the bandwidth for single-marker risk queries; ``h0``/``h1``
    are the comparator-side and investigational-side bandwidths for
    relative-efficacy queries. Bandwidths not needed by a given query may
    be left unset.
    """

    t: float = 0.1
    epsilon: float = 0.1
    h: float | None = None
    h0: float | None = None
    h1: float | None = None
    alpha: float = 0.05
    quad_nodes: int = 64
    window_halfwidth_in_h: float = 8.0

    def __post_init__(self):
        if not (0.0 < self.t < 1.0):
            raise InvalidParameterError(f"t must be in (0,1), got {self.t}")
        if not (self.epsilon > 0.0):
            raise InvalidParameterError(f"epsilon must be > 0, got {self.epsilon}")
        for name in ("h", "h0", "h1"):
            val = getattr(self, name)
            if val is not None and not (val > 0.0 and math.isfinite(val)):
                raise InvalidParameterError(f"{name} must be a positive finite bandwidth, got {val}")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidParameterError(f"alpha must be in (0,1), got {self.alpha}")
        if int(self.quad_nodes) != self.quad_nodes or self.quad_nodes < 8:
            raise InvalidParameterError(f"quad_nodes must be an integer >= 8, got {self.quad_nodes}")
        if not (self.window_halfwidth_in_h >= 4.0):
            raise InvalidParameterError(
                f"window_halfwidth_in_h must be >= 4, got {self.window_halfwidth_in_h}"
            )

    def require_h(self) -> float:
        if self.h is None:
            raise InvalidParameterError("this query needs the single bandwidth h")
        return self.h

    def require_h0_h1(self) -> tuple[float, float]:
        if self.h0 is None or self.h1 is None:
            raise InvalidParameterError("this query needs both bandwidths h0 and h1")
        return self.h0, self.h1

    def with_(self, **kwargs) -> "SmoothingParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Interval:
    """Closed interval, used for the marker support. Endpoints may be infinite."""

    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise InvalidParameterError("interval endpoints cannot be NaN")
        if self.lo > self.hi:
            raise InvalidParameterError(f"interval lo={self.lo} > hi={self.hi}")

    @staticmethod
    def wide() -> "Interval":
        return Interval(-math.inf, math.inf)


def kernel_weight(u, h):
    """Gaussian kernel ``K_h(u) = (1/h) * pdf_std(u/h)``; symmetric, integrates to 1."""
    if not (np.isscalar(h) and h > 0 and math.isfinite(h)):
        raise InvalidParameterError(f"bandwidth h must be positive and finite, got {h}")
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise InvalidParameterError("kernel displacement u must be finite")
    z = u / h
    out = (_INV_SQRT_2PI / h) * np.exp(-0.5 * z * z)
    return out if out.ndim else float(out)


def _check_epsilon(epsilon):
    if not (np.isscalar(epsilon) and epsilon > 0 and math.isfinite(epsilon)):
        raise InvalidParameterError(f"epsilon must be positive and finite, got {epsilon}")


_OPEN_UNIT_LO = np.finfo(float).tiny
_OPEN_UNIT_HI = float(np.nextafter(1.0, 0.0))


def smooth_indicator(p, t, epsilon):
    """Softened trimming weight ``Phi((p - t)/epsilon)``, increasing in p.

    Clipped into the open unit interval so saturated normal-CDF values
    never round to exactly 0 or 1.
    """
    _check_epsilon(epsilon)
    p = np.asarray(p, dtype=float)
    out = np.clip(ndtr((p - t) / epsilon), _OPEN_UNIT_LO, _OPEN_UNIT_HI)
    return out if out.ndim else float(out)


def smooth_indicator_deriv(p, t, epsilon):
    """Derivative of :func:`smooth_indicator` in p: ``pdf_std((p - t)/epsilon)/epsilon``."""
    _check_epsilon(epsilon)
    p = np.asarray(p, dtype=float)
    z = (p - t) / epsilon
    out = (_INV_SQRT_2PI / epsilon) * np.exp(-0.5 * z * z)
    return out if out.ndim else float(out)


@lru_cache(maxsize=32)
def _leggauss(n: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def quad_rule(center: float, h: float, support: Interval, params: SmoothingParams):
    """Gauss-Legendre nodes/weights on the kernel window around ``center``.

    The window is ``[center - W*h, center + W*h]`` intersected with the
    support; returns ``(nodes, weights)`` or ``None`` when the
    intersection is empty. Weights already include the interval scaling
    but not the kernel factor.
    """
    half = params.window_halfwidth_in_h * h
    lo = max(center - half, support.lo)
    hi = min(center + half, support.hi)
    if not lo < hi:
        return None
    base_x, base_w = _leggauss(int(params.quad_nodes))
    mid = 0.5 * (lo + hi)
    scale = 0.5 * (hi - lo)
    return mid + scale * base_x, scale * base_w


def integrate_kernel_weighted(f, center, h, support, params):
    """``int K_h(s' - center) f(s') ds'`` over the truncated window.

    ``f`` must accept an ndarray of marker values and return an array of
    the same shape (scalars broadcast). Returns 0.0 when the window does
    not intersect the support.
    """
    rule = quad_rule(center, h, support, params)
    if rule is None:
        return 0.0
    nodes, weights = rule
    vals = np.asarray(f(nodes), dtype=float)
    vals = np.broadcast_to(vals, nodes.shape)
    if np.any(np.isnan(vals)):
        raise EvaluationError("integrand returned NaN inside the integration window")
    kern = kernel_weight(nodes - center, h)
    return float(np.sum(weights * kern * vals))


def integrate_kernel_weighted_2d(f, c0, h0, c1, h1, support, params):
    """Tensor-product version: ``iint K_h0(s'-c0) K_h1(s''-c1) f(s', s'') ds' ds''``.

    ``f`` receives broadcastable arrays shaped ``(q0, 1)`` and ``(1, q1)``
    and must return the ``(q0, q1)`` integrand values.
    """
    rule0 = quad_rule(c0, h0, support, params)
    rule1 = quad_rule(c1, h1, support, params)
    if rule0 is None or rule1 is None:
        return 0.0
    x0, w0 = rule0
    x1, w1 = rule1
    vals = np.asarray(f(x0[:, None], x1[None, :]), dtype=float)
    vals = np.broadcast_to(vals, (x0.size, x1.size))
    if np.any(np.isnan(vals)):
        raise EvaluationError("2d integrand returned NaN inside the integration window")
    k0 = kernel_weight(x0 - c0, h0) * w0
    k1 = kernel_weight(x1 - c1, h1) * w1
    return float(k0 @ vals @ k1)
