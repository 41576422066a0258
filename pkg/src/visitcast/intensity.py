"""Exponential-affine conditional intensity and its closed-form likelihood.

The next-event intensity after a visit at t0 is

    lambda(t) = exp(c + w * (t - t0)),   c = hist + cascade + visit + bias

so the compensator, density, survival and the negative log likelihood of the
next gap all have closed forms. For w < 0 the intensity decays to zero and
the total event probability over [t0, inf) is below one; the leftover
(defect) mass is assigned to the truncation horizon when computing expected
times, which is the documented truncation policy.

Expected next time uses fixed-order Gauss-Legendre panels, doubling the
panel count until successive estimates agree to a relative tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_INTENSITY_CLAMP = 50.0
_W_LIMIT = 1e-8  # below this |w| the exponential-rate limit form is used


class IntensityError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityContext:
    """Scalar pieces of the log intensity at one timestep."""

    hist: float     # history-state term
    cascade: float  # cascade-state term
    visit: float    # current-visit term
    slope: float    # w, coefficient of (t - t0)
    bias: float     # base log intensity
    t0: float       # time of the current visit

    @property
    def log_base(self):
        c = self.hist + self.cascade + self.visit + self.bias
        return min(c, LOG_INTENSITY_CLAMP)


def log_intensity(ctx, t):
    """ln lambda(t) = c + w * (t - t0); only defined for t >= t0."""
    if t < ctx.t0:
        raise IntensityError(f"t={t} precedes the base point t0={ctx.t0}")
    return ctx.log_base + ctx.slope * (t - ctx.t0)


def intensity(ctx, t):
    return math.exp(min(log_intensity(ctx, t), LOG_INTENSITY_CLAMP))


def compensator(ctx, delta):
    """Integral of lambda over [t0, t0 + delta], closed form."""
    c, w = ctx.log_base, ctx.slope
    delta = np.asarray(delta, dtype=np.float64)
    if abs(w) < _W_LIMIT:
        return np.exp(c) * delta
    # exp(c) * expm1(w d) / w; the argument is capped so the log intensity
    # saturates at LOG_INTENSITY_CLAMP, consistent with the clamped exp
    arg = np.minimum(np.minimum(w * delta, LOG_INTENSITY_CLAMP - c), 700.0)
    return np.exp(c) * np.expm1(arg) / w


def survival(ctx, delta):
    """P(no event within delta of t0)."""
    return np.exp(-compensator(ctx, delta))


def density(ctx, delta):
    """f(t0 + delta) = lambda * exp(-compensator); vectorized over delta."""
    c, w = ctx.log_base, ctx.slope
    delta = np.asarray(delta, dtype=np.float64)
    log_lam = np.minimum(c + w * delta, LOG_INTENSITY_CLAMP)
    return np.exp(log_lam - compensator(ctx, delta))


def total_mass(ctx):
    """Total event probability on [t0, inf); below 1 when the slope is
    negative (the intensity dies out)."""
    if ctx.slope < -_W_LIMIT:
        return -math.expm1(-math.exp(ctx.log_base) / (-ctx.slope))
    return 1.0


def survival_floor(ctx):
    return 1.0 - total_mass(ctx)


def time_nll(ctx, t_next):
    """-ln f(t_next) in closed form.

    -[c + w*delta - (e^{c+w*delta} - e^c)/w]; for |w| < 1e-8 the
    exponential-rate limit -[c - e^c * delta] is used.
    """
    delta = t_next - ctx.t0
    if delta < 0:
        raise IntensityError("next time precedes the base point")
    c, w = ctx.log_base, ctx.slope
    if abs(w) < _W_LIMIT:
        return -(c - math.exp(c) * delta)
    exponent = min(c + w * delta, LOG_INTENSITY_CLAMP)
    return -(exponent - (math.exp(exponent) - math.exp(c)) / w)


def _gauss_panels(fn, lo, hi, n_panels, nodes, weights):
    edges = np.linspace(lo, hi, n_panels + 1)
    half = np.diff(edges) / 2.0          # (P,)
    mid = (edges[:-1] + edges[1:]) / 2.0
    pts = mid[:, None] + half[:, None] * nodes[None, :]
    vals = fn(pts.ravel()).reshape(pts.shape)
    return float(((vals @ weights) * half).sum())


def truncation_horizon(ctx, mass_tol=1e-6):
    """Smallest gap D (by doubling) with survival(D) within mass_tol of the
    defective floor, i.e. the integrable mass beyond D is negligible."""
    floor = survival_floor(ctx)
    delta = max(math.exp(min(-ctx.log_base, LOG_INTENSITY_CLAMP)), 1e-6)
    for _ in range(200):
        if survival(ctx, delta) - floor <= mass_tol:
            return delta
        delta *= 2.0
    raise IntensityError("no finite truncation horizon found")


def expected_next_time(ctx, rel_tol=1e-6, mass_tol=1e-6, order=256,
                       max_doublings=20):
    """E[t_next] = integral of t * f(t), Gauss-Legendre with panel doubling.

    The domain is [t0, t0 + D] with D from truncation_horizon; whatever
    survival mass remains at the horizon (the defect, for negative slopes)
    is assigned to the horizon point.
    """
    horizon = truncation_horizon(ctx, mass_tol)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    tail = survival(ctx, horizon) * (ctx.t0 + horizon)

    def integrand(delta):
        return (ctx.t0 + delta) * density(ctx, delta)

    prev = None
    n_panels = 1
    for _ in range(max_doublings + 1):
        est = _gauss_panels(integrand, 0.0, horizon, n_panels, nodes, weights)
        est += tail
        if prev is not None and abs(est - prev) <= rel_tol * max(abs(est), 1e-12):
            return est
        prev = est
        n_panels *= 2
    raise IntensityError("expected-time quadrature did not converge")
