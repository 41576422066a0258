"""Independent oracles shared by the test suite.

Everything here deliberately avoids the library's own differentiation,
ranking and integration code paths: finite differences, brute-force
enumeration and generic quadrature only.
"""

import numpy as np
from scipy.integrate import quad

from visitcast import autodiff as ad


def finite_diff(f, params, h=1e-5):
    """Central-difference gradient of the scalar f() w.r.t. each parameter.

    f is re-evaluated with entries of p.data perturbed in place; it must not
    cache anything between calls.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(got, want, rel=1e-4, floor=1e-7):
    for g, w in zip(got, want):
        g = np.zeros_like(w) if g is None else g
        err = np.abs(g - w)
        tol = np.maximum(rel * np.abs(w), floor)
        assert np.all(err <= tol), f"grad mismatch: max err {err.max()}, " \
                                   f"worst tol {tol[np.unravel_index(err.argmax(), err.shape)]}"


def check_gradients(build, params, rel=1e-4, floor=1e-7, h=1e-5):
    """Run backward on build() and compare against finite differences."""
    for p in params:
        p.grad = None
    loss = build()
    ad.backward(loss)
    analytic = [p.grad for p in params]

    def value():
        with ad.no_grad():
            return build().item()

    numeric = finite_diff(value, params, h=h)
    assert_grads_close(analytic, numeric, rel=rel, floor=floor)


def brute_force_recall_at_k(scores, truth, k):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    top = set(order[:k])
    return len(top & set(truth)) / len(truth)


def brute_force_auc(scores, labels):
    """Exhaustive pairwise AUC with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def numeric_density_nll(c, w, delta):
    """-ln f(t0+delta) with the compensator integrated numerically."""
    lam = lambda u: np.exp(np.minimum(c + w * u, 50.0))
    big, _ = quad(lam, 0.0, delta, limit=200)
    return -(np.log(lam(delta)) - big)
