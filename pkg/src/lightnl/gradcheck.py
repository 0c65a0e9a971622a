"""Finite-difference gradient checking against the autodiff engine."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def grad_check(fn, params, eps=1e-5, tol=1e-4):
    """Compare analytic gradients of a scalar-valued fn against central differences.

    fn must rebuild its graph on every call from the given parameter tensors.
    Returns a GradCheckReport with the max relative error per parameter.
    """
    for p in params:
        p.zero_grad()
    loss = fn(*params)
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    for idx, p in enumerate(params):
        numeric = np.zeros_like(p.data)
        flat = p.data.ravel()
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*params).item()
            flat[i] = orig - eps
            down = fn(*params).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        a, n = analytic[idx], numeric
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
        err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        report.per_param[f"param{idx}"] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report


def sample_smooth(rng, shape, kinks=(0.0, 6.0), margin=1e-3):
    """Draw a standard-normal sample resampled until clear of activation kinks."""
    x = rng.standard_normal(shape)
    for k in kinks:
        bad = np.abs(x - k) < margin
        while np.any(bad):
            x[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(x - k) < margin
    return x
