"""Independent numerical oracles shared by several test modules."""

import numpy as np
from scipy.integrate import trapezoid


def grid_posterior(p0, mu0, s0sq, ys, hs, sigma_sq, step=1e-3):
    """Numerical Bayes on a theta grid: returns (p, mean, var) given observations."""
    sd = np.sqrt(s0sq)
    theta = np.arange(mu0 - 12 * sd, mu0 + 12 * sd + step, step)
    logw = -0.5 * (theta - mu0) ** 2 / s0sq - 0.5 * np.log(2 * np.pi * s0sq)
    log0 = 0.0
    for y, h in zip(ys, hs):
        v = sigma_sq / h
        logw += -0.5 * (y - theta) ** 2 / v - 0.5 * np.log(2 * np.pi * v)
        log0 += -0.5 * y**2 / v - 0.5 * np.log(2 * np.pi * v)
    shift = max(logw.max(), log0)
    w = np.exp(logw - shift)
    z1 = trapezoid(w, theta)
    mean = trapezoid(w * theta, theta) / z1
    var = trapezoid(w * (theta - mean) ** 2, theta) / z1
    a = p0 * z1
    b = (1 - p0) * np.exp(log0 - shift)
    return a / (a + b), mean, var
