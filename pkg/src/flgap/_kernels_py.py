"""numpy reference versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, gscale, l2, decay):
    dt = p.dtype.type
    gi = g * dt(gscale) + dt(l2) * p
    m *= dt(beta1)
    m += dt(1.0 - beta1) * gi
    v *= dt(beta2)
    v += dt(1.0 - beta2) * (gi * gi)
    denom = np.sqrt(v * dt(1.0 / bc2))
    denom += dt(eps)
    p *= dt(1.0 - decay)
    p -= dt(lr / bc1) * m / denom


def relu_mask(delta, h):
    delta[h <= 0] = 0


def hadamard_accumulate(out, a, b, shift):
    out += a * (b + shift)

