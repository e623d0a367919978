# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise kernels for the training and NTK hot loops.

Every routine works in place on C-contiguous arrays and mirrors the numpy
reference in ``_kernels_py`` operation for operation.
"""

from libc.math cimport sqrt

ctypedef fused real:
    float
    double


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
              double lr, double beta1, double beta2, double eps,
              double bc1, double bc2, double gscale, double l2, double decay):
    """One fused Adam/AdamW update of a flat parameter block."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef real b1 = <real>beta1, b2 = <real>beta2
    cdef real c1 = <real>(1.0 - beta1), c2 = <real>(1.0 - beta2)
    cdef real step = <real>(lr / bc1), inv_bc2 = <real>(1.0 / bc2), r_eps = <real>eps
    cdef real r_gs = <real>gscale, r_l2 = <real>l2, keep = <real>(1.0 - decay)
    cdef real gi, mi, vi
    cdef real* pp = &p[0]
    cdef real* gp = &g[0]
    cdef real* mp = &m[0]
    cdef real* vp = &v[0]
    with nogil:
        for i in range(n):
            gi = gp[i] * r_gs + r_l2 * pp[i]
            mi = b1 * mp[i] + c1 * gi
            vi = b2 * vp[i] + c2 * (gi * gi)
            mp[i] = mi
            vp[i] = vi
            pp[i] = keep * pp[i] - step * mi / (<real>sqrt(vi * inv_bc2) + r_eps)


def relu_mask(real[:, ::1] delta, real[:, ::1] h):
    """delta[h <= 0] = 0."""
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(delta.shape[0]):
            for j in range(delta.shape[1]):
                if h[i, j] <= 0:
                    delta[i, j] = 0


def hadamard_accumulate(double[:, ::1] out, double[:, ::1] a, double[:, ::1] b, double shift):
    """out += a * (b + shift)."""
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] += a[i, j] * (b[i, j] + shift)

