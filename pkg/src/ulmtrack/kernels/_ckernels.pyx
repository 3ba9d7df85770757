# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and semantics; ``ulmtrack.kernels`` picks one at import.
"""
import numpy as np

from libc.math cimport exp, floor, ceil, sqrt, cos, M_PI
from libc.stdlib cimport malloc, free


def splat_gaussians(const double[:, ::1] points, const double[::1] amps,
                    origin, spacing, shape, sigma, double radius=4.0):
    cdef Py_ssize_t nx = shape[0], ny = shape[1], nz = shape[2]
    out = np.zeros((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double sx = spacing[0], sy = spacing[1], sz = spacing[2]
    cdef double gx = sigma[0] / sx, gy = sigma[1] / sy, gz = sigma[2] / sz
    cdef double rx = radius * gx, ry = radius * gy, rz = radius * gz
    cdef Py_ssize_t kx = <Py_ssize_t>(2 * rx) + 3
    cdef Py_ssize_t ky = <Py_ssize_t>(2 * ry) + 3
    cdef Py_ssize_t kz = <Py_ssize_t>(2 * rz) + 3
    cdef double *wx = <double *>malloc(kx * sizeof(double))
    cdef double *wy = <double *>malloc(ky * sizeof(double))
    cdef double *wz = <double *>malloc(kz * sizeof(double))
    cdef Py_ssize_t n, i, j, k, i0, i1, j0, j1, k0, k1
    cdef double cx, cy, cz, a, d, wxy
    try:
        with nogil:
            for n in range(points.shape[0]):
                a = amps[n]
                if a == 0.0:
                    continue
                cx = (points[n, 0] - ox) / sx
                cy = (points[n, 1] - oy) / sy
                cz = (points[n, 2] - oz) / sz
                i0 = <Py_ssize_t>ceil(cx - rx)
                i1 = <Py_ssize_t>floor(cx + rx)
                j0 = <Py_ssize_t>ceil(cy - ry)
                j1 = <Py_ssize_t>floor(cy + ry)
                k0 = <Py_ssize_t>ceil(cz - rz)
                k1 = <Py_ssize_t>floor(cz + rz)
                if i0 < 0:
                    i0 = 0
                if j0 < 0:
                    j0 = 0
                if k0 < 0:
                    k0 = 0
                if i1 > nx - 1:
                    i1 = nx - 1
                if j1 > ny - 1:
                    j1 = ny - 1
                if k1 > nz - 1:
                    k1 = nz - 1
                if i0 > i1 or j0 > j1 or k0 > k1:
                    continue
                for i in range(i0, i1 + 1):
                    d = (i - cx) / gx
                    wx[i - i0] = exp(-0.5 * d * d)
                for j in range(j0, j1 + 1):
                    d = (j - cy) / gy
                    wy[j - j0] = exp(-0.5 * d * d)
                for k in range(k0, k1 + 1):
                    d = (k - cz) / gz
                    wz[k - k0] = exp(-0.5 * d * d)
                for i in range(i0, i1 + 1):
                    for j in range(j0, j1 + 1):
                        wxy = a * wx[i - i0] * wy[j - j0]
                        for k in range(k0, k1 + 1):
                            o[i, j, k] += wxy * wz[k - k0]
    finally:
        free(wx)
        free(wy)
        free(wz)
    return out


cdef inline void _axis_setup(double u, Py_ssize_t nref, Py_ssize_t nmov,
                             Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # ref index i is valid when 0 <= i + u <= nmov - 1
    cdef Py_ssize_t a = <Py_ssize_t>ceil(-u)
    cdef Py_ssize_t b = <Py_ssize_t>floor(nmov - 1 - u)
    if a < 0:
        a = 0
    if b > nref - 1:
        b = nref - 1
    lo[0] = a
    hi[0] = b


cdef inline void _locate(double x, Py_ssize_t n, Py_ssize_t *i0,
                         double *f) noexcept nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(x)
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    i0[0] = i
    f[0] = x - i


def trilinear_ssd(const double[:, :, ::1] ref, const double[:, :, ::1] mov,
                  offset, spacing):
    """Sums needed for SSD cost, its gradient and Gauss-Newton normal equations.

    Returns ``(count, sse, rg, gg)`` where ``rg`` is sum(r * grad m) (3,)
    and ``gg`` the six unique entries of sum(grad m grad m^T) in the order
    xx, xy, xz, yy, yz, zz. Gradients are per millimetre.
    """
    cdef double ux = offset[0], uy = offset[1], uz = offset[2]
    cdef double sx = spacing[0], sy = spacing[1], sz = spacing[2]
    cdef Py_ssize_t mx = mov.shape[0], my = mov.shape[1], mz = mov.shape[2]
    cdef Py_ssize_t ilo, ihi, jlo, jhi, klo, khi, i, j, k, a, b, c
    cdef double fx, fy, fz, gx_, gy_, gz_, m, r, dx, dy, dz
    cdef double c000, c100, c010, c110, c001, c101, c011, c111
    cdef long count = 0
    cdef double sse = 0, rgx = 0, rgy = 0, rgz = 0
    cdef double gxx = 0, gxy = 0, gxz = 0, gyy = 0, gyz = 0, gzz = 0
    if mx < 2 or my < 2 or mz < 2:
        raise ValueError("moving volume needs at least 2 voxels per axis")
    _axis_setup(ux, ref.shape[0], mx, &ilo, &ihi)
    _axis_setup(uy, ref.shape[1], my, &jlo, &jhi)
    _axis_setup(uz, ref.shape[2], mz, &klo, &khi)
    with nogil:
        for i in range(ilo, ihi + 1):
            _locate(i + ux, mx, &a, &fx)
            gx_ = 1.0 - fx
            for j in range(jlo, jhi + 1):
                _locate(j + uy, my, &b, &fy)
                gy_ = 1.0 - fy
                for k in range(klo, khi + 1):
                    _locate(k + uz, mz, &c, &fz)
                    gz_ = 1.0 - fz
                    c000 = mov[a, b, c]
                    c100 = mov[a + 1, b, c]
                    c010 = mov[a, b + 1, c]
                    c110 = mov[a + 1, b + 1, c]
                    c001 = mov[a, b, c + 1]
                    c101 = mov[a + 1, b, c + 1]
                    c011 = mov[a, b + 1, c + 1]
                    c111 = mov[a + 1, b + 1, c + 1]
                    m = (gx_ * gy_ * gz_ * c000 + fx * gy_ * gz_ * c100
                         + gx_ * fy * gz_ * c010 + fx * fy * gz_ * c110
                         + gx_ * gy_ * fz * c001 + fx * gy_ * fz * c101
                         + gx_ * fy * fz * c011 + fx * fy * fz * c111)
                    dx = (gy_ * gz_ * (c100 - c000) + fy * gz_ * (c110 - c010)
                          + gy_ * fz * (c101 - c001) + fy * fz * (c111 - c011)) / sx
                    dy = (gx_ * gz_ * (c010 - c000) + fx * gz_ * (c110 - c100)
                          + gx_ * fz * (c011 - c001) + fx * fz * (c111 - c101)) / sy
                    dz = (gx_ * gy_ * (c001 - c000) + fx * gy_ * (c101 - c100)
                          + gx_ * fy * (c011 - c010) + fx * fy * (c111 - c110)) / sz
                    r = ref[i, j, k] - m
                    count += 1
                    sse += r * r
                    rgx += r * dx
                    rgy += r * dy
                    rgz += r * dz
                    gxx += dx * dx
                    gxy += dx * dy
                    gxz += dx * dz
                    gyy += dy * dy
                    gyz += dy * dz
                    gzz += dz * dz
    return (count, sse, np.array([rgx, rgy, rgz]),
            np.array([gxx, gxy, gxz, gyy, gyz, gzz]))


def simulate_rf(const double[:, ::1] points, const double[::1] amps,
                const double[:, ::1] elements, double c, double fs, double t0,
                Py_ssize_t n_samples, double f0, double pulse_a,
                double half_window, bint directivity=False):
    cdef Py_ssize_t ne = elements.shape[0]
    out = np.zeros((ne, n_samples), dtype=np.float64)
    cdef double[:, ::1] rf = out
    cdef Py_ssize_t s, e, n, n0, n1
    cdef double px, py, pz, a, dx, dy, d, tau, t, w
    cdef double two_pi_f0 = 2.0 * M_PI * f0
    with nogil:
        for s in range(points.shape[0]):
            px = points[s, 0]
            py = points[s, 1]
            pz = points[s, 2]
            if amps[s] == 0.0:
                continue
            for e in range(ne):
                dx = elements[e, 0] - px
                dy = elements[e, 1] - py
                d = sqrt(dx * dx + dy * dy + (elements[e, 2] - pz) * (elements[e, 2] - pz))
                tau = pz / c + d / c
                a = amps[s]
                if directivity and d > 0:
                    a = a * (pz - elements[e, 2]) / d
                n0 = <Py_ssize_t>ceil((tau - half_window - t0) * fs)
                n1 = <Py_ssize_t>floor((tau + half_window - t0) * fs)
                if n0 < 0:
                    n0 = 0
                if n1 > n_samples - 1:
                    n1 = n_samples - 1
                for n in range(n0, n1 + 1):
                    t = t0 + n / fs - tau
                    rf[e, n] += a * exp(-pulse_a * t * t) * cos(two_pi_f0 * t)
    return out


cdef inline double _lerp_sample(const double[:, ::1] rf, Py_ssize_t e,
                                double f, Py_ssize_t ns) noexcept nogil:
    cdef Py_ssize_t i
    cdef double w
    if f < 0 or f > ns - 1:
        return 0.0
    i = <Py_ssize_t>floor(f)
    if i > ns - 2:
        i = ns - 2
    w = f - i
    return rf[e, i] * (1.0 - w) + rf[e, i + 1] * w


def das_iq(const double[:, ::1] rf, const double[:, ::1] elements,
           const double[:, ::1] points, double c, double fs, double t0,
           double quarter_shift):
    """Delay-and-sum of a plane-wave acquisition, in-phase and quadrature sums.

    ``quarter_shift`` is a quarter period of the demodulation frequency in
    samples; the quadrature sum reads every channel that much later.
    """
    cdef Py_ssize_t npts = points.shape[0], ne = elements.shape[0]
    cdef Py_ssize_t ns = rf.shape[1]
    out_i = np.zeros(npts, dtype=np.float64)
    out_q = np.zeros(npts, dtype=np.float64)
    cdef double[::1] oi = out_i
    cdef double[::1] oq = out_q
    cdef Py_ssize_t p, e
    cdef double px, py, pz, dx, dy, dz, tau, f, si, sq
    with nogil:
        for p in range(npts):
            px = points[p, 0]
            py = points[p, 1]
            pz = points[p, 2]
            si = 0.0
            sq = 0.0
            for e in range(ne):
                dx = elements[e, 0] - px
                dy = elements[e, 1] - py
                dz = elements[e, 2] - pz
                tau = pz / c + sqrt(dx * dx + dy * dy + dz * dz) / c
                f = (tau - t0) * fs
                si += _lerp_sample(rf, e, f, ns)
                sq += _lerp_sample(rf, e, f + quarter_shift, ns)
            oi[p] = si
            oq[p] = sq
    return out_i, out_q
