"""Pure numpy versions of the compiled kernels.

Same signatures and semantics as ``_ckernels``; results agree to rounding.
"""
import numpy as np


def splat_gaussians(points, amps, origin, spacing, shape, sigma, radius=4.0):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    amps = np.asarray(amps, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    out = np.zeros(shape, dtype=np.float64)
    keep = amps != 0.0
    points, amps = points[keep], amps[keep]
    if len(amps) == 0:
        return out
    spacing = np.asarray(spacing, dtype=np.float64)
    g = np.asarray(sigma, dtype=np.float64) / spacing
    r = radius * g
    centers = (points - np.asarray(origin, dtype=np.float64)) / spacing

    weights = []
    indices = []
    for ax in range(3):
        k = int(2 * r[ax]) + 3
        lo = np.ceil(centers[:, ax] - r[ax]).astype(np.int64)
        idx = lo[:, None] + np.arange(k)[None, :]
        d = (idx - centers[:, ax:ax + 1]) / g[ax]
        w = np.exp(-0.5 * d * d)
        inside = (idx <= np.floor(centers[:, ax:ax + 1] + r[ax])) & (idx >= 0) & (idx < shape[ax])
        w = np.where(inside, w, 0.0)
        weights.append(w)
        indices.append(np.clip(idx, 0, shape[ax] - 1))

    wx, wy, wz = weights
    ix, iy, iz = indices
    w = amps[:, None, None, None] * wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
    flat = (ix[:, :, None, None] * shape[1] + iy[:, None, :, None]) * shape[2] + iz[:, None, None, :]
    flat = np.broadcast_to(flat, w.shape)
    nz = w != 0.0
    out += np.bincount(flat[nz], weights=w[nz], minlength=out.size).reshape(shape)
    return out


def _axis_index(u, nref, nmov):
    lo = max(int(np.ceil(-u)), 0)
    hi = min(int(np.floor(nmov - 1 - u)), nref - 1)
    i = np.arange(lo, hi + 1)
    x = i + u
    i0 = np.clip(np.floor(x).astype(np.int64), 0, nmov - 2)
    return i, i0, x - i0


def trilinear_ssd(ref, mov, offset, spacing):
    ref = np.asarray(ref, dtype=np.float64)
    mov = np.asarray(mov, dtype=np.float64)
    if min(mov.shape) < 2:
        raise ValueError("moving volume needs at least 2 voxels per axis")
    sx, sy, sz = (float(s) for s in spacing)
    ia, a, fx = _axis_index(float(offset[0]), ref.shape[0], mov.shape[0])
    ib, b, fy = _axis_index(float(offset[1]), ref.shape[1], mov.shape[1])
    ic, c, fz = _axis_index(float(offset[2]), ref.shape[2], mov.shape[2])
    if len(ia) == 0 or len(ib) == 0 or len(ic) == 0:
        return 0, 0.0, np.zeros(3), np.zeros(6)

    fx = fx[:, None, None]
    fy = fy[None, :, None]
    fz = fz[None, None, :]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    def corner(di, dj, dk):
        return mov[np.ix_(a + di, b + dj, c + dk)]

    c000, c100, c010, c110 = corner(0, 0, 0), corner(1, 0, 0), corner(0, 1, 0), corner(1, 1, 0)
    c001, c101, c011, c111 = corner(0, 0, 1), corner(1, 0, 1), corner(0, 1, 1), corner(1, 1, 1)

    m = (gx * gy * gz * c000 + fx * gy * gz * c100
         + gx * fy * gz * c010 + fx * fy * gz * c110
         + gx * gy * fz * c001 + fx * gy * fz * c101
         + gx * fy * fz * c011 + fx * fy * fz * c111)
    dx = (gy * gz * (c100 - c000) + fy * gz * (c110 - c010)
          + gy * fz * (c101 - c001) + fy * fz * (c111 - c011)) / sx
    dy = (gx * gz * (c010 - c000) + fx * gz * (c110 - c100)
          + gx * fz * (c011 - c001) + fx * fz * (c111 - c101)) / sy
    dz = (gx * gy * (c001 - c000) + fx * gy * (c101 - c100)
          + gx * fy * (c011 - c010) + fx * fy * (c111 - c110)) / sz

    r = ref[np.ix_(ia, ib, ic)] - m
    rg = np.array([np.sum(r * dx), np.sum(r * dy), np.sum(r * dz)])
    gg = np.array([np.sum(dx * dx), np.sum(dx * dy), np.sum(dx * dz),
                   np.sum(dy * dy), np.sum(dy * dz), np.sum(dz * dz)])
    return int(r.size), float(np.sum(r * r)), rg, gg


def simulate_rf(points, amps, elements, c, fs, t0, n_samples, f0, pulse_a,
                half_window, directivity=False):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    elements = np.asarray(elements, dtype=np.float64)
    out = np.zeros((elements.shape[0], int(n_samples)), dtype=np.float64)
    k = int(2 * half_window * fs) + 3
    rows = np.arange(elements.shape[0])[:, None]
    for p, a in zip(points, np.asarray(amps, dtype=np.float64)):
        if a == 0.0:
            continue
        d = np.sqrt(np.sum((elements - p) ** 2, axis=1))
        tau = p[2] / c + d / c
        amp = np.full_like(d, a)
        if directivity:
            amp = np.where(d > 0, a * (p[2] - elements[:, 2]) / np.where(d > 0, d, 1.0), a)
        n0 = np.ceil((tau - half_window - t0) * fs).astype(np.int64)
        n1 = np.floor((tau + half_window - t0) * fs).astype(np.int64)
        n = np.maximum(n0, 0)[:, None] + np.arange(k)[None, :]
        valid = (n <= np.minimum(n1, n_samples - 1)[:, None])
        t = t0 + n / fs - tau[:, None]
        vals = amp[:, None] * np.exp(-pulse_a * t * t) * np.cos(2.0 * np.pi * f0 * t)
        np.add.at(out, (np.broadcast_to(rows, n.shape)[valid], n[valid]), vals[valid])
    return out


def _lerp_rows(rf, f):
    ns = rf.shape[1]
    ok = (f >= 0) & (f <= ns - 1)
    i = np.clip(np.floor(f).astype(np.int64), 0, ns - 2)
    w = f - i
    rows = np.arange(rf.shape[0])[:, None]
    v = rf[rows, i] * (1.0 - w) + rf[rows, i + 1] * w
    return np.where(ok, v, 0.0)


def das_iq(rf, elements, points, c, fs, t0, quarter_shift):
    rf = np.asarray(rf, dtype=np.float64)
    elements = np.asarray(elements, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out_i = np.zeros(len(points))
    out_q = np.zeros(len(points))
    # fixed element blocks so each voxel's summation order does not depend on
    # how many points share the call; point chunks keep temporaries small
    block = 64
    step = max(1, 4_000_000 // block)
    for p0 in range(0, len(points), step):
        pts = points[p0:p0 + step]
        for e0 in range(0, len(elements), block):
            el = elements[e0:e0 + block]
            d = np.sqrt(((el[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
            tau = pts[None, :, 2] / c + d / c
            f = (tau - t0) * fs
            sub = rf[e0:e0 + block]
            out_i[p0:p0 + step] += _lerp_rows(sub, f).sum(axis=0)
            out_q[p0:p0 + step] += _lerp_rows(sub, f + quarter_shift).sum(axis=0)
    return out_i, out_q
