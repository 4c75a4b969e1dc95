"""Compiled per-pixel ray marching kernels for the shadow renderer.

Every kernel walks the segment ``a + t (b - a)`` at ``t_i = (i + 0.5) / N``.
Samples that lie outside every primitive's cull region (``F > fcut``) are
treated as occupancy 0; with ``fcut = 1 + 30 / k`` the skipped values are
below ``1e-13``.

Primitive arrays follow :class:`umbra.occfield.ShapeSpec`; gradients with
respect to primitive parameters are returned as an ``(M, 7)`` block
``[centre(3), half_extent(3), exponent]``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_jit = dict(cache=True, nogil=True, error_model="numpy")

BOX = 1


@njit(inline="always", **_jit)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(inline="always", **_jit)
def _segment_ranges(y0, dy, kinds, centers, half, expo, fcut, N, lo, hi):
    """Fill ``lo[m], hi[m]`` with the sample index range inside primitive m's
    cull region (``lo > hi`` when empty).  Returns the overall (min, max)."""
    M = kinds.shape[0]
    gmin = N
    gmax = -1
    for m in range(M):
        t0 = 0.0
        t1 = 1.0
        empty = False
        if kinds[m] == BOX:
            for j in range(3):
                ext = half[m, j] * fcut ** (1.0 / expo[m])
                p = y0[j] - centers[m, j]
                if abs(dy[j]) < 1e-15:
                    if abs(p) > ext:
                        empty = True
                        break
                    continue
                ta = (-ext - p) / dy[j]
                tb = (ext - p) / dy[j]
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
                if t0 > t1:
                    empty = True
                    break
        else:
            A = 0.0
            B = 0.0
            C = -fcut
            for j in range(3):
                inv = 1.0 / (half[m, j] * half[m, j])
                p = y0[j] - centers[m, j]
                A += dy[j] * dy[j] * inv
                B += 2.0 * p * dy[j] * inv
                C += p * p * inv
            disc = B * B - 4.0 * A * C
            if A <= 0.0 or disc < 0.0:
                empty = True
            else:
                sq = math.sqrt(disc)
                ta = (-B - sq) / (2.0 * A)
                tb = (-B + sq) / (2.0 * A)
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
                if t0 > t1:
                    empty = True
        if empty:
            lo[m] = 1
            hi[m] = 0
            continue
        i0 = int(math.ceil(t0 * N - 0.5))
        i1 = int(math.floor(t1 * N - 0.5))
        if i0 < 0:
            i0 = 0
        if i1 > N - 1:
            i1 = N - 1
        lo[m] = i0
        hi[m] = i1
        if i0 <= i1:
            if i0 < gmin:
                gmin = i0
            if i1 > gmax:
                gmax = i1
    return gmin, gmax


@njit(inline="always", **_jit)
def _to_object(a, b, R, T, y0, dy):
    # y = R^T (x - T)
    for j in range(3):
        s0 = 0.0
        s1 = 0.0
        for i in range(3):
            s0 += R[i, j] * (a[i] - T[i])
            s1 += R[i, j] * (b[i] - a[i])
        y0[j] = s0
        dy[j] = s1


@njit(inline="always", **_jit)
def _sample_terms(i, N, y0, dy, kinds, centers, half, expo, k, lo, hi, ex, re, lr):
    """Occupancy of sample i.  Caches per primitive ``ex = exp(-k (1 - F))``
    (``-1`` for primitives not active at i) and, for boxes, the per-axis
    powers ``re = r**e`` and logs ``lr = log r``."""
    t = (i + 0.5) / N
    prod = 1.0
    for m in range(kinds.shape[0]):
        if i < lo[m] or i > hi[m]:
            ex[m] = -1.0
            continue
        F = 0.0
        if kinds[m] == BOX:
            e = expo[m]
            for j in range(3):
                rr = abs(y0[j] + t * dy[j] - centers[m, j]) / half[m, j]
                if rr > 0.0:
                    l = math.log(rr)
                    p = math.exp(e * l)
                else:
                    l = -math.inf
                    p = 0.0
                re[m, j] = p
                lr[m, j] = l
                F += p
        else:
            for j in range(3):
                rr = (y0[j] + t * dy[j] - centers[m, j]) / half[m, j]
                F += rr * rr
        x = math.exp(-k * (1.0 - F))
        ex[m] = x
        prod *= x / (1.0 + x)
    return 1.0 - prod


@njit(inline="always", **_jit)
def _pixel_forward(a, b, N, kinds, centers, half, expo, k, R, T, fcut, smooth, tau,
                   y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf):
    """Pool one segment, caching per-sample terms for a backward sweep.

    Returns ``(value, max occupancy, normaliser, first, last)`` where
    ``first..last`` is the evaluated sample range (empty when last < first).
    """
    _to_object(a, b, R, T, y0, dy)
    gmin, gmax = _segment_ranges(y0, dy, kinds, centers, half, expo, fcut, N, lo, hi)
    if gmax < gmin:
        return 0.0, 0.0, float(N), gmin, gmax
    mx = 0.0
    Z = 0.0
    Sf = 0.0
    for i in range(gmin, gmax + 1):
        f = _sample_terms(i, N, y0, dy, kinds, centers, half, expo, k, lo, hi,
                          exbuf[i], rebuf[i], lrbuf[i])
        fbuf[i] = f
        if smooth:
            if f > mx:
                scale = math.exp((mx - f) / tau)
                Z = Z * scale
                Sf = Sf * scale
                mx = f
            w = math.exp((f - mx) / tau)
            Z += w
            Sf += w * f
        elif f > mx:
            mx = f
    if not smooth:
        return mx, mx, 1.0, gmin, gmax
    # culled samples have occupancy 0 but still enter the normaliser
    Z += (N - (gmax - gmin + 1)) * math.exp(-mx / tau)
    return Sf / Z, mx, Z, gmin, gmax


@njit(inline="always", **_jit)
def _pixel_backward(dv, S, mx, Z, gmin, gmax, a, b, N, kinds, centers, half, expo, k, R, T,
                    smooth, tau, y0, dy, fbuf, exbuf, rebuf, lrbuf, g_y,
                    g_prim, g_k, g_R, g_T, g_light):
    """Accumulate ``dv * d value / d (params, k, R, T, light)``; returns the new ``g_k``."""
    M = kinds.shape[0]
    argmax = gmin
    if not smooth:
        for i in range(gmin, gmax + 1):
            if fbuf[i] >= mx:
                argmax = i
                break
    for i in range(gmin, gmax + 1):
        if smooth:
            f = fbuf[i]
            gf = dv * math.exp((f - mx) / tau) / Z * (1.0 + (f - S) / tau)
        elif i == argmax:
            gf = dv
        else:
            continue
        if gf == 0.0:
            continue
        t = (i + 0.5) / N
        ex = exbuf[i]
        prod = 1.0
        for m in range(M):
            if ex[m] >= 0.0:
                prod *= ex[m] / (1.0 + ex[m])
        g_y[0] = 0.0
        g_y[1] = 0.0
        g_y[2] = 0.0
        for m in range(M):
            x = ex[m]
            if x < 0.0:
                continue
            om = x / (1.0 + x)
            fm = 1.0 / (1.0 + x)
            if om > 1e-280:
                others = prod / om
            else:
                others = 1.0
                for n in range(M):
                    if n != m and ex[n] >= 0.0:
                        others *= ex[n] / (1.0 + ex[n])
            dfm = fm * om
            # f = 1 - prod(1 - f_m),  f_m = sigmoid(k (1 - F_m))
            gF = -gf * others * k * dfm
            if kinds[m] == BOX:
                e = expo[m]
                F = 0.0
                dlog = 0.0
                for j in range(3):
                    p = rebuf[i, m, j]
                    F += p
                    d = y0[j] + t * dy[j] - centers[m, j]
                    if p > 0.0:
                        dlog += p * lrbuf[i, m, j]
                        dFdy = e * p / d
                    else:
                        dFdy = 0.0
                    g_prim[m, j] -= gF * dFdy
                    g_prim[m, 3 + j] -= gF * e * p / half[m, j]
                    g_y[j] += gF * dFdy
                g_prim[m, 6] += gF * dlog
            else:
                F = 0.0
                for j in range(3):
                    d = y0[j] + t * dy[j] - centers[m, j]
                    inv = 1.0 / half[m, j]
                    rr = d * inv
                    F += rr * rr
                    dFdy = 2.0 * rr * inv
                    g_prim[m, j] -= gF * dFdy
                    g_prim[m, 3 + j] -= gF * 2.0 * rr * rr * inv
                    g_y[j] += gF * dFdy
            g_k += gf * others * dfm * (1.0 - F)
        # y = R^T (x - T),  x = a + t (b - a)
        for i2 in range(3):
            xi = a[i2] + t * (b[i2] - a[i2])
            gx = 0.0
            for j in range(3):
                gx += R[i2, j] * g_y[j]
                g_R[i2, j] += (xi - T[i2]) * g_y[j]
            g_T[i2] -= gx
            g_light[i2] += (1.0 - t) * gx
    return g_k


@njit(inline="always", **_jit)
def _buffers(N, M):
    return (np.empty(3), np.empty(3), np.empty(M, dtype=np.int64), np.empty(M, dtype=np.int64),
            np.empty(N), np.empty((N, M)), np.empty((N, M, 3)), np.empty((N, M, 3)))


@njit(**_jit)
def render_segments(starts, ends, mask, N, kinds, centers, half, expo, k, R, T, fcut, smooth, tau):
    """Max-pooled (hard) or Boltzmann-smoothed (smooth) occupancy per segment.

    ``starts``/``ends`` are ``(P, 3)``; rows with ``mask`` False yield 0.
    """
    P = starts.shape[0]
    out = np.zeros(P)
    y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf = _buffers(N, kinds.shape[0])
    for p in range(P):
        if not mask[p]:
            continue
        v, _, _, _, _ = _pixel_forward(starts[p], ends[p], N, kinds, centers, half, expo, k, R, T, fcut,
                                       smooth, tau, y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf)
        out[p] = v
    return out


@njit(**_jit)
def segments_hit(starts, ends, mask, N, kinds, centers, half, expo, k, R, T, fcut, tight, threshold):
    """True where some sample along the segment has occupancy > threshold.

    Only samples inside some primitive's ``F < tight`` region can exceed the
    threshold; those are evaluated with every primitive active under ``fcut``.
    """
    P = starts.shape[0]
    M = kinds.shape[0]
    out = np.zeros(P, dtype=np.bool_)
    y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf = _buffers(1, M)
    ex = exbuf[0]
    re = rebuf[0]
    lr = lrbuf[0]
    lo2 = np.empty(M, dtype=np.int64)
    hi2 = np.empty(M, dtype=np.int64)
    for p in range(P):
        if not mask[p]:
            continue
        _to_object(starts[p], ends[p], R, T, y0, dy)
        gmin, gmax = _segment_ranges(y0, dy, kinds, centers, half, expo, tight, N, lo2, hi2)
        if gmax < gmin:
            continue
        _segment_ranges(y0, dy, kinds, centers, half, expo, fcut, N, lo, hi)
        for i in range(gmin, gmax + 1):
            near = False
            for m in range(M):
                if lo2[m] <= i and i <= hi2[m]:
                    near = True
                    break
            if not near:
                continue
            f = _sample_terms(i, N, y0, dy, kinds, centers, half, expo, k, lo, hi, ex, re, lr)
            if f > threshold:
                out[p] = True
                break
    return out


@njit(**_jit)
def render_light_backward(light, ends, dvals, N, kinds, centers, half, expo, k, R, T, fcut, smooth, tau):
    """Pull ``dvals`` (dL/d pixel) back through the light-ray renderer.

    Returns ``(g_prim (M, 7), g_k, g_R (3, 3), g_T (3,), g_light (3,))``.
    Pixels with ``dvals == 0`` are skipped entirely.
    """
    P = ends.shape[0]
    M = kinds.shape[0]
    g_prim = np.zeros((M, 7))
    g_k = 0.0
    g_R = np.zeros((3, 3))
    g_T = np.zeros(3)
    g_light = np.zeros(3)
    g_y = np.empty(3)
    y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf = _buffers(N, M)
    for p in range(P):
        dv = dvals[p]
        if dv == 0.0:
            continue
        b = ends[p]
        S, mx, Z, gmin, gmax = _pixel_forward(light, b, N, kinds, centers, half, expo, k, R, T, fcut,
                                              smooth, tau, y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf)
        if gmax < gmin:
            continue
        g_k = _pixel_backward(dv, S, mx, Z, gmin, gmax, light, b, N, kinds, centers, half, expo, k, R, T,
                              smooth, tau, y0, dy, fbuf, exbuf, rebuf, lrbuf, g_y,
                              g_prim, g_k, g_R, g_T, g_light)
    return g_prim, g_k, g_R, g_T, g_light


@njit(**_jit)
def light_bce_pass(light, ends, hit, valid, observed, N, kinds, centers, half, expo, k, R, T, fcut,
                   smooth, tau, eps, straight_through):
    """Fused render + masked BCE + backward over all pixels in one sweep.

    ``valid`` marks pixels entering the loss; the mean is over their count.
    Returns ``(values, loss, g_prim, g_k, g_R, g_T, g_light)``.
    """
    P = ends.shape[0]
    M = kinds.shape[0]
    n = 0
    for p in range(P):
        if valid[p]:
            n += 1
    values = np.zeros(P)
    loss = 0.0
    g_prim = np.zeros((M, 7))
    g_k = 0.0
    g_R = np.zeros((3, 3))
    g_T = np.zeros(3)
    g_light = np.zeros(3)
    g_y = np.empty(3)
    y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf = _buffers(N, M)
    for p in range(P):
        if not hit[p]:
            continue
        b = ends[p]
        S, mx, Z, gmin, gmax = _pixel_forward(light, b, N, kinds, centers, half, expo, k, R, T, fcut,
                                              smooth, tau, y0, dy, lo, hi, fbuf, exbuf, rebuf, lrbuf)
        values[p] = S
        if not valid[p]:
            continue
        s = observed[p]
        q = min(max(S, eps), 1.0 - eps)
        loss -= s * math.log(q) + (1.0 - s) * math.log1p(-q)
        if gmax < gmin:
            continue
        if not straight_through and (S <= eps or S >= 1.0 - eps):
            continue
        dv = (-(s / q) + (1.0 - s) / (1.0 - q)) / n
        g_k = _pixel_backward(dv, S, mx, Z, gmin, gmax, light, b, N, kinds, centers, half, expo, k, R, T,
                              smooth, tau, y0, dy, fbuf, exbuf, rebuf, lrbuf, g_y,
                              g_prim, g_k, g_R, g_T, g_light)
    if n > 0:
        loss /= n
    return values, loss, g_prim, g_k, g_R, g_T, g_light
