"""Compiled gather/scatter loops for factor interpolation and ray compositing.

All coordinate arguments are continuous node indices (align-corners), already
clamped into ``[0, n - 1]`` by the caller. Backward kernels accumulate into the
gradient buffers they are given; they never zero them.
"""
import math

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _cell(u, n):
    top = n - 1
    if u <= 0.0:
        return 0, 0.0
    if u >= top:
        return top - 1, 1.0
    i = int(u)
    return i, u - i


@nb.njit(cache=True)
def vm_forward(vec, mat, uv, ua, ub, out, col):
    # out[s, col + r] = vec_r(uv) * mat_r(ua, ub)
    n_rank, n_v = vec.shape
    n_a, n_b = mat.shape[1], mat.shape[2]
    for s in range(uv.shape[0]):
        i, fi = _cell(uv[s], n_v)
        a, fa = _cell(ua[s], n_a)
        b, fb = _cell(ub[s], n_b)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(n_rank):
            v = (1.0 - fi) * vec[r, i] + fi * vec[r, i + 1]
            m = (w00 * mat[r, a, b] + w01 * mat[r, a, b + 1]
                 + w10 * mat[r, a + 1, b] + w11 * mat[r, a + 1, b + 1])
            out[s, col + r] = v * m


@nb.njit(cache=True)
def vm_backward(vec, mat, uv, ua, ub, grad, col, gvec, gmat):
    n_rank, n_v = vec.shape
    n_a, n_b = mat.shape[1], mat.shape[2]
    for s in range(uv.shape[0]):
        i, fi = _cell(uv[s], n_v)
        a, fa = _cell(ua[s], n_a)
        b, fb = _cell(ub[s], n_b)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(n_rank):
            g = grad[s, col + r]
            if g == 0.0:
                continue
            v = (1.0 - fi) * vec[r, i] + fi * vec[r, i + 1]
            m = (w00 * mat[r, a, b] + w01 * mat[r, a, b + 1]
                 + w10 * mat[r, a + 1, b] + w11 * mat[r, a + 1, b + 1])
            gm = g * m
            gvec[r, i] += (1.0 - fi) * gm
            gvec[r, i + 1] += fi * gm
            gv = g * v
            gmat[r, a, b] += w00 * gv
            gmat[r, a, b + 1] += w01 * gv
            gmat[r, a + 1, b] += w10 * gv
            gmat[r, a + 1, b + 1] += w11 * gv


@nb.njit(cache=True)
def cp_forward(vx, vy, vz, u, out):
    n_rank = vx.shape[0]
    nx, ny, nz = vx.shape[1], vy.shape[1], vz.shape[1]
    for s in range(u.shape[0]):
        i, fi = _cell(u[s, 0], nx)
        j, fj = _cell(u[s, 1], ny)
        k, fk = _cell(u[s, 2], nz)
        for r in range(n_rank):
            a = (1.0 - fi) * vx[r, i] + fi * vx[r, i + 1]
            b = (1.0 - fj) * vy[r, j] + fj * vy[r, j + 1]
            c = (1.0 - fk) * vz[r, k] + fk * vz[r, k + 1]
            out[s, r] = a * b * c


@nb.njit(cache=True)
def cp_backward(vx, vy, vz, u, grad, gx, gy, gz):
    n_rank = vx.shape[0]
    nx, ny, nz = vx.shape[1], vy.shape[1], vz.shape[1]
    for s in range(u.shape[0]):
        i, fi = _cell(u[s, 0], nx)
        j, fj = _cell(u[s, 1], ny)
        k, fk = _cell(u[s, 2], nz)
        for r in range(n_rank):
            g = grad[s, r]
            if g == 0.0:
                continue
            a = (1.0 - fi) * vx[r, i] + fi * vx[r, i + 1]
            b = (1.0 - fj) * vy[r, j] + fj * vy[r, j + 1]
            c = (1.0 - fk) * vz[r, k] + fk * vz[r, k + 1]
            ga = g * b * c
            gb = g * a * c
            gc = g * a * b
            gx[r, i] += (1.0 - fi) * ga
            gx[r, i + 1] += fi * ga
            gy[r, j] += (1.0 - fj) * gb
            gy[r, j + 1] += fj * gb
            gz[r, k] += (1.0 - fk) * gc
            gz[r, k + 1] += fk * gc


@nb.njit(cache=True)
def trilinear(grid, u, out):
    # grid: (nx, ny, nz, ch); out: (S, ch)
    nx, ny, nz, nch = grid.shape
    for s in range(u.shape[0]):
        i, fi = _cell(u[s, 0], nx)
        j, fj = _cell(u[s, 1], ny)
        k, fk = _cell(u[s, 2], nz)
        for c in range(nch):
            c00 = grid[i, j, k, c] * (1.0 - fk) + grid[i, j, k + 1, c] * fk
            c01 = grid[i, j + 1, k, c] * (1.0 - fk) + grid[i, j + 1, k + 1, c] * fk
            c10 = grid[i + 1, j, k, c] * (1.0 - fk) + grid[i + 1, j, k + 1, c] * fk
            c11 = grid[i + 1, j + 1, k, c] * (1.0 - fk) + grid[i + 1, j + 1, k + 1, c] * fk
            c0 = c00 * (1.0 - fj) + c01 * fj
            c1 = c10 * (1.0 - fj) + c11 * fj
            out[s, c] = c0 * (1.0 - fi) + c1 * fi


@nb.njit(cache=True)
def composite_forward(offsets, sigma, delta, rgb, t, bg, out_rgb, out_depth, out_acc, weights, trans):
    """Front-to-back quadrature over packed per-ray segments.

    ``trans[q]`` receives the transmittance in front of sample ``q``.
    """
    n_rays = offsets.shape[0] - 1
    for ray in range(n_rays):
        T = 1.0
        r0 = 0.0
        r1 = 0.0
        r2 = 0.0
        d = 0.0
        for q in range(offsets[ray], offsets[ray + 1]):
            tau = sigma[q] * delta[q]
            alpha = 1.0 - math.exp(-tau)
            w = T * alpha
            trans[q] = T
            weights[q] = w
            r0 += w * rgb[q, 0]
            r1 += w * rgb[q, 1]
            r2 += w * rgb[q, 2]
            d += w * t[q]
            T = T * math.exp(-tau)
        out_rgb[ray, 0] = r0 + T * bg[ray, 0]
        out_rgb[ray, 1] = r1 + T * bg[ray, 1]
        out_rgb[ray, 2] = r2 + T * bg[ray, 2]
        out_depth[ray] = d
        out_acc[ray] = 1.0 - T


@nb.njit(cache=True)
def composite_backward(offsets, sigma, delta, rgb, bg, weights, trans, grad_rgb, g_sigma, g_color):
    """Adjoint of :func:`composite_forward` for the color output.

    dC/dc_q = w_q and dC/dsigma_q = delta_q * (T_{q+1} c_q - tail_q), where
    tail_q is everything composited behind sample q including background.
    """
    n_rays = offsets.shape[0] - 1
    for ray in range(n_rays):
        lo = offsets[ray]
        hi = offsets[ray + 1]
        if hi == lo:
            continue
        last = hi - 1
        T_end = trans[last] * math.exp(-sigma[last] * delta[last])
        g0 = grad_rgb[ray, 0]
        g1 = grad_rgb[ray, 1]
        g2 = grad_rgb[ray, 2]
        tail = T_end * (g0 * bg[ray, 0] + g1 * bg[ray, 1] + g2 * bg[ray, 2])
        for q in range(last, lo - 1, -1):
            gc = g0 * rgb[q, 0] + g1 * rgb[q, 1] + g2 * rgb[q, 2]
            T_next = trans[q] * math.exp(-sigma[q] * delta[q])
            g_sigma[q] = delta[q] * (T_next * gc - tail)
            w = weights[q]
            g_color[q, 0] = w * g0
            g_color[q, 1] = w * g1
            g_color[q, 2] = w * g2
            tail += w * gc
