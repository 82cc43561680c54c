"""Numba kernels: trapezoid marches along chords through multilinear grid fields.

Grid fields are passed flattened in C order together with the grid origin,
inverse spacing and shape.  Every chord runs backwards from a start point
``p`` along ``-theta`` over ``[0, tmax]`` with ``ceil(tmax / step)`` uniform
intervals, so the discretization matches ``geometry.chord_quadrature``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# domain codes shared with the Python side
DISK, BALL, RECT = 0, 1, 2
# bump profile codes
PLATEAU, EXPBUMP = 0, 1


@njit(cache=True, inline="always")
def _stencil(x, lo, inv_h, shape, strides, idx, wts):
    # fills idx/wts with the 2**dim multilinear corners of x (clamped to the box)
    dim = x.shape[0]
    base = 0
    fr0 = 0.0
    fr1 = 0.0
    fr2 = 0.0
    for d in range(dim):
        s = (x[d] - lo[d]) * inv_h[d]
        i = int(math.floor(s))
        if i < 0:
            i = 0
        elif i > shape[d] - 2:
            i = shape[d] - 2
        f = s - i
        if f < 0.0:
            f = 0.0
        elif f > 1.0:
            f = 1.0
        base += i * strides[d]
        if d == 0:
            fr0 = f
        elif d == 1:
            fr1 = f
        else:
            fr2 = f
    if dim == 2:
        idx[0] = base
        idx[1] = base + strides[1]
        idx[2] = base + strides[0]
        idx[3] = base + strides[0] + strides[1]
        wts[0] = (1 - fr0) * (1 - fr1)
        wts[1] = (1 - fr0) * fr1
        wts[2] = fr0 * (1 - fr1)
        wts[3] = fr0 * fr1
        return 4
    n = 0
    for a in range(2):
        for b in range(2):
            for c in range(2):
                idx[n] = base + a * strides[0] + b * strides[1] + c * strides[2]
                wa = fr0 if a else 1 - fr0
                wb = fr1 if b else 1 - fr1
                wc = fr2 if c else 1 - fr2
                wts[n] = wa * wb * wc
                n += 1
    return 8


@njit(cache=True)
def _strides(shape):
    dim = shape.shape[0]
    st = np.empty(dim, dtype=np.int64)
    acc = 1
    for d in range(dim - 1, -1, -1):
        st[d] = acc
        acc *= shape[d]
    return st


@njit(cache=True, inline="always")
def _cell(u, n):
    # cell index and clamped fraction of scaled coordinate u on n nodes
    i = int(math.floor(u))
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    f = u - i
    if f < 0.0:
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return i, f


@njit(cache=True)
def _march2(pts, dirs, pair_p, pair_d, tmax, lo, inv_h, shape, step,
            sig, G, gcol, q, G2, g2col, out_D, out_I, out_Q, out_IQ):
    nx = shape[0]
    ny = shape[1]
    use_q = q.shape[0] > 0
    for k in range(pair_p.shape[0]):
        ip = pair_p[k]
        jd = pair_d[k]
        tau = tmax[k]
        gc = gcol[k]
        g2c = g2col[k] if use_q else -1
        if tau <= 0.0:
            out_D[k] = 0.0
            out_I[k] = 0.0
            if use_q:
                out_Q[k] = 0.0
                out_IQ[k] = 0.0
            continue
        n = int(math.ceil(tau / step))
        if n < 1:
            n = 1
        dl = tau / n
        u0 = (pts[ip, 0] - lo[0]) * inv_h[0]
        v0 = (pts[ip, 1] - lo[1]) * inv_h[1]
        du = -dl * dirs[jd, 0] * inv_h[0]
        dv = -dl * dirs[jd, 1] * inv_h[1]
        D = 0.0
        Qc = 0.0
        I = 0.0
        IQ = 0.0
        s_prev = 0.0
        q_prev = 0.0
        for m in range(n + 1):
            i, fx = _cell(u0 + m * du, nx)
            j, fy = _cell(v0 + m * dv, ny)
            b = i * ny + j
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = (1.0 - fx) * fy
            w10 = fx * (1.0 - fy)
            w11 = fx * fy
            sv = w00 * sig[b] + w01 * sig[b + 1] + w10 * sig[b + ny] + w11 * sig[b + ny + 1]
            qv = 0.0
            if use_q:
                qv = w00 * q[b] + w01 * q[b + 1] + w10 * q[b + ny] + w11 * q[b + ny + 1]
            if m > 0:
                D += 0.5 * dl * (s_prev + sv)
                if use_q:
                    Qc += 0.5 * dl * (q_prev + qv)
            s_prev = sv
            q_prev = qv
            if gc >= 0 or g2c >= 0:
                w = dl if (m > 0 and m < n) else 0.5 * dl
                e = w * math.exp(-D)
                if gc >= 0:
                    I += e * (w00 * G[gc, b] + w01 * G[gc, b + 1] + w10 * G[gc, b + ny] + w11 * G[gc, b + ny + 1])
                if g2c >= 0:
                    IQ += e * Qc * (w00 * G2[g2c, b] + w01 * G2[g2c, b + 1] + w10 * G2[g2c, b + ny]
                                    + w11 * G2[g2c, b + ny + 1])
        out_D[k] = D
        out_I[k] = I
        if use_q:
            out_Q[k] = Qc
            out_IQ[k] = IQ


@njit(cache=True, inline="always")
def _tri(F, b, sx, sy, fx, fy, fz):
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    a = b
    c = b + sy
    d = b + sx
    e = b + sx + sy
    return (gx * (gy * (gz * F[a] + fz * F[a + 1]) + fy * (gz * F[c] + fz * F[c + 1]))
            + fx * (gy * (gz * F[d] + fz * F[d + 1]) + fy * (gz * F[e] + fz * F[e + 1])))


@njit(cache=True)
def _march3(pts, dirs, pair_p, pair_d, tmax, lo, inv_h, shape, step,
            sig, G, gcol, q, G2, g2col, out_D, out_I, out_Q, out_IQ):
    nx = shape[0]
    ny = shape[1]
    nz = shape[2]
    sy = nz
    sx = ny * nz
    use_q = q.shape[0] > 0
    for k in range(pair_p.shape[0]):
        ip = pair_p[k]
        jd = pair_d[k]
        tau = tmax[k]
        gc = gcol[k]
        g2c = g2col[k] if use_q else -1
        if tau <= 0.0:
            out_D[k] = 0.0
            out_I[k] = 0.0
            if use_q:
                out_Q[k] = 0.0
                out_IQ[k] = 0.0
            continue
        n = int(math.ceil(tau / step))
        if n < 1:
            n = 1
        dl = tau / n
        u0 = (pts[ip, 0] - lo[0]) * inv_h[0]
        v0 = (pts[ip, 1] - lo[1]) * inv_h[1]
        w0 = (pts[ip, 2] - lo[2]) * inv_h[2]
        du = -dl * dirs[jd, 0] * inv_h[0]
        dv = -dl * dirs[jd, 1] * inv_h[1]
        dw = -dl * dirs[jd, 2] * inv_h[2]
        D = 0.0
        Qc = 0.0
        I = 0.0
        IQ = 0.0
        s_prev = 0.0
        q_prev = 0.0
        for m in range(n + 1):
            i, fx = _cell(u0 + m * du, nx)
            j, fy = _cell(v0 + m * dv, ny)
            l, fz = _cell(w0 + m * dw, nz)
            b = i * sx + j * sy + l
            sv = _tri(sig, b, sx, sy, fx, fy, fz)
            qv = 0.0
            if use_q:
                qv = _tri(q, b, sx, sy, fx, fy, fz)
            if m > 0:
                D += 0.5 * dl * (s_prev + sv)
                if use_q:
                    Qc += 0.5 * dl * (q_prev + qv)
            s_prev = sv
            q_prev = qv
            if gc >= 0 or g2c >= 0:
                w = dl if (m > 0 and m < n) else 0.5 * dl
                e = w * math.exp(-D)
                if gc >= 0:
                    I += e * _tri(G[gc], b, sx, sy, fx, fy, fz)
                if g2c >= 0:
                    IQ += e * Qc * _tri(G2[g2c], b, sx, sy, fx, fy, fz)
        out_D[k] = D
        out_I[k] = I
        if use_q:
            out_Q[k] = Qc
            out_IQ[k] = IQ


def march(pts, dirs, pair_p, pair_d, tmax, lo, inv_h, shape, step,
          sig, G, gcol, q, G2, g2col, out_D, out_I, out_Q, out_IQ):
    """March all chords.

    Outputs per pair: optical depth ``D`` over the full chord, ``I = int
    e^{-D(l)} G(l) dl``, ``Q = int q`` and ``IQ = int e^{-D(l)} Q(l) G2(l)
    dl`` with ``Q(l) = int_0^l q``.  Columns ``gcol``/``g2col`` of -1 skip
    the corresponding integral; an empty ``q`` skips the perturbation terms.
    ``G`` and ``G2`` are stored column-major, shape (columns, grid size).
    """
    kern = _march2 if pts.shape[1] == 2 else _march3
    kern(pts, dirs, pair_p, pair_d, tmax, lo, inv_h, shape, step,
         sig, G, gcol, q, G2, g2col, out_D, out_I, out_Q, out_IQ)


@njit(cache=True)
def depth_profile(p, theta, tmax, lo, inv_h, shape, step, sig):
    """Nodes l_m, trapezoid optical depth D(l_m) and field values along one chord."""
    dim = p.shape[0]
    strides = _strides(shape)
    idx = np.empty(8, dtype=np.int64)
    wts = np.empty(8)
    x = np.empty(dim)
    n = int(math.ceil(tmax / step)) if tmax > 0 else 0
    if n < 1:
        out = np.zeros((1, 3))
        return out
    dl = tmax / n
    out = np.empty((n + 1, 3))
    D = 0.0
    s_prev = 0.0
    for m in range(n + 1):
        l = m * dl
        for d in range(dim):
            x[d] = p[d] - l * theta[d]
        nc = _stencil(x, lo, inv_h, shape, strides, idx, wts)
        sv = 0.0
        for c in range(nc):
            sv += wts[c] * sig[idx[c]]
        if m > 0:
            D += 0.5 * dl * (s_prev + sv)
        s_prev = sv
        out[m, 0] = l
        out[m, 1] = D
        out[m, 2] = sv
    return out


# ---------------------------------------------------------------------------
# pointwise single scattering of a spatially localized beam


@njit(cache=True, inline="always")
def _exit_minus(code, dparams, y, th):
    # distance from y to the boundary along -th (closed form)
    dim = y.shape[0]
    if code == RECT:
        t = 1e300
        for d in range(dim):
            v = -th[d]
            if v > 0:
                tt = (dparams[dim + d] - y[d]) / v
                if tt < t:
                    t = tt
            elif v < 0:
                tt = (dparams[d] - y[d]) / v
                if tt < t:
                    t = tt
        return max(t, 0.0)
    # round domains: dparams = center..., radius
    r = dparams[dim]
    b = 0.0
    c = -r * r
    for d in range(dim):
        yd = y[d] - dparams[d]
        b += -yd * th[d]
        c += yd * yd
    disc = b * b - c
    if disc < 0:
        disc = 0.0
    sq = math.sqrt(disc)
    if b < 0:
        t = -b + sq
    elif b + sq > 0:
        t = -c / (b + sq)
    else:
        t = 0.0
    return max(t, 0.0)


@njit(cache=True, inline="always")
def _bump(code, t):
    t = abs(t)
    if t >= 1.0:
        return 0.0
    if code == PLATEAU:
        z = 2.0 * t - 1.0
        if z <= 0.0:
            return 1.0
        a = math.exp(-1.0 / z)
        b = math.exp(-1.0 / (1.0 - z))
        return 1.0 - a / (a + b)
    return math.exp(1.0 - 1.0 / (1.0 - t * t))


@njit(cache=True)
def beam_single_scatter(starts, dirs, tmax, lo, inv_h, shape, step, fine_step,
                        sig, kappa, ptab, dom_code, dparams,
                        cdirs, cw, xc, axis, eps_x, snorm, prof, reach, out):
    """int_0^tau e^{-D(l)} kappa(y) sum_c w_c p(theta_c . theta) u_b(y, theta_c) dl.

    ``u_b(y, theta_c) = S(e_c) exp(-D_c(y))`` with ``e_c`` the backtraced
    boundary point and ``S(e) = h(|e - xc| / eps_x) / snorm``.  Only the
    chord segment within ``reach`` of the beam axis ``xc + s * axis`` is
    integrated, with uniform step ``<= fine_step``.
    """
    dim = starts.shape[1]
    strides = _strides(shape)
    idx = np.empty(8, dtype=np.int64)
    wts = np.empty(8)
    x = np.empty(dim)
    e = np.empty(dim)
    th = np.empty(dim)
    thc = np.empty(dim)
    ntab = ptab.shape[0]
    C = cdirs.shape[0]
    for k in range(starts.shape[0]):
        out[k] = 0.0
        tau = tmax[k]
        if tau <= 0.0:
            continue
        for d in range(dim):
            th[d] = dirs[k, d]
        # segment of y(l) = p - l th within reach of the axis:
        # |w - ((w . a) a)|^2 <= reach^2 with w = y - xc, quadratic in l
        a0 = 0.0
        b0 = 0.0
        c0 = 0.0
        wa = 0.0
        ta = 0.0
        for d in range(dim):
            wa += (starts[k, d] - xc[d]) * axis[d]
            ta += -th[d] * axis[d]
        for d in range(dim):
            w0 = (starts[k, d] - xc[d]) - wa * axis[d]
            w1 = -th[d] - ta * axis[d]
            a0 += w1 * w1
            b0 += 2.0 * w0 * w1
            c0 += w0 * w0
        c0 -= reach * reach
        if a0 < 1e-14:
            if c0 > 0:
                continue
            l1 = 0.0
            l2 = tau
        else:
            disc = b0 * b0 - 4 * a0 * c0
            if disc <= 0:
                continue
            sq = math.sqrt(disc)
            l1 = max((-b0 - sq) / (2 * a0), 0.0)
            l2 = min((-b0 + sq) / (2 * a0), tau)
            if l2 <= l1:
                continue
        # optical depth from the start to l1 on the coarse chord step
        D = 0.0
        s_prev = 0.0
        n0 = int(math.ceil(l1 / step)) if l1 > 0 else 0
        if n0 > 0:
            dl0 = l1 / n0
            for m in range(n0 + 1):
                l = m * dl0
                for d in range(dim):
                    x[d] = starts[k, d] - l * th[d]
                nc = _stencil(x, lo, inv_h, shape, strides, idx, wts)
                sv = 0.0
                for c in range(nc):
                    sv += wts[c] * sig[idx[c]]
                if m > 0:
                    D += 0.5 * dl0 * (s_prev + sv)
                s_prev = sv
        else:
            for d in range(dim):
                x[d] = starts[k, d]
            nc = _stencil(x, lo, inv_h, shape, strides, idx, wts)
            for c in range(nc):
                s_prev += wts[c] * sig[idx[c]]
        n1 = int(math.ceil((l2 - l1) / fine_step))
        if n1 < 2:
            n1 = 2
        dl1 = (l2 - l1) / n1
        acc = 0.0
        for m in range(n1 + 1):
            l = l1 + m * dl1
            for d in range(dim):
                x[d] = starts[k, d] - l * th[d]
            nc = _stencil(x, lo, inv_h, shape, strides, idx, wts)
            sv = 0.0
            kv = 0.0
            for c in range(nc):
                sv += wts[c] * sig[idx[c]]
                kv += wts[c] * kappa[idx[c]]
            if m > 0:
                D += 0.5 * dl1 * (s_prev + sv)
            s_prev = sv
            src = 0.0
            if kv > 0.0:
                for ci in range(C):
                    for d in range(dim):
                        thc[d] = cdirs[ci, d]
                    tc = _exit_minus(dom_code, dparams, x, thc)
                    r2 = 0.0
                    for d in range(dim):
                        e[d] = x[d] - tc * thc[d] - xc[d]
                        r2 += e[d] * e[d]
                    hv = _bump(prof, math.sqrt(r2) / eps_x)
                    if hv == 0.0:
                        continue
                    # attenuation from the entry point to y along theta_c
                    nc2 = int(math.ceil(tc / step)) if tc > 0 else 0
                    Dc = 0.0
                    if nc2 > 0:
                        dlc = tc / nc2
                        sp = 0.0
                        for mm in range(nc2 + 1):
                            ll = mm * dlc
                            for d in range(dim):
                                e[d] = x[d] - ll * thc[d]
                            nc3 = _stencil(e, lo, inv_h, shape, strides, idx, wts)
                            s3 = 0.0
                            for c in range(nc3):
                                s3 += wts[c] * sig[idx[c]]
                            if mm > 0:
                                Dc += 0.5 * dlc * (sp + s3)
                            sp = s3
                    mu = 0.0
                    for d in range(dim):
                        mu += thc[d] * th[d]
                    if mu > 1.0:
                        mu = 1.0
                    elif mu < -1.0:
                        mu = -1.0
                    # linear interpolation in the phase table
                    sidx = (mu + 1.0) * 0.5 * (ntab - 1)
                    i0 = int(math.floor(sidx))
                    if i0 > ntab - 2:
                        i0 = ntab - 2
                    fr = sidx - i0
                    pv = (1 - fr) * ptab[i0] + fr * ptab[i0 + 1]
                    src += cw[ci] * pv * hv / snorm * math.exp(-Dc)
            w = dl1 if (m > 0 and m < n1) else 0.5 * dl1
            acc += w * math.exp(-D) * kv * src
        out[k] = acc


# ---------------------------------------------------------------------------
# line-integral footprints for the X-ray transforms


@njit(cache=True)
def line_footprint(entries, dirs, lengths, lo, inv_h, shape, step,
                   att, a_lo, a_inv_h, a_shape, rows, cols, vals):
    """COO entries of the trapezoid line-integral matrix.

    Line ``q`` runs from ``entries[q]`` along ``dirs[q]`` over
    ``[0, lengths[q]]``.  With a nonempty ``att`` each node weight is
    multiplied by ``exp(-int_0^t att)``, accumulated by the trapezoid rule
    on the same nodes.  Returns the number of entries written.
    """
    dim = entries.shape[1]
    strides = _strides(shape)
    a_strides = _strides(a_shape)
    idx = np.empty(8, dtype=np.int64)
    wts = np.empty(8)
    x = np.empty(dim)
    use_att = att.shape[0] > 0
    nnz = 0
    for q in range(entries.shape[0]):
        L = lengths[q]
        if L <= 0.0:
            continue
        n = int(math.ceil(L / step))
        if n < 1:
            n = 1
        dt = L / n
        A = 0.0
        a_prev = 0.0
        for m in range(n + 1):
            t = m * dt
            for d in range(dim):
                x[d] = entries[q, d] + t * dirs[q, d]
            w = dt if (m > 0 and m < n) else 0.5 * dt
            if use_att:
                nc = _stencil(x, a_lo, a_inv_h, a_shape, a_strides, idx, wts)
                av = 0.0
                for c in range(nc):
                    av += wts[c] * att[idx[c]]
                if m > 0:
                    A += 0.5 * dt * (a_prev + av)
                a_prev = av
                w *= math.exp(-A)
            nc = _stencil(x, lo, inv_h, shape, strides, idx, wts)
            for c in range(nc):
                rows[nnz] = q
                cols[nnz] = idx[c]
                vals[nnz] = w * wts[c]
                nnz += 1
    return nnz
