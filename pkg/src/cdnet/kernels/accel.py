"""Numba-compiled kernels: the accelerated backend.

Twin of ``reference.py``; same signatures, same semantics. Compiled
lazily per dtype (float32 for training, float64 for the verification
suites) and cached on disk.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def masked_softmax_fwd(logits, allowed):
    R, L = logits.shape
    out = np.zeros_like(logits)
    for i in range(R):
        mx = -np.inf
        for j in range(L):
            if allowed[i, j] and logits[i, j] > mx:
                mx = logits[i, j]
        if mx == -np.inf:
            continue
        s = 0.0
        for j in range(L):
            if allowed[i, j]:
                e = np.exp(logits[i, j] - mx)
                out[i, j] = e
                s += e
        for j in range(L):
            if allowed[i, j]:
                out[i, j] /= s
    return out


@njit(cache=True)
def masked_softmax_bwd(probs, gout):
    R, L = probs.shape
    gx = np.zeros_like(probs)
    for i in range(R):
        dot = 0.0
        for j in range(L):
            dot += probs[i, j] * gout[i, j]
        for j in range(L):
            gx[i, j] = probs[i, j] * (gout[i, j] - dot)
    return gx


@njit(cache=True)
def segment_max_fwd(x, seg, valid, n_seg):
    N, L, D = x.shape
    out = np.zeros((N, n_seg, D), dtype=x.dtype)
    arg = np.full((N, n_seg, D), -1, dtype=np.int64)
    for n in range(N):
        for i in range(L):
            if not valid[n, i]:
                continue
            s = seg[n, i]
            for d in range(D):
                if arg[n, s, d] < 0 or x[n, i, d] > out[n, s, d]:
                    out[n, s, d] = x[n, i, d]
                    arg[n, s, d] = i
    return out, arg


@njit(cache=True)
def segment_max_bwd(gout, arg, length):
    N, n_seg, D = gout.shape
    gx = np.zeros((N, length, D), dtype=gout.dtype)
    for n in range(N):
        for s in range(n_seg):
            for d in range(D):
                i = arg[n, s, d]
                if i >= 0:
                    gx[n, i, d] += gout[n, s, d]
    return gx


@njit(cache=True)
def segment_mean_fwd(x, seg, valid, n_seg):
    N, L, D = x.shape
    out = np.zeros((N, n_seg, D), dtype=x.dtype)
    count = np.zeros((N, n_seg), dtype=x.dtype)
    for n in range(N):
        for i in range(L):
            if not valid[n, i]:
                continue
            s = seg[n, i]
            count[n, s] += 1.0
            for d in range(D):
                out[n, s, d] += x[n, i, d]
        for s in range(n_seg):
            if count[n, s] > 0:
                for d in range(D):
                    out[n, s, d] /= count[n, s]
    return out, count


@njit(cache=True)
def segment_mean_bwd(gout, seg, valid, count):
    N, n_seg, D = gout.shape
    L = seg.shape[1]
    gx = np.zeros((N, L, D), dtype=gout.dtype)
    for n in range(N):
        for i in range(L):
            if not valid[n, i]:
                continue
            s = seg[n, i]
            if count[n, s] > 0:
                for d in range(D):
                    gx[n, i, d] = gout[n, s, d] / count[n, s]
    return gx


@njit(cache=True)
def gru_fwd(x, lengths, wz, wr, wh, uz, ur, uh, bz, br, bh, reverse):
    N, T, DX = x.shape
    DH = wz.shape[1]
    x2 = np.ascontiguousarray(x).reshape(N * T, DX)
    xz = (np.dot(x2, wz) + bz).reshape(N, T, DH)
    xr = (np.dot(x2, wr) + br).reshape(N, T, DH)
    xh = (np.dot(x2, wh) + bh).reshape(N, T, DH)

    h = np.zeros((N, DH), dtype=x.dtype)
    hseq = np.zeros((N, T, DH), dtype=x.dtype)
    hprev = np.zeros((N, T, DH), dtype=x.dtype)
    zs = np.zeros((N, T, DH), dtype=x.dtype)
    rs = np.zeros((N, T, DH), dtype=x.dtype)
    cs = np.zeros((N, T, DH), dtype=x.dtype)

    one = np.ones(1, dtype=x.dtype)[0]  # dtype-preserving constant
    step = -1 if reverse else 1
    start = T - 1 if reverse else 0
    for k in range(T):
        t = start + step * k
        hu_z = np.dot(h, uz)
        hu_r = np.dot(h, ur)
        z = one / (one + np.exp(-(xz[:, t] + hu_z)))
        r = one / (one + np.exp(-(xr[:, t] + hu_r)))
        c = np.tanh(xh[:, t] + np.dot(r * h, uh))
        for n in range(N):
            hprev[n, t] = h[n]
            zs[n, t] = z[n]
            rs[n, t] = r[n]
            cs[n, t] = c[n]
            if t < lengths[n]:
                for d in range(DH):
                    h[n, d] = (one - z[n, d]) * h[n, d] + z[n, d] * c[n, d]
            hseq[n, t] = h[n]
    return hseq, hprev, zs, rs, cs


@njit(cache=True)
def gru_bwd(gh, x, lengths, hprev, zs, rs, cs,
            wz, wr, wh, uz, ur, uh, reverse):
    N, T, DX = x.shape
    DH = uz.shape[0]
    gx = np.zeros_like(x)
    gwz = np.zeros_like(wz)
    gwr = np.zeros_like(wr)
    gwh = np.zeros_like(wh)
    guz = np.zeros_like(uz)
    gur = np.zeros_like(ur)
    guh = np.zeros_like(uh)
    gbz = np.zeros(DH, dtype=x.dtype)
    gbr = np.zeros(DH, dtype=x.dtype)
    gbh = np.zeros(DH, dtype=x.dtype)

    uzT = np.ascontiguousarray(uz.T)
    urT = np.ascontiguousarray(ur.T)
    uhT = np.ascontiguousarray(uh.T)
    wzT = np.ascontiguousarray(wz.T)
    wrT = np.ascontiguousarray(wr.T)
    whT = np.ascontiguousarray(wh.T)

    one = np.ones(1, dtype=x.dtype)[0]
    dcarry = np.zeros((N, DH), dtype=x.dtype)
    step = 1 if reverse else -1
    start = 0 if reverse else T - 1
    for k in range(T):
        t = start + step * k
        dtot = np.ascontiguousarray(gh[:, t]) + dcarry
        dv = np.zeros((N, DH), dtype=x.dtype)
        for n in range(N):
            if t < lengths[n]:
                dv[n] = dtot[n]
        hp = np.ascontiguousarray(hprev[:, t])
        z = np.ascontiguousarray(zs[:, t])
        r = np.ascontiguousarray(rs[:, t])
        c = np.ascontiguousarray(cs[:, t])

        dc = dv * z
        dz = dv * (c - hp)
        dah = dc * (one - c * c)
        daz = dz * z * (one - z)
        drh = np.dot(dah, uhT)
        dr = drh * hp
        dar = dr * r * (one - r)

        dhp = dv * (one - z) + drh * r + np.dot(daz, uzT) + np.dot(dar, urT)
        gxt = np.dot(daz, wzT) + np.dot(dar, wrT) + np.dot(dah, whT)

        xt = np.ascontiguousarray(x[:, t])
        xtT = np.ascontiguousarray(xt.T)
        hpT = np.ascontiguousarray(hp.T)
        gwz += np.dot(xtT, daz)
        gwr += np.dot(xtT, dar)
        gwh += np.dot(xtT, dah)
        guz += np.dot(hpT, daz)
        gur += np.dot(hpT, dar)
        guh += np.dot(np.ascontiguousarray((r * hp).T), dah)
        for n in range(N):
            gx[n, t] = gxt[n]
            if t < lengths[n]:
                dcarry[n] = dhp[n]
            else:
                dcarry[n] = dtot[n] + dhp[n]
        gbz += daz.sum(axis=0)
        gbr += dar.sum(axis=0)
        gbh += dah.sum(axis=0)
    return gx, gwz, gwr, gwh, guz, gur, guh, gbz, gbr, gbh
