"""Pure-numpy kernels: the fallback backend.

Each function here has a numba twin in ``accel.py`` with the same
signature and semantics. Keep the two files in sync.
"""

import numpy as np


def masked_softmax_fwd(logits, allowed):
    """Row-wise softmax over the allowed entries only.

    logits: float [R, L]; allowed: bool [R, L].
    Disallowed entries come out exactly 0; a row with no allowed entry
    comes out all-zero. The shift and the normalizer are computed over
    allowed entries alone, so disallowed inputs cannot perturb the
    result even at the bit level.
    """
    neg_inf = np.array(-np.inf, dtype=logits.dtype)
    masked = np.where(allowed, logits, neg_inf)
    shift = masked.max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, logits.dtype.type(0))
    e = np.exp(masked - shift)  # exp(-inf) == 0.0, no warning
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, logits.dtype.type(1))
    return np.where(denom > 0, e / safe, logits.dtype.type(0))


def masked_softmax_bwd(probs, gout):
    # dL/dx = p * (g - sum(p * g)); p == 0 at disallowed entries.
    dot = np.sum(probs * gout, axis=-1, keepdims=True)
    return probs * (gout - dot)


def segment_max_fwd(x, seg, valid, n_seg):
    """Per-segment, per-dimension max over valid positions.

    x: [N, L, D]; seg: int64 [N, L]; valid: bool [N, L].
    Returns (out [N, n_seg, D], arg int64 [N, n_seg, D]) where arg holds
    the winning position index, or -1 for a segment with no valid
    positions (whose output row is zero). Ties go to the lowest index.
    """
    N, L, D = x.shape
    out = np.zeros((N, n_seg, D), dtype=x.dtype)
    arg = np.full((N, n_seg, D), -1, dtype=np.int64)
    cols = np.arange(D)
    for n in range(N):
        for s in range(n_seg):
            idx = np.nonzero(valid[n] & (seg[n] == s))[0]
            if idx.size == 0:
                continue
            sub = x[n, idx]
            win = sub.argmax(axis=0)  # first max wins
            out[n, s] = sub[win, cols]
            arg[n, s] = idx[win]
    return out, arg


def segment_max_bwd(gout, arg, length):
    N, n_seg, D = gout.shape
    gx = np.zeros((N, length, D), dtype=gout.dtype)
    n_i, s_i, d_i = np.nonzero(arg >= 0)
    np.add.at(gx, (n_i, arg[n_i, s_i, d_i], d_i), gout[n_i, s_i, d_i])
    return gx


def segment_mean_fwd(x, seg, valid, n_seg):
    """Per-segment mean over valid positions; empty segments give zeros.

    Returns (out [N, n_seg, D], count float [N, n_seg]).
    """
    N, L, D = x.shape
    out = np.zeros((N, n_seg, D), dtype=x.dtype)
    count = np.zeros((N, n_seg), dtype=x.dtype)
    for n in range(N):
        for s in range(n_seg):
            idx = np.nonzero(valid[n] & (seg[n] == s))[0]
            if idx.size == 0:
                continue
            out[n, s] = x[n, idx].sum(axis=0) / idx.size
            count[n, s] = idx.size
    return out, count


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
                gx[n, i] = gout[n, s] / count[n, s]
    return gx


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_fwd(x, lengths, wz, wr, wh, uz, ur, uh, bz, br, bh, reverse):
    """Run a GRU over a padded batch of sequences, one direction.

    x: [N, T, DX]; lengths: int64 [N] (valid prefix per row). Steps at or
    beyond a row's length carry the state through unchanged, so h[:, T-1]
    (forward) and h[:, 0] (reverse) summarize exactly the valid prefix.

    Cell: z = sig(xW_z + hU_z + b_z); r = sig(xW_r + hU_r + b_r);
    c = tanh(xW_h + (r*h)U_h + b_h); h' = (1-z)*h + z*c.

    Returns (h [N, T, DH], hprev, z, r, c) with the per-step saves needed
    by gru_bwd.
    """
    N, T, DX = x.shape
    DH = wz.shape[1]
    xz = x.reshape(N * T, DX) @ wz
    xr = x.reshape(N * T, DX) @ wr
    xh = x.reshape(N * T, DX) @ wh
    xz = xz.reshape(N, T, DH) + bz
    xr = xr.reshape(N, T, DH) + br
    xh = xh.reshape(N, T, DH) + bh

    h = np.zeros((N, DH), dtype=x.dtype)
    hseq = np.zeros((N, T, DH), dtype=x.dtype)
    hprev = np.zeros((N, T, DH), dtype=x.dtype)
    zs = np.zeros((N, T, DH), dtype=x.dtype)
    rs = np.zeros((N, T, DH), dtype=x.dtype)
    cs = np.zeros((N, T, DH), dtype=x.dtype)

    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        v = (t < lengths)[:, None]
        z = _sigmoid(xz[:, t] + h @ uz)
        r = _sigmoid(xr[:, t] + h @ ur)
        c = np.tanh(xh[:, t] + (r * h) @ uh)
        hnew = (1.0 - z) * h + z * c
        hprev[:, t] = h
        zs[:, t] = z
        rs[:, t] = r
        cs[:, t] = c
        h = np.where(v, hnew, h)
        hseq[:, t] = h
    return hseq, hprev, zs, rs, cs


def gru_bwd(gh, x, lengths, hprev, zs, rs, cs,
            wz, wr, wh, uz, ur, uh, reverse):
    """Backprop through gru_fwd given grads on every output step.

    Returns (gx, gwz, gwr, gwh, guz, gur, guh, gbz, gbr, gbh).
    """
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

    dcarry = np.zeros((N, DH), dtype=x.dtype)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        v = (t < lengths)[:, None].astype(x.dtype)
        dtot = gh[:, t] + dcarry
        dv = dtot * v
        hp = hprev[:, t]
        z = zs[:, t]
        r = rs[:, t]
        c = cs[:, t]

        dc = dv * z
        dz = dv * (c - hp)
        dah = dc * (1.0 - c * c)
        daz = dz * z * (1.0 - z)
        drh = dah @ uh.T
        dr = drh * hp
        dar = dr * r * (1.0 - r)

        dhp = dv * (1.0 - z) + drh * r + daz @ uz.T + dar @ ur.T
        gx[:, t] = daz @ wz.T + dar @ wr.T + dah @ wh.T

        xt = x[:, t]
        gwz += xt.T @ daz
        gwr += xt.T @ dar
        gwh += xt.T @ dah
        guz += hp.T @ daz
        gur += hp.T @ dar
        guh += (r * hp).T @ dah
        gbz += daz.sum(axis=0)
        gbr += dar.sum(axis=0)
        gbh += dah.sum(axis=0)

        dcarry = dtot * (1.0 - v) + dhp
    return gx, gwz, gwr, gwh, guz, gur, guh, gbz, gbr, gbh
