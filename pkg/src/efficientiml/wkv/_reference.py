"""Pure-numpy bidirectional WKV kernels.

Inputs are ``(N, T, C)`` float64 arrays; ``w`` and ``u`` are ``(C,)``. The
effective per-step decay is ``exp(-w / T)``. Both scans carry a running
log-scale so no ``exp`` ever sees an unbounded argument.
"""
from __future__ import annotations

import numpy as np

# rows of the T x T weight matrix materialized at once by the naive kernel
_NAIVE_BLOCK_ELEMS = 1 << 22


def naive_forward(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Direct O(T^2) evaluation with per-position max subtraction."""
    N, T, C = k.shape
    dt = k.dtype
    out = np.empty_like(v)
    idx = np.arange(T)
    lam = (w / T).astype(dt)
    rows = max(1, _NAIVE_BLOCK_ELEMS // max(1, N * T * C))
    for t0 in range(0, T, rows):
        ts = idx[t0 : t0 + rows]
        dist = np.abs(ts[:, None] - idx[None, :]).astype(dt) - 1  # (r, T)
        logits = -dist[None, :, :, None] * lam + k[:, None, :, :]  # (N, r, T, C)
        r = np.arange(len(ts))
        logits[:, r, ts] = u + k[:, ts]
        m = logits.max(axis=2, keepdims=True)
        wts = np.exp(logits - m)
        out[:, ts] = (wts * v[:, None]).sum(axis=2) / wts.sum(axis=2)
    return out


def _directional(k, v, lam, stats=None):
    """Exclusive left-to-right accumulators for every position.

    At position t the sums run over i < t with weight exp(-(t-i-1)*lam + k_i),
    stored as ``(scale, num, den, dnum, dden)`` where the true value is
    ``exp(scale) * stored`` and ``dnum``/``dden`` carry the extra factor
    (t-i-1) needed for the decay gradient.
    """
    N, T, C = k.shape
    scale = np.full((N, T, C), -np.inf)
    num = np.zeros((N, T, C))
    den = np.zeros((N, T, C))
    dnum = np.zeros((N, T, C))
    dden = np.zeros((N, T, C))
    if stats is not None:
        stats["steps"] += N * C
    if T == 1:
        return scale, num, den, dnum, dden
    o = k[:, 0].copy()
    a_num = v[:, 0].copy()
    a_den = np.ones((N, C))
    a_dnum = np.zeros((N, C))
    a_dden = np.zeros((N, C))
    for t in range(1, T):
        scale[:, t] = o
        num[:, t] = a_num
        den[:, t] = a_den
        dnum[:, t] = a_dnum
        dden[:, t] = a_dden
        if stats is not None:
            stats["steps"] += N * C
        if t == T - 1:
            break
        od = o - lam
        kt = k[:, t]
        o2 = np.maximum(od, kt)
        a = np.exp(od - o2)
        b = np.exp(kt - o2)
        a_dnum = a * (a_dnum + a_num)
        a_dden = a * (a_dden + a_den)
        a_num = a * a_num + b * v[:, t]
        a_den = a * a_den + b
        o = o2
    return scale, num, den, dnum, dden


def _transposed(logw, vals, lam):
    """Exclusive left-to-right decayed sums of ``vals`` with log-weights ``logw``.

    Returns ``(scale, sums)``; the true sum at t is ``exp(scale) * sums[j]``.
    """
    N, T, C = logw.shape
    scale = np.full((N, T, C), -np.inf)
    sums = [np.zeros((N, T, C)) for _ in vals]
    if T == 1:
        return scale, sums
    o = logw[:, 0].copy()
    acc = [x[:, 0].copy() for x in vals]
    for t in range(1, T):
        scale[:, t] = o
        for s, a_ in zip(sums, acc):
            s[:, t] = a_
        if t == T - 1:
            break
        od = o - lam
        lt = logw[:, t]
        o2 = np.maximum(od, lt)
        a = np.exp(od - o2)
        b = np.exp(lt - o2)
        acc = [a * a_ + b * x[:, t] for a_, x in zip(acc, vals)]
        o = o2
    return scale, sums


def _flip(arrs):
    return [x[:, ::-1] for x in arrs]


def _scaled(scale, ref):
    # exp(scale - ref) with exp(-inf) -> 0 and no nan from (-inf) - (-inf)
    with np.errstate(invalid="ignore"):
        e = np.exp(scale - ref)
    return np.nan_to_num(e, nan=0.0)


def scan_forward(k, v, w, u, stats=None, return_state=False):
    """Linear-time forward: one left and one right recurrence plus the self term."""
    N, T, C = k.shape
    lam = w / T
    fs, fn, fd, fdn, fdd = _directional(k, v, lam, stats)
    bs, bn, bd, bdn, bdd = _flip(_directional(k[:, ::-1], v[:, ::-1], lam, stats))
    self_log = u + k
    m = np.maximum(np.maximum(fs, bs), self_log)
    ef = _scaled(fs, m)
    eb = _scaled(bs, m)
    es = np.exp(self_log - m)
    num = ef * fn + eb * bn + es * v
    den = ef * fd + eb * bd + es
    y = num / den
    if not return_state:
        return y
    state = dict(m=m, den=den, es=es, ef=ef, eb=eb, fdn=fdn, fdd=fdd, bdn=bdn, bdd=bdd)
    return y, state


def scan_backward(k, v, w, u, g):
    """Gradients of ``sum(g * wkv)`` w.r.t. ``k``, ``v``, ``w`` and ``u``.

    Uses the symmetry of the |t - i| kernel: the transposed sums needed for
    ``dk``/``dv`` are the same two recurrences applied to ``g / den``.
    """
    N, T, C = k.shape
    lam = w / T
    y, st = scan_forward(k, v, w, u, return_state=True)
    m, den, es = st["m"], st["den"], st["es"]
    gt = g / den  # true G_t = gt * exp(-m_t)
    gy = gt * y

    # decay gradient from the distance-weighted accumulators
    dist_term = st["ef"] * (st["fdn"] - y * st["fdd"]) + st["eb"] * (st["bdn"] - y * st["bdd"])
    dlam = -(gt * dist_term).sum(axis=(0, 1))
    dw = dlam / T

    du = (gt * es * (v - y)).sum(axis=(0, 1))

    neg_m = -m
    fs, (fr, fh) = _transposed(neg_m, [gt, gy], lam)
    bs, (br, bh) = _transposed(neg_m[:, ::-1], [gt[:, ::-1], gy[:, ::-1]], lam)
    bs, br, bh = bs[:, ::-1], br[:, ::-1], bh[:, ::-1]
    ef = _scaled(fs, -k)
    eb = _scaled(bs, -k)
    dv = ef * fr + eb * br + gt * es
    dk = v * dv - (ef * fh + eb * bh + gy * es)
    return dk, dv, dw, du
