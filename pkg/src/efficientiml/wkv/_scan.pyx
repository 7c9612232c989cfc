# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bidirectional WKV scan (forward and backward), float64.

Same recurrences as ``_reference.scan_forward`` / ``scan_backward``; arrays are
``(N, T, C)`` C-contiguous and the channel loop is innermost.
"""
import threading

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

# Scratch is reused per thread so repeated calls do not fault in fresh pages;
# requests above the cap get a private allocation instead of pinning memory.
_WS_MAX_DOUBLES = 1 << 22
_tls = threading.local()


def _workspace(Py_ssize_t rows, Py_ssize_t C):
    cdef Py_ssize_t need = rows * C
    if need > _WS_MAX_DOUBLES:
        return np.empty((rows, C))
    buf = getattr(_tls, "buf", None)
    if buf is None or buf.shape[0] < need:
        buf = np.empty(need)
        _tls.buf = buf
    return buf[:need].reshape(rows, C)


cdef inline double _emax(double a, double b) nogil:
    return a if a > b else b


cdef void _left(const double[:, :, ::1] k, const double[:, :, ::1] v,
                const double[::1] lam, Py_ssize_t n,
                double[:, ::1] sc, double[:, ::1] nu, double[:, ::1] de,
                double[:, ::1] dn, double[:, ::1] dd, bint reverse, bint derivs,
                double[:, ::1] st) noexcept nogil:
    """Exclusive directional accumulators for batch row ``n``.

    ``st`` is (5, C) scratch for the running state; ``dn``/``dd`` (the
    decay-derivative sums) are only filled when ``derivs`` is set.
    """
    cdef Py_ssize_t T = k.shape[1], C = k.shape[2]
    cdef Py_ssize_t s, t, c
    cdef double od, o2, a, b, kt
    cdef double[::1] o = st[0], an = st[1], ad = st[2], adn = st[3], add_ = st[4]
    t = T - 1 if reverse else 0
    for c in range(C):
        sc[t, c] = -INFINITY
        nu[t, c] = 0.0
        de[t, c] = 0.0
        if derivs:
            dn[t, c] = 0.0
            dd[t, c] = 0.0
        o[c] = k[n, t, c]
        an[c] = v[n, t, c]
        ad[c] = 1.0
        adn[c] = 0.0
        add_[c] = 0.0
    for s in range(1, T):
        t = T - 1 - s if reverse else s
        for c in range(C):
            sc[t, c] = o[c]
            nu[t, c] = an[c]
            de[t, c] = ad[c]
        if derivs:
            for c in range(C):
                dn[t, c] = adn[c]
                dd[t, c] = add_[c]
        if s == T - 1:
            break
        for c in range(C):
            kt = k[n, t, c]
            od = o[c] - lam[c]
            o2 = _emax(od, kt)
            a = exp(od - o2)
            b = exp(kt - o2)
            if derivs:
                adn[c] = a * (adn[c] + an[c])
                add_[c] = a * (add_[c] + ad[c])
            an[c] = a * an[c] + b * v[n, t, c]
            ad[c] = a * ad[c] + b
            o[c] = o2


def forward(const double[:, :, ::1] k, const double[:, :, ::1] v,
            const double[::1] w, const double[::1] u):
    """Left accumulators are stored; the right-to-left sweep is combined on the fly."""
    cdef Py_ssize_t N = k.shape[0], T = k.shape[1], C = k.shape[2]
    cdef Py_ssize_t n, t, c
    cdef double[::1] lam = np.asarray(w) / T
    y_arr = np.empty((N, T, C))
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, ::1] ws = _workspace(3 * T + 5, C)
    cdef double[:, ::1] fs = ws[:T], fn = ws[T:2 * T], fd = ws[2 * T:3 * T], st = ws[3 * T:]
    cdef double[::1] bo = st[0], bn = st[1], bd = st[2]
    cdef double m, sl, ef, eb, es, kt, od, o2, a, b
    with nogil:
        for n in range(N):
            _left(k, v, lam, n, fs, fn, fd, fs, fs, False, False, st)
            for c in range(C):
                bo[c] = -INFINITY
                bn[c] = 0.0
                bd[c] = 0.0
            for t in range(T - 1, -1, -1):
                for c in range(C):
                    kt = k[n, t, c]
                    sl = u[c] + kt
                    m = _emax(_emax(fs[t, c], bo[c]), sl)
                    ef = exp(fs[t, c] - m) if fs[t, c] > -INFINITY else 0.0
                    eb = exp(bo[c] - m) if bo[c] > -INFINITY else 0.0
                    es = exp(sl - m)
                    y[n, t, c] = (ef * fn[t, c] + eb * bn[c] + es * v[n, t, c]) / (
                        ef * fd[t, c] + eb * bd[c] + es)
                    # fold token t into the right-to-left state
                    if t == T - 1:
                        bo[c] = kt
                        bn[c] = v[n, t, c]
                        bd[c] = 1.0
                    else:
                        od = bo[c] - lam[c]
                        o2 = _emax(od, kt)
                        a = exp(od - o2)
                        b = exp(kt - o2)
                        bn[c] = a * bn[c] + b * v[n, t, c]
                        bd[c] = a * bd[c] + b
                        bo[c] = o2
    return y_arr


cdef void _transposed(const double[:, ::1] logw, const double[:, ::1] g1,
                      const double[:, ::1] g2, const double[::1] lam,
                      double[:, ::1] sc, double[:, ::1] s1, double[:, ::1] s2,
                      bint reverse, double[:, ::1] st) noexcept nogil:
    cdef Py_ssize_t T = logw.shape[0], C = logw.shape[1]
    cdef Py_ssize_t s, t, c
    cdef double od, o2, a, b, lt
    cdef double[::1] o = st[0], a1 = st[1], a2 = st[2]
    t = T - 1 if reverse else 0
    for c in range(C):
        sc[t, c] = -INFINITY
        s1[t, c] = 0.0
        s2[t, c] = 0.0
        o[c] = logw[t, c]
        a1[c] = g1[t, c]
        a2[c] = g2[t, c]
    for s in range(1, T):
        t = T - 1 - s if reverse else s
        for c in range(C):
            sc[t, c] = o[c]
            s1[t, c] = a1[c]
            s2[t, c] = a2[c]
        if s == T - 1:
            break
        for c in range(C):
            lt = logw[t, c]
            od = o[c] - lam[c]
            o2 = _emax(od, lt)
            a = exp(od - o2)
            b = exp(lt - o2)
            a1[c] = a * a1[c] + b * g1[t, c]
            a2[c] = a * a2[c] + b * g2[t, c]
            o[c] = o2


def backward(const double[:, :, ::1] k, const double[:, :, ::1] v,
             const double[::1] w, const double[::1] u,
             const double[:, :, ::1] g):
    """Returns ``(dk, dv, dw, du)`` for the loss ``sum(g * wkv)``."""
    cdef Py_ssize_t N = k.shape[0], T = k.shape[1], C = k.shape[2]
    cdef Py_ssize_t n, t, c
    cdef double[::1] lam = np.asarray(w) / T
    dk_arr = np.empty((N, T, C))
    dv_arr = np.empty((N, T, C))
    dw_arr = np.zeros(C)
    du_arr = np.zeros(C)
    cdef double[:, :, ::1] dk = dk_arr, dv = dv_arr
    cdef double[::1] dw = dw_arr, du = du_arr
    cdef double[:, ::1] ws = _workspace(20 * T + 5, C)
    cdef double[:, ::1] fs = ws[0 * T:1 * T]
    cdef double[:, ::1] fn = ws[1 * T:2 * T]
    cdef double[:, ::1] fd = ws[2 * T:3 * T]
    cdef double[:, ::1] fdn = ws[3 * T:4 * T]
    cdef double[:, ::1] fdd = ws[4 * T:5 * T]
    cdef double[:, ::1] bs = ws[5 * T:6 * T]
    cdef double[:, ::1] bn = ws[6 * T:7 * T]
    cdef double[:, ::1] bd = ws[7 * T:8 * T]
    cdef double[:, ::1] bdn = ws[8 * T:9 * T]
    cdef double[:, ::1] bdd = ws[9 * T:10 * T]
    cdef double[:, ::1] negm = ws[10 * T:11 * T]
    cdef double[:, ::1] gt = ws[11 * T:12 * T]
    cdef double[:, ::1] gy = ws[12 * T:13 * T]
    cdef double[:, ::1] es_ = ws[13 * T:14 * T]
    cdef double[:, ::1] rs = ws[14 * T:15 * T]
    cdef double[:, ::1] r1 = ws[15 * T:16 * T]
    cdef double[:, ::1] r2 = ws[16 * T:17 * T]
    cdef double[:, ::1] ls = ws[17 * T:18 * T]
    cdef double[:, ::1] l1 = ws[18 * T:19 * T]
    cdef double[:, ::1] l2 = ws[19 * T:20 * T]
    cdef double[:, ::1] st = ws[20 * T:]
    cdef double m, sl, ef, eb, es, den, y, gg, dv_t
    with nogil:
        for n in range(N):
            _left(k, v, lam, n, fs, fn, fd, fdn, fdd, False, True, st)
            _left(k, v, lam, n, bs, bn, bd, bdn, bdd, True, True, st)
            for t in range(T):
                for c in range(C):
                    sl = u[c] + k[n, t, c]
                    m = _emax(_emax(fs[t, c], bs[t, c]), sl)
                    ef = exp(fs[t, c] - m) if fs[t, c] > -INFINITY else 0.0
                    eb = exp(bs[t, c] - m) if bs[t, c] > -INFINITY else 0.0
                    es = exp(sl - m)
                    den = ef * fd[t, c] + eb * bd[t, c] + es
                    y = (ef * fn[t, c] + eb * bn[t, c] + es * v[n, t, c]) / den
                    gg = g[n, t, c] / den
                    negm[t, c] = -m
                    gt[t, c] = gg
                    gy[t, c] = gg * y
                    es_[t, c] = es
                    dw[c] -= gg * (ef * (fdn[t, c] - y * fdd[t, c])
                                   + eb * (bdn[t, c] - y * bdd[t, c])) / T
                    du[c] += gg * es * (v[n, t, c] - y)
            _transposed(negm, gt, gy, lam, ls, l1, l2, False, st)
            _transposed(negm, gt, gy, lam, rs, r1, r2, True, st)
            for t in range(T):
                for c in range(C):
                    ef = exp(ls[t, c] + k[n, t, c]) if ls[t, c] > -INFINITY else 0.0
                    eb = exp(rs[t, c] + k[n, t, c]) if rs[t, c] > -INFINITY else 0.0
                    dv_t = ef * l1[t, c] + eb * r1[t, c] + gt[t, c] * es_[t, c]
                    dv[n, t, c] = dv_t
                    dk[n, t, c] = v[n, t, c] * dv_t - (
                        ef * l2[t, c] + eb * r2[t, c] + gy[t, c] * es_[t, c])
    return dk_arr, dv_arr, dw_arr, du_arr
