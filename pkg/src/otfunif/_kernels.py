"""Compiled inner loops for the on-the-fly stepping.

States are interned in a growing registry: row ``i`` holds the populations,
the state-factor of every enabled class (0 for disabled classes) and the
lazily resolved successor index per class.  Distributions inside the kernels
are pairs ``(idx, val)`` of registry indices and probabilities.  Scratch
accumulators are dense over the registry and are left zeroed between calls.

Every kernel that may need a new registry row returns ``FULL`` when the
registry is at capacity; the caller grows the arrays and repeats the call
from its unchanged inputs.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, types
from numba.typed import Dict

from .poisson import right_truncation_nb, weights_nb

OK = 0
FULL = 1
VIOLATION = 2
EMPTY = 3
OVERFLOW = 4
RECORDS_FULL = 5
NO_STEP = 6
PAUSED = 7

DOM_TOL = 1e-12
MAX_BISECT = 64
ELL_CAP = 16.0
# envelopes beyond this are treated as diverged (also keeps ceil() in int64 range)
ENV_MAX = 2.0**52

# record columns
REC_T, REC_DELTA, REC_MU, REC_R, REC_BOUND, REC_POISSON, REC_PRUNE, REC_WSIZE, REC_ELL = range(9)
REC_COLS = 9


# ---------------------------------------------------------------------------
# registry


class Registry:
    """Growable interned state table plus matching scratch accumulators."""

    def __init__(self, arrays, capacity: int = 4096):
        self.arrays = arrays
        m, n = arrays.change.shape
        self.m, self.n = m, n
        self.bits = 62 // max(n, 1)
        self.limit = (1 << self.bits) - 1
        self.strides = np.array([1 << (self.bits * k) for k in range(n)], dtype=np.int64)
        self.dkey = (arrays.change @ self.strides).astype(np.int64) if m else np.zeros(0, np.int64)
        self.keymap = Dict.empty(key_type=types.int64, value_type=types.int64)
        self.meta = np.zeros(1, dtype=np.int64)  # [count]
        self.capacity = 0
        self.states = np.zeros((0, n), dtype=np.int64)
        self.keys = np.zeros(0, dtype=np.int64)
        self.r = np.zeros((0, m))
        self.succ = np.zeros((0, m), dtype=np.int64)
        self._allocate(capacity)

    @property
    def count(self) -> int:
        return int(self.meta[0])

    def _allocate(self, capacity: int) -> None:
        c = self.count
        n, m = self.n, self.m
        states = np.zeros((capacity, n), dtype=np.int64)
        keys = np.zeros(capacity, dtype=np.int64)
        r = np.zeros((capacity, m))
        succ = np.full((capacity, m), -2, dtype=np.int64)
        states[:c] = self.states[:c]
        keys[:c] = self.keys[:c]
        r[:c] = self.r[:c]
        succ[:c] = self.succ[:c]
        self.states, self.keys, self.r, self.succ = states, keys, r, succ
        self.capacity = capacity
        self.scratch = tuple(
            arr
            for _ in range(3)
            for arr in (np.zeros(capacity), np.zeros(capacity, np.int8), np.zeros(capacity, np.int64), np.zeros(1, np.int64))
        ) + (np.zeros(capacity, np.int8), np.zeros(capacity, np.int64), np.zeros(1, np.int64))

    def grow(self) -> None:
        self._allocate(2 * self.capacity)

    @property
    def reg(self):
        a = self.arrays
        return (
            self.states,
            self.keys,
            self.r,
            self.succ,
            self.meta,
            self.keymap,
            self.dkey,
            self.strides,
            a.change,
            a.gmin,
            a.gmax,
            a.const,
            a.expo,
            self.limit,
        )

    def intern(self, states: np.ndarray) -> np.ndarray:
        states = np.ascontiguousarray(states, dtype=np.int64)
        while True:
            status, idx = _intern_many(states, self.reg)
            if status == OK:
                return idx
            if status == OVERFLOW:
                raise OverflowError(f"population exceeds {self.limit}, the per-species registry limit")
            self.grow()


@njit(cache=True, inline="always")
def _state_factor(x, j, const, expo):
    v = const[j]
    for k in range(x.shape[0]):
        e = expo[j, k]
        if e == 1:
            v *= x[k]
        elif e > 1:
            v *= x[k] ** e
    return v


@njit(cache=True)
def _register(x, key, reg):
    states, keys, r, succ, meta, keymap, dkey, strides, change, gmin, gmax, const, expo, limit = reg
    i = meta[0]
    if i >= states.shape[0]:
        return -1
    for k in range(x.shape[0]):
        if x[k] > limit:
            return -2
        states[i, k] = x[k]
    keys[i] = key
    m = change.shape[0]
    for j in range(m):
        ok = True
        for k in range(x.shape[0]):
            if x[k] < gmin[j, k] or x[k] > gmax[j, k]:
                ok = False
                break
        if ok:
            r[i, j] = _state_factor(x, j, const, expo)
            succ[i, j] = -1
        else:
            r[i, j] = 0.0
            succ[i, j] = -2
    keymap[key] = i
    meta[0] = i + 1
    return i


@njit(cache=True)
def _intern_many(xs, reg):
    strides = reg[7]
    keymap = reg[5]
    out = np.empty(xs.shape[0], dtype=np.int64)
    for s in range(xs.shape[0]):
        key = 0
        for k in range(xs.shape[1]):
            key += xs[s, k] * strides[k]
        if key in keymap:
            out[s] = keymap[key]
        else:
            i = _register(xs[s], key, reg)
            if i == -1:
                return FULL, out
            if i == -2:
                return OVERFLOW, out
            out[s] = i
    return OK, out


@njit(cache=True)
def _resolve(i, j, reg):
    """Registry index of the class-``j`` successor of state ``i``; <0 on FULL/OVERFLOW."""
    states, keys, r, succ, meta, keymap, dkey, strides, change, gmin, gmax, const, expo, limit = reg
    s = succ[i, j]
    if s >= 0:
        return s
    key = keys[i] + dkey[j]
    if key in keymap:
        s = keymap[key]
    else:
        y = states[i] + change[j]
        s = _register(y, key, reg)
        if s < 0:
            return s
    succ[i, j] = s
    return s


# ---------------------------------------------------------------------------
# sparse accumulators: (buf, flag, lst, cnt)


@njit(cache=True)
def _collect(buf, flag, lst, cnt, positive):
    n = cnt[0]
    size = 0
    for s in range(n):
        k = lst[s]
        if (positive and buf[k] > 0.0) or ((not positive) and buf[k] != 0.0):
            size += 1
    idx = np.empty(size, dtype=np.int64)
    val = np.empty(size)
    q = 0
    for s in range(n):
        k = lst[s]
        v = buf[k]
        if (positive and v > 0.0) or ((not positive) and v != 0.0):
            idx[q] = k
            val[q] = v
            q += 1
        buf[k] = 0.0
        flag[k] = 0
    cnt[0] = 0
    return idx, val


@njit(cache=True)
def _reset(buf, flag, lst, cnt):
    for s in range(cnt[0]):
        k = lst[s]
        buf[k] = 0.0
        flag[k] = 0
    cnt[0] = 0


@njit(cache=True)
def _reset_all(scr):
    _reset(scr[0], scr[1], scr[2], scr[3])
    _reset(scr[4], scr[5], scr[6], scr[7])
    _reset(scr[8], scr[9], scr[10], scr[11])
    flag, lst, cnt = scr[12], scr[13], scr[14]
    for s in range(cnt[0]):
        flag[lst[s]] = 0
    cnt[0] = 0


@njit(cache=True)
def _mark(flag, lst, cnt, idx):
    for s in range(idx.shape[0]):
        k = idx[s]
        if flag[k] == 0:
            flag[k] = 1
            lst[cnt[0]] = k
            cnt[0] += 1


@njit(cache=True)
def _prune(idx, val, thr):
    """Split off entries below ``thr``; return kept arrays and dropped mass."""
    if thr <= 0.0:
        return idx, val, 0.0
    keep = 0
    for s in range(val.shape[0]):
        if val[s] >= thr:
            keep += 1
    if keep == val.shape[0]:
        return idx, val, 0.0
    ni = np.empty(keep, dtype=np.int64)
    nv = np.empty(keep)
    lost = 0.0
    q = 0
    for s in range(val.shape[0]):
        if val[s] >= thr:
            ni[q] = idx[s]
            nv[q] = val[s]
            q += 1
        else:
            lost += val[s]
    return ni, nv, lost


@njit(cache=True)
def _sum(val):
    s = 0.0
    c = 0.0
    for k in range(val.shape[0]):
        v = val[k]
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
    return s + c


# ---------------------------------------------------------------------------
# matrix passes


@njit(cache=True)
def _pass_bound(idx, val, cj, g0, g1, reg, scr):
    """``v @ U`` with the min-bounded DTMC matrix.  Returns (status, bad, idx, val)."""
    r = reg[2]
    succ = reg[3]
    m = r.shape[1]
    buf, flag, lst, cnt = scr[0], scr[1], scr[2], scr[3]
    for s in range(idx.shape[0]):
        i = idx[s]
        p = val[s]
        tot0 = 0.0
        tot1 = 0.0
        for j in range(m):
            rij = r[i, j]
            if rij == 0.0:
                continue
            tot0 += rij * g0[j]
            tot1 += rij * g1[j]
            k = succ[i, j]
            if k < 0:
                k = _resolve(i, j, reg)
            if k < 0:
                _reset(buf, flag, lst, cnt)
                return (FULL if k == -1 else OVERFLOW), i, np.empty(0, dtype=np.int64), np.empty(0)
            # inlined _add: helper calls with array arguments cost atomic refcounts
            if flag[k] == 0:
                flag[k] = 1
                lst[cnt[0]] = k
                cnt[0] += 1
            buf[k] += p * rij * cj[j]
        u0 = 1.0 - max(tot0, tot1)
        if u0 < -DOM_TOL:
            _reset(buf, flag, lst, cnt)
            return VIOLATION, i, np.empty(0, dtype=np.int64), np.empty(0)
        if u0 > 0.0:
            if flag[i] == 0:
                flag[i] = 1
                lst[cnt[0]] = i
                cnt[0] += 1
            buf[i] += p * u0
    oi, ov = _collect(buf, flag, lst, cnt, True)
    return OK, -1, oi, ov


@njit(cache=True)
def _pass_generator(idx, val, lam0, lam1, lam_b, delta, lt0, tb, reg, scr):
    """``(v @ A0, v @ A1)`` for ``A(s) = Lam(s) I + Q(s) = A0 + (s - t0) A1``."""
    r = reg[2]
    succ = reg[3]
    m = r.shape[1]
    b0, f0, l0, c0 = scr[0], scr[1], scr[2], scr[3]
    b1, f1, l1, c1 = scr[4], scr[5], scr[6], scr[7]
    tol0 = DOM_TOL * max(lam0, 1.0)
    tol1 = DOM_TOL * max(lam1, 1.0)
    for s in range(idx.shape[0]):
        i = idx[s]
        p = val[s]
        out0 = 0.0
        out1 = 0.0
        for j in range(m):
            rij = r[i, j]
            if rij == 0.0:
                continue
            k = succ[i, j]
            if k < 0:
                k = _resolve(i, j, reg)
            if k < 0:
                _reset(b0, f0, l0, c0)
                _reset(b1, f1, l1, c1)
                return (FULL if k == -1 else OVERFLOW), i, np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64), np.empty(0)
            q0 = rij * lt0[j]
            q1 = rij * tb[j]
            out0 += q0
            out1 += q1
            if f0[k] == 0:
                f0[k] = 1
                l0[c0[0]] = k
                c0[0] += 1
            b0[k] += p * q0
            if f1[k] == 0:
                f1[k] = 1
                l1[c1[0]] = k
                c1[0] += 1
            b1[k] += p * q1
        d0 = lam0 - out0
        d1 = lam_b - out1
        if d0 < -tol0 or d0 + d1 * delta < -tol1:
            _reset(b0, f0, l0, c0)
            _reset(b1, f1, l1, c1)
            return VIOLATION, i, np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64), np.empty(0)
        if f0[i] == 0:
            f0[i] = 1
            l0[c0[0]] = i
            c0[0] += 1
        b0[i] += p * d0
        if f1[i] == 0:
            f1[i] = 1
            l1[c1[0]] = i
            c1[0] += 1
        b1[i] += p * d1
    ai, av = _collect(b0, f0, l0, c0, False)
    bi, bv = _collect(b1, f1, l1, c1, False)
    return OK, -1, ai, av, bi, bv


@njit(cache=True)
def _pass_generator_mixed(ai, av, bi, bv, ca0, cb0, ca1, cb1, lam0, lam1, lam_b, delta, lt0, tb, reg, scr):
    """``(ca0*a + cb0*b) @ A0 + (ca1*a + cb1*b) @ A1`` in one sweep.

    ``b`` is scattered into scratch slot 1 so entries shared with ``a`` are
    visited once; the result is collected from slot 0.
    """
    r = reg[2]
    succ = reg[3]
    m = r.shape[1]
    b0, f0, l0, c0 = scr[0], scr[1], scr[2], scr[3]
    b1, f1, l1, c1 = scr[4], scr[5], scr[6], scr[7]
    tol0 = DOM_TOL * max(lam0, 1.0)
    tol1 = DOM_TOL * max(lam1, 1.0)
    for s in range(bi.shape[0]):
        k = bi[s]
        f1[k] = 1
        l1[c1[0]] = k
        c1[0] += 1
        b1[k] = bv[s]
    na = ai.shape[0]
    for s in range(na + bi.shape[0]):
        if s < na:
            i = ai[s]
            xa = av[s]
        else:
            i = bi[s - na]
            xa = 0.0
        if f1[i] == 2:
            continue
        if f1[i] == 0:
            # keep the flag on the reset list
            l1[c1[0]] = i
            c1[0] += 1
            xb = 0.0
        else:
            xb = b1[i]
        f1[i] = 2
        al = ca0 * xa + cb0 * xb
        be = ca1 * xa + cb1 * xb
        out0 = 0.0
        out1 = 0.0
        for j in range(m):
            rij = r[i, j]
            if rij == 0.0:
                continue
            k = succ[i, j]
            if k < 0:
                k = _resolve(i, j, reg)
            if k < 0:
                _reset(b0, f0, l0, c0)
                _reset(b1, f1, l1, c1)
                return (FULL if k == -1 else OVERFLOW), i, np.empty(0, dtype=np.int64), np.empty(0)
            q0 = rij * lt0[j]
            q1 = rij * tb[j]
            out0 += q0
            out1 += q1
            if f0[k] == 0:
                f0[k] = 1
                l0[c0[0]] = k
                c0[0] += 1
            b0[k] += al * q0 + be * q1
        d0 = lam0 - out0
        d1 = lam_b - out1
        if d0 < -tol0 or d0 + d1 * delta < -tol1:
            _reset(b0, f0, l0, c0)
            _reset(b1, f1, l1, c1)
            return VIOLATION, i, np.empty(0, dtype=np.int64), np.empty(0)
        if f0[i] == 0:
            f0[i] = 1
            l0[c0[0]] = i
            c0[0] += 1
        b0[i] += al * d0 + be * d1
    _reset(b1, f1, l1, c1)
    oi, ov = _collect(b0, f0, l0, c0, True)
    return OK, -1, oi, ov


@njit(cache=True)
def _axpy(buf, flag, lst, cnt, scale, idx, val):
    for s in range(idx.shape[0]):
        k = idx[s]
        if flag[k] == 0:
            flag[k] = 1
            lst[cnt[0]] = k
            cnt[0] += 1
        buf[k] += scale * val[s]


# ---------------------------------------------------------------------------
# one window


@njit(cache=True)
def _undominated(lst, cnt, g0, g1, r):
    """First state in ``lst[:cnt]`` whose exit rate exceeds ``Lam`` at a window end, else -1."""
    m = r.shape[1]
    for s in range(cnt):
        i = lst[s]
        tot0 = 0.0
        tot1 = 0.0
        for j in range(m):
            rij = r[i, j]
            if rij != 0.0:
                tot0 += rij * g0[j]
                tot1 += rij * g1[j]
        if max(tot0, tot1) > 1.0 + DOM_TOL:
            return i
    return -1


@njit(cache=True)
def window(v_idx, v_val, t0, delta, lam_a, lam_b, mu, w, exact, thr, prune_result, ta, tb, reg, scr):
    """Transport ``v`` across ``[t0, t0 + delta]``.

    Returns ``(status, bad, idx, val, bounding, poisson, pruned, wsize)``.
    """
    empty_i = np.empty(0, dtype=np.int64)
    empty_v = np.empty(0)
    m = ta.shape[0]
    R = w.shape[0] - 1
    t1 = t0 + delta
    lam0 = lam_a + lam_b * t0
    lam1 = lam_a + lam_b * t1
    lt0 = np.empty(m)
    g0 = np.empty(m)
    g1 = np.empty(m)
    cj = np.empty(m)
    for j in range(m):
        l0 = ta[j] + tb[j] * t0
        l1 = ta[j] + tb[j] * t1
        lt0[j] = l0
        g0[j] = l0 / lam0 if lam0 > 0.0 else 0.0
        g1[j] = l1 / lam1 if lam1 > 0.0 else 0.0
        cj[j] = min(g0[j], g1[j])
    s0 = _sum(v_val)
    emu = w[0]
    b0, f0, l0, c0 = scr[0], scr[1], scr[2], scr[3]
    b2, f2, l2, c2 = scr[8], scr[9], scr[10], scr[11]
    sflag, slst, scnt = scr[12], scr[13], scr[14]
    _mark(sflag, slst, scnt, v_idx)
    pruned = 0.0
    k = min(exact, R + 1)

    # i = 0
    ti, tv, lost = _prune(v_idx, v_val, thr)
    pruned += emu * lost
    _axpy(b2, f2, l2, c2, emu, ti, tv)

    if k >= 2:
        st, bad, ai, av, bi, bv = _pass_generator(v_idx, v_val, lam0, lam1, lam_b, delta, lt0, tb, reg, scr)
        if st != OK:
            _reset_all(scr)
            return st, bad, empty_i, empty_v, 0.0, 0.0, 0.0, 0
        _axpy(b0, f0, l0, c0, emu * delta, ai, av)
        _axpy(b0, f0, l0, c0, emu * delta * delta / 2.0, bi, bv)
        ti, tv = _collect(b0, f0, l0, c0, True)
        ti, tv, lost = _prune(ti, tv, thr * w[1])
        pruned += lost
        _mark(sflag, slst, scnt, ti)
        _axpy(b2, f2, l2, c2, 1.0, ti, tv)
        if k >= 3:
            d2 = delta * delta
            st, bad, ti, tv = _pass_generator_mixed(
                ai, av, bi, bv, emu * d2 / 2.0, emu * d2 * delta / 6.0, emu * d2 * delta / 3.0, emu * d2 * d2 / 8.0,
                lam0, lam1, lam_b, delta, lt0, tb, reg, scr,
            )
            if st != OK:
                _reset_all(scr)
                return st, bad, empty_i, empty_v, 0.0, 0.0, 0.0, 0
            ti, tv, lost = _prune(ti, tv, thr * w[2])
            pruned += lost
            _mark(sflag, slst, scnt, ti)
            _axpy(b2, f2, l2, c2, 1.0, ti, tv)

    ci = v_idx
    cv = v_val
    cum = 0.0
    for i in range(1, R + 1):
        st, bad, ci, cv = _pass_bound(ci, cv, cj, g0, g1, reg, scr)
        if st != OK:
            _reset_all(scr)
            return st, bad, empty_i, empty_v, 0.0, 0.0, 0.0, 0
        ci, cv, lost = _prune(ci, cv, thr)
        cum += lost
        if i >= k:
            _mark(sflag, slst, scnt, ci)
            _axpy(b2, f2, l2, c2, w[i], ci, cv)
            pruned += w[i] * cum

    oi, ov = _collect(b2, f2, l2, c2, True)
    if prune_result:
        oi, ov, lost = _prune(oi, ov, thr)
        pruned += lost
    # States that are never stepped (the last chain vector, the exact-term
    # supports, everything when R = 0) still need Lam to dominate them.
    bad = _undominated(slst, scnt[0], g0, g1, reg[2])
    if bad >= 0:
        _reset_all(scr)
        return VIOLATION, bad, empty_i, empty_v, 0.0, 0.0, 0.0, 0
    wsize = scnt[0]
    for s in range(wsize):
        sflag[slst[s]] = 0
    scnt[0] = 0
    captured = _sum(w)
    poisson = s0 * max(0.0, 1.0 - captured)
    bounding = max(0.0, s0 - _sum(ov) - poisson - pruned)
    return OK, -1, oi, ov, bounding, poisson, pruned, wsize


# ---------------------------------------------------------------------------
# dominating states


@njit(cache=True)
def dominating_rate(x, ta, tb, gmin, const, expo):
    """``(a, b)`` with ``Lam(s) = a + b s`` the lower-guard-relaxed exit rate of ``x``."""
    a = 0.0
    b = 0.0
    m = ta.shape[0]
    for j in range(m):
        ok = True
        for k in range(x.shape[0]):
            if x[k] < gmin[j, k]:
                ok = False
                break
        if ok:
            rj = _state_factor(x, j, const, expo)
            a += rj * ta[j]
            b += rj * tb[j]
    return a, b


@njit(cache=True)
def monotone_max_state(v_idx, states, R_star, wmax, caps):
    n = states.shape[1]
    x = np.zeros(n, dtype=np.int64)
    for k in range(n):
        x[k] = states[v_idx[0], k]
    for s in range(1, v_idx.shape[0]):
        i = v_idx[s]
        for k in range(n):
            if states[i, k] > x[k]:
                x[k] = states[i, k]
    for k in range(n):
        x[k] = min(x[k] + R_star * wmax[k], caps[k])
    return x


@njit(cache=True)
def moment_derivative(E, C, t, change, const, ta, tb, ia, ib, dE, dC):
    """Second-order (Gaussian) moment closure for monomial rates of degree <= 2.

    ``ia[j], ib[j]`` are the species of the monomial of class ``j`` (-1 when
    absent; ``ia == ib`` for a square).
    """
    m, n = change.shape
    for k in range(n):
        dE[k] = 0.0
        for l in range(n):
            dC[k, l] = 0.0
    G = np.zeros(n)
    for j in range(m):
        lam = (ta[j] + tb[j] * t) * const[j]
        a = ia[j]
        b = ib[j]
        for l in range(n):
            G[l] = 0.0
        if a < 0:
            mean = 1.0
        elif b < 0:
            mean = E[a]
            for l in range(n):
                G[l] = C[l, a]
        elif a == b:
            mean = E[a] * E[a] + C[a, a]
            for l in range(n):
                G[l] = 2.0 * E[a] * C[l, a]
        else:
            mean = E[a] * E[b] + C[a, b]
            for l in range(n):
                G[l] = E[b] * C[l, a] + E[a] * C[l, b]
        mean *= lam
        for l in range(n):
            G[l] *= lam
        for k in range(n):
            wk = change[j, k]
            if wk == 0:
                continue
            dE[k] += wk * mean
            for l in range(n):
                wl = change[j, l]
                dC[k, l] += wk * G[l] + wk * wl * mean
                dC[l, k] += wk * G[l]


@njit(cache=True)
def moment_envelope(E0, C0, t0, delta, ell, steps, change, const, ta, tb, ia, ib):
    """Integrate the moment equations over ``[t0, t0+delta]`` with classical RK4.

    Returns, per species, the maximum of ``E_k + ell*sigma_k`` over the grid,
    plus the final means and covariances.
    """
    n = E0.shape[0]
    E = E0.copy()
    C = C0.copy()
    env = np.empty(n)
    for k in range(n):
        env[k] = E[k] + ell * math.sqrt(max(C[k, k], 0.0))
    if delta <= 0.0:
        return env, E, C
    h = delta / steps
    k1E = np.empty(n)
    k2E = np.empty(n)
    k3E = np.empty(n)
    k4E = np.empty(n)
    k1C = np.empty((n, n))
    k2C = np.empty((n, n))
    k3C = np.empty((n, n))
    k4C = np.empty((n, n))
    for s in range(steps):
        t = t0 + s * h
        moment_derivative(E, C, t, change, const, ta, tb, ia, ib, k1E, k1C)
        moment_derivative(E + 0.5 * h * k1E, C + 0.5 * h * k1C, t + 0.5 * h, change, const, ta, tb, ia, ib, k2E, k2C)
        moment_derivative(E + 0.5 * h * k2E, C + 0.5 * h * k2C, t + 0.5 * h, change, const, ta, tb, ia, ib, k3E, k3C)
        moment_derivative(E + h * k3E, C + h * k3C, t + h, change, const, ta, tb, ia, ib, k4E, k4C)
        E = E + (h / 6.0) * (k1E + 2.0 * k2E + 2.0 * k3E + k4E)
        C = C + (h / 6.0) * (k1C + 2.0 * k2C + 2.0 * k3C + k4C)
        for k in range(n):
            v = E[k] + ell * math.sqrt(max(C[k, k], 0.0))
            if v > env[k]:
                env[k] = v
    return env, E, C


@njit(cache=True)
def moments_of(v_idx, v_val, states):
    n = states.shape[1]
    E = np.zeros(n)
    C = np.zeros((n, n))
    tot = 0.0
    for s in range(v_idx.shape[0]):
        tot += v_val[s]
    for s in range(v_idx.shape[0]):
        p = v_val[s] / tot
        i = v_idx[s]
        for k in range(n):
            E[k] += p * states[i, k]
    for s in range(v_idx.shape[0]):
        p = v_val[s] / tot
        i = v_idx[s]
        for k in range(n):
            dk = states[i, k] - E[k]
            for l in range(n):
                C[k, l] += p * dk * (states[i, l] - E[l])
    return E, C


@njit(cache=True)
def envelope_ok(env):
    """False if the moment equations blew up (closure instability on long windows)."""
    for k in range(env.shape[0]):
        if not (env[k] < ENV_MAX):
            return False
    return True


@njit(cache=True)
def envelope_state(env, caps):
    n = env.shape[0]
    x = np.zeros(n, dtype=np.int64)
    for k in range(n):
        v = math.ceil(env[k] - 1e-9)
        if v < 0:
            v = 0
        x[k] = min(v, caps[k])
    return x


# ---------------------------------------------------------------------------
# step selection


@njit(cache=True, inline="always")
def _mu(lam_a, lam_b, t, delta):
    return (lam_a + lam_b * t) * delta + 0.5 * lam_b * delta * delta


@njit(cache=True)
def choose_delta(method, t, d_plus, R_star, epsilon, v_idx, ell, mom_E, mom_C, steps, reg, wmax, caps, ta, tb, ia, ib):
    """Binary search for the window length.

    Returns ``(delta, R, mu, lam_a, lam_b, x_max, probes)``; ``delta < 0``
    signals failure.
    """
    states = reg[0]
    change, gmin, const, expo = reg[8], reg[9], reg[11], reg[12]
    usable = True
    if method == 0:
        x = monotone_max_state(v_idx, states, R_star, wmax, caps)
    else:
        env, _, _ = moment_envelope(mom_E, mom_C, t, d_plus, ell, steps, change, const, ta, tb, ia, ib)
        usable = envelope_ok(env)
        x = envelope_state(env, caps) if usable else np.zeros(env.shape[0], dtype=np.int64)
    la, lb = dominating_rate(x, ta, tb, gmin, const, expo)
    mu = _mu(la, lb, t, d_plus)
    R = right_truncation_nb(mu, epsilon) if usable else R_star + 1
    probes = 1
    if R <= R_star:
        return d_plus, R, mu, la, lb, x, probes
    lo = 0.0
    hi = d_plus
    best = -1.0
    best_R = 0
    best_mu = 0.0
    best_la = 0.0
    best_lb = 0.0
    best_x = x
    for _ in range(MAX_BISECT):
        d = 0.5 * (lo + hi)
        if method == 1:
            env, _, _ = moment_envelope(mom_E, mom_C, t, d, ell, steps, change, const, ta, tb, ia, ib)
            usable = envelope_ok(env)
            if usable:
                x = envelope_state(env, caps)
                la, lb = dominating_rate(x, ta, tb, gmin, const, expo)
        mu = _mu(la, lb, t, d)
        R = right_truncation_nb(mu, epsilon) if usable else R_star + 1
        probes += 1
        if R <= R_star and d > best:
            best, best_R, best_mu, best_la, best_lb, best_x = d, R, mu, la, lb, x
        if R == R_star:
            break
        if R > R_star:
            hi = d
        else:
            lo = d
    return best, best_R, best_mu, best_la, best_lb, best_x, probes


# ---------------------------------------------------------------------------
# multi-window loop


@njit(cache=True)
def run_windows(
    t,
    t_target,
    horizon,
    v_idx,
    v_val,
    method,
    ell0,
    R_star,
    epsilon,
    thr,
    exact,
    prune_result,
    rho,
    steps,
    wmax,
    caps,
    ta,
    tb,
    ia,
    ib,
    reg,
    scr,
    rec,
    rec_meta,
    stats,
    max_windows,
):
    """Advance windows from ``t`` until ``t_target``.

    Returns ``(status, t, idx, val, bad)``.  On any status other than OK the
    returned ``t``/``idx``/``val`` are the start of the window that failed, so
    the caller can fix the cause (grow arrays) and call again.

    ``stats`` accumulates ``[retries, fallbacks, probes, rho_recomputes]``.
    After ``max_windows`` windows (if positive) the loop returns ``PAUSED``.
    """
    done = 0
    while t < t_target:
        if max_windows > 0 and done >= max_windows:
            return PAUSED, t, v_idx, v_val, -1
        if v_idx.shape[0] == 0:
            return EMPTY, t, v_idx, v_val, -1
        if rec_meta[0] >= rec.shape[0]:
            return RECORDS_FULL, t, v_idx, v_val, -1
        d_plus = t_target - t
        mom_E = np.zeros(1)
        mom_C = np.zeros((1, 1))
        if method == 1:
            mom_E, mom_C = moments_of(v_idx, v_val, reg[0])
        ell = ell0
        use = method
        retries = 0
        while True:
            d, R, mu, la, lb, x, probes = choose_delta(
                use, t, d_plus, R_star, epsilon, v_idx, ell, mom_E, mom_C, steps, reg, wmax, caps, ta, tb, ia, ib
            )
            stats[2] += probes
            if d <= 0.0:
                return NO_STEP, t, v_idx, v_val, -1
            w = weights_nb(mu, R)
            st, bad, oi, ov, bnd, poi, prn, ws = window(
                v_idx, v_val, t, d, la, lb, mu, w, exact, thr, prune_result, ta, tb, reg, scr
            )
            if st == OK and rho > 0.0 and prn > rho * d / horizon:
                st2, bad2, oi2, ov2, bnd2, poi2, prn2, ws2 = window(
                    v_idx, v_val, t, d, la, lb, mu, w, exact, thr / 10.0, prune_result, ta, tb, reg, scr
                )
                if st2 != OK:
                    st = st2
                    bad = bad2
                else:
                    oi, ov, bnd, poi, prn, ws = oi2, ov2, bnd2, poi2, prn2, ws2
                    stats[3] += 1
            if st == VIOLATION and use == 1:
                retries += 1
                stats[0] += 1
                ell += 2.0
                if ell > ELL_CAP:
                    use = 0
                    stats[1] += 1
                continue
            if st != OK:
                return st, t, v_idx, v_val, bad
            break
        r = rec_meta[0]
        rec[r, REC_T] = t
        rec[r, REC_DELTA] = d
        rec[r, REC_MU] = mu
        rec[r, REC_R] = R
        rec[r, REC_BOUND] = bnd
        rec[r, REC_POISSON] = poi
        rec[r, REC_PRUNE] = prn
        rec[r, REC_WSIZE] = ws
        rec[r, REC_ELL] = ell if use == 1 else -1.0
        rec_meta[0] = r + 1
        if d == d_plus:
            t = t_target
        else:
            t = t + d
        v_idx = oi
        v_val = ov
        done += 1
    return OK, t, v_idx, v_val, -1


def degree_indices(arrays) -> tuple[np.ndarray, np.ndarray]:
    """Species indices of each class monomial (see :func:`moment_derivative`)."""
    m = arrays.expo.shape[0]
    ia = np.full(m, -1, dtype=np.int64)
    ib = np.full(m, -1, dtype=np.int64)
    for j in range(m):
        species = [k for k, e in enumerate(arrays.expo[j]) for _ in range(int(e))]
        if len(species) > 2:
            raise ValueError("moment closure supports state factors of degree <= 2")
        if species:
            ia[j] = species[0]
        if len(species) == 2:
            ib[j] = species[1]
    return ia, ib
