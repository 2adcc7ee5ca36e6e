"""Brute-force reference solutions on a finite box of states.

The box ``{0..b_1} x ... x {0..b_n}`` is enumerated lexicographically and the
forward equation ``dp/dt = p Q(t)`` is integrated densely with an adaptive
Runge-Kutta pair.  Transitions that would leave the box are omitted, from
the off-diagonal and from the diagonal, so the truncated chain is
conservative.  Alongside ``p`` the integrator accumulates the omitted
outflow ``int p(s) . d(s) ds``.  That is the expected number of attempts to
leave the box, so it bounds the probability that the true process leaves
before ``t1`` (and can exceed 1 when the box is far too small).

Nothing here shares code with the engine apart from the model definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from .model import ModelSpec, StateVec

# negative entries down to this size are integration noise (the absolute
# tolerance accumulates over many steps) and are floored to zero
NEG_NOISE = 1e-6


@dataclass(frozen=True)
class StateBox:
    """Inclusive upper bounds per dimension, lower bounds are zero."""

    upper: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "upper", tuple(int(b) for b in self.upper))
        if any(b < 0 for b in self.upper):
            raise ValueError(f"box bounds must be non-negative, got {self.upper}")

    @property
    def n(self) -> int:
        return len(self.upper)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b + 1 for b in self.upper)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def contains(self, x: Sequence[int]) -> bool:
        return len(x) == self.n and all(0 <= v <= b for v, b in zip(x, self.upper))

    def index(self, x: Sequence[int]) -> int:
        if not self.contains(x):
            raise KeyError(f"state {tuple(x)} outside box {self.upper}")
        return int(np.ravel_multi_index(tuple(int(v) for v in x), self.shape))

    def states(self) -> np.ndarray:
        """All states, row ``i`` is the state with index ``i`` (lexicographic order)."""
        grids = np.indices(self.shape).reshape(self.n, -1)
        return grids.T.astype(np.int64)

    def dense(self, p: Mapping[StateVec, float]) -> np.ndarray:
        out = np.zeros(self.size)
        for x, v in p.items():
            out[self.index(x)] += v
        return out


def generator_row(x: Sequence[int], t: float, box: StateBox, spec: ModelSpec) -> dict[StateVec, float]:
    """Row ``x`` of the box-truncated generator at time ``t`` (zero entries omitted)."""
    x = tuple(int(v) for v in x)
    if not box.contains(x):
        raise KeyError(f"state {x} outside box {box.upper}")
    row: dict[StateVec, float] = {}
    out = 0.0
    for c in spec.classes:
        if not c.enabled(x):
            continue
        y = tuple(a + b for a, b in zip(x, c.change))
        if not box.contains(y):
            continue
        r = c.rate(x, t)
        if r > 0:
            row[y] = row.get(y, 0.0) + r
            out += r
    if out > 0:
        row[x] = -out
    return row


@dataclass
class BoxGenerator:
    """``Q(t) = Q0 + t*Q1`` on a box plus the omitted outflow ``d(t) = d0 + t*d1``."""

    box: StateBox
    Q0: sp.csr_matrix
    Q1: sp.csr_matrix
    d0: np.ndarray
    d1: np.ndarray

    @property
    def homogeneous(self) -> bool:
        return self.Q1.nnz == 0 and not np.any(self.d1)

    def at(self, t: float) -> sp.csr_matrix:
        return (self.Q0 + t * self.Q1).tocsr()


def box_generator(box: StateBox, spec: ModelSpec) -> BoxGenerator:
    if box.n != spec.n:
        raise ValueError(f"box has {box.n} dimensions, model has {spec.n}")
    X = box.states()
    N = X.shape[0]
    rows, cols, v0, v1 = [], [], [], []
    diag0 = np.zeros(N)
    diag1 = np.zeros(N)
    d0 = np.zeros(N)
    d1 = np.zeros(N)
    upper = np.array(box.upper)
    for c in spec.classes:
        ok = np.ones(N, dtype=bool)
        for k in range(spec.n):
            ok &= X[:, k] >= c.guard_min[k]
            if c.guard_max[k] is not None:
                ok &= X[:, k] <= c.guard_max[k]
        r = c.state_factor.constant * np.prod(X.astype(float) ** np.array(c.state_factor.exponents), axis=1)
        r = np.where(ok, r, 0.0)
        Y = X + np.array(c.change)
        inside = np.all((Y >= 0) & (Y <= upper), axis=1)
        keep = ok & inside & (r > 0)
        a, b = c.time_factor.a, c.time_factor.b
        src = np.flatnonzero(keep)
        dst = np.ravel_multi_index(tuple(Y[src].T), box.shape)
        rows.append(src)
        cols.append(dst)
        v0.append(r[src] * a)
        v1.append(r[src] * b)
        diag0[src] -= r[src] * a
        diag1[src] -= r[src] * b
        gone = ok & ~inside & (r > 0)
        d0[gone] += r[gone] * a
        d1[gone] += r[gone] * b
    idx = np.arange(N)
    rows = np.concatenate(rows + [idx])
    cols = np.concatenate(cols + [idx])
    Q0 = sp.csr_matrix((np.concatenate(v0 + [diag0]), (rows, cols)), shape=(N, N))
    Q1 = sp.csr_matrix((np.concatenate(v1 + [diag1]), (rows, cols)), shape=(N, N))
    Q0.eliminate_zeros()
    Q1.eliminate_zeros()
    return BoxGenerator(box, Q0, Q1, d0, d1)


@dataclass
class OracleSolution:
    box: StateBox
    t: float
    p: np.ndarray
    boundary_mass: float
    edge_mass: float
    steps: int = 0

    def __getitem__(self, x: Sequence[int]) -> float:
        return float(self.p[self.box.index(x)]) if self.box.contains(x) else 0.0

    def as_dict(self) -> dict[StateVec, float]:
        X = self.box.states()
        nz = np.flatnonzero(self.p > 0)
        return {tuple(int(v) for v in X[i]): float(self.p[i]) for i in nz}

    def mass(self) -> float:
        return math.fsum(self.p)

    def means(self) -> np.ndarray:
        return (self.p @ self.box.states()) / self.p.sum()


def _as_vector(p0, box: StateBox) -> np.ndarray:
    if isinstance(p0, np.ndarray):
        if p0.shape != (box.size,):
            raise ValueError("dense initial vector has the wrong length")
        return p0.astype(float)
    items = p0.items() if hasattr(p0, "items") else p0
    return box.dense(dict(items))


def integrate_forward(
    p0,
    t0: float,
    t1: float,
    box: StateBox,
    spec: ModelSpec,
    tol: float = 1e-10,
    gen: BoxGenerator | None = None,
) -> OracleSolution:
    """Integrate the box-truncated forward equation from ``t0`` to ``t1``.

    ``p0`` is a dense vector over the box or a state -> probability map.
    Uses the embedded 8(5,3) Dormand-Prince pair with relative and absolute
    tolerance ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    gen = gen or box_generator(box, spec)
    p = _as_vector(p0, box)
    edge = (gen.d0 > 0) | (gen.d1 != 0)
    if t1 == t0:
        return OracleSolution(box, t1, p, 0.0, float(p[edge].sum()))
    Q0T, Q1T = gen.Q0.T.tocsr(), gen.Q1.T.tocsr()
    N = box.size

    def rhs(t, z):
        q = z[:N]
        dz = np.empty(N + 1)
        dz[:N] = Q0T @ q + t * (Q1T @ q)
        dz[N] = q @ gen.d0 + t * (q @ gen.d1)
        return dz

    z0 = np.append(p, 0.0)
    # solve_ivp controls the RMS of the scaled error; dividing atol by sqrt(N)
    # turns that into a per-component bound
    sol = solve_ivp(rhs, (t0, t1), z0, method="DOP853", rtol=tol, atol=tol / math.sqrt(N + 1), t_eval=[t1])
    if sol.status != 0:
        raise FloatingPointError(f"integration failed: {sol.message}")
    z = sol.y[:, -1]
    q = z[:N].copy()
    if np.any(q < -NEG_NOISE):
        raise FloatingPointError(f"integration produced a negative probability {q.min():.3g}")
    q[q < 0] = 0.0
    return OracleSolution(box, t1, q, max(float(z[N]), 0.0), float(q[edge].sum()), int(sol.nfev))


def transient_homogeneous(p0, t: float, box: StateBox, spec: ModelSpec) -> OracleSolution:
    """``p0 expm(Q t)`` for a model whose time factors are all constant."""
    gen = box_generator(box, spec)
    if not gen.homogeneous:
        raise ValueError("model has time dependent rates")
    p = _as_vector(p0, box)
    q = expm_multiply(gen.Q0.T.tocsc() * t, p)
    q = np.where(q < 0, 0.0, q)
    # escaped mass with an absorbing sink, computed the same way
    M = sp.bmat([[gen.Q0, sp.csr_matrix(gen.d0[:, None])], [None, sp.csr_matrix((1, 1))]]).tocsc()
    z = expm_multiply(M.T * t, np.append(p, 0.0))
    edge = gen.d0 > 0
    return OracleSolution(box, t, q, max(float(z[-1]), 0.0), float(q[edge].sum()))


@dataclass
class VerificationReport:
    passed: bool
    slack: float
    violations: list[tuple[StateVec, float, float]] = field(default_factory=list)
    checked: int = 0
    # largest p_hat - p_ref over the checked states, may be negative
    worst: float = -math.inf


def verify_underapprox(p_hat, p_ref, slack: float = 1e-9) -> VerificationReport:
    """Find all states with ``p_hat(x) > p_ref(x) + slack``.

    ``p_ref`` is an :class:`OracleSolution` or a state -> probability map; a
    state absent from it counts as probability 0.
    """
    if isinstance(p_ref, OracleSolution):
        ref = p_ref.__getitem__
    else:
        ref_map = dict(p_ref.items()) if hasattr(p_ref, "items") else dict(p_ref)
        ref = lambda x: ref_map.get(tuple(x), 0.0)  # noqa: E731
    bad = []
    worst = -math.inf
    n = 0
    for x, p in p_hat.items():
        q = ref(x)
        worst = max(worst, p - q)
        n += 1
        if p > q + slack:
            bad.append((tuple(x), float(p), float(q)))
    bad.sort(key=lambda v: v[2] - v[1])
    return VerificationReport(not bad, slack, bad, n, worst)


def total_variation(p: Mapping[StateVec, float], q: Mapping[StateVec, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(x, 0.0) - q.get(x, 0.0)) for x in keys)
