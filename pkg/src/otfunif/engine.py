"""Sparse substochastic distributions and the lower-bounding window step.

Everything here works on plain ``dict`` maps from state tuples to
probabilities.  It is the readable reference for one uniformization window;
the production loop in :mod:`otfunif._kernels` does the same arithmetic on
an indexed state registry and is checked against these functions in the
test-suite.

Window arithmetic
-----------------
For a window ``[t0, t1]`` with dominating rate ``Lam(s) = a + b*s`` the jump
count is Poisson with mean ``mu = int Lam``.  The i-jump term of the
uniformization sum is

    e^{-mu} * v0 @ int_{s1<...<si} A(s1) ... A(si),   A(s) = Lam(s) I + Q(s)

and because every rate is affine in time, ``A(s) = A0 + (s - t0) A1``.  The
first ``exact_terms`` terms are evaluated with these closed forms (they
conserve mass); later terms use the per-window min-bounds ``u_j`` and
``u_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .model import ModelSpec, StateVec

# slack for rounding in the self-loop/diagonal domination checks
DOMINATION_TOL = 1e-12


class DominationError(RuntimeError):
    """The uniformization rate does not dominate the exit rate of some state."""

    def __init__(self, state, t, excess):
        super().__init__(f"uniformization rate does not dominate state {state} at t={t} (excess {excess:.3g})")
        self.state = state
        self.t = t
        self.excess = excess


class EmptyDistributionError(RuntimeError):
    """All probability mass has been lost, continuing is meaningless."""


class SparseDistribution:
    """Finite-support map from states to positive probabilities."""

    __slots__ = ("entries",)

    def __init__(self, entries: Mapping[StateVec, float] | Iterable[tuple[StateVec, float]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self.entries: dict[StateVec, float] = {}
        for x, p in items:
            if p < 0 or not math.isfinite(p):
                raise ValueError(f"invalid probability {p} for state {x}")
            if p > 0:
                self.entries[tuple(int(v) for v in x)] = float(p)

    @classmethod
    def point(cls, x: Sequence[int]) -> "SparseDistribution":
        return cls({tuple(x): 1.0})

    @classmethod
    def from_initial(cls, spec: ModelSpec) -> "SparseDistribution":
        return cls(spec.initial)

    @classmethod
    def from_arrays(cls, states: np.ndarray, probs: np.ndarray) -> "SparseDistribution":
        d = cls()
        d.entries = {tuple(int(v) for v in x): float(p) for x, p in zip(states, probs) if p > 0}
        return d

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, x: Sequence[int]) -> float:
        return self.entries.get(tuple(x), 0.0)

    def __contains__(self, x) -> bool:
        return tuple(x) in self.entries

    def __iter__(self) -> Iterator[StateVec]:
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    def mass(self) -> float:
        return math.fsum(self.entries.values())

    def copy(self) -> "SparseDistribution":
        d = SparseDistribution()
        d.entries = dict(self.entries)
        return d

    def to_arrays(self, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """States (lexicographically sorted) and probabilities as arrays."""
        keys = sorted(self.entries)
        if n is None:
            n = len(keys[0]) if keys else 0
        states = np.array(keys, dtype=np.int64).reshape(len(keys), n)
        probs = np.array([self.entries[k] for k in keys], dtype=float)
        return states, probs

    def max_per_dim(self) -> np.ndarray:
        return np.max(np.array(list(self.entries), dtype=np.int64), axis=0)

    def marginal(self, dims: Sequence[int]) -> "SparseDistribution":
        out: dict[StateVec, float] = {}
        for x, p in self.entries.items():
            key = tuple(x[k] for k in dims)
            out[key] = out.get(key, 0.0) + p
        return SparseDistribution(out)

    def __repr__(self) -> str:
        return f"SparseDistribution(size={len(self)}, mass={self.mass():.15g})"


@dataclass(frozen=True)
class UniformizationRate:
    """``Lam(s) = a + b*s``: the exit rate of a dominating state ``x_max``."""

    x_max: StateVec
    a: float
    b: float

    @classmethod
    def from_state(cls, x_max: Sequence[int], spec: ModelSpec) -> "UniformizationRate":
        """Dominating rate of ``x_max`` for every state below it componentwise.

        Classes are summed whenever ``x_max`` satisfies their lower guard
        bounds; upper bounds are ignored so the result dominates every state
        ``y <= x_max`` even when an upper-bounded guard switches a class off.
        """
        a = b = 0.0
        for c in spec.classes:
            if all(xk >= lo for xk, lo in zip(x_max, c.guard_min)):
                r = c.state_factor(x_max)
                a += r * c.time_factor.a
                b += r * c.time_factor.b
        return cls(tuple(int(v) for v in x_max), a, b)

    def __call__(self, t: float) -> float:
        return self.a + self.b * t


@dataclass
class StepRecord:
    t: float
    delta: float
    mu: float
    R: int
    bounding_loss: float
    poisson_loss: float
    prune_loss: float
    window_size: int = 0

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "delta": self.delta,
            "mu": self.mu,
            "R": self.R,
            "bounding_loss": self.bounding_loss,
            "poisson_loss": self.poisson_loss,
            "prune_loss": self.prune_loss,
        }


class ErrorLedger:
    """Cumulative probability loss split by source.

    Per-window records are kept either as :class:`StepRecord` objects (the
    reference driver) or as a numeric table with one row per window (the
    compiled driver, which may produce millions of windows).
    """

    TABLE_COLUMNS = ("t", "delta", "mu", "R", "bounding_loss", "poisson_loss", "prune_loss", "window_size", "ell")

    def __init__(self, bounding_loss: float = 0.0, poisson_loss: float = 0.0, prune_loss: float = 0.0):
        self.bounding_loss = bounding_loss
        self.poisson_loss = poisson_loss
        self.prune_loss = prune_loss
        self._records: list[StepRecord] = []
        self._table: np.ndarray | None = None

    @classmethod
    def from_table(cls, table: np.ndarray) -> "ErrorLedger":
        table = np.array(table, dtype=float, copy=True).reshape(-1, len(cls.TABLE_COLUMNS))
        led = cls(math.fsum(table[:, 4]), math.fsum(table[:, 5]), math.fsum(table[:, 6]))
        led._table = table
        return led

    def add(self, record: StepRecord) -> None:
        if self._table is not None:
            raise TypeError("table-backed ledgers are read-only")
        self.bounding_loss += record.bounding_loss
        self.poisson_loss += record.poisson_loss
        self.prune_loss += record.prune_loss
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._table) if self._table is not None else len(self._records)

    def table(self) -> np.ndarray:
        """One row per window, columns as in :attr:`TABLE_COLUMNS`."""
        if self._table is not None:
            return self._table
        rows = [
            (r.t, r.delta, r.mu, r.R, r.bounding_loss, r.poisson_loss, r.prune_loss, r.window_size, -1.0)
            for r in self._records
        ]
        return np.array(rows, dtype=float).reshape(-1, len(self.TABLE_COLUMNS))

    @property
    def records(self) -> list[StepRecord]:
        if self._table is None:
            return self._records
        return [
            StepRecord(float(r[0]), float(r[1]), float(r[2]), int(r[3]), float(r[4]), float(r[5]), float(r[6]), int(r[7]))
            for r in self._table
        ]

    @property
    def total(self) -> float:
        return self.bounding_loss + self.poisson_loss + self.prune_loss

    @property
    def max_window_size(self) -> int:
        if self._table is not None:
            return int(self._table[:, 7].max()) if len(self._table) else 0
        return max((r.window_size for r in self._records), default=0)

    def split_percent(self) -> dict[str, float]:
        total = self.total
        if total <= 0:
            return {"min": 0.0, "poisson": 0.0, "prune": 0.0}
        return {
            "min": 100.0 * self.bounding_loss / total,
            "poisson": 100.0 * self.poisson_loss / total,
            "prune": 100.0 * self.prune_loss / total,
        }


# ---------------------------------------------------------------------------
# per-window transition bounds


def _window(plan) -> tuple[float, float, UniformizationRate]:
    return plan.t_start, plan.t_start + plan.delta, plan.lam


def _ratio(num: float, den: float) -> float:
    if den <= 0:
        if num <= 0:
            return 0.0
        return math.inf
    return num / den


def jump_bound(j: int, x: Sequence[int], plan, spec: ModelSpec) -> float:
    """Lower bound on the DTMC probability of class ``j`` from ``x`` over the window.

    ``lambda_j / Lam`` is a ratio of affine functions, hence monotone on the
    window, so the minimum sits at an endpoint.
    """
    c = spec.classes[j]
    if not c.enabled(x):
        return 0.0
    t0, t1, lam = _window(plan)
    tf = c.time_factor
    ratio = min(_ratio(tf(t0), lam(t0)), _ratio(tf(t1), lam(t1)))
    return c.state_factor(x) * ratio


def self_loop_bound(y: Sequence[int], plan, spec: ModelSpec) -> float:
    """Lower bound on the DTMC self-loop probability of ``y``.

    All ratios share the denominator ``Lam``, so ``sum_j alpha_j(y,s)/Lam(s)`` is
    itself affine over affine and its maximum is at an endpoint.
    """
    t0, t1, lam = _window(plan)
    worst = -math.inf
    for s in (t0, t1):
        out = 0.0
        for c in spec.classes:
            if c.enabled(y):
                out += c.state_factor(y) * c.time_factor(s)
        worst = max(worst, _ratio(out, lam(s)))
    u0 = 1.0 - worst
    if u0 < -DOMINATION_TOL:
        raise DominationError(tuple(y), t0, -u0)
    return max(u0, 0.0)


def _successors(x: StateVec, spec: ModelSpec):
    for j, c in enumerate(spec.classes):
        if c.enabled(x):
            yield j, c, tuple(a + b for a, b in zip(x, c.change))


def prune(v: dict[StateVec, float], threshold: float) -> float:
    """Drop entries below ``threshold`` in place; return the removed mass."""
    if threshold <= 0:
        return 0.0
    dropped = [x for x, p in v.items() if p < threshold]
    lost = math.fsum(v.pop(x) for x in dropped)
    return lost


def dtmc_step(v: SparseDistribution, plan, delta_threshold: float, spec: ModelSpec):
    """One min-bounded DTMC step followed by threshold pruning.

    Returns ``(v_next, prune_loss, step_defect)`` where ``step_defect`` is the
    mass lost to the min-bounds.
    """
    out: dict[StateVec, float] = {}
    for x, p in v.items():
        for j, c, y in _successors(x, spec):
            u = jump_bound(j, x, plan, spec)
            if u > 1 + DOMINATION_TOL:
                raise DominationError(x, plan.t_start, u - 1)
            out[y] = out.get(y, 0.0) + p * u
        out[x] = out.get(x, 0.0) + p * self_loop_bound(x, plan, spec)
    out = {x: p for x, p in out.items() if p > 0}
    before = v.mass()
    after_all = math.fsum(out.values())
    lost = prune(out, delta_threshold)
    defect = max(before - after_all, 0.0)
    return SparseDistribution(out), lost, defect


def accumulate(v_sequence: Iterable[SparseDistribution], weights: Sequence[float]) -> SparseDistribution:
    """Poisson-weighted sum ``sum_i weights[i] * v_i``."""
    acc: dict[StateVec, float] = {}
    for v, w in zip(v_sequence, weights):
        if w == 0:
            continue
        for x, p in v.items():
            acc[x] = acc.get(x, 0.0) + w * p
    return SparseDistribution(acc)


def total_error(p: SparseDistribution) -> float:
    return min(1.0, max(0.0, 1.0 - p.mass()))


# ---------------------------------------------------------------------------
# exact leading terms


def generator_parts(v: Mapping[StateVec, float], plan, spec: ModelSpec):
    """Return ``(v @ A0, v @ A1)`` for ``A(s) = Lam(s) I + Q(s) = A0 + (s - t0) A1``."""
    t0, t1, lam = _window(plan)
    a: dict[StateVec, float] = {}
    b: dict[StateVec, float] = {}
    for x, p in v.items():
        out0 = out1 = 0.0
        for _, c, y in _successors(x, spec):
            r = c.state_factor(x)
            r0 = r * c.time_factor(t0)
            r1 = r * c.time_factor.b
            out0 += r0
            out1 += r1
            a[y] = a.get(y, 0.0) + p * r0
            b[y] = b.get(y, 0.0) + p * r1
        diag0 = lam(t0) - out0
        diag1 = lam.b - out1
        if diag0 < -DOMINATION_TOL * max(lam(t0), 1.0) or diag0 + diag1 * (t1 - t0) < -DOMINATION_TOL * max(
            lam(t1), 1.0
        ):
            raise DominationError(x, t0, -min(diag0, diag0 + diag1 * (t1 - t0)))
        a[x] = a.get(x, 0.0) + p * diag0
        b[x] = b.get(x, 0.0) + p * diag1
    return a, b


def _axpy(acc: dict, scale: float, v: Mapping) -> None:
    if scale == 0:
        return
    for x, p in v.items():
        acc[x] = acc.get(x, 0.0) + scale * p


def exact_terms(v0: SparseDistribution, plan, spec: ModelSpec, count: int) -> list[dict[StateVec, float]]:
    """The first ``count`` (at most 3) window terms, Poisson weight included."""
    if not 1 <= count <= 3:
        raise ValueError("exact_terms must be 1, 2 or 3")
    d = plan.delta
    emu = math.exp(-plan.mu)
    terms = [{x: emu * p for x, p in v0.items()}]
    if count == 1:
        return terms
    a, b = generator_parts(v0.entries, plan, spec)
    t1: dict = {}
    _axpy(t1, emu * d, a)
    _axpy(t1, emu * d * d / 2, b)
    terms.append(t1)
    if count == 2:
        return terms
    aa, ab = generator_parts(a, plan, spec)
    ba, bb = generator_parts(b, plan, spec)
    t2: dict = {}
    _axpy(t2, emu * d**2 / 2, aa)
    _axpy(t2, emu * d**3 / 3, ab)
    _axpy(t2, emu * d**3 / 6, ba)
    _axpy(t2, emu * d**4 / 8, bb)
    terms.append(t2)
    return terms


@dataclass
class WindowResult:
    p_hat: SparseDistribution
    bounding_loss: float
    poisson_loss: float
    prune_loss: float
    window_size: int


def advance_window(
    v0: SparseDistribution,
    plan,
    spec: ModelSpec,
    delta_threshold: float = 0.0,
    exact: int = 3,
    prune_result: bool = True,
) -> WindowResult:
    """Transport ``v0`` across one window; the reference for the compiled kernel.

    Terms ``i < exact`` are evaluated in closed form, the remaining ones from
    the min-bounded DTMC chain.  Pruning happens after each chain step, on the
    exact terms (relative to their Poisson weight) and finally on the result.
    """
    w = plan.truncation.weights
    R = plan.truncation.R
    s0 = v0.mass()
    if s0 <= 0:
        raise EmptyDistributionError("window started from an empty distribution")
    seen = set(v0.entries)
    acc: dict[StateVec, float] = {}
    pruned = 0.0
    k = min(exact, R + 1)
    for i, term in enumerate(exact_terms(v0, plan, spec, k)):
        term = {x: p for x, p in term.items() if p > 0}
        pruned += prune(term, delta_threshold * w[i])
        seen.update(term)
        _axpy(acc, 1.0, term)
    chain = v0
    cum_pruned = 0.0
    for i in range(1, R + 1):
        chain, lost, _ = dtmc_step(chain, plan, delta_threshold, spec)
        cum_pruned += lost
        if i >= k:
            seen.update(chain.entries)
            _axpy(acc, w[i], chain.entries)
            pruned += w[i] * cum_pruned
    acc = {x: p for x, p in acc.items() if p > 0}
    if prune_result:
        pruned += prune(acc, delta_threshold)
    # states that are never stepped must be dominated as well; raises if not
    for x in seen:
        self_loop_bound(x, plan, spec)
    p_hat = SparseDistribution(acc)
    poisson = s0 * max(0.0, 1.0 - math.fsum(w))
    bounding = max(0.0, s0 - p_hat.mass() - poisson - pruned)
    return WindowResult(p_hat, bounding, poisson, pruned, len(seen))
