"""Window selection and the multi-window driver.

``choose_step`` picks the window length by bisection on the Poisson
right-truncation point, with the dominating state supplied by one of two
strategies:

* ``monotone``: the support maximum pushed ``R*`` worst-case jumps upward
  (clamped to structural population caps); safe whenever rates are monotone.
* ``moments``: an envelope ``E_k + ell * sigma_k`` from second-order moment
  equations integrated across the window; cheaper rates, but a window is
  recomputed with a larger ``ell`` if the envelope turns out not to dominate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .engine import (
    DominationError,
    EmptyDistributionError,
    ErrorLedger,
    SparseDistribution,
    StepRecord,
    UniformizationRate,
    advance_window,
)
from .model import NO_MAX, ModelSpec, StateVec, exit_rate
from .poisson import PoissonTruncation, right_truncation, step_parameter, truncate

METHODS = ("monotone", "moments")
# windows per compiled call between time-limit / progress checks
PAUSE_EVERY = 2000
DEFAULT_ELL = 4.0
MOMENT_STEPS = 200


@dataclass(frozen=True)
class StepPlan:
    t_start: float
    delta: float
    x_max: StateVec
    lam: UniformizationRate
    mu: float
    truncation: PoissonTruncation
    R_star: int

    @property
    def t_end(self) -> float:
        return self.t_start + self.delta


@dataclass(frozen=True)
class MomentState:
    means: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    @classmethod
    def of(cls, p: SparseDistribution, t: float = 0.0) -> "MomentState":
        states, probs = p.to_arrays()
        probs = probs / probs.sum()
        means = probs @ states
        centered = states - means
        cov = (centered * probs[:, None]).T @ centered
        return cls(means, cov, t)


def _method_code(method: str) -> int:
    try:
        return METHODS.index(method)
    except ValueError:
        raise ValueError(f"unknown FindMaxState method {method!r}; use one of {METHODS}") from None


def max_increments(spec: ModelSpec) -> np.ndarray:
    """Per-species largest increase of one jump, floored at 0."""
    if spec.m == 0:
        return np.zeros(spec.n, dtype=np.int64)
    return np.maximum(spec.arrays.change.max(axis=0), 0)


def find_max_state_monotone(support: SparseDistribution, R_star: int, spec: ModelSpec) -> StateVec:
    """Componentwise upper bound of every state within ``R_star`` jumps of ``support``."""
    x = support.max_per_dim() + R_star * max_increments(spec)
    x = np.minimum(x, spec.arrays.caps)
    return tuple(int(v) for v in x)


def moment_derivatives(state: MomentState, t: float, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives of means and covariances under Gaussian closure.

    Exact for state factors of degree <= 1; for quadratic factors third
    central moments are set to zero.
    """
    if spec.max_degree > 2:
        raise ValueError("moment equations need state factors of degree <= 2")
    E, C = np.asarray(state.means, float), np.asarray(state.cov, float)
    n = spec.n
    dE = np.zeros(n)
    dC = np.zeros((n, n))
    for c in spec.classes:
        lam = c.time_factor(t) * c.state_factor.constant
        e = np.asarray(c.state_factor.exponents)
        # monomial value, gradient and (constant) Hessian at the mean
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        f = float(np.prod(E**e))
        for a in np.flatnonzero(e):
            rest = e.copy()
            rest[a] -= 1
            grad[a] = e[a] * np.prod(E**rest)
            for b in np.flatnonzero(rest):
                rest2 = rest.copy()
                rest2[b] -= 1
                hess[a, b] = e[a] * rest[b] * np.prod(E**rest2)
        mean = lam * (f + 0.5 * np.sum(hess * C))
        cov_with = lam * (C @ grad)
        w = np.asarray(c.change, float)
        dE += w * mean
        dC += np.outer(w, cov_with) + np.outer(cov_with, w) + mean * np.outer(w, w)
    return dE, dC


def _kernel_model(spec: ModelSpec):
    a = spec.arrays
    ia, ib = K.degree_indices(a) if spec.max_degree <= 2 else (None, None)
    return a, ia, ib


def find_max_state_moments(
    p_hat: SparseDistribution,
    t: float,
    delta: float,
    ell: float,
    spec: ModelSpec,
    steps: int = MOMENT_STEPS,
) -> StateVec:
    """Round ``max_{s in window} E_k(s) + ell*sigma_k(s)`` up to a state."""
    if not ell > 0:
        raise ValueError("ell must be positive")
    a, ia, ib = _kernel_model(spec)
    if ia is None:
        raise ValueError("moment equations need state factors of degree <= 2")
    m0 = MomentState.of(p_hat, t)
    env, E, C = K.moment_envelope(
        m0.means.astype(float), m0.cov.astype(float), float(t), float(delta), float(ell), int(steps),
        a.change, a.const, a.ta, a.tb, ia, ib,
    )
    if not K.envelope_ok(env):
        raise FloatingPointError("moment integration diverged")
    return tuple(int(v) for v in K.envelope_state(env, a.caps))


def _plan_for(x_max, t, delta, epsilon, R_star, spec) -> StepPlan:
    lam = UniformizationRate.from_state(x_max, spec)
    mu = step_parameter(lam, t, delta)
    return StepPlan(t, delta, tuple(x_max), lam, mu, truncate(mu, epsilon), R_star)


def choose_step(
    R_star: int,
    t: float,
    t_max: float,
    epsilon: float,
    support: SparseDistribution,
    spec: ModelSpec,
    method: str = "monotone",
    ell: float = DEFAULT_ELL,
    steps: int = MOMENT_STEPS,
) -> StepPlan:
    """Longest window (within 64 bisection steps) whose truncation point is at most ``R_star``."""
    _method_code(method)
    if not t < t_max:
        raise ValueError(f"no time left: t={t}, t_max={t_max}")
    if len(support) == 0:
        raise EmptyDistributionError("empty support")

    def probe(delta):
        """``(x_max, R)``; a diverged moment envelope counts as a window that is too long."""
        if method == "monotone":
            x = find_max_state_monotone(support, R_star, spec)
        else:
            try:
                x = find_max_state_moments(support, t, delta, ell, spec, steps)
            except FloatingPointError:
                return None, R_star + 1
        lam = UniformizationRate.from_state(x, spec)
        return x, right_truncation(step_parameter(lam, t, delta), epsilon)

    d_plus = t_max - t
    x, R = probe(d_plus)
    if R <= R_star:
        return _plan_for(x, t, d_plus, epsilon, R_star, spec)
    lo, hi = 0.0, d_plus
    best = None
    for _ in range(K.MAX_BISECT):
        d = 0.5 * (lo + hi)
        if method == "moments" or x is None:
            x, R = probe(d)
        else:
            lam = UniformizationRate.from_state(x, spec)
            R = right_truncation(step_parameter(lam, t, d), epsilon)
        if R <= R_star and (best is None or d > best[1]):
            best = (x, d)
        if R == R_star:
            break
        if R > R_star:
            hi = d
        else:
            lo = d
    # mu -> 0 as delta -> 0, so some probe must succeed
    assert best is not None, "no positive window satisfies the truncation bound"
    return _plan_for(best[0], t, best[1], epsilon, R_star, spec)


def dominates(plan: StepPlan, x: Sequence[int], spec: ModelSpec) -> bool:
    """Whether ``plan.lam`` bounds the exit rate of ``x`` on the whole window."""
    for s in (plan.t_start, plan.t_end):
        if exit_rate(x, s, spec) > plan.lam(s) * (1 + 1e-12):
            return False
    return True


def retry_on_exceed(
    plan: StepPlan, observed_state: Sequence[int], ell: float, spec: ModelSpec, cap: float = K.ELL_CAP
) -> tuple[float, bool]:
    """Return ``(ell, fallback)`` after observing ``observed_state`` in a moments window.

    A dominated state leaves ``ell`` unchanged.  Otherwise ``ell`` grows by 2 and
    the window has to be recomputed; past ``cap`` the window falls back to the
    monotone strategy (``fallback`` is True).
    """
    if dominates(plan, observed_state, spec):
        return ell, False
    ell = ell + 2.0
    return ell, ell > cap


# ---------------------------------------------------------------------------
# driver


class RunTimeout(RuntimeError):
    """The wall-clock limit of :func:`run` was reached; ``partial`` holds the progress."""

    def __init__(self, t: float, elapsed: float, partial: "RunResult"):
        super().__init__(f"time limit reached at t={t:.6g} after {elapsed:.1f} s")
        self.t = t
        self.elapsed = elapsed
        self.partial = partial


@dataclass
class RunResult:
    distributions: list[tuple[float, SparseDistribution]]
    ledger: ErrorLedger
    retries: int = 0
    fallbacks: int = 0
    probes: int = 0
    rho_recomputes: int = 0
    registry_size: int = 0
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.distributions, self.ledger))

    @property
    def final(self) -> SparseDistribution:
        return self.distributions[-1][1]

    def at(self, t: float) -> SparseDistribution:
        for s, p in self.distributions:
            if s == t:
                return p
        raise KeyError(t)


def _targets(spec: ModelSpec, checkpoints: Iterable[float] | None) -> tuple[list[float], set[float]]:
    wanted = {float(spec.horizon)} if checkpoints is None else {float(c) for c in checkpoints}
    for c in wanted:
        if not 0 <= c <= spec.horizon:
            raise ValueError(f"checkpoint {c} outside [0, {spec.horizon}]")
    targets = sorted(wanted | {float(spec.horizon)})
    return targets, wanted


def _validate(R_star, epsilon, delta_threshold, method, ell, exact_terms):
    if R_star < 0:
        raise ValueError("R_star must be non-negative")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if not 0 <= delta_threshold < 1:
        raise ValueError("delta_threshold must be in [0, 1)")
    if not ell > 0:
        raise ValueError("ell must be positive")
    if exact_terms not in (1, 2, 3):
        raise ValueError("exact_terms must be 1, 2 or 3")
    return _method_code(method)


def run(
    spec: ModelSpec,
    R_star: int,
    epsilon: float = 1e-10,
    delta_threshold: float = 1e-15,
    method: str = "monotone",
    ell: float = DEFAULT_ELL,
    checkpoints: Iterable[float] | None = None,
    rho_budget: float | None = None,
    exact_terms: int = 3,
    prune_result: bool = True,
    moment_steps: int = MOMENT_STEPS,
    backend: str = "compiled",
    time_limit: float | None = None,
    progress=None,
) -> RunResult:
    """Lower-bound the transient distribution at each checkpoint (default: the horizon).

    Windows never straddle a checkpoint.  ``rho_budget`` enables recomputing a
    window with a tenfold smaller threshold when pruning lost more than
    ``rho * delta / horizon``.

    With the compiled backend, ``time_limit`` (seconds) aborts the run with
    :class:`RunTimeout` and ``progress(t, windows, support_size)`` is called
    every few thousand windows.
    """
    code = _validate(R_star, epsilon, delta_threshold, method, ell, exact_terms)
    if code == 1 and spec.max_degree > 2:
        raise ValueError("the moments method needs state factors of degree <= 2")
    targets, wanted = _targets(spec, checkpoints)
    if backend == "reference":
        return _run_reference(spec, R_star, epsilon, delta_threshold, method, ell, targets, wanted,
                              rho_budget, exact_terms, prune_result, moment_steps)
    if backend != "compiled":
        raise ValueError(f"unknown backend {backend!r}")

    a, ia, ib = _kernel_model(spec)
    if ia is None:
        ia = ib = np.full(spec.m, -1, dtype=np.int64)
    reg = K.Registry(a)
    init = SparseDistribution.from_initial(spec)
    states, probs = init.to_arrays(spec.n)
    v_idx, v_val = reg.intern(states), probs
    wmax = max_increments(spec).astype(np.int64)
    rec = np.zeros((1024, K.REC_COLS))
    rec_meta = np.zeros(1, dtype=np.int64)
    stats = np.zeros(4, dtype=np.int64)
    rho = float(rho_budget) if rho_budget else 0.0
    horizon = float(spec.horizon)

    out: list[tuple[float, SparseDistribution]] = []
    started = time.perf_counter()

    def result():
        return RunResult(out, ErrorLedger.from_table(rec[: rec_meta[0]]), int(stats[0]), int(stats[1]),
                         int(stats[2]), int(stats[3]), reg.count)

    pause = PAUSE_EVERY if (time_limit or progress) else 0
    t = 0.0
    for target in targets:
        while t < target:
            status, t, v_idx, v_val, bad = K.run_windows(
                t, target, horizon, v_idx, v_val, code, float(ell), int(R_star), float(epsilon),
                float(delta_threshold), int(exact_terms), bool(prune_result), rho, int(moment_steps),
                wmax, a.caps, a.ta, a.tb, ia, ib, reg.reg, reg.scratch, rec, rec_meta, stats, pause,
            )
            if status == K.OK:
                break
            if status == K.PAUSED:
                if progress:
                    progress(t, int(rec_meta[0]), len(v_idx))
                elapsed = time.perf_counter() - started
                if time_limit and elapsed > time_limit:
                    out.append((t, SparseDistribution.from_arrays(reg.states[v_idx], v_val)))
                    raise RunTimeout(t, elapsed, result())
                continue
            if status == K.FULL:
                reg.grow()
            elif status == K.RECORDS_FULL:
                bigger = np.zeros((2 * rec.shape[0], K.REC_COLS))
                bigger[: rec.shape[0]] = rec
                rec = bigger
            elif status == K.VIOLATION:
                raise DominationError(tuple(int(v) for v in reg.states[bad]), t, float("nan"))
            elif status == K.EMPTY:
                raise EmptyDistributionError(f"all probability mass lost by t={t}")
            elif status == K.OVERFLOW:
                raise OverflowError(f"population exceeds the registry limit {reg.limit}")
            else:
                raise RuntimeError(f"window selection failed at t={t}")
        if target in wanted:
            out.append((target, SparseDistribution.from_arrays(reg.states[v_idx], v_val)))
    if 0.0 in wanted and (not out or out[0][0] != 0.0):
        out.insert(0, (0.0, init))
    res = result()
    res.extra["elapsed"] = time.perf_counter() - started
    return res


def _run_reference(spec, R_star, epsilon, delta_threshold, method, ell0, targets, wanted, rho_budget,
                   exact_terms, prune_result, moment_steps) -> RunResult:
    p = SparseDistribution.from_initial(spec)
    ledger = ErrorLedger()
    out = []
    retries = fallbacks = recomputes = 0
    t = 0.0
    if 0.0 in wanted:
        out.append((0.0, p.copy()))
    for target in targets:
        while t < target:
            ell, use = ell0, method
            while True:
                plan = choose_step(R_star, t, target, epsilon, p, spec, use, ell, moment_steps)
                try:
                    res = advance_window(p, plan, spec, delta_threshold, exact_terms, prune_result)
                    if rho_budget and res.prune_loss > rho_budget * plan.delta / spec.horizon:
                        res = advance_window(p, plan, spec, delta_threshold / 10, exact_terms, prune_result)
                        recomputes += 1
                except DominationError as exc:
                    if use != "moments":
                        raise
                    retries += 1
                    ell, fallback = retry_on_exceed(plan, exc.state, ell, spec)
                    if fallback:
                        use = "monotone"
                        fallbacks += 1
                    continue
                break
            ledger.add(StepRecord(t, plan.delta, plan.mu, plan.truncation.R, res.bounding_loss,
                                  res.poisson_loss, res.prune_loss, res.window_size))
            t = target if plan.delta == target - t else t + plan.delta
            p = res.p_hat
            if len(p) == 0:
                raise EmptyDistributionError(f"all probability mass lost by t={t}")
        if target in wanted and target != 0.0:
            out.append((target, p.copy()))
    return RunResult(out, ledger, retries, fallbacks, 0, recomputes)
