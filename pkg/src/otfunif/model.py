"""Markov population models described by transition classes.

A model is a set of transition classes ``(guard, change, rate)`` acting on
vectors of non-negative integer populations.  Rates are restricted to the
separable form ``lambda_j(t) * r_j(x)`` with an affine time factor and a
monomial state factor, which covers mass-action kinetics with a time varying
compartment volume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

# sentinel for "no upper bound" in the integer guard arrays
NO_MAX = 2**62

StateVec = tuple[int, ...]


class ModelError(ValueError):
    """Raised for malformed or inconsistent model descriptions."""


@dataclass(frozen=True)
class TimeFactor:
    """Time dependent part of a rate, ``lambda(t) = a + b*t``."""

    a: float = 1.0
    b: float = 0.0
    valid_until: float = math.inf
    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in ("constant", "affine"):
            raise ModelError(f"unknown time factor kind {self.kind!r}")
        if self.kind == "constant" and self.b != 0.0:
            raise ModelError("constant time factor must have b == 0")
        if not self.a > 0:
            raise ModelError(f"time factor must be positive at t=0, got a={self.a}")
        if math.isfinite(self.valid_until):
            if not self.a + self.b * self.valid_until > 0:
                raise ModelError(
                    f"time factor {self.a} + {self.b}*t is not positive on [0, {self.valid_until}]"
                )
        elif self.b < 0:
            raise ModelError("a decreasing time factor needs a finite valid_until")

    def __call__(self, t: float) -> float:
        if t > self.valid_until:
            raise ModelError(f"time {t} beyond validity horizon {self.valid_until}")
        return self.a + self.b * t

    @property
    def increasing(self) -> bool:
        return self.b > 0


@dataclass(frozen=True)
class StateFactor:
    """State dependent part of a rate, ``constant * prod_k x_k**exponents[k]``."""

    constant: float
    exponents: tuple[int, ...]

    def __post_init__(self):
        if not self.constant > 0:
            raise ModelError(f"state factor constant must be positive, got {self.constant}")
        if any(e < 0 for e in self.exponents):
            raise ModelError("state factor exponents must be non-negative")

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def __call__(self, x: Sequence[int]) -> float:
        value = self.constant
        for xk, e in zip(x, self.exponents):
            if e:
                value *= xk**e
        return float(value)


@dataclass(frozen=True)
class TransitionClass:
    name: str
    guard_min: tuple[int, ...]
    guard_max: tuple[int | None, ...]
    change: tuple[int, ...]
    time_factor: TimeFactor
    state_factor: StateFactor

    def __post_init__(self):
        n = len(self.change)
        if not (len(self.guard_min) == len(self.guard_max) == len(self.state_factor.exponents) == n):
            raise ModelError(f"class {self.name!r}: inconsistent dimensions")
        if not any(self.change):
            raise ModelError(f"class {self.name!r}: change vector is all zero")
        for k, (lo, w) in enumerate(zip(self.guard_min, self.change)):
            # Closure: every guarded state must map to a non-negative state.
            if lo + w < 0:
                raise ModelError(
                    f"class {self.name!r}: guard allows x[{k}]={lo} but change {w} "
                    "would make it negative"
                )
            hi = self.guard_max[k]
            if hi is not None and hi < lo:
                raise ModelError(f"class {self.name!r}: empty guard in dimension {k}")

    def enabled(self, x: Sequence[int]) -> bool:
        for xk, lo, hi in zip(x, self.guard_min, self.guard_max):
            if xk < lo or (hi is not None and xk > hi):
                return False
        return True

    def rate(self, x: Sequence[int], t: float) -> float:
        if not self.enabled(x):
            return 0.0
        return self.time_factor(t) * self.state_factor(x)


@dataclass(frozen=True)
class ModelArrays:
    """Dense array view of a model, used by the compiled kernels."""

    gmin: np.ndarray  # (m, n) int64
    gmax: np.ndarray  # (m, n) int64, NO_MAX where unbounded
    change: np.ndarray  # (m, n) int64
    const: np.ndarray  # (m,)
    expo: np.ndarray  # (m, n) int64
    ta: np.ndarray  # (m,)
    tb: np.ndarray  # (m,)
    caps: np.ndarray  # (n,) int64, NO_MAX where the population is unbounded


@dataclass(frozen=True)
class ModelSpec:
    species: tuple[str, ...]
    classes: tuple[TransitionClass, ...]
    initial: tuple[tuple[StateVec, float], ...]
    horizon: float
    name: str = "model"

    def __post_init__(self):
        n = len(self.species)
        if len(set(self.species)) != n:
            raise ModelError("duplicate species names")
        for c in self.classes:
            if len(c.change) != n:
                raise ModelError(f"class {c.name!r} has {len(c.change)} dimensions, expected {n}")
            if c.time_factor.valid_until < self.horizon:
                raise ModelError(
                    f"class {c.name!r} time factor only valid until {c.time_factor.valid_until}"
                    f" < horizon {self.horizon}"
                )
        if not self.initial:
            raise ModelError("empty initial distribution")
        total = 0.0
        for x, p in self.initial:
            if len(x) != n or any(v < 0 for v in x):
                raise ModelError(f"invalid initial state {x}")
            if not p > 0:
                raise ModelError(f"initial probability of {x} must be positive")
            total += p
        if abs(total - 1.0) > 1e-12:
            raise ModelError(f"initial probabilities sum to {total!r}, not 1")
        if self.horizon < 0:
            raise ModelError("negative horizon")

    @property
    def n(self) -> int:
        return len(self.species)

    @property
    def m(self) -> int:
        return len(self.classes)

    def with_horizon(self, horizon: float) -> "ModelSpec":
        return ModelSpec(self.species, self.classes, self.initial, horizon, self.name)

    @cached_property
    def arrays(self) -> ModelArrays:
        m, n = self.m, self.n
        gmin = np.zeros((m, n), dtype=np.int64)
        gmax = np.full((m, n), NO_MAX, dtype=np.int64)
        change = np.zeros((m, n), dtype=np.int64)
        expo = np.zeros((m, n), dtype=np.int64)
        const = np.zeros(m)
        ta = np.zeros(m)
        tb = np.zeros(m)
        for j, c in enumerate(self.classes):
            gmin[j] = c.guard_min
            gmax[j] = [NO_MAX if hi is None else hi for hi in c.guard_max]
            change[j] = c.change
            expo[j] = c.state_factor.exponents
            const[j] = c.state_factor.constant
            ta[j] = c.time_factor.a
            tb[j] = c.time_factor.b
        return ModelArrays(gmin, gmax, change, const, expo, ta, tb, population_caps(self))

    @property
    def max_degree(self) -> int:
        return max((c.state_factor.degree for c in self.classes), default=0)

    @property
    def homogeneous(self) -> bool:
        return all(c.time_factor.b == 0 for c in self.classes)


def population_caps(spec: ModelSpec) -> np.ndarray:
    """Upper bounds on each population over all states reachable from the initial support.

    Two sources are combined: guard maxima (a dimension only increased by
    classes whose guard bounds it from above) and non-negative linear
    conservation laws of the change vectors.
    """
    n, m = spec.n, spec.m
    caps = np.full(n, NO_MAX, dtype=np.int64)
    init_max = np.max(np.array([x for x, _ in spec.initial], dtype=np.int64), axis=0)
    for k in range(n):
        raising = [c for c in spec.classes if c.change[k] > 0]
        if all(c.guard_max[k] is not None for c in raising):
            bound = max([c.guard_max[k] + c.change[k] for c in raising], default=0)
            caps[k] = min(caps[k], max(bound, int(init_max[k])))
    if m == 0:
        return np.minimum(caps, init_max) if n else caps

    from scipy.linalg import null_space
    from scipy.optimize import linprog

    W = np.array([c.change for c in spec.classes], dtype=float)
    basis = null_space(W)  # columns c with W @ c == 0
    if basis.shape[1] == 0:
        return caps
    for k in range(n):
        best = -math.inf
        for x0, _ in spec.initial:
            rhs = basis.T @ np.asarray(x0, dtype=float)
            obj = np.zeros(n)
            obj[k] = -1.0
            res = linprog(obj, A_eq=basis.T, b_eq=rhs, bounds=[(0, None)] * n, method="highs")
            if res.status != 0:
                best = math.inf
                break
            best = max(best, -res.fun)
        if math.isfinite(best):
            caps[k] = min(caps[k], int(math.floor(best + 1e-9)))
    return caps


def enabled_classes(x: Sequence[int], spec: ModelSpec) -> list[int]:
    """Indices of the classes whose guard contains ``x``."""
    return [j for j, c in enumerate(spec.classes) if c.enabled(x)]


def rate(j: int, x: Sequence[int], t: float, spec: ModelSpec) -> float:
    return spec.classes[j].rate(x, t)


def exit_rate(x: Sequence[int], t: float, spec: ModelSpec) -> float:
    return sum(c.rate(x, t) for c in spec.classes if c.enabled(x))


# ---------------------------------------------------------------------------
# model files


def _parse_class(doc: Mapping[str, Any], species: Sequence[str]) -> TransitionClass:
    n = len(species)
    index = {s: k for k, s in enumerate(species)}
    try:
        name = str(doc["name"])
        change = tuple(int(v) for v in doc["change"])
        rate_doc = doc["rate"]
        time_doc = rate_doc.get("time", {"kind": "constant", "a": 1.0, "b": 0.0})
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed class entry {doc!r}: {exc}") from None
    if len(change) != n:
        raise ModelError(f"class {name!r}: change vector has length {len(change)}, expected {n}")
    gmin = [0] * n
    gmax: list[int | None] = [None] * n
    for g in doc.get("guard", []):
        try:
            k = index[g["var"]]
        except KeyError:
            raise ModelError(f"class {name!r}: guard refers to unknown species {g.get('var')!r}") from None
        gmin[k] = max(gmin[k], int(g.get("min", 0)))
        if g.get("max") is not None:
            gmax[k] = int(g["max"])
    exponents = rate_doc.get("exponents", [0] * n)
    if len(exponents) != n:
        raise ModelError(f"class {name!r}: exponents have length {len(exponents)}, expected {n}")
    kind = time_doc.get("kind", "constant")
    tf = TimeFactor(
        a=float(time_doc.get("a", 1.0)),
        b=float(time_doc.get("b", 0.0)),
        valid_until=float(time_doc.get("valid_until", math.inf)),
        kind=kind,
    )
    sf = StateFactor(float(rate_doc["constant"]), tuple(int(e) for e in exponents))
    return TransitionClass(name, tuple(gmin), tuple(gmax), change, tf, sf)


def parse_model(document: str | Mapping[str, Any]) -> ModelSpec:
    """Build a validated :class:`ModelSpec` from a JSON model document."""
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ModelError(f"model file is not valid JSON: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise ModelError("model document must be a JSON object")
    for key in ("species", "horizon", "initial", "classes"):
        if key not in doc:
            raise ModelError(f"model document is missing key {key!r}")
    species = tuple(str(s) for s in doc["species"])
    classes = tuple(_parse_class(c, species) for c in doc["classes"])
    initial = []
    for entry in doc["initial"]:
        try:
            initial.append((tuple(int(v) for v in entry["state"]), float(entry["prob"])))
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed initial entry {entry!r}: {exc}") from None
    return ModelSpec(species, classes, tuple(initial), float(doc["horizon"]), str(doc.get("name", "model")))


def load_model(path: str | Path) -> ModelSpec:
    return parse_model(Path(path).read_text())


def model_to_dict(spec: ModelSpec) -> dict[str, Any]:
    classes = []
    for c in spec.classes:
        guard = []
        for k, s in enumerate(spec.species):
            lo, hi = c.guard_min[k], c.guard_max[k]
            if lo or hi is not None:
                g: dict[str, Any] = {"var": s, "min": lo}
                if hi is not None:
                    g["max"] = hi
                guard.append(g)
        tf = c.time_factor
        time_doc: dict[str, Any] = {"kind": tf.kind, "a": tf.a, "b": tf.b}
        if math.isfinite(tf.valid_until):
            time_doc["valid_until"] = tf.valid_until
        classes.append(
            {
                "name": c.name,
                "guard": guard,
                "change": list(c.change),
                "rate": {
                    "constant": c.state_factor.constant,
                    "exponents": list(c.state_factor.exponents),
                    "time": time_doc,
                },
            }
        )
    return {
        "name": spec.name,
        "species": list(spec.species),
        "horizon": spec.horizon,
        "initial": [{"state": list(x), "prob": p} for x, p in spec.initial],
        "classes": classes,
    }


# ---------------------------------------------------------------------------
# built-in case studies


def _unit(n: int, k: int, v: int = 1) -> list[int]:
    e = [0] * n
    e[k] = v
    return e


def _klass(name, n, change, const, exponents=None, guard=None, time=None) -> TransitionClass:
    gmin = [0] * n
    for k, lo in (guard or {}).items():
        gmin[k] = lo
    return TransitionClass(
        name,
        tuple(gmin),
        (None,) * n,
        tuple(change),
        time or TimeFactor(),
        StateFactor(const, tuple(exponents or [0] * n)),
    )


def gene_expression(
    k1: float = 0.05,
    k2: float = 0.05,
    k3: float = 0.005,
    k4: float = 0.0005,
    horizon: float = 3600.0,
    cell_cycle: float = 3600.0,
) -> ModelSpec:
    """Transcription/translation model with a linearly growing cell volume."""
    n = 2
    volume = TimeFactor(1.0, 1.0 / cell_cycle, cell_cycle, "affine")
    classes = (
        _klass("transcription", n, [1, 0], k1, time=volume),
        _klass("translation", n, [0, 1], k2, [1, 0], {0: 1}),
        _klass("mrna_degradation", n, [-1, 0], k3, [1, 0], {0: 1}),
        _klass("protein_degradation", n, [0, -1], k4, [0, 1], {1: 1}),
    )
    return ModelSpec(("mRNA", "protein"), classes, (((0, 0), 1.0),), horizon, "gene_expression")


def exclusive_switch(horizon: float = 3600.0) -> ModelSpec:
    """Two genes sharing one promoter; each bound product represses the other."""
    n = 5
    free = 2  # index of the unbound promoter
    binding = TimeFactor(0.1, -0.05 / 3600.0, 3600.0, "affine")
    classes = []
    for j in range(2):
        classes.append(_klass(f"produce_P{j + 1}", n, _unit(n, j), 0.5, _unit(n, free), {free: 1}))
    for j in range(2):
        classes.append(_klass(f"degrade_P{j + 1}", n, _unit(n, j, -1), 0.005, _unit(n, j), {j: 1}))
    for j in range(2):
        w = _unit(n, j, -1)
        w[free] = -1
        w[j + 3] = 1
        expo = _unit(n, j)
        expo[free] = 1
        classes.append(_klass(f"bind_P{j + 1}", n, w, 1.0, expo, {free: 1, j: 1}, binding))
    for j in range(2):
        w = _unit(n, j)
        w[free] = 1
        w[j + 3] = -1
        classes.append(_klass(f"unbind_P{j + 1}", n, w, 0.005, _unit(n, j + 3), {j + 3: 1}))
    for j in range(2):
        classes.append(_klass(f"bound_produce_P{j + 1}", n, _unit(n, j), 0.5, _unit(n, j + 3), {j + 3: 1}))
    return ModelSpec(
        ("P1", "P2", "DNA", "DNA_P1", "DNA_P2"),
        tuple(classes),
        (((0, 0, 1, 0, 0), 1.0),),
        horizon,
        "exclusive_switch",
    )


BUILTINS = {"gene_expression": gene_expression, "exclusive_switch": exclusive_switch}


def builtin_model(name: str, **params) -> ModelSpec:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ModelError(f"unknown built-in model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**params)


def reachable_states(spec: ModelSpec, depth: int) -> set[StateVec]:
    """All states reachable from the initial support within ``depth`` transitions."""
    frontier = {x for x, _ in spec.initial}
    seen = set(frontier)
    for _ in range(depth):
        nxt = set()
        for x in frontier:
            for j in enabled_classes(x, spec):
                y = tuple(a + b for a, b in zip(x, spec.classes[j].change))
                if y not in seen:
                    nxt.add(y)
        seen |= nxt
        frontier = nxt
    return seen

