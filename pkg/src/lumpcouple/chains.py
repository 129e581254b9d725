"""Data model for discrete-time Markov chains and foundational operations.

States are opaque strings.  A chain is an initial distribution plus a
transition kernel; kernels are either finite (sparse row maps over an
ordered state space) or generator-backed (a deterministic row function
over a countable, locally finite state space).  All operations are pure.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable

from . import numeric
from .errors import NotIrreducible, NotStationary, TrajectoryBudgetExceeded

DEFAULT_TRAJECTORY_CAP = 10**6

# Reserved by the product-state and time-extension serializers.
RESERVED_CHARS = ("|", "@")


class StateSpace:
    """Ordered set of state identifiers; the order fixes all row/column orders."""

    def __init__(self, states: Iterable[str]):
        self.states: tuple[str, ...] = tuple(states)
        self.index: dict[str, int] = {s: i for i, s in enumerate(self.states)}
        if len(self.index) != len(self.states):
            raise ValueError("state identifiers must be unique")

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __contains__(self, s: str) -> bool:
        return s in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, StateSpace) and self.states == other.states

    def __repr__(self) -> str:
        return f"StateSpace({list(self.states)!r})"


class Distribution:
    """Sparse probability vector over states.

    Entries are scalars in the current numeric mode; exact zeros are
    dropped from the support.
    """

    def __init__(self, probs: dict[str, numeric.Scalar]):
        self.probs = {s: v for s, v in probs.items() if v != 0}

    def __getitem__(self, state: str) -> numeric.Scalar:
        return self.probs.get(state, numeric.zero())

    def support(self) -> list[str]:
        return list(self.probs)

    def total(self) -> numeric.Scalar:
        return sum(self.probs.values(), numeric.zero())

    def items(self):
        return self.probs.items()

    def restrict(self, states: Iterable[str]) -> "Distribution":
        keep = set(states)
        return Distribution({s: v for s, v in self.probs.items() if s in keep})

    def normalize(self) -> "Distribution":
        tot = self.total()
        if tot == 0:
            raise ValueError("cannot normalize a zero measure")
        return Distribution({s: v / tot for s, v in self.probs.items()})

    def __eq__(self, other) -> bool:
        return isinstance(other, Distribution) and self.probs == other.probs

    def __repr__(self) -> str:
        return f"Distribution({self.probs!r})"


class TransitionKernel:
    """Row-stochastic kernel, finite or generator-backed.

    Finite form: ``rows[s]`` is a sparse map of successors.  Generator
    form: ``generator(s)`` returns a finite list of ``(successor, p)``
    pairs; results are cached, which also enforces the determinism
    contract (each state's row is computed once).
    """

    def __init__(
        self,
        space: StateSpace | None = None,
        rows: dict[str, dict[str, numeric.Scalar]] | None = None,
        generator: Callable[[str], list[tuple[str, numeric.Scalar]]] | None = None,
    ):
        if (rows is None) == (generator is None):
            raise ValueError("provide exactly one of rows or generator")
        self.space = space
        self._rows = rows
        self._generator = generator
        self._cache: dict[str, dict[str, numeric.Scalar]] = {}

    @property
    def is_finite(self) -> bool:
        return self._rows is not None

    def row(self, state: str) -> dict[str, numeric.Scalar]:
        if self._rows is not None:
            return self._rows.get(state, {})
        cached = self._cache.get(state)
        if cached is None:
            cached = {s: v for s, v in self._generator(state) if v != 0}
            self._cache[state] = cached
        return cached

    def entry(self, src: str, dst: str) -> numeric.Scalar:
        return self.row(src).get(dst, numeric.zero())

    def rows_items(self):
        if self._rows is None:
            raise ValueError("generator-backed kernel has no materialized rows")
        return self._rows.items()

    def restrict(self, states: Iterable[str]) -> "TransitionKernel":
        keep = list(states)
        keepset = set(keep)
        rows = {
            s: {t: v for t, v in self.row(s).items() if t in keepset}
            for s in keep
        }
        return TransitionKernel(space=StateSpace(keep), rows=rows)


def dense_kernel(states: Iterable[str], matrix) -> TransitionKernel:
    """Build a finite kernel from a dense matrix in state order."""
    space = StateSpace(states)
    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for i, s in enumerate(space.states):
        row = {}
        for j, t in enumerate(space.states):
            v = numeric.scalar(matrix[i][j]) if not isinstance(matrix[i][j], (Fraction, float)) else matrix[i][j]
            if v != 0:
                row[t] = v
        rows[s] = row
    return TransitionKernel(space=space, rows=rows)


@dataclass
class ChainSpec:
    """A Markov chain: state space (finite) or generator roots, initial law, kernel."""

    initial: Distribution
    kernel: TransitionKernel
    space: StateSpace | None = None

    def __post_init__(self):
        if self.space is None:
            self.space = self.kernel.space
        if self.space is not None:
            bad = [s for s in self.initial.support() if s not in self.space]
            if bad:
                raise ValueError(f"initial distribution supported outside the state space: {bad}")

    @property
    def is_finite(self) -> bool:
        return self.kernel.is_finite

    def roots(self) -> list[str]:
        return self.initial.support()


@dataclass
class FddTable:
    """Exact finite-dimensional distribution: trajectory tuple -> probability."""

    horizon: int
    entries: dict[tuple[str, ...], numeric.Scalar]

    def total(self) -> numeric.Scalar:
        return sum(self.entries.values(), numeric.zero())

    def marginalize_last(self) -> "FddTable":
        if self.horizon == 0:
            raise ValueError("cannot marginalize a horizon-0 table")
        out: dict[tuple[str, ...], numeric.Scalar] = {}
        for traj, p in self.entries.items():
            key = traj[:-1]
            out[key] = out.get(key, numeric.zero()) + p
        return FddTable(self.horizon - 1, out)

    def pushforward(self, fn: Callable[[str], str]) -> "FddTable":
        out: dict[tuple[str, ...], numeric.Scalar] = {}
        for traj, p in self.entries.items():
            key = tuple(fn(s) for s in traj)
            out[key] = out.get(key, numeric.zero()) + p
        return FddTable(self.horizon, out)


@dataclass
class ValidationReport:
    passed: bool
    row_sum_defects: dict[str, numeric.Scalar] = field(default_factory=dict)
    negative_entries: list[tuple[str, str, numeric.Scalar]] = field(default_factory=list)
    initial_defect: numeric.Scalar | None = None
    initial_negative: list[str] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)


def validate_chain(chain: ChainSpec) -> ValidationReport:
    """Check the chain invariants; report-valued, never raises.

    Finite chains are checked row by row; generator-backed chains are
    checked on the rows reachable from the initial support (one layer),
    since realizing the full space is impossible.
    """
    report = ValidationReport(passed=True)
    tol = numeric.eps()

    tot = chain.initial.total()
    if abs(tot - 1) > tol:
        report.initial_defect = tot - 1
        report.passed = False
        report.messages.append(f"initial law sums to {tot}")
    for s, v in chain.initial.items():
        if v < 0:
            report.initial_negative.append(s)
            report.passed = False

    if chain.is_finite:
        states = list(chain.space.states)
    else:
        states = chain.roots()
    for s in states:
        row = chain.kernel.row(s)
        rs = sum(row.values(), numeric.zero())
        if abs(rs - 1) > tol:
            report.row_sum_defects[s] = rs - 1
            report.passed = False
            report.messages.append(f"row {s} sums to {rs}")
        for t, v in row.items():
            if v < 0:
                report.negative_entries.append((s, t, v))
                report.passed = False
        if chain.is_finite:
            unknown = [t for t in row if t not in chain.space]
            if unknown:
                report.passed = False
                report.messages.append(f"row {s} targets unknown states {unknown}")
    return report


def reachable_states(chain: ChainSpec, max_depth: int | None = None) -> list[str]:
    """States visited with positive probability, in BFS order from the initial support."""
    seen: dict[str, None] = {}
    frontier = [s for s in chain.initial.support()]
    for s in frontier:
        seen[s] = None
    depth = 0
    while frontier and (max_depth is None or depth < max_depth):
        nxt = []
        for s in frontier:
            for t, v in chain.kernel.row(s).items():
                if v > 0 and t not in seen:
                    seen[t] = None
                    nxt.append(t)
        frontier = nxt
        depth += 1
    return list(seen)


def prune_unreachable(chain: ChainSpec) -> ChainSpec:
    """Restrict a finite chain to the states reachable from its initial law.

    Rows of kept states are unchanged: successors of reachable states
    are themselves reachable, so no transition mass is lost.
    """
    if not chain.is_finite:
        raise ValueError("prune_unreachable requires a finite chain")
    if not chain.initial.support():
        raise ValueError("initial distribution is empty")
    keep = reachable_states(chain)
    order = [s for s in chain.space.states if s in set(keep)]
    return ChainSpec(
        initial=chain.initial,
        kernel=chain.kernel.restrict(order),
    )


def _strongly_connected_components(states: list[str], succ: dict[str, list[str]]) -> list[list[str]]:
    """Iterative Tarjan SCC."""
    index_of: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    comps: list[list[str]] = []
    counter = 0

    for root in states:
        if root in index_of:
            continue
        work = [(root, iter(succ.get(root, [])))]
        index_of[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index_of:
                    index_of[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(succ.get(nxt, []))))
                    advanced = True
                    break
                elif nxt in on_stack:
                    low[node] = min(low[node], index_of[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index_of[node]:
                comp = []
                while True:
                    s = stack.pop()
                    on_stack.discard(s)
                    comp.append(s)
                    if s == node:
                        break
                comps.append(comp)
    return comps


def recurrent_classes(kernel: TransitionKernel) -> list[list[str]]:
    """Closed communicating classes of a finite kernel."""
    states = list(kernel.space.states)
    succ = {s: [t for t, v in kernel.row(s).items() if v > 0] for s in states}
    comps = _strongly_connected_components(states, succ)
    comp_of = {}
    for i, comp in enumerate(comps):
        for s in comp:
            comp_of[s] = i
    closed = []
    for i, comp in enumerate(comps):
        if all(comp_of[t] == i for s in comp for t in succ[s]):
            closed.append(sorted(comp, key=kernel.space.index.__getitem__))
    return closed


def _solve_stationary_exact(kernel: TransitionKernel, states: list[str]) -> dict[str, Fraction]:
    """Solve pi P = pi, sum pi = 1 by Gaussian elimination over Fractions."""
    n = len(states)
    idx = {s: i for i, s in enumerate(states)}
    # Rows: balance equations (P^T - I) pi = 0 for the first n-1 states, then sum = 1.
    a = [[Fraction(0)] * (n + 1) for _ in range(n)]
    for s in states:
        for t, v in kernel.row(s).items():
            if t in idx:
                a[idx[t]][idx[s]] += Fraction(v)
    for i in range(n):
        a[i][i] -= 1
    a[n - 1] = [Fraction(1)] * n + [Fraction(1)]

    for col in range(n):
        pivot = next((r for r in range(col, n) if a[r][col] != 0), None)
        if pivot is None:
            raise NotIrreducible("stationary system is singular")
        a[col], a[pivot] = a[pivot], a[col]
        pv = a[col][col]
        a[col] = [x / pv for x in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                factor = a[r][col]
                a[r] = [x - factor * y for x, y in zip(a[r], a[col])]
    return {s: a[idx[s]][n] for s in states}


def _solve_stationary_float(kernel: TransitionKernel, states: list[str], tol: float) -> dict[str, float]:
    """Damped power iteration pi <- pi (P + I)/2; converges for any unichain."""
    n = len(states)
    pi = {s: 1.0 / n for s in states}
    for _ in range(200_000):
        nxt = {s: 0.5 * pi[s] for s in states}
        for s in states:
            ps = pi[s]
            if ps == 0.0:
                continue
            for t, v in kernel.row(s).items():
                if t in nxt:
                    nxt[t] += 0.5 * ps * v
        total = sum(nxt.values())
        nxt = {s: v / total for s, v in nxt.items()}
        # Residual of the undamped equation.
        res = {s: -nxt[s] for s in states}
        for s in states:
            for t, v in kernel.row(s).items():
                if t in res:
                    res[t] += nxt[s] * v
        if max(abs(x) for x in res.values()) < tol:
            return nxt
        pi = nxt
    raise NotIrreducible("power iteration failed to reach the requested residual")


def stationary_distribution(kernel: TransitionKernel) -> Distribution:
    """The unique pi with pi P = pi for a finite kernel with one recurrent class.

    Exact mode solves the linear system over rationals; float mode runs
    a damped power iteration to residual below the configured eps.
    """
    if not kernel.is_finite:
        raise ValueError("stationary_distribution requires a finite kernel")
    closed = recurrent_classes(kernel)
    if len(closed) != 1:
        raise NotIrreducible(f"kernel has {len(closed)} recurrent classes")
    rec = closed[0]
    sub = kernel.restrict(rec)
    if numeric.is_exact():
        pi = _solve_stationary_exact(sub, rec)
    else:
        pi = _solve_stationary_float(sub, rec, max(numeric.eps(), 1e-14))
    return Distribution(dict(pi))


def time_reversal(kernel: TransitionKernel, pi: Distribution) -> TransitionKernel:
    """P_rev(x, x') = pi(x') P(x', x) / pi(x); requires pi P = pi with full support."""
    if not kernel.is_finite:
        raise ValueError("time_reversal requires a finite kernel")
    states = list(kernel.space.states)
    tol = numeric.eps()
    for s in states:
        if pi[s] <= 0:
            raise NotStationary(f"pi must have full support, pi({s}) = {pi[s]}")
    flow = {s: -pi[s] for s in states}
    for s in states:
        for t, v in kernel.row(s).items():
            flow[t] += pi[s] * v
    worst = max(abs(v) for v in flow.values())
    if worst > tol:
        raise NotStationary(f"pi P != pi, max defect {worst}")
    rows: dict[str, dict[str, numeric.Scalar]] = {s: {} for s in states}
    for s in states:
        for t, v in kernel.row(s).items():
            rows[t][s] = pi[s] * v / pi[t]
    return TransitionKernel(space=kernel.space, rows=rows)


def fdd(chain: ChainSpec, horizon: int, cap: int = DEFAULT_TRAJECTORY_CAP) -> FddTable:
    """Exact law of the trajectory prefix (X_0, ..., X_horizon).

    Zero-probability trajectories are omitted.  Raises
    TrajectoryBudgetExceeded if the table would grow past ``cap``.
    """
    entries: dict[tuple[str, ...], numeric.Scalar] = {
        (s,): v for s, v in chain.initial.items() if v > 0
    }
    for _ in range(horizon):
        nxt: dict[tuple[str, ...], numeric.Scalar] = {}
        for traj, p in entries.items():
            for t, v in chain.kernel.row(traj[-1]).items():
                if v > 0:
                    nxt[traj + (t,)] = p * v
                    if len(nxt) > cap:
                        raise TrajectoryBudgetExceeded(len(nxt), cap)
        entries = nxt
    return FddTable(horizon, entries)


def marginal_at(chain: ChainSpec, t: int) -> Distribution:
    """One-dimensional law of X_t, by evolving the initial distribution."""
    cur = dict(chain.initial.items())
    for _ in range(t):
        nxt: dict[str, numeric.Scalar] = {}
        for s, p in cur.items():
            if p == 0:
                continue
            for tgt, v in chain.kernel.row(s).items():
                nxt[tgt] = nxt.get(tgt, numeric.zero()) + p * v
        cur = nxt
    return Distribution(cur)


def geometric_smoothing(chain: ChainSpec, truncation: int) -> Distribution:
    """Truncated geometric mixture of the time-n laws, renormalized.

    Returns the normalization of sum_{n<=N} 2^{-n-1} alpha P^n; the
    discarded tail has mass exactly 2^{-(N+1)}.  The support is the set
    of states reachable within N steps.
    """
    if not chain.is_finite:
        raise ValueError("geometric_smoothing requires a finite chain")
    half = numeric.scalar(Fraction(1, 2)) if numeric.is_exact() else 0.5
    weight = half
    acc: dict[str, numeric.Scalar] = {}
    cur = dict(chain.initial.items())
    for n in range(truncation + 1):
        for s, p in cur.items():
            acc[s] = acc.get(s, numeric.zero()) + weight * p
        if n < truncation:
            nxt: dict[str, numeric.Scalar] = {}
            for s, p in cur.items():
                for tgt, v in chain.kernel.row(s).items():
                    nxt[tgt] = nxt.get(tgt, numeric.zero()) + p * v
            cur = nxt
            weight = weight * half
    return Distribution(acc).normalize()


def sample_trajectory(chain: ChainSpec, horizon: int, seed: int) -> list[str]:
    """Draw one trajectory of length horizon+1; deterministic given the seed."""
    rng = random.Random(seed)
    weights_cache: dict[str, tuple[list[str], list[float]]] = {}

    def draw(dist_items) -> str:
        states = [s for s, _ in dist_items]
        weights = [float(v) for _, v in dist_items]
        return rng.choices(states, weights=weights, k=1)[0]

    current = draw(list(chain.initial.items()))
    traj = [current]
    for _ in range(horizon):
        cached = weights_cache.get(current)
        if cached is None:
            row = chain.kernel.row(current)
            cached = (list(row.keys()), [float(v) for v in row.values()])
            weights_cache[current] = cached
        current = rng.choices(cached[0], weights=cached[1], k=1)[0]
        traj.append(current)
    return traj
