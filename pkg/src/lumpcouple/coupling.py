"""Coupling constructions over a common image chain.

The central object is the ratio kernel R on the constraint set Delta of
product states with equal images.  Its fixed vector phi (the limit of
R^m applied to the all-ones vector) carries the coupling: the coupled
kernel is an h-transform-like rescaling of R by phi, and the coupled
initial law reweights the product of the marginal initial laws by phi.
Stationary, quasistationary, inhomogeneous, multi-chain and link-kernel
(intertwining) variants are built on the same core.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import numeric
from .chains import (
    ChainSpec,
    Distribution,
    StateSpace,
    TransitionKernel,
    prune_unreachable,
    stationary_distribution,
    time_reversal,
)
from .errors import (
    AbsorptionMismatch,
    HypothesisEvidenceFailed,
    NormalizationFailed,
    NotConverged,
    NotIntertwined,
    NotQuasistationary,
    NotStationary,
    PhiNotConverged,
    ShapeMismatch,
)
from .lumping import LumpingMap, compare_image_to_chain, dynkin_check, exact_lumping_verify, ExactLumpingWitness

DEFAULT_EVIDENCE_HORIZON = 6
DEFAULT_MAX_ITER = 1000
DEFAULT_STABLE_ROUNDS = 3
DEFAULT_BALL_DEPTH = 12

SEP = "|"
TIME_SEP = "@"


def join_id(components: Sequence[str]) -> str:
    return SEP.join(components)


def split_id(product_id: str) -> tuple[str, ...]:
    return tuple(product_id.split(SEP))


class ProductStateSpace:
    """Ordered product states (a, b) with a common image, serialized as "a|b"."""

    def __init__(self, tuples: Sequence[tuple[str, ...]], image: Sequence[str] | None = None):
        self.tuples: tuple[tuple[str, ...], ...] = tuple(tuples)
        self.ids: tuple[str, ...] = tuple(join_id(t) for t in self.tuples)
        self.image: tuple[str, ...] | None = tuple(image) if image is not None else None
        self.index: dict[str, int] = {s: i for i, s in enumerate(self.ids)}
        self.components = len(self.tuples[0]) if self.tuples else 0

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __contains__(self, product_id: str) -> bool:
        return product_id in self.index

    def state_space(self) -> StateSpace:
        return StateSpace(self.ids)

    def tuple_of(self, product_id: str) -> tuple[str, ...]:
        return self.tuples[self.index[product_id]]

    def image_of(self, product_id: str) -> str:
        return self.image[self.index[product_id]]

    def proj_map(self, coordinate: int) -> LumpingMap:
        assignment = {pid: t[coordinate] for pid, t in zip(self.ids, self.tuples)}
        return LumpingMap(assignment=assignment, domain=StateSpace(self.ids))

    def restrict(self, keep_ids: Sequence[str]) -> "ProductStateSpace":
        keep = set(keep_ids)
        tuples = [t for pid, t in zip(self.ids, self.tuples) if pid in keep]
        image = None
        if self.image is not None:
            image = [c for pid, c in zip(self.ids, self.image) if pid in keep]
        return ProductStateSpace(tuples, image)


class RMatrix:
    """The ratio kernel over Delta; not stochastic in general.

    Finite form holds sparse rows over a ProductStateSpace.  The
    generator form computes rows lazily from the component kernels and
    caches them (roots seed ball materialization for the iteration).
    """

    def __init__(
        self,
        space: ProductStateSpace | None = None,
        rows: dict[str, dict[str, numeric.Scalar]] | None = None,
        row_fn: Callable[[str], dict[str, numeric.Scalar]] | None = None,
        roots: Sequence[str] | None = None,
    ):
        if (rows is None) == (row_fn is None):
            raise ValueError("provide exactly one of rows or row_fn")
        self.space = space
        self._rows = rows
        self._row_fn = row_fn
        self.roots = list(roots) if roots is not None else None
        self._cache: dict[str, dict[str, numeric.Scalar]] = {}

    @property
    def is_finite(self) -> bool:
        return self._rows is not None

    def row(self, product_id: str) -> dict[str, numeric.Scalar]:
        if self._rows is not None:
            return self._rows.get(product_id, {})
        cached = self._cache.get(product_id)
        if cached is None:
            cached = self._row_fn(product_id)
            self._cache[product_id] = cached
        return cached


@dataclass
class PhiVector:
    """Fixed-vector iterate with its convergence certificate."""

    values: dict[str, numeric.Scalar]
    iterations: int
    sup_diff: numeric.Scalar
    residual: numeric.Scalar
    converged: bool
    meta: dict = field(default_factory=dict)

    def __getitem__(self, product_id: str) -> numeric.Scalar:
        return self.values.get(product_id, numeric.zero())

    def support(self) -> list[str]:
        tol = numeric.eps()
        return [s for s, v in self.values.items() if v > tol]


@dataclass
class CouplingResult:
    """A constructed coupling: product space, initial law, kernel, diagnostics."""

    kind: str
    space: ProductStateSpace
    initial: Distribution
    kernel: TransitionKernel
    phi: PhiVector
    phi_rev: PhiVector | None = None
    r_matrix: RMatrix | None = None
    kernel_rev: TransitionKernel | None = None
    kernel_sequence: list[TransitionKernel] | None = None
    absorber: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def chain(self) -> ChainSpec:
        space = self.space.state_space() if self.kernel.is_finite else None
        return ChainSpec(initial=self.initial, kernel=self.kernel, space=space)


def build_delta(f_map: LumpingMap, g_map: LumpingMap) -> ProductStateSpace:
    """All pairs (a, b) with f(a) = g(b), ordered lexicographically by position."""
    if not f_map.is_finite or not g_map.is_finite:
        raise ValueError("build_delta requires finite maps")
    if set(f_map.codomain.states) != set(g_map.codomain.states):
        raise ShapeMismatch("maps do not share a codomain")
    tuples = []
    image = []
    for a in f_map.domain:
        fa = f_map.apply(a)
        for b in g_map.domain:
            if g_map.apply(b) == fa:
                tuples.append((a, b))
                image.append(fa)
    return ProductStateSpace(tuples, image)


def build_R(
    p_x: TransitionKernel,
    p_y: TransitionKernel,
    p_z: TransitionKernel,
    delta: ProductStateSpace,
    f_map: LumpingMap | None = None,
) -> RMatrix:
    """Entrywise ratio P_X(a,a') P_Y(b,b') / P_Z(c,c') over Delta (0 where P_Z is 0)."""
    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for pid in delta.ids:
        a, b = delta.tuple_of(pid)
        c = delta.image_of(pid)
        row: dict[str, numeric.Scalar] = {}
        row_x = p_x.row(a)
        row_y = p_y.row(b)
        row_z = p_z.row(c)
        for pid2 in delta.ids:
            a2, b2 = delta.tuple_of(pid2)
            vx = row_x.get(a2)
            vy = row_y.get(b2)
            if not vx or not vy:
                continue
            vz = row_z.get(delta.image_of(pid2))
            if not vz:
                continue
            row[pid2] = vx * vy / vz
        rows[pid] = row
    return RMatrix(space=delta, rows=rows)


def build_R_generator(
    p_x: TransitionKernel,
    p_y: TransitionKernel,
    p_z: TransitionKernel,
    f_map: LumpingMap,
    g_map: LumpingMap,
    roots: Sequence[tuple[str, str]],
) -> RMatrix:
    """Lazy R over the countable Delta, for generator-backed chains."""

    def row_fn(pid: str) -> dict[str, numeric.Scalar]:
        a, b = split_id(pid)
        c = f_map.apply(a)
        row: dict[str, numeric.Scalar] = {}
        row_z = p_z.row(c)
        for a2, vx in p_x.row(a).items():
            fa2 = f_map.apply(a2)
            vz = row_z.get(fa2)
            if not vz:
                continue
            for b2, vy in p_y.row(b).items():
                if g_map.apply(b2) == fa2:
                    row[join_id((a2, b2))] = vx * vy / vz
        return row

    root_ids = [join_id(t) for t in roots]
    return RMatrix(row_fn=row_fn, roots=root_ids)


def _iterate_phi_finite(r: RMatrix, tol, max_iter: int, stable_rounds: int) -> PhiVector:
    ids = list(r.space.ids)
    phi = {s: numeric.one() for s in ids}
    stable = 0
    sup_diff = numeric.zero()
    for m in range(1, max_iter + 1):
        new = {}
        for s in ids:
            new[s] = sum((v * phi[t] for t, v in r.row(s).items()), numeric.zero())
        sup_diff = max(abs(new[s] - phi[s]) for s in ids) if ids else numeric.zero()
        phi_prev, phi = phi, new
        if numeric.is_exact():
            if phi == phi_prev:
                return PhiVector(values=phi, iterations=m, sup_diff=sup_diff,
                                 residual=numeric.zero(), converged=True)
        else:
            stable = stable + 1 if sup_diff < tol else 0
            if stable >= stable_rounds:
                residual = max(
                    abs(sum((v * phi[t] for t, v in r.row(s).items()), numeric.zero()) - phi[s])
                    for s in ids
                ) if ids else 0.0
                return PhiVector(values=phi, iterations=m, sup_diff=sup_diff,
                                 residual=residual, converged=True)
    vec = PhiVector(values=phi, iterations=max_iter, sup_diff=sup_diff,
                    residual=sup_diff, converged=False)
    raise NotConverged(f"phi iteration did not converge in {max_iter} steps",
                       phi=vec, diagnostics={"sup_diff": sup_diff})


def _iterate_phi_ball(r: RMatrix, tol, max_iter: int, stable_rounds: int,
                      depth: int) -> PhiVector:
    """Cone-exact iteration for generator-backed R.

    phi_m is exact on the reported depth ball as long as the materialized
    ball extends m layers further, because truncation effects travel
    inward one layer per iteration.  The materialized radius is doubled
    and the iteration restarted until the stopping rule fires on the
    report ball.
    """
    if r.roots is None:
        raise ValueError("generator-backed R needs a root set")
    dist: dict[str, int] = {pid: 0 for pid in r.roots}
    ordered: list[str] = list(r.roots)
    frontier = list(r.roots)
    radius = 0

    def extend(to_radius: int):
        nonlocal frontier, radius
        while radius < to_radius:
            nxt = []
            for w in frontier:
                for w2 in r.row(w):
                    if w2 not in dist:
                        dist[w2] = radius + 1
                        ordered.append(w2)
                        nxt.append(w2)
            frontier = nxt
            radius += 1

    extend(depth)
    report = [w for w in ordered if dist[w] <= depth]
    block = 16
    total_iters = 0
    last = None
    while True:
        block = min(block, max_iter)
        extend(depth + block)
        states = [w for w in ordered if dist[w] <= depth + block]
        phi = {w: numeric.one() for w in states}
        stable = 0
        sup_diff = numeric.zero()
        for m in range(1, block + 1):
            trusted = depth + block - m
            new = dict(phi)
            for w in states:
                if dist[w] <= trusted:
                    new[w] = sum((v * phi[w2] for w2, v in r.row(w).items()),
                                 numeric.zero())
            sup_diff = max(abs(new[w] - phi[w]) for w in report)
            phi = new
            total_iters += 1
            if numeric.is_exact():
                hit = sup_diff == 0
            else:
                hit = sup_diff < tol
            stable = stable + 1 if hit else 0
            if stable >= stable_rounds:
                if trusted >= depth + 1:
                    residual = max(
                        abs(sum((v * phi[w2] for w2, v in r.row(w).items()),
                                numeric.zero()) - phi[w])
                        for w in report
                    )
                else:
                    residual = sup_diff
                values = {w: phi[w] for w in report}
                return PhiVector(values=values, iterations=total_iters,
                                 sup_diff=sup_diff, residual=residual, converged=True,
                                 meta={"depth": depth, "ball_radius": depth + block})
        last = PhiVector(values={w: phi[w] for w in report}, iterations=total_iters,
                         sup_diff=sup_diff, residual=sup_diff, converged=False,
                         meta={"depth": depth, "ball_radius": depth + block})
        if block >= max_iter:
            raise NotConverged(
                f"phi iteration did not converge within {max_iter} steps on the depth-{depth} ball",
                phi=last, diagnostics={"sup_diff": sup_diff})
        block *= 2


def iterate_phi(
    r: RMatrix,
    tol=None,
    max_iter: int = DEFAULT_MAX_ITER,
    stable_rounds: int = DEFAULT_STABLE_ROUNDS,
    depth: int = DEFAULT_BALL_DEPTH,
) -> PhiVector:
    """Iterate phi_m from the all-ones vector to the fixed vector of R.

    Exact mode stops at an exact fixed point; float mode declares
    convergence after ``stable_rounds`` consecutive sup-norm differences
    below ``tol`` and reports the eigen-residual as certificate.  For
    generator-backed R the iteration runs on a growing ball so that the
    returned values on the depth ball are exact iterates.
    """
    if tol is None:
        tol = numeric.eps() if not numeric.is_exact() else 0
    if r.is_finite:
        return _iterate_phi_finite(r, tol, max_iter, stable_rounds)
    return _iterate_phi_ball(r, tol, max_iter, stable_rounds, depth)


def _check_evidence(x: ChainSpec, f_map: LumpingMap, z: ChainSpec, horizon: int,
                    side: str, cap: int) -> None:
    dev = compare_image_to_chain(x, f_map, z, horizon, cap=cap)
    if dev > numeric.eps():
        raise HypothesisEvidenceFailed(side, dev, horizon)


def _restrict_map(lmap: LumpingMap, domain: StateSpace, codomain: StateSpace,
                  side: str) -> LumpingMap:
    assignment = {s: lmap.apply(s) for s in domain}
    missing = set(codomain.states) - set(assignment.values())
    if missing:
        raise HypothesisEvidenceFailed(side, f"image never reaches {sorted(missing)}", 0)
    return LumpingMap(assignment=assignment, domain=domain, codomain=codomain)


def _phi_support(phi: PhiVector, ids) -> list[str]:
    tol = numeric.eps()
    return [s for s in ids if phi[s] > tol]


def _coupled_alpha(delta: ProductStateSpace, ids, phi, alpha_x, alpha_y, alpha_z) -> Distribution:
    out: dict[str, numeric.Scalar] = {}
    for pid in ids:
        a, b = delta.tuple_of(pid)
        c = delta.image_of(pid)
        az = alpha_z[c]
        if az > 0:
            v = alpha_x[a] * alpha_y[b] * phi[pid] / az
            if v != 0:
                out[pid] = v
    return Distribution(out)


def _coupled_kernel(ids, r: RMatrix, phi) -> TransitionKernel:
    keep = set(ids)
    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for pid in ids:
        row = {}
        for pid2, v in r.row(pid).items():
            if pid2 in keep:
                w = v * phi[pid2] / phi[pid]
                if w != 0:
                    row[pid2] = w
        rows[pid] = row
    return TransitionKernel(space=StateSpace(ids), rows=rows)


def _verify_normalization(initial: Distribution, kernel: TransitionKernel,
                          residual) -> None:
    """Row sums and total mass must be 1; tolerance scales with the phi residual."""
    tol = numeric.eps() + 32 * abs(residual)
    defect = initial.total() - 1
    if abs(defect) > tol:
        raise NormalizationFailed("coupled initial law", defect)
    for s in kernel.space.states:
        rs = sum(kernel.row(s).values(), numeric.zero())
        if abs(rs - 1) > tol:
            raise NormalizationFailed(f"coupled kernel row {s}", rs - 1)


def build_coupling(
    x: ChainSpec,
    y: ChainSpec,
    z: ChainSpec,
    f_map: LumpingMap,
    g_map: LumpingMap,
    *,
    tol=None,
    max_iter: int = DEFAULT_MAX_ITER,
    stable_rounds: int = DEFAULT_STABLE_ROUNDS,
    evidence_horizon: int = DEFAULT_EVIDENCE_HORIZON,
    ball_depth: int = DEFAULT_BALL_DEPTH,
    cap: int = 10**6,
    allow_nonconverged: bool = False,
) -> CouplingResult:
    """The homogeneous coupling with common image.

    Restricts to states visited with positive probability, checks the
    common-image hypothesis up to the evidence horizon, builds R and
    phi, and assembles the coupled law on the support of phi.  The
    hypothesis check is evidence, not proof: violations beyond the
    horizon surface as NormalizationFailed.
    """
    finite = x.is_finite and y.is_finite and z.is_finite and f_map.is_finite and g_map.is_finite
    if finite:
        return _build_coupling_finite(
            x, y, z, f_map, g_map, tol=tol, max_iter=max_iter,
            stable_rounds=stable_rounds, evidence_horizon=evidence_horizon,
            cap=cap, allow_nonconverged=allow_nonconverged,
        )
    return _build_coupling_generator(
        x, y, z, f_map, g_map, tol=tol, max_iter=max_iter,
        stable_rounds=stable_rounds, evidence_horizon=evidence_horizon,
        ball_depth=ball_depth, cap=cap, allow_nonconverged=allow_nonconverged,
    )


def _build_coupling_finite(x, y, z, f_map, g_map, *, tol, max_iter, stable_rounds,
                           evidence_horizon, cap, allow_nonconverged) -> CouplingResult:
    x = prune_unreachable(x)
    y = prune_unreachable(y)
    z = prune_unreachable(z)
    f_map = _restrict_map(f_map, x.space, z.space, "X")
    g_map = _restrict_map(g_map, y.space, z.space, "Y")
    _check_evidence(x, f_map, z, evidence_horizon, "X", cap)
    _check_evidence(y, g_map, z, evidence_horizon, "Y", cap)

    delta = build_delta(f_map, g_map)
    r = build_R(x.kernel, y.kernel, z.kernel, delta)
    try:
        phi = iterate_phi(r, tol=tol, max_iter=max_iter, stable_rounds=stable_rounds)
    except NotConverged as err:
        if not allow_nonconverged:
            raise PhiNotConverged(str(err), phi=err.phi, diagnostics=err.diagnostics)
        phi = err.phi

    ids = _phi_support(phi, delta.ids)
    alpha = _coupled_alpha(delta, ids, phi, x.initial, y.initial, z.initial)
    kernel = _coupled_kernel(ids, r, phi)
    _verify_normalization(alpha, kernel, phi.residual)

    f_strong = dynkin_check(x.kernel, f_map).is_strong
    return CouplingResult(
        kind="homogeneous",
        space=delta.restrict(ids),
        initial=alpha,
        kernel=kernel,
        phi=phi,
        r_matrix=r,
        diagnostics={
            "iterations": phi.iterations,
            "sup_diff": phi.sup_diff,
            "residual": phi.residual,
            "evidence_horizon": evidence_horizon,
            "f_strong": f_strong,
        },
    )


def _build_coupling_generator(x, y, z, f_map, g_map, *, tol, max_iter, stable_rounds,
                              evidence_horizon, ball_depth, cap,
                              allow_nonconverged) -> CouplingResult:
    _check_evidence(x, f_map, z, evidence_horizon, "X", cap)
    _check_evidence(y, g_map, z, evidence_horizon, "Y", cap)

    roots = [
        (a, b)
        for a in x.initial.support()
        for b in y.initial.support()
        if f_map.apply(a) == g_map.apply(b)
    ]
    if not roots:
        raise HypothesisEvidenceFailed("X", "no initial product state has equal images", 0)
    r = build_R_generator(x.kernel, y.kernel, z.kernel, f_map, g_map, roots)
    try:
        phi = iterate_phi(r, tol=tol, max_iter=max_iter, stable_rounds=stable_rounds,
                          depth=ball_depth)
    except NotConverged as err:
        if not allow_nonconverged:
            raise PhiNotConverged(str(err), phi=err.phi, diagnostics=err.diagnostics)
        phi = err.phi

    tol_phi = numeric.eps()
    supported = {pid for pid, v in phi.values.items() if v > tol_phi}

    def coupled_row(pid: str) -> list[tuple[str, numeric.Scalar]]:
        if pid not in phi.values:
            raise ValueError(
                f"state {pid} lies outside the materialized phi ball "
                f"(depth {ball_depth}); rebuild with a larger ball_depth"
            )
        out = []
        for pid2, v in r.row(pid).items():
            if pid2 in supported:
                out.append((pid2, v * phi.values[pid2] / phi.values[pid]))
        return out

    kernel = TransitionKernel(generator=coupled_row)

    alpha_entries: dict[str, numeric.Scalar] = {}
    for a, b in roots:
        pid = join_id((a, b))
        if pid not in supported:
            continue
        c = f_map.apply(a)
        az = z.initial[c]
        if az > 0:
            v = x.initial[a] * y.initial[b] * phi.values[pid] / az
            if v != 0:
                alpha_entries[pid] = v
    alpha = Distribution(alpha_entries)

    check_tol = numeric.eps() + 32 * abs(phi.residual)
    defect = alpha.total() - 1
    if abs(defect) > check_tol:
        raise NormalizationFailed("coupled initial law", defect)
    interior = [pid for pid in supported
                if pid in phi.values]
    for pid in interior:
        # Rows can only be verified where successors stay inside the ball.
        try:
            rs = sum((v for _, v in coupled_row(pid)), numeric.zero())
        except ValueError:
            continue
        if any(pid2 not in phi.values for pid2 in r.row(pid)):
            continue
        if abs(rs - 1) > check_tol:
            raise NormalizationFailed(f"coupled kernel row {pid}", rs - 1)

    ordered_ids = [pid for pid in phi.values if pid in supported]
    tuples = [split_id(pid) for pid in ordered_ids]
    image = [f_map.apply(t[0]) for t in tuples]
    space = ProductStateSpace(tuples, image)
    return CouplingResult(
        kind="homogeneous",
        space=space,
        initial=alpha,
        kernel=kernel,
        phi=phi,
        r_matrix=r,
        diagnostics={
            "iterations": phi.iterations,
            "sup_diff": phi.sup_diff,
            "residual": phi.residual,
            "evidence_horizon": evidence_horizon,
            "ball_depth": ball_depth,
            "generator_backed": True,
        },
    )


def _check_stationary(chain: ChainSpec, side: str) -> None:
    tol = numeric.eps()
    flow = {s: -chain.initial[s] for s in chain.space.states}
    for s in chain.space.states:
        p = chain.initial[s]
        if p == 0:
            continue
        for t, v in chain.kernel.row(s).items():
            flow[t] += p * v
    worst = max(abs(v) for v in flow.values())
    if worst > tol:
        raise NotStationary(f"{side} initial law is not stationary, defect {worst}")


def build_stationary_coupling(
    x: ChainSpec,
    y: ChainSpec,
    z: ChainSpec,
    f_map: LumpingMap,
    g_map: LumpingMap,
    *,
    tol=None,
    max_iter: int = DEFAULT_MAX_ITER,
    stable_rounds: int = DEFAULT_STABLE_ROUNDS,
    evidence_horizon: int = DEFAULT_EVIDENCE_HORIZON,
    cap: int = 10**6,
) -> CouplingResult:
    """The stationary two-sided coupling.

    Uses phi from R and phi_rev from the reversed-kernel ratio matrix;
    the state space keeps only pairs where both are positive, the
    stationary law reweights the product law by both factors, and the
    reversed coupled kernel is returned for detailed-balance checks.
    """
    x = prune_unreachable(x)
    y = prune_unreachable(y)
    z = prune_unreachable(z)
    f_map = _restrict_map(f_map, x.space, z.space, "X")
    g_map = _restrict_map(g_map, y.space, z.space, "Y")
    for chain, side in ((x, "X"), (y, "Y"), (z, "Z")):
        _check_stationary(chain, side)
    _check_evidence(x, f_map, z, evidence_horizon, "X", cap)
    _check_evidence(y, g_map, z, evidence_horizon, "Y", cap)

    rev_x = time_reversal(x.kernel, x.initial)
    rev_y = time_reversal(y.kernel, y.initial)
    rev_z = time_reversal(z.kernel, z.initial)

    delta = build_delta(f_map, g_map)
    r = build_R(x.kernel, y.kernel, z.kernel, delta)
    r_rev = build_R(rev_x, rev_y, rev_z, delta)
    try:
        phi = iterate_phi(r, tol=tol, max_iter=max_iter, stable_rounds=stable_rounds)
        phi_rev = iterate_phi(r_rev, tol=tol, max_iter=max_iter, stable_rounds=stable_rounds)
    except NotConverged as err:
        raise PhiNotConverged(str(err), phi=err.phi, diagnostics=err.diagnostics)

    tol_phi = numeric.eps()
    ids = [pid for pid in delta.ids if phi[pid] > tol_phi and phi_rev[pid] > tol_phi]

    pi_entries: dict[str, numeric.Scalar] = {}
    for pid in ids:
        a, b = delta.tuple_of(pid)
        c = delta.image_of(pid)
        pz = z.initial[c]
        if pz > 0:
            v = x.initial[a] * y.initial[b] * phi[pid] * phi_rev[pid] / pz
            if v != 0:
                pi_entries[pid] = v
    pi = Distribution(pi_entries)

    kernel = _coupled_kernel(ids, r, phi)
    kernel_rev = _coupled_kernel(ids, r_rev, phi_rev)
    residual = max(abs(phi.residual), abs(phi_rev.residual))
    _verify_normalization(pi, kernel, residual)

    return CouplingResult(
        kind="stationary",
        space=delta.restrict(ids),
        initial=pi,
        kernel=kernel,
        phi=phi,
        phi_rev=phi_rev,
        r_matrix=r,
        kernel_rev=kernel_rev,
        diagnostics={
            "iterations": phi.iterations,
            "iterations_rev": phi_rev.iterations,
            "sup_diff": phi.sup_diff,
            "residual": phi.residual,
            "residual_rev": phi_rev.residual,
            "evidence_horizon": evidence_horizon,
            "f_strong": dynkin_check(x.kernel, f_map).is_strong,
        },
    )


def _quasistationary_check(chain: ChainSpec, absorber: str, side: str):
    """Verify the absorbing-state geometry and return the absorption probability."""
    from .chains import marginal_at

    tol = numeric.eps()
    if absorber not in chain.space:
        raise NotQuasistationary(f"{side}: absorber {absorber} is not a state")
    row = chain.kernel.row(absorber)
    if abs(row.get(absorber, numeric.zero()) - 1) > tol:
        raise NotQuasistationary(f"{side}: {absorber} is not absorbing")
    if chain.initial[absorber] > 0:
        raise NotQuasistationary(f"{side}: initial law puts mass on the absorber")

    alive_1 = 1 - sum(
        (chain.initial[s] * chain.kernel.row(s).get(absorber, numeric.zero())
         for s in chain.initial.support()),
        numeric.zero(),
    )
    lam = 1 - alive_1
    if not (0 < lam < 1):
        raise NotQuasistationary(f"{side}: absorption probability {lam} outside (0,1)")
    survival = numeric.one()
    for t in range(1, 6):
        dist = marginal_at(chain, t)
        survival = survival * alive_1
        alive = 1 - dist[absorber]
        if abs(alive - survival) > tol:
            raise NotQuasistationary(
                f"{side}: P(alive at {t}) = {alive}, expected {survival}")
        conditional = Distribution(
            {s: v for s, v in dist.items() if s != absorber}).normalize()
        for s in set(conditional.support()) | set(chain.initial.support()):
            if abs(conditional[s] - chain.initial[s]) > tol:
                raise NotQuasistationary(
                    f"{side}: conditional law at time {t} drifted at state {s}")
    return lam


def build_quasistationary_coupling(
    x: ChainSpec,
    y: ChainSpec,
    z: ChainSpec,
    f_map: LumpingMap,
    g_map: LumpingMap,
    absorbers: tuple[str, str, str],
    *,
    tol=None,
    max_iter: int = DEFAULT_MAX_ITER,
    stable_rounds: int = DEFAULT_STABLE_ROUNDS,
    evidence_horizon: int = DEFAULT_EVIDENCE_HORIZON,
    cap: int = 10**6,
) -> CouplingResult:
    """Coupling of quasistationary chains with matching absorption times.

    Redirects each absorber to the quasistationary law, couples the
    resulting stationary chains, then re-absorbs the unique lift of the
    image absorber and renormalizes the stationary law off it.
    """
    rho_a, rho_b, rho_c = absorbers
    if f_map.fibre(rho_c) != [rho_a]:
        raise ShapeMismatch(f"f must map exactly {{{rho_a}}} onto {rho_c}")
    if g_map.fibre(rho_c) != [rho_b]:
        raise ShapeMismatch(f"g must map exactly {{{rho_b}}} onto {rho_c}")

    lam_x = _quasistationary_check(x, rho_a, "X")
    lam_y = _quasistationary_check(y, rho_b, "Y")
    lam_z = _quasistationary_check(z, rho_c, "Z")
    tol_eps = numeric.eps()
    if abs(lam_x - lam_z) > tol_eps or abs(lam_y - lam_z) > tol_eps:
        raise AbsorptionMismatch(
            f"absorption probabilities differ: {lam_x}, {lam_y}, {lam_z}")
    lam = lam_z

    def modified(chain: ChainSpec, rho: str) -> ChainSpec:
        rows = {s: dict(chain.kernel.row(s)) for s in chain.space.states}
        rows[rho] = dict(chain.initial.items())
        kernel = TransitionKernel(space=chain.space, rows=rows)
        pi = {s: chain.initial[s] / (1 + lam) for s in chain.initial.support()}
        pi[rho] = lam / (1 + lam)
        return ChainSpec(initial=Distribution(pi), kernel=kernel)

    inner = build_stationary_coupling(
        modified(x, rho_a), modified(y, rho_b), modified(z, rho_c),
        f_map, g_map, tol=tol, max_iter=max_iter, stable_rounds=stable_rounds,
        evidence_horizon=evidence_horizon, cap=cap,
    )

    absorber_id = join_id((rho_a, rho_b))
    if absorber_id not in inner.space:
        raise NotQuasistationary("the lifted absorber fell outside the coupled space")
    rows = {s: dict(inner.kernel.row(s)) for s in inner.space.ids}
    rows[absorber_id] = {absorber_id: numeric.one()}
    kernel = TransitionKernel(space=inner.space.state_space(), rows=rows)
    initial = Distribution(
        {s: v for s, v in inner.initial.items() if s != absorber_id}).normalize()

    diagnostics = dict(inner.diagnostics)
    diagnostics["absorption_probability"] = lam
    return CouplingResult(
        kind="quasistationary",
        space=inner.space,
        initial=initial,
        kernel=kernel,
        phi=inner.phi,
        phi_rev=inner.phi_rev,
        r_matrix=inner.r_matrix,
        kernel_rev=inner.kernel_rev,
        absorber=absorber_id,
        diagnostics=diagnostics,
    )


@dataclass
class InhomogeneousChainSpec:
    """Finite-horizon inhomogeneous chain: initial law plus a kernel sequence."""

    space: StateSpace
    initial: Distribution
    kernels: list[TransitionKernel]

    @property
    def horizon(self) -> int:
        return len(self.kernels)


def _time_extend(chain: InhomogeneousChainSpec) -> ChainSpec:
    """Homogeneous chain on state-time pairs; repeats the last kernel past the horizon.

    With no kernels at all the time layers loop in place, so only the
    initial laws interact.
    """
    kernels = chain.kernels

    def row(st: str) -> list[tuple[str, numeric.Scalar]]:
        s, t_str = st.rsplit(TIME_SEP, 1)
        t = int(t_str)
        if not kernels:
            return [(st, numeric.one())]
        kern = kernels[min(t, len(kernels) - 1)]
        return [(f"{s2}{TIME_SEP}{t + 1}", v) for s2, v in kern.row(s).items()]

    initial = Distribution({f"{s}{TIME_SEP}0": v for s, v in chain.initial.items()})
    return ChainSpec(initial=initial, kernel=TransitionKernel(generator=row))


def _lift_map(lmap: LumpingMap) -> LumpingMap:
    def fn(st: str) -> str:
        s, t = st.rsplit(TIME_SEP, 1)
        return f"{lmap.apply(s)}{TIME_SEP}{t}"

    return LumpingMap(func=fn)


def build_inhomogeneous_coupling(
    x: InhomogeneousChainSpec,
    y: InhomogeneousChainSpec,
    z: InhomogeneousChainSpec,
    f_map: LumpingMap,
    g_map: LumpingMap,
    *,
    tol=None,
    max_iter: int = DEFAULT_MAX_ITER,
    stable_rounds: int = DEFAULT_STABLE_ROUNDS,
    evidence_horizon: int | None = None,
    cap: int = 10**6,
) -> CouplingResult:
    """Coupling of inhomogeneous chains via the time-extension device.

    The chains are lifted to homogeneous chains on state-time pairs (the
    kernel sequence continued by repeating its last element), coupled
    homogeneously, and the time coordinate is projected out, leaving a
    time-indexed kernel sequence of length the input horizon.
    """
    horizon = x.horizon
    if y.horizon != horizon or z.horizon != horizon:
        raise ShapeMismatch("kernel sequences must have equal length")
    if evidence_horizon is None:
        evidence_horizon = max(horizon, DEFAULT_EVIDENCE_HORIZON)

    lifted = build_coupling(
        _time_extend(x), _time_extend(y), _time_extend(z),
        _lift_map(f_map), _lift_map(g_map),
        tol=tol, max_iter=max_iter, stable_rounds=stable_rounds,
        evidence_horizon=evidence_horizon,
        ball_depth=max(horizon + 1, evidence_horizon + 1), cap=cap,
    )

    # Project out the common time coordinate.
    def strip(pid: str) -> tuple[tuple[str, str], int]:
        a_t, b_t = split_id(pid)
        a, ta = a_t.rsplit(TIME_SEP, 1)
        b, tb = b_t.rsplit(TIME_SEP, 1)
        if ta != tb:
            raise AssertionError("time coordinates out of sync")
        return (a, b), int(ta)

    layers: dict[int, list[str]] = {}
    for pid in lifted.phi.values:
        if lifted.phi.values[pid] <= numeric.eps():
            continue
        (a, b), t = strip(pid)
        layers.setdefault(t, []).append(pid)

    kernel_sequence: list[TransitionKernel] = []
    for t in range(1, horizon + 1):
        rows: dict[str, dict[str, numeric.Scalar]] = {}
        for pid in layers.get(t - 1, []):
            (a, b), _ = strip(pid)
            row = {}
            for pid2, v in lifted.kernel.row(pid).items():
                (a2, b2), _ = strip(pid2)
                row[join_id((a2, b2))] = v
            rows[join_id((a, b))] = row
        kernel_sequence.append(
            TransitionKernel(space=StateSpace(rows.keys()), rows=rows))

    initial = Distribution({
        join_id(strip(pid)[0]): v for pid, v in lifted.initial.items()
    })
    base_tuples = []
    seen = set()
    for t in sorted(layers):
        for pid in layers[t]:
            pair, _ = strip(pid)
            if pair not in seen:
                seen.add(pair)
                base_tuples.append(pair)
    space = ProductStateSpace(base_tuples, [f_map.apply(a) for a, _ in base_tuples])

    return CouplingResult(
        kind="inhomogeneous",
        space=space,
        initial=initial,
        kernel=lifted.kernel,
        phi=lifted.phi,
        r_matrix=lifted.r_matrix,
        kernel_sequence=kernel_sequence,
        diagnostics=dict(lifted.diagnostics, horizon=horizon),
    )


def couple_many(
    chains: Sequence[ChainSpec],
    maps: Sequence[LumpingMap],
    z: ChainSpec,
    **options,
) -> CouplingResult:
    """Left fold of the pairwise construction over three or more chains.

    The accumulated product is coupled with the next chain using the
    first coordinate's composed map, so all component images agree at
    all times; the final space is a subset of the full product.
    """
    if len(chains) != len(maps) or not chains:
        raise ShapeMismatch("need equally many chains and maps, at least one")
    if len(chains) == 1:
        chain = prune_unreachable(chains[0])
        ids = list(chain.space.states)
        phi = PhiVector(values={s: numeric.one() for s in ids}, iterations=0,
                        sup_diff=numeric.zero(), residual=numeric.zero(), converged=True)
        return CouplingResult(
            kind="multiway",
            space=ProductStateSpace([(s,) for s in ids],
                                    [maps[0].apply(s) for s in ids]),
            initial=chain.initial,
            kernel=chain.kernel,
            phi=phi,
            diagnostics={"components": 1},
        )

    acc: CouplingResult | None = None
    acc_chain = chains[0]
    acc_map = maps[0]
    for stage in range(1, len(chains)):
        try:
            acc = build_coupling(acc_chain, chains[stage], z, acc_map, maps[stage],
                                 **options)
        except Exception as err:
            err.args = err.args + (f"stage={stage}",)
            raise
        acc_chain = acc.chain()
        first_map = maps[0]
        acc_map = LumpingMap(
            assignment={
                pid: first_map.apply(split_id(pid)[0]) for pid in acc.space.ids
            },
            domain=acc.space.state_space(),
            codomain=z.space,
        )

    flat_tuples = [split_id(pid) for pid in acc.space.ids]
    image = [maps[0].apply(t[0]) for t in flat_tuples]
    result = CouplingResult(
        kind="multiway",
        space=ProductStateSpace(flat_tuples, image),
        initial=acc.initial,
        kernel=acc.kernel,
        phi=acc.phi,
        r_matrix=acc.r_matrix,
        diagnostics=dict(acc.diagnostics, components=len(chains)),
    )
    return result


def diaconis_fill_intertwining(
    p_x: TransitionKernel,
    p_y: TransitionKernel,
    link: dict[str, Distribution],
    alpha_y: Distribution,
) -> CouplingResult:
    """Coupling from a link kernel satisfying Link P_X = P_Y Link.

    The link rows are distributions on A indexed by B.  The coupled
    state space is the positivity set of the link; the first projection
    lumps strongly to P_X and the second exactly to P_Y with the link
    rows as fibre family.  Both facts are re-verified on the output and
    reported in the diagnostics.
    """
    a_space = p_x.space
    b_space = p_y.space
    tol = numeric.eps()
    for b in b_space:
        if b not in link:
            raise ShapeMismatch(f"link is missing a row for {b}")
        total = link[b].total()
        if abs(total - 1) > tol:
            raise ShapeMismatch(f"link row {b} sums to {total}")

    # Intertwining identity Link P_X = P_Y Link.
    dev = numeric.zero()
    py_link: dict[str, dict[str, numeric.Scalar]] = {}
    for b in b_space:
        lhs: dict[str, numeric.Scalar] = {}
        for a, w in link[b].items():
            for a2, v in p_x.row(a).items():
                lhs[a2] = lhs.get(a2, numeric.zero()) + w * v
        rhs: dict[str, numeric.Scalar] = {}
        for b2, v in p_y.row(b).items():
            for a2, w in link[b2].items():
                rhs[a2] = rhs.get(a2, numeric.zero()) + v * w
        py_link[b] = rhs
        for a2 in set(lhs) | set(rhs):
            d = abs(lhs.get(a2, numeric.zero()) - rhs.get(a2, numeric.zero()))
            if d > dev:
                dev = d
    if dev > tol:
        raise NotIntertwined(dev)

    alpha_x_probs: dict[str, numeric.Scalar] = {}
    for b, w in alpha_y.items():
        for a, v in link[b].items():
            alpha_x_probs[a] = alpha_x_probs.get(a, numeric.zero()) + w * v

    tuples = [(a, b) for a in a_space for b in b_space if link[b][a] > 0]
    space = ProductStateSpace(tuples)
    ids = space.ids

    alpha = Distribution({
        join_id((a, b)): alpha_y[b] * link[b][a]
        for a, b in tuples
        if alpha_y[b] * link[b][a] != 0
    })

    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for pid in ids:
        a, b = space.tuple_of(pid)
        row: dict[str, numeric.Scalar] = {}
        for b2, vy in p_y.row(b).items():
            for a2, w in link[b2].items():
                vx = p_x.entry(a, a2)
                norm = py_link[b].get(a2, numeric.zero())
                if w > 0 and vx != 0 and norm > 0:
                    val = vy * w * vx / norm
                    if val != 0:
                        row[join_id((a2, b2))] = val
        rows[pid] = row
    kernel = TransitionKernel(space=StateSpace(ids), rows=rows)
    _verify_normalization(alpha, kernel, numeric.zero())

    proj1 = space.proj_map(0)
    proj2 = space.proj_map(1)
    dynkin = dynkin_check(kernel, proj1)
    proj1_strong = dynkin.is_strong and all(
        abs(dynkin.image_kernel.entry(a, a2) - p_x.entry(a, a2)) <= tol
        for a in proj1.codomain for a2 in proj1.codomain
    )
    nu = {
        b: Distribution({
            join_id((a, b)): link[b][a] for a in a_space if link[b][a] > 0
        })
        for b in proj2.codomain
    }
    witness = ExactLumpingWitness(
        nu=nu,
        image_kernel=TransitionKernel(
            space=proj2.codomain,
            rows={b: {b2: v for b2, v in p_y.row(b).items() if b2 in proj2.codomain}
                  for b in proj2.codomain},
        ),
    )
    proj2_residual = exact_lumping_verify(kernel, proj2, witness)

    ones = PhiVector(values={pid: numeric.one() for pid in ids}, iterations=0,
                     sup_diff=numeric.zero(), residual=numeric.zero(), converged=True)
    return CouplingResult(
        kind="intertwining",
        space=space,
        initial=alpha,
        kernel=kernel,
        phi=ones,
        diagnostics={
            "intertwining_deviation": dev,
            "proj1_strong_to_px": proj1_strong,
            "proj2_exact_residual": proj2_residual,
            "alpha_x": alpha_x_probs,
        },
    )
