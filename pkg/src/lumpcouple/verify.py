"""Independent oracles certifying coupling properties on concrete instances.

Each check recomputes the target quantity by a route independent of the
construction path (trajectory enumeration, windowed conditioning,
sampling) and reports deviations rather than raising.
"""
from __future__ import annotations

import random
from bisect import bisect_left
from dataclasses import dataclass, field
from itertools import accumulate

from . import numeric
from .chains import ChainSpec, Distribution, fdd, marginal_at, DEFAULT_TRAJECTORY_CAP
from .coupling import CouplingResult, split_id
from .lumping import (
    ExactLumpingWitness,
    LumpingMap,
    dynkin_check,
    exact_lumping_verify,
    image_fdd,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    deviation: numeric.Scalar | None = None
    witness: object | None = None
    skipped: bool = False
    note: str = ""


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed or c.skipped for c in self.checks)

    def add(self, check: CheckResult) -> None:
        self.checks.append(check)

    def find(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _table_deviation(a: dict, b: dict):
    dev = numeric.zero()
    witness = None
    for key in set(a) | set(b):
        d = abs(a.get(key, numeric.zero()) - b.get(key, numeric.zero()))
        if d > dev:
            dev = d
            witness = key
    return dev, witness


def verify_marginals(coupling: CouplingResult, x: ChainSpec, y: ChainSpec,
                     horizon: int, cap: int = DEFAULT_TRAJECTORY_CAP) -> VerificationReport:
    """Compare the projections of the coupled trajectory law with the marginals."""
    report = VerificationReport()
    coupled = fdd(coupling.chain(), horizon, cap=cap)
    for coordinate, chain, name in ((0, x, "proj1-marginal"), (1, y, "proj2-marginal")):
        pushed = coupled.pushforward(lambda pid, c=coordinate: split_id(pid)[c])
        target = fdd(chain, horizon, cap=cap)
        dev, witness = _table_deviation(pushed.entries, target.entries)
        report.add(CheckResult(name=name, passed=dev <= numeric.eps(),
                               deviation=dev, witness=witness))
    return report


def verify_conditional_independence(
    coupling: CouplingResult,
    x: ChainSpec,
    y: ChainSpec,
    z: ChainSpec,
    f_map: LumpingMap,
    g_map: LumpingMap,
    horizon: int,
    window: int,
    cap: int = DEFAULT_TRAJECTORY_CAP,
) -> numeric.Scalar:
    """Windowed conditional-independence deviation.

    For each positive-probability image window of length ``window``, the
    conditional laws of the first ``horizon`` steps of x and y given the
    window are multiplied and mixed over the window law; the mixture is
    compared with the coupled trajectory law.  The deviation tends to 0
    as the window grows, and is 0 at window = horizon when both maps are
    strong lumpings.
    """
    if window < horizon:
        raise ValueError("window must be at least the horizon")

    def window_conditionals(chain: ChainSpec, lmap: LumpingMap):
        table = fdd(chain, window, cap=cap)
        cond: dict[tuple[str, ...], dict[tuple[str, ...], numeric.Scalar]] = {}
        mass: dict[tuple[str, ...], numeric.Scalar] = {}
        for traj, p in table.entries.items():
            w = tuple(lmap.apply(s) for s in traj)
            prefix = traj[: horizon + 1]
            bucket = cond.setdefault(w, {})
            bucket[prefix] = bucket.get(prefix, numeric.zero()) + p
            mass[w] = mass.get(w, numeric.zero()) + p
        for w, bucket in cond.items():
            for prefix in bucket:
                bucket[prefix] = bucket[prefix] / mass[w]
        return cond

    cond_x = window_conditionals(x, f_map)
    cond_y = window_conditionals(y, g_map)
    z_table = fdd(z, window, cap=cap)

    oracle: dict[tuple[str, ...], numeric.Scalar] = {}
    for w, pw in z_table.entries.items():
        bx = cond_x.get(w)
        by = cond_y.get(w)
        if not bx or not by:
            continue
        for xa, px in bx.items():
            for yb, py in by.items():
                traj = tuple(f"{a}|{b}" for a, b in zip(xa, yb))
                oracle[traj] = oracle.get(traj, numeric.zero()) + pw * px * py

    coupled = fdd(coupling.chain(), horizon, cap=cap)
    dev, _ = _table_deviation(oracle, coupled.entries)
    return dev


def verify_strong_projection(coupling: CouplingResult, p_y) -> VerificationReport:
    """Checks that apply when the first map was a strong lumping.

    phi must be identically 1, the coupled space must be all of Delta,
    the coupled kernel must equal R, and the second projection must lump
    strongly to the second marginal kernel.
    """
    report = VerificationReport()
    if not coupling.diagnostics.get("f_strong", False):
        report.add(CheckResult(name="strong-projection", passed=True, skipped=True,
                               note="coupling was not built from a strong first map"))
        return report
    tol = numeric.eps()

    dev_phi = max(abs(v - 1) for v in coupling.phi.values.values())
    report.add(CheckResult(name="phi-equals-one", passed=dev_phi <= tol, deviation=dev_phi))

    delta_ids = set(coupling.r_matrix.space.ids)
    equal_space = delta_ids == set(coupling.space.ids)
    report.add(CheckResult(name="support-is-delta", passed=equal_space,
                           witness=sorted(delta_ids - set(coupling.space.ids))))

    dev_pr = numeric.zero()
    for pid in coupling.space.ids:
        row_p = coupling.kernel.row(pid)
        row_r = coupling.r_matrix.row(pid)
        for key in set(row_p) | set(row_r):
            d = abs(row_p.get(key, numeric.zero()) - row_r.get(key, numeric.zero()))
            if d > dev_pr:
                dev_pr = d
    report.add(CheckResult(name="kernel-equals-R", passed=dev_pr <= tol, deviation=dev_pr))

    proj2 = coupling.space.proj_map(1)
    dynkin = dynkin_check(coupling.kernel, proj2)
    dev_q = numeric.zero()
    if dynkin.is_strong:
        for b in proj2.codomain:
            for b2 in proj2.codomain:
                d = abs(dynkin.image_kernel.entry(b, b2) - p_y.entry(b, b2))
                if d > dev_q:
                    dev_q = d
    report.add(CheckResult(
        name="proj2-strong-to-py",
        passed=dynkin.is_strong and dev_q <= tol,
        deviation=dev_q if dynkin.is_strong else None,
        witness=dynkin.counterexample,
    ))
    return report


def verify_exact_projection(coupling: CouplingResult, f_witness: ExactLumpingWitness,
                            y: ChainSpec) -> VerificationReport:
    """Exactness of the second projection when the first map was exact.

    Builds the fibre family mu_b from the first map's witness scaled by
    phi, verifies the intertwining equation for proj2 against the second
    marginal kernel, and checks that the coupled initial law is the
    alpha_Y-mixture of the family.
    """
    report = VerificationReport()
    tol = numeric.eps()
    proj2 = coupling.space.proj_map(1)

    mu: dict[str, Distribution] = {}
    for b in proj2.codomain:
        probs = {}
        for pid in proj2.fibre(b):
            a, _ = split_id(pid)
            c = coupling.space.image_of(pid)
            v = f_witness.nu[c][a] * coupling.phi[pid]
            if v != 0:
                probs[pid] = v
        mu[b] = Distribution(probs).normalize()

    witness = ExactLumpingWitness(
        nu=mu,
        image_kernel=y.kernel.restrict(list(proj2.codomain.states)),
    )
    residual = exact_lumping_verify(coupling.kernel, proj2, witness)
    report.add(CheckResult(name="proj2-exact-residual", passed=residual <= tol,
                           deviation=residual))

    dev = numeric.zero()
    for pid in coupling.space.ids:
        _, b = split_id(pid)
        want = y.initial[b] * mu[b][pid]
        d = abs(coupling.initial[pid] - want)
        if d > dev:
            dev = d
    report.add(CheckResult(name="initial-is-muy-mixture", passed=dev <= tol, deviation=dev))
    return report


def verify_stationarity(coupling: CouplingResult) -> VerificationReport:
    """Stationarity of the coupled law and coupled detailed balance."""
    report = VerificationReport()
    tol = numeric.eps() + 32 * abs(coupling.phi.residual)
    if coupling.phi_rev is not None:
        tol += 32 * abs(coupling.phi_rev.residual)
    pi = coupling.initial

    flow = {s: -pi[s] for s in coupling.space.ids}
    for s in coupling.space.ids:
        p = pi[s]
        if p == 0:
            continue
        for t, v in coupling.kernel.row(s).items():
            flow[t] += p * v
    dev_pi = max(abs(v) for v in flow.values())
    report.add(CheckResult(name="pi-is-stationary", passed=dev_pi <= tol, deviation=dev_pi))

    if coupling.kernel_rev is None:
        report.add(CheckResult(name="detailed-balance", passed=False, skipped=True,
                               note="no reversed kernel on this result"))
        return report
    dev_db = numeric.zero()
    witness = None
    for w in coupling.space.ids:
        for w2, v in coupling.kernel.row(w).items():
            lhs = pi[w] * v
            rhs = pi[w2] * coupling.kernel_rev.entry(w2, w)
            d = abs(lhs - rhs)
            if d > dev_db:
                dev_db = d
                witness = (w, w2)
    report.add(CheckResult(name="detailed-balance", passed=dev_db <= tol,
                           deviation=dev_db, witness=witness))
    return report


def _chi_square_pvalue(observed: dict[str, int], expected: dict[str, float], n: int) -> float:
    """Categorical chi-square with pooling of thin cells (expected < 5)."""
    from scipy.stats import chi2

    cells = []
    pooled_obs = 0
    pooled_exp = 0.0
    for s, p in expected.items():
        e = n * p
        o = observed.get(s, 0)
        if e >= 5:
            cells.append((o, e))
        else:
            pooled_obs += o
            pooled_exp += e
    extra_obs = sum(observed.values()) - sum(o for o, _ in cells) - pooled_obs
    pooled_obs += extra_obs
    if pooled_exp > 0 or pooled_obs > 0:
        cells.append((pooled_obs, max(pooled_exp, 1e-12)))
    if len(cells) < 2:
        return 1.0
    stat = sum((o - e) ** 2 / e for o, e in cells)
    return float(chi2.sf(stat, len(cells) - 1))


def monte_carlo_check(
    coupling: CouplingResult,
    x: ChainSpec,
    y: ChainSpec,
    samples: int,
    horizon: int,
    seed: int,
    threshold: float = 1e-3,
) -> VerificationReport:
    """Sampled marginal check for instances beyond enumeration budgets.

    Draws coupled trajectories and chi-square-compares the visit
    frequencies of each coordinate at each time against the exact
    one-dimensional marginals, with a Bonferroni-corrected threshold.
    """
    rng = random.Random(seed)
    chain = coupling.chain()
    row_cache: dict[str, tuple[list[str], list[float]]] = {}

    def cached_row(state: str):
        got = row_cache.get(state)
        if got is None:
            row = chain.kernel.row(state)
            targets = list(row.keys())
            cum = list(accumulate(float(v) for v in row.values()))
            got = (targets, cum)
            row_cache[state] = got
        return got

    init_targets = list(chain.initial.support())
    init_cum = list(accumulate(float(chain.initial[s]) for s in init_targets))

    counts_x = [dict() for _ in range(horizon + 1)]
    counts_y = [dict() for _ in range(horizon + 1)]
    for _ in range(samples):
        u = rng.random() * init_cum[-1]
        state = init_targets[bisect_left(init_cum, u)]
        for t in range(horizon + 1):
            a, b = split_id(state)
            counts_x[t][a] = counts_x[t].get(a, 0) + 1
            counts_y[t][b] = counts_y[t].get(b, 0) + 1
            if t < horizon:
                targets, cum = cached_row(state)
                u = rng.random() * cum[-1]
                state = targets[bisect_left(cum, u)]

    tests = 2 * (horizon + 1)
    per_test = threshold / tests
    report = VerificationReport()
    for name, chain_spec, counts in (("X", x, counts_x), ("Y", y, counts_y)):
        for t in range(horizon + 1):
            expected = {s: float(v) for s, v in marginal_at(chain_spec, t).items()}
            p = _chi_square_pvalue(counts[t], expected, samples)
            report.add(CheckResult(
                name=f"mc-marginal-{name}-t{t}",
                passed=p >= per_test,
                deviation=p,
                note=f"chi-square p-value, threshold {per_test:.2e}",
            ))
    return report


def verify_joint_law_formula(
    coupling: CouplingResult,
    x: ChainSpec,
    y: ChainSpec,
    z: ChainSpec,
    f_map: LumpingMap,
    horizon: int,
    cap: int = DEFAULT_TRAJECTORY_CAP,
) -> numeric.Scalar:
    """Closed-form trajectory law against the kernel-product route.

    Every coupled trajectory probability computed as alpha * prod(P)
    must equal (alpha_X alpha_Y / alpha_Z) * prod(R) * phi(last).
    """
    table = fdd(coupling.chain(), horizon, cap=cap)
    dev = numeric.zero()
    for traj, p in table.entries.items():
        a0, b0 = split_id(traj[0])
        c0 = f_map.apply(a0)
        az = z.initial[c0]
        if az == 0:
            closed = numeric.zero()
        else:
            closed = x.initial[a0] * y.initial[b0] / az
            for i in range(1, len(traj)):
                closed = closed * coupling.r_matrix.row(traj[i - 1]).get(
                    traj[i], numeric.zero())
            closed = closed * coupling.phi[traj[-1]]
        d = abs(p - closed)
        if d > dev:
            dev = d
    return dev
