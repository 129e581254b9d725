"""Bundled example instances with golden outputs.

Four cases exercise the full pipeline: a refusal instance whose image
process is not Markov (batcave), a stationary-marginals instance whose
homogeneous coupling is not stationary (three-bit-shift), the 3-state
exact-lumping instance with its full tables (three-state-emc), and a
countable-state biased walk coupled through its absolute value
(biased-walk).  Golden values carry their provenance ("published" table
values vs "derived" by independent computation) and are compared
exactly in rational mode, or within the stated tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from . import numeric
from .chains import ChainSpec, Distribution, StateSpace, TransitionKernel, dense_kernel, marginal_at
from .coupling import build_coupling, build_stationary_coupling, join_id, split_id
from .errors import HypothesisEvidenceFailed, LumpCoupleError
from .lumping import LumpingMap, compare_image_processes, image_markov_test


@dataclass
class GoldenValue:
    name: str
    expected: object
    source: str  # "published" or "derived"
    tolerance: float = 0.0


@dataclass
class ExampleOutcome:
    name: str
    passed: bool
    checks: list[tuple[str, bool, str]] = field(default_factory=list)


@dataclass
class ExampleCase:
    name: str
    description: str
    mode: str
    golden: list[GoldenValue]
    compute: Callable[[], dict]


def _check(golden: list[GoldenValue], computed: dict, name: str) -> ExampleOutcome:
    outcome = ExampleOutcome(name=name, passed=True)
    for gv in golden:
        got = computed.get(gv.name, "<missing>")
        if gv.tolerance == 0.0:
            ok = got == gv.expected
        else:
            try:
                ok = abs(got - gv.expected) <= gv.tolerance
            except TypeError:
                ok = False
        detail = f"expected {gv.expected} got {got} [{gv.source}]"
        outcome.checks.append((gv.name, ok, detail))
        if not ok:
            outcome.passed = False
    return outcome


# ---------------------------------------------------------------- 8.3 instance

def three_state_emc_inputs():
    x = ChainSpec(
        initial=Distribution({"0": Fraction(1, 3), "1": Fraction(1, 3), "2": Fraction(1, 3)}),
        kernel=dense_kernel(["0", "1", "2"], [
            [0, Fraction(1, 2), Fraction(1, 2)],
            [0, Fraction(1, 2), Fraction(1, 2)],
            [1, 0, 0],
        ]),
    )
    y = ChainSpec(
        initial=Distribution({"0'": Fraction(1, 3), "1'": Fraction(2, 9), "2'": Fraction(4, 9)}),
        kernel=dense_kernel(["0'", "1'", "2'"], [
            [0, Fraction(1, 3), Fraction(2, 3)],
            [0, 0, 1],
            [Fraction(3, 4), Fraction(1, 4), 0],
        ]),
    )
    z = ChainSpec(
        initial=Distribution({"0": Fraction(1, 3), "1": Fraction(2, 3)}),
        kernel=dense_kernel(["0", "1"], [
            [0, 1],
            [Fraction(1, 2), Fraction(1, 2)],
        ]),
    )
    f = LumpingMap(assignment={"0": "0", "1": "1", "2": "1"}, codomain=z.space)
    g = LumpingMap(assignment={"0'": "0", "1'": "1", "2'": "1"}, codomain=z.space)
    return x, y, z, f, g


def _compute_three_state_emc() -> dict:
    x, y, z, f, g = three_state_emc_inputs()
    result = build_coupling(x, y, z, f, g)
    computed: dict = {}
    for pid in result.r_matrix.space.ids:
        computed[f"phi[{pid}]"] = result.phi[pid]
    for pid in result.space.ids:
        computed[f"pi[{pid}]"] = result.initial[pid]
    ids = list(result.space.ids)
    computed["states"] = ids
    matrix = [[result.kernel.entry(a, b) for b in ids] for a in ids]
    computed["kernel"] = matrix
    return computed


_THREE_STATE_GOLDEN = [
    GoldenValue("states", ["0|0'", "1|1'", "1|2'", "2|2'"], "published"),
    GoldenValue("phi[0|0']", Fraction(1), "published"),
    GoldenValue("phi[1|1']", Fraction(2), "published"),
    GoldenValue("phi[1|2']", Fraction(1, 2), "published"),
    GoldenValue("phi[2|1']", Fraction(0), "published"),
    GoldenValue("phi[2|2']", Fraction(3, 2), "published"),
    GoldenValue("pi[0|0']", Fraction(1, 3), "published"),
    GoldenValue("pi[1|1']", Fraction(2, 9), "published"),
    GoldenValue("pi[1|2']", Fraction(1, 9), "published"),
    GoldenValue("pi[2|2']", Fraction(1, 3), "published"),
    GoldenValue("kernel", [
        [Fraction(0), Fraction(1, 3), Fraction(1, 6), Fraction(1, 2)],
        [Fraction(0), Fraction(0), Fraction(1, 4), Fraction(3, 4)],
        [Fraction(0), Fraction(1), Fraction(0), Fraction(0)],
        [Fraction(1), Fraction(0), Fraction(0), Fraction(0)],
    ], "published"),
]


# ---------------------------------------------------------------- 8.1 instance

def batcave_inputs():
    x = ChainSpec(
        initial=Distribution({"2": Fraction(1)}),
        kernel=dense_kernel(["1", "2", "3", "4"], [
            [0, 1, 0, 0],
            [Fraction(1, 3), 0, Fraction(2, 3), 0],
            [0, Fraction(1, 4), 0, Fraction(3, 4)],
            [0, 0, 1, 0],
        ]),
    )
    y = ChainSpec(
        initial=Distribution({"1": Fraction(1)}),
        kernel=dense_kernel(["1", "2", "3", "4"], [
            [0, 1, 0, 0],
            [Fraction(1, 2), 0, Fraction(1, 2), 0],
            [0, Fraction(1, 2), 0, Fraction(1, 2)],
            [0, 0, 1, 0],
        ]),
    )
    # Best-effort homogeneous candidate for the common image: it matches
    # the image law up to horizon 2 and is refuted at horizon 3.
    z = ChainSpec(
        initial=Distribution({"0": Fraction(1)}),
        kernel=dense_kernel(["0", "1"], [
            [0, 1],
            [Fraction(1, 2), Fraction(1, 2)],
        ]),
    )
    f = LumpingMap(assignment={"1": "1", "2": "0", "3": "1", "4": "1"}, codomain=z.space)
    g = LumpingMap(assignment={"1": "0", "2": "1", "3": "1", "4": "1"}, codomain=z.space)
    return x, y, z, f, g


def _compute_batcave() -> dict:
    x, y, z, f, g = batcave_inputs()
    computed: dict = {}
    report = image_markov_test(x, f, horizon=4)
    computed["image-markov-up-to-4"] = report.is_markov_up_to
    if report.counterexample is not None:
        ce = report.counterexample
        computed["violation-time"] = ce.time
        computed["violation-history"] = list(ce.history)
        computed["markov-law[0]"] = ce.markov_law.get("0", Fraction(0))
        computed["history-law[0]"] = ce.history_law.get("0", Fraction(0))
    computed["image-deviation-k8"] = compare_image_processes(x, f, y, g, 8)
    try:
        build_coupling(x, y, z, f, g)
        computed["couple-error"] = "none"
    except LumpCoupleError as err:
        computed["couple-error"] = err.name
    return computed


_BATCAVE_GOLDEN = [
    GoldenValue("image-markov-up-to-4", False, "published"),
    GoldenValue("violation-time", 3, "published"),
    GoldenValue("violation-history", ["0", "1", "1", "1"], "published"),
    GoldenValue("markov-law[0]", Fraction(3, 8), "published"),
    GoldenValue("history-law[0]", Fraction(1, 4), "published"),
    GoldenValue("image-deviation-k8", Fraction(0), "published"),
    GoldenValue("couple-error", "HypothesisEvidenceFailed", "derived"),
]


# ---------------------------------------------------------------- 8.2 instance

def three_bit_shift_inputs():
    bits = [f"{i:03b}" for i in range(8)]
    rows = {}
    for s in bits:
        rows[s] = {s[1:] + "0": Fraction(1, 2), s[1:] + "1": Fraction(1, 2)}
    kernel = TransitionKernel(space=StateSpace(bits), rows=rows)
    uniform = Distribution({s: Fraction(1, 8) for s in bits})
    x = ChainSpec(initial=uniform, kernel=kernel)
    y = ChainSpec(initial=Distribution(dict(uniform.items())), kernel=kernel)
    z = ChainSpec(
        initial=Distribution({"0": Fraction(1, 2), "1": Fraction(1, 2)}),
        kernel=dense_kernel(["0", "1"], [
            [Fraction(1, 2), Fraction(1, 2)],
            [Fraction(1, 2), Fraction(1, 2)],
        ]),
    )
    f = LumpingMap(assignment={s: s[1] for s in bits}, codomain=z.space)
    g = LumpingMap(assignment={s: s[1] for s in bits}, codomain=z.space)
    return x, y, z, f, g


def _diagonal_mass(result, t: int):
    dist = marginal_at(result.chain(), t)
    mass = numeric.zero()
    for pid, v in dist.items():
        a, b = split_id(pid)
        if a == b:
            mass += v
    return mass


def _compute_three_bit_shift() -> dict:
    x, y, z, f, g = three_bit_shift_inputs()
    computed: dict = {}
    result = build_coupling(x, y, z, f, g)
    phi_ok = all(
        result.phi[pid] == (Fraction(2) if split_id(pid)[0][2] == split_id(pid)[1][2] else Fraction(0))
        for pid in result.r_matrix.space.ids
    )
    computed["phi-is-2-on-matching-ends"] = phi_ok
    computed["coupled-state-count"] = len(result.space)
    for t in range(6):
        computed[f"equal-mass-t{t}"] = _diagonal_mass(result, t)
    stationary = build_stationary_coupling(x, y, z, f, g)
    computed["stationary-state-count"] = len(stationary.space)
    computed["stationary-is-diagonal"] = all(
        split_id(pid)[0] == split_id(pid)[1] for pid in stationary.space.ids
    )
    computed["stationary-pi-uniform"] = all(
        stationary.initial[pid] == Fraction(1, 8) for pid in stationary.space.ids
    )
    return computed


_THREE_BIT_GOLDEN = [
    GoldenValue("phi-is-2-on-matching-ends", True, "published"),
    GoldenValue("coupled-state-count", 16, "derived"),
    GoldenValue("equal-mass-t0", Fraction(1, 2), "published"),
    GoldenValue("equal-mass-t1", Fraction(1), "published"),
    GoldenValue("equal-mass-t2", Fraction(1), "published"),
    GoldenValue("equal-mass-t3", Fraction(1), "published"),
    GoldenValue("equal-mass-t4", Fraction(1), "published"),
    GoldenValue("equal-mass-t5", Fraction(1), "published"),
    GoldenValue("stationary-state-count", 8, "published"),
    GoldenValue("stationary-is-diagonal", True, "published"),
    GoldenValue("stationary-pi-uniform", True, "published"),
]


# ---------------------------------------------------------------- 8.4 instance

def biased_walk_inputs(p):
    """Biased walk on the integers and its absolute-value image chain."""
    q = 1 - p

    def walk_row(s: str):
        n = int(s)
        return [(str(n + 1), p), (str(n - 1), q)]

    def abs_row(s: str):
        z = int(s)
        if z == 0:
            return [("1", numeric.one())]
        up = (p ** (z + 1) + q ** (z + 1)) / (p ** z + q ** z)
        down = (p ** z * q + q ** z * p) / (p ** z + q ** z)
        return [(str(z + 1), up), (str(z - 1), down)]

    x = ChainSpec(initial=Distribution({"0": numeric.one()}),
                  kernel=TransitionKernel(generator=walk_row))
    y = ChainSpec(initial=Distribution({"0": numeric.one()}),
                  kernel=TransitionKernel(generator=walk_row))
    z = ChainSpec(initial=Distribution({"0": numeric.one()}),
                  kernel=TransitionKernel(generator=abs_row))
    absmap = LumpingMap(func=lambda s: str(abs(int(s))))
    return x, y, z, absmap


def walk_phi_closed_form(a: int, b: int, p):
    """Published closed forms for the walk coupling's fixed vector."""
    q = 1 - p
    n = abs(a)
    if n == 0:
        return 1.0
    if a == b == n:
        return (p**n + q**n) * (2 * p**n - q**n) / (2 * p ** (2 * n))
    if a == -b:
        return (p**n + q**n) / (2 * p**n)
    return (p**n + q**n) / (2 * q**n)


def _compute_biased_walk() -> dict:
    p = 2.0 / 3.0
    x, y, z, absmap = biased_walk_inputs(p)
    result = build_coupling(x, y, z, absmap, absmap, ball_depth=12)
    computed: dict = {}
    for n in range(4):
        for a, b in {(n, n), (n, -n), (-n, n), (-n, -n)}:
            pid = join_id((str(a), str(b)))
            computed[f"phi[{pid}]"] = result.phi[pid]
    row0 = dict(result.kernel.row("0|0"))
    computed["P[0|0 -> 1|1]"] = row0.get("1|1", 0.0)
    computed["P[0|0 -> 1|-1]"] = row0.get("1|-1", 0.0)
    computed["P[0|0 -> -1|1]"] = row0.get("-1|1", 0.0)
    computed["P[0|0 -> -1|-1]"] = row0.get("-1|-1", 0.0)
    computed["P[1|1 -> 2|2]"] = dict(result.kernel.row("1|1")).get("2|2", 0.0)
    computed["P[-1|1 -> -2|2]"] = dict(result.kernel.row("-1|1")).get("-2|2", 0.0)
    computed["P[-1|-1 -> 0|0]"] = dict(result.kernel.row("-1|-1")).get("0|0", 0.0)
    return computed


def _walk_golden() -> list[GoldenValue]:
    p = 2.0 / 3.0
    tol = 1e-9
    golden = []
    for n in range(4):
        for a, b in sorted({(n, n), (n, -n), (-n, n), (-n, -n)}):
            pid = join_id((str(a), str(b)))
            golden.append(GoldenValue(
                f"phi[{pid}]", walk_phi_closed_form(a, b, p), "published", tolerance=tol))
    q = 1 - p
    golden.extend([
        GoldenValue("P[0|0 -> 1|1]", p - q / 2, "published", tolerance=tol),
        GoldenValue("P[0|0 -> 1|-1]", q / 2, "published", tolerance=tol),
        GoldenValue("P[0|0 -> -1|1]", q / 2, "published", tolerance=tol),
        GoldenValue("P[0|0 -> -1|-1]", q / 2, "published", tolerance=tol),
        GoldenValue("P[1|1 -> 2|2]", (2 * p**2 - q**2) / (2 * p - q), "published", tolerance=tol),
        GoldenValue("P[-1|1 -> -2|2]", q, "published", tolerance=tol),
        GoldenValue("P[-1|-1 -> 0|0]", p, "published", tolerance=tol),
    ])
    return golden


EXAMPLES: dict[str, ExampleCase] = {
    "three-state-emc": ExampleCase(
        name="three-state-emc",
        description="3-state chains over a 2-state image: exact Markovian coupling tables",
        mode=numeric.EXACT,
        golden=_THREE_STATE_GOLDEN,
        compute=_compute_three_state_emc,
    ),
    "batcave": ExampleCase(
        name="batcave",
        description="non-Markov common image: minimal refusal instance",
        mode=numeric.EXACT,
        golden=_BATCAVE_GOLDEN,
        compute=_compute_batcave,
    ),
    "three-bit-shift": ExampleCase(
        name="three-bit-shift",
        description="bit-shift windows: stationary marginals, non-stationary coupling",
        mode=numeric.EXACT,
        golden=_THREE_BIT_GOLDEN,
        compute=_compute_three_bit_shift,
    ),
    "biased-walk": ExampleCase(
        name="biased-walk",
        description="biased walks on the integers coupled through absolute value",
        mode=numeric.FLOAT,
        golden=_walk_golden(),
        compute=_compute_biased_walk,
    ),
}


def run_example(name: str) -> ExampleOutcome:
    """Execute one bundled example and diff it against its golden outputs."""
    case = EXAMPLES[name]
    with numeric.numeric_mode(case.mode):
        computed = case.compute()
    return _check(case.golden, computed, name)
