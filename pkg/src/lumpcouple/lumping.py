"""Image-process analysis and the three lumping criteria.

Weak lumping is certified by finite-horizon evidence only (the report
says "Markov up to k", never unconditionally).  Strong lumping is the
fibre-sum constancy criterion; exact lumping is the fibre-distribution
intertwining equation.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable

from . import numeric
from .chains import (
    ChainSpec,
    Distribution,
    FddTable,
    StateSpace,
    TransitionKernel,
    fdd,
    stationary_distribution,
    DEFAULT_TRAJECTORY_CAP,
)
from .errors import ShapeMismatch


class LumpingMap:
    """A surjective state map with fibre indexing.

    Finite maps carry explicit domain/codomain spaces and fibres.  Maps
    over countable domains are backed by a callable and expose only
    ``apply``.
    """

    def __init__(
        self,
        assignment: dict[str, str] | None = None,
        func: Callable[[str], str] | None = None,
        domain: StateSpace | None = None,
        codomain: StateSpace | None = None,
    ):
        if (assignment is None) == (func is None):
            raise ValueError("provide exactly one of assignment or func")
        self.assignment = assignment
        self.func = func
        if assignment is not None:
            self.domain = domain or StateSpace(assignment.keys())
            if codomain is None:
                codomain = StateSpace(sorted(set(assignment.values())))
            self.codomain = codomain
            missing = [s for s in self.domain if s not in assignment]
            if missing:
                raise ValueError(f"map is not total on its domain: {missing}")
            images = set(assignment.values())
            extra = [c for c in self.codomain if c not in images]
            if extra:
                raise ValueError(f"map is not surjective, unused codomain states: {extra}")
            self.fibres: dict[str, list[str]] = {c: [] for c in self.codomain}
            for s in self.domain:
                self.fibres[assignment[s]].append(s)
        else:
            self.domain = domain
            self.codomain = codomain
            self.fibres = None

    @property
    def is_finite(self) -> bool:
        return self.assignment is not None

    def apply(self, state: str) -> str:
        if self.assignment is not None:
            return self.assignment[state]
        return self.func(state)

    def __call__(self, state: str) -> str:
        return self.apply(state)

    def fibre(self, c: str) -> list[str]:
        if self.fibres is None:
            raise ValueError("fibres are only available for finite maps")
        return self.fibres[c]


def identity_map(space: StateSpace) -> LumpingMap:
    return LumpingMap(assignment={s: s for s in space}, domain=space, codomain=space)


@dataclass
class ExactLumpingWitness:
    """Fibre-supported distributions (nu_z) and image kernel Q."""

    nu: dict[str, Distribution]
    image_kernel: TransitionKernel

    def codomain(self) -> StateSpace:
        return self.image_kernel.space


@dataclass
class MarkovCounterexample:
    time: int
    history: tuple[str, ...]
    state: str
    markov_law: dict[str, numeric.Scalar]
    history_law: dict[str, numeric.Scalar]
    deviation: numeric.Scalar


@dataclass
class ImageMarkovReport:
    horizon: int
    is_markov_up_to: bool
    counterexample: MarkovCounterexample | None = None


@dataclass
class DynkinCounterexample:
    z: str
    z_next: str
    x1: str
    x2: str
    sum1: numeric.Scalar
    sum2: numeric.Scalar


@dataclass
class DynkinReport:
    is_strong: bool
    image_kernel: TransitionKernel | None = None
    counterexample: DynkinCounterexample | None = None


def image_fdd(chain: ChainSpec, lmap: LumpingMap, horizon: int,
              cap: int = DEFAULT_TRAJECTORY_CAP) -> FddTable:
    """Law of the image process (f(X_0), ..., f(X_horizon))."""
    return fdd(chain, horizon, cap=cap).pushforward(lmap.apply)


def compare_image_processes(
    chain_a: ChainSpec, map_a: LumpingMap,
    chain_b: ChainSpec, map_b: LumpingMap,
    horizon: int, cap: int = DEFAULT_TRAJECTORY_CAP,
) -> numeric.Scalar:
    """Sup over horizon-k trajectories of the two image-law difference."""
    ta = image_fdd(chain_a, map_a, horizon, cap=cap)
    tb = image_fdd(chain_b, map_b, horizon, cap=cap)
    dev = numeric.zero()
    for traj in set(ta.entries) | set(tb.entries):
        d = abs(ta.entries.get(traj, numeric.zero()) - tb.entries.get(traj, numeric.zero()))
        if d > dev:
            dev = d
    return dev


def compare_image_to_chain(chain: ChainSpec, lmap: LumpingMap, image: ChainSpec,
                           horizon: int, cap: int = DEFAULT_TRAJECTORY_CAP) -> numeric.Scalar:
    """Sup deviation between f(chain) and the given image chain up to the horizon.

    A result of 0 certifies distributional equality up to the horizon,
    nothing beyond it.
    """

    def ident(s: str) -> str:
        return s

    return compare_image_processes(
        chain, lmap, image, LumpingMap(func=ident), horizon, cap=cap
    )


def image_markov_test(chain: ChainSpec, lmap: LumpingMap, horizon: int,
                      cap: int = DEFAULT_TRAJECTORY_CAP) -> ImageMarkovReport:
    """Test the Markov property of the image process up to a horizon.

    For each time t < horizon, the next-step law conditioned on a full
    positive-probability image history is compared with the law
    conditioned on the current image state alone (all histories at time
    t pooled by their last state).  The first time with a violation is
    reported, with the history of maximal deviation as witness.
    Homogeneity across times is not part of this check.
    """
    table = image_fdd(chain, lmap, horizon, cap=cap)
    tol = numeric.eps()

    # Prefix tables at each length, from one enumeration.
    prefix: list[dict[tuple[str, ...], numeric.Scalar]] = [dict() for _ in range(horizon + 1)]
    prefix[horizon] = table.entries
    for t in range(horizon, 0, -1):
        agg: dict[tuple[str, ...], numeric.Scalar] = {}
        for traj, p in prefix[t].items():
            key = traj[:-1]
            agg[key] = agg.get(key, numeric.zero()) + p
        prefix[t - 1] = agg

    for t in range(horizon):
        # Pooled next-step law per current state at time t.
        pooled_num: dict[str, dict[str, numeric.Scalar]] = {}
        pooled_den: dict[str, numeric.Scalar] = {}
        for traj, p in prefix[t + 1].items():
            c, nxt = traj[-2], traj[-1]
            bucket = pooled_num.setdefault(c, {})
            bucket[nxt] = bucket.get(nxt, numeric.zero()) + p
        for hist, p in prefix[t].items():
            c = hist[-1]
            pooled_den[c] = pooled_den.get(c, numeric.zero()) + p
        pooled = {
            c: {nxt: v / pooled_den[c] for nxt, v in bucket.items()}
            for c, bucket in pooled_num.items()
        }

        # Conditional law per full history; track the worst violation at this t.
        worst: MarkovCounterexample | None = None
        hist_next: dict[tuple[str, ...], dict[str, numeric.Scalar]] = {}
        for traj, p in prefix[t + 1].items():
            bucket = hist_next.setdefault(traj[:-1], {})
            bucket[traj[-1]] = bucket.get(traj[-1], numeric.zero()) + p
        for hist in sorted(hist_next):
            p_hist = prefix[t][hist]
            law = {nxt: v / p_hist for nxt, v in hist_next[hist].items()}
            base = pooled[hist[-1]]
            dev = numeric.zero()
            for nxt in set(law) | set(base):
                d = abs(law.get(nxt, numeric.zero()) - base.get(nxt, numeric.zero()))
                if d > dev:
                    dev = d
            if dev > tol and (worst is None or dev >= worst.deviation):
                worst = MarkovCounterexample(
                    time=t, history=hist, state=hist[-1],
                    markov_law=base, history_law=law, deviation=dev,
                )
        if worst is not None:
            return ImageMarkovReport(horizon=horizon, is_markov_up_to=False,
                                     counterexample=worst)
    return ImageMarkovReport(horizon=horizon, is_markov_up_to=True)


def dynkin_check(kernel: TransitionKernel, lmap: LumpingMap) -> DynkinReport:
    """Fibre-sum constancy criterion for strong lumping.

    Strong iff for every pair of image states (z, z') the mass sent into
    the fibre of z' is the same from every state of the fibre of z; the
    constants then form the image kernel.
    """
    if not kernel.is_finite or not lmap.is_finite:
        raise ValueError("dynkin_check requires a finite kernel and map")
    tol = numeric.eps()
    rows: dict[str, dict[str, numeric.Scalar]] = {}
    fibre_of = lmap.assignment
    for z in lmap.codomain:
        fibre = lmap.fibre(z)
        sums: list[dict[str, numeric.Scalar]] = []
        for x in fibre:
            acc: dict[str, numeric.Scalar] = {}
            for x2, v in kernel.row(x).items():
                z2 = fibre_of[x2]
                acc[z2] = acc.get(z2, numeric.zero()) + v
            sums.append(acc)
        ref = sums[0]
        for i in range(1, len(sums)):
            for z2 in set(ref) | set(sums[i]):
                a = ref.get(z2, numeric.zero())
                b = sums[i].get(z2, numeric.zero())
                if abs(a - b) > tol:
                    return DynkinReport(
                        is_strong=False,
                        counterexample=DynkinCounterexample(
                            z=z, z_next=z2, x1=fibre[0], x2=fibre[i], sum1=a, sum2=b
                        ),
                    )
        rows[z] = {z2: v for z2, v in ref.items() if v != 0}
    image = TransitionKernel(space=lmap.codomain, rows=rows)
    return DynkinReport(is_strong=True, image_kernel=image)


def exact_lumping_verify(
    kernel: TransitionKernel,
    lmap: LumpingMap,
    witness: ExactLumpingWitness,
    sources: list[str] | None = None,
) -> numeric.Scalar:
    """Max residual of the fibre-distribution intertwining equation.

    For every image pair (z, z') and every x' in the fibre of z',
    compares sum_x nu_z(x) P(x, x') with Q(z, z') nu_{z'}(x'); a zero
    residual certifies exact lumpability with this witness.  ``sources``
    restricts the source image states z, for windowed restrictions of
    countable chains whose frontier rows are incomplete.
    """
    if not kernel.is_finite or not lmap.is_finite:
        raise ValueError("exact_lumping_verify requires a finite kernel and map")
    if set(witness.nu) != set(lmap.codomain.states):
        raise ShapeMismatch("witness fibre family does not match the map codomain")
    if witness.image_kernel.space != lmap.codomain:
        raise ShapeMismatch("witness image kernel is not indexed by the map codomain")
    for z, nu_z in witness.nu.items():
        outside = [x for x in nu_z.support() if lmap.apply(x) != z]
        if outside:
            raise ShapeMismatch(f"nu_{z} has mass outside its fibre: {outside}")

    residual = numeric.zero()
    source_states = list(lmap.codomain) if sources is None else list(sources)
    for z in source_states:
        # Left side: the image under P of the fibre distribution at z.
        lhs: dict[str, numeric.Scalar] = {}
        for x, w in witness.nu[z].items():
            for x2, v in kernel.row(x).items():
                lhs[x2] = lhs.get(x2, numeric.zero()) + w * v
        for z2 in lmap.codomain:
            q = witness.image_kernel.entry(z, z2)
            for x2 in lmap.fibre(z2):
                want = q * witness.nu[z2][x2]
                got = lhs.get(x2, numeric.zero())
                d = abs(got - want)
                if d > residual:
                    residual = d
    return residual


def exact_lumping_discover(chain: ChainSpec, lmap: LumpingMap) -> ExactLumpingWitness | None:
    """Search the canonical stationary-fibre candidate for an exact-lumping witness.

    The candidate takes nu_z as the stationary law restricted to the
    fibre of z and renormalized, reads Q off the lumping equation at one
    representative per fibre, and verifies.  Returns None if the
    candidate fails; that does not prove non-exactness.
    """
    pi = stationary_distribution(chain.kernel)
    nu: dict[str, Distribution] = {}
    for z in lmap.codomain:
        restricted = pi.restrict(lmap.fibre(z))
        if not restricted.support():
            return None
        nu[z] = restricted.normalize()

    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for z in lmap.codomain:
        lhs: dict[str, numeric.Scalar] = {}
        for x, w in nu[z].items():
            for x2, v in chain.kernel.row(x).items():
                lhs[x2] = lhs.get(x2, numeric.zero()) + w * v
        row: dict[str, numeric.Scalar] = {}
        for z2 in lmap.codomain:
            rep = max(lmap.fibre(z2), key=lambda x: nu[z2][x])
            q = lhs.get(rep, numeric.zero()) / nu[z2][rep]
            if q != 0:
                row[z2] = q
        rows[z] = row
    witness = ExactLumpingWitness(
        nu=nu, image_kernel=TransitionKernel(space=lmap.codomain, rows=rows)
    )
    if exact_lumping_verify(chain.kernel, lmap, witness) <= numeric.eps():
        return witness
    return None


def initial_law_admissible(initial: Distribution, lmap: LumpingMap,
                           witness: ExactLumpingWitness) -> bool:
    """Whether the initial law is a convex combination of the witness family.

    The nu_z have disjoint supports, so the only candidate combination
    weights are the fibre masses of the initial law.
    """
    tol = numeric.eps()
    for z in lmap.codomain:
        weight = sum((initial[x] for x in lmap.fibre(z)), numeric.zero())
        for x in lmap.fibre(z):
            if abs(initial[x] - weight * witness.nu[z][x]) > tol:
                return False
    return True


def _random_convex_weights(rng: random.Random, n: int) -> list[numeric.Scalar]:
    """Strictly positive rational weights summing to one (exact in exact mode)."""
    raw = [rng.randint(1, 4) for _ in range(n)]
    total = sum(raw)
    if numeric.is_exact():
        from fractions import Fraction

        return [Fraction(r, total) for r in raw]
    return [r / total for r in raw]


def lift_strong(
    image_chain: ChainSpec,
    fibre_sizes: dict[str, int],
    seed: int,
) -> tuple[ChainSpec, LumpingMap]:
    """Random lift of a finite chain along prescribed fibre sizes.

    Each image state c is split into fibre_sizes[c] states; every row of
    the lift distributes the image mass Q(c, c') across the fibre of c'
    with random strictly positive convex weights, so the fibre sums
    reproduce Q exactly and the lift passes dynkin_check by construction.
    """
    if not image_chain.is_finite:
        raise ValueError("lift_strong requires a finite image chain")
    rng = random.Random(seed)
    assignment: dict[str, str] = {}
    lifted_states: list[str] = []
    for c in image_chain.space:
        size = fibre_sizes.get(c, 1)
        if size < 1:
            raise ValueError(f"fibre size for {c} must be >= 1")
        for i in range(size):
            s = c if size == 1 else f"{c}#{i}"
            assignment[s] = c
            lifted_states.append(s)
    lmap = LumpingMap(assignment=assignment,
                      domain=StateSpace(lifted_states),
                      codomain=image_chain.space)

    rows: dict[str, dict[str, numeric.Scalar]] = {}
    for x in lifted_states:
        c = assignment[x]
        row: dict[str, numeric.Scalar] = {}
        for c2, q in image_chain.kernel.row(c).items():
            fibre = lmap.fibre(c2)
            for t, w in zip(fibre, _random_convex_weights(rng, len(fibre))):
                row[t] = q * w
        rows[x] = row
    kernel = TransitionKernel(space=lmap.domain, rows=rows)

    initial: dict[str, numeric.Scalar] = {}
    for c, p in image_chain.initial.items():
        fibre = lmap.fibre(c)
        for t, w in zip(fibre, _random_convex_weights(rng, len(fibre))):
            initial[t] = p * w
    chain = ChainSpec(initial=Distribution(initial), kernel=kernel)
    return chain, lmap
