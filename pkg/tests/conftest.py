import random
from fractions import Fraction

import pytest

from lumpcouple import numeric
from lumpcouple.chains import ChainSpec, Distribution, StateSpace, TransitionKernel, stationary_distribution, time_reversal
from lumpcouple.lumping import exact_lumping_discover, lift_strong


@pytest.fixture(autouse=True)
def exact_mode():
    """Rational arithmetic is the reference path; float tests opt in locally."""
    with numeric.numeric_mode(numeric.EXACT):
        yield


def rational_probs(rng: random.Random, n: int) -> list[Fraction]:
    weights = [rng.randint(1, 4) for _ in range(n)]
    total = sum(weights)
    return [Fraction(w, total) for w in weights]


def random_image_chain(rng: random.Random, n_states: int | None = None,
                       reversible: bool = False, stationary_start: bool = False) -> ChainSpec:
    """Small irreducible image chain with rational entries.

    The non-reversible form is a cycle plus one extra arc per state; the
    reversible form normalizes a symmetric positive weight matrix.
    """
    n = n_states if n_states is not None else rng.randint(2, 3)
    states = [f"z{i}" for i in range(n)]
    rows: dict[str, dict[str, Fraction]] = {}
    if reversible:
        w = [[0] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                w[i][j] = w[j][i] = rng.randint(1, 4) if j > i else rng.randint(0, 2)
        for i, s in enumerate(states):
            tot = sum(w[i])
            rows[s] = {states[j]: Fraction(w[i][j], tot) for j in range(n) if w[i][j]}
    else:
        for i, s in enumerate(states):
            succ = {(i + 1) % n, rng.randrange(n)}
            probs = rational_probs(rng, len(succ))
            rows[s] = {states[j]: p for j, p in zip(sorted(succ), probs)}
    kernel = TransitionKernel(space=StateSpace(states), rows=rows)
    if stationary_start:
        initial = stationary_distribution(kernel)
    else:
        initial = Distribution(dict(zip(states, rational_probs(rng, n))))
    return ChainSpec(initial=initial, kernel=kernel)


def random_fibre_sizes(rng: random.Random, space, max_total: int = 5) -> dict[str, int]:
    """Fibre sizes <= 3 with a cap on the lifted state count (keeps fdd budgets sane)."""
    n = len(space)
    sizes = {}
    budget = max_total
    for i, c in enumerate(space):
        remaining_states = n - i - 1
        hi = min(3, budget - remaining_states)
        sizes[c] = rng.randint(1, max(1, hi))
        budget -= sizes[c]
    return sizes


def strong_strong_instance(seed: int):
    """Two independent random strong lifts of one random image chain."""
    rng = random.Random(seed)
    z = random_image_chain(rng)
    x, f = lift_strong(z, random_fibre_sizes(rng, z.space), seed=rng.randrange(2**30))
    y, g = lift_strong(z, random_fibre_sizes(rng, z.space), seed=rng.randrange(2**30))
    return x, f, y, g, z


def strong_exact_instance(seed: int, reversible: bool = False):
    """Strong first chain and exact second chain over one stationary image.

    The exact side is built by reversing a strong lift of the reversed
    image chain, which is exactly lumpable with the stationary-fibre
    witness; the image of the reversed lift is the original image chain.
    """
    rng = random.Random(seed)
    z = random_image_chain(rng, reversible=reversible, stationary_start=True)

    x0, f = lift_strong(z, random_fibre_sizes(rng, z.space), seed=rng.randrange(2**30))
    pi_x = stationary_distribution(x0.kernel)
    x = ChainSpec(initial=pi_x, kernel=x0.kernel)

    if reversible:
        z_rev = z
    else:
        z_rev = ChainSpec(initial=z.initial,
                          kernel=time_reversal(z.kernel, z.initial))
    y0, g = lift_strong(z_rev, random_fibre_sizes(rng, z.space), seed=rng.randrange(2**30))
    pi_y = stationary_distribution(y0.kernel)
    y = ChainSpec(initial=pi_y, kernel=time_reversal(y0.kernel, pi_y))

    witness = exact_lumping_discover(y, g)
    assert witness is not None, "reversed strong lift must be exactly lumpable"
    return x, f, y, g, z, witness
