import random
from fractions import Fraction

import pytest

from lumpcouple import numeric
from lumpcouple.chains import ChainSpec, Distribution, StateSpace, TransitionKernel, dense_kernel, fdd, stationary_distribution, time_reversal
from lumpcouple.errors import ShapeMismatch
from lumpcouple.lumping import (
    ExactLumpingWitness,
    LumpingMap,
    compare_image_processes,
    compare_image_to_chain,
    dynkin_check,
    exact_lumping_discover,
    exact_lumping_verify,
    identity_map,
    image_fdd,
    image_markov_test,
    initial_law_admissible,
    lift_strong,
)
from lumpcouple.registry import batcave_inputs, biased_walk_inputs, three_state_emc_inputs
from conftest import rational_probs, strong_strong_instance

F = Fraction


def emc_witness():
    _, _, z, f, _ = three_state_emc_inputs()
    nu = {
        "0": Distribution({"0": F(1)}),
        "1": Distribution({"1": F(1, 2), "2": F(1, 2)}),
    }
    return ExactLumpingWitness(nu=nu, image_kernel=z.kernel), f


class TestImageFdd:
    def test_identity_map_is_noop(self):
        x, _, _, _, _ = three_state_emc_inputs()
        assert image_fdd(x, identity_map(x.space), 3).entries == fdd(x, 3).entries

    def test_first_step_image(self):
        x, _, _, f, _ = batcave_inputs()
        table = image_fdd(x, f, 1)
        assert table.entries == {("0", "1"): F(1)}

    def test_constant_map(self):
        x, _, _, _, _ = three_state_emc_inputs()
        const = LumpingMap(assignment={s: "c" for s in x.space})
        table = image_fdd(x, const, 4)
        assert table.entries == {("c",) * 5: F(1)}


class TestCompareImages:
    def test_equal_return_time_instances_agree_to_horizon_8(self):
        x, y, _, f, g = batcave_inputs()
        assert compare_image_processes(x, f, y, g, 8) == 0

    def test_chain_vs_itself(self):
        x, _, _, _, _ = three_state_emc_inputs()
        ident = identity_map(x.space)
        for k in (0, 1, 4):
            assert compare_image_to_chain(x, ident, x, k) == 0

    def test_exact_instance_matches_image_chain(self):
        x, _, z, f, _ = three_state_emc_inputs()
        assert compare_image_to_chain(x, f, z, 4) == 0

    def test_detects_mismatch(self):
        x, _, z, f, _ = batcave_inputs()
        assert compare_image_to_chain(x, f, z, 2) == 0
        assert compare_image_to_chain(x, f, z, 3) > 0


class TestImageMarkov:
    def test_refusal_instance_violation(self):
        x, _, _, f, _ = batcave_inputs()
        report = image_markov_test(x, f, 4)
        assert not report.is_markov_up_to
        ce = report.counterexample
        assert ce.time == 3
        assert ce.history == ("0", "1", "1", "1")
        assert ce.markov_law["0"] == F(3, 8)
        assert ce.history_law["0"] == F(1, 4)

    def test_minimal_history_length(self):
        x, _, _, f, _ = batcave_inputs()
        assert image_markov_test(x, f, 3).is_markov_up_to

    def test_identity_map_always_markov(self):
        x, _, _, _, _ = three_state_emc_inputs()
        for k in (1, 3, 5):
            assert image_markov_test(x, identity_map(x.space), k).is_markov_up_to

    def test_absolute_value_of_walk_is_markov(self):
        with numeric.numeric_mode(numeric.FLOAT):
            x, _, _, absmap = biased_walk_inputs(2 / 3)
            report = image_markov_test(x, absmap, 5)
            assert report.is_markov_up_to


class TestDynkin:
    def test_identity_map_strong(self):
        x, _, _, _, _ = three_state_emc_inputs()
        report = dynkin_check(x.kernel, identity_map(x.space))
        assert report.is_strong
        for s in x.space.states:
            assert report.image_kernel.row(s) == x.kernel.row(s)

    def test_emc_instance_not_strong(self):
        x, _, _, f, _ = three_state_emc_inputs()
        report = dynkin_check(x.kernel, f)
        assert not report.is_strong
        ce = report.counterexample
        assert ce.z == "1" and ce.z_next == "1"
        assert {ce.sum1, ce.sum2} == {F(1), F(0)}

    def test_constant_map_strong(self):
        x, _, _, _, _ = three_state_emc_inputs()
        const = LumpingMap(assignment={s: "c" for s in x.space})
        report = dynkin_check(x.kernel, const)
        assert report.is_strong
        assert report.image_kernel.row("c") == {"c": F(1)}

    def test_strong_image_reproduces_chain_for_random_initials(self):
        rng = random.Random(5)
        x, f, _, _, z = strong_strong_instance(11)
        report = dynkin_check(x.kernel, f)
        assert report.is_strong
        for _ in range(3):
            probs = rational_probs(rng, len(x.space))
            chain = ChainSpec(initial=Distribution(dict(zip(x.space.states, probs))),
                              kernel=x.kernel)
            pushed = Distribution({})
            acc: dict[str, Fraction] = {}
            for s, v in chain.initial.items():
                c = f.apply(s)
                acc[c] = acc.get(c, F(0)) + v
            image = ChainSpec(initial=Distribution(acc), kernel=report.image_kernel)
            assert compare_image_to_chain(chain, f, image, 4) == 0


class TestExactVerify:
    def test_published_witness_has_zero_residual(self):
        x, _, _, _, _ = three_state_emc_inputs()
        witness, f = emc_witness()
        assert exact_lumping_verify(x.kernel, f, witness) == 0

    def test_perturbed_witness_fails(self):
        x, _, z, f, _ = three_state_emc_inputs()
        nu = {
            "0": Distribution({"0": F(1)}),
            "1": Distribution({"1": F(3, 5), "2": F(2, 5)}),
        }
        witness = ExactLumpingWitness(nu=nu, image_kernel=z.kernel)
        assert exact_lumping_verify(x.kernel, f, witness) > 0

    def test_windowed_walk_interior_residual_zero(self):
        p, q = F(2, 3), F(1, 3)
        window = 6
        states = [str(n) for n in range(-window, window + 1)]
        rows = {}
        for n in range(-window + 1, window):
            rows[str(n)] = {str(n + 1): p, str(n - 1): q}
        kernel = TransitionKernel(space=StateSpace(states), rows=rows)
        lmap = LumpingMap(assignment={s: str(abs(int(s))) for s in states})
        nu = {}
        for z in range(window + 1):
            if z == 0:
                nu["0"] = Distribution({"0": F(1)})
            else:
                tot = p**z + q**z
                nu[str(z)] = Distribution({str(z): p**z / tot, str(-z): q**z / tot})
        q_rows = {}
        for z in range(window):
            if z == 0:
                q_rows["0"] = {"1": F(1)}
            else:
                tot = p**z + q**z
                q_rows[str(z)] = {
                    str(z + 1): (p ** (z + 1) + q ** (z + 1)) / tot,
                    str(z - 1): (p**z * q + q**z * p) / tot,
                }
        image = TransitionKernel(space=StateSpace([str(z) for z in range(window + 1)]),
                                 rows=q_rows)
        witness = ExactLumpingWitness(nu=nu, image_kernel=image)
        interior = [str(z) for z in range(window)]
        assert exact_lumping_verify(kernel, lmap, witness, sources=interior) == 0

    def test_shape_mismatch_rejected(self):
        x, _, z, f, _ = three_state_emc_inputs()
        nu = {"0": Distribution({"0": F(1)}), "1": Distribution({"0": F(1)})}
        witness = ExactLumpingWitness(nu=nu, image_kernel=z.kernel)
        with pytest.raises(ShapeMismatch):
            exact_lumping_verify(x.kernel, f, witness)


class TestExactDiscover:
    def test_stationary_fibre_candidate_found(self):
        x, _, z, f, _ = three_state_emc_inputs()
        witness = exact_lumping_discover(x, f)
        assert witness is not None
        assert witness.nu["1"].probs == {"1": F(1, 2), "2": F(1, 2)}
        assert witness.nu["0"].probs == {"0": F(1)}
        for c in ("0", "1"):
            assert witness.image_kernel.row(c) == z.kernel.row(c)
        assert initial_law_admissible(x.initial, f, witness)

    def test_identity_map_always_succeeds(self):
        x, _, _, _, _ = three_state_emc_inputs()
        witness = exact_lumping_discover(x, identity_map(x.space))
        assert witness is not None
        for s in x.space.states:
            assert witness.nu[s].probs == {s: F(1)}
            assert witness.image_kernel.row(s) == x.kernel.row(s)

    def test_non_markov_image_has_no_witness(self):
        x, _, _, f, _ = batcave_inputs()
        assert exact_lumping_discover(x, f) is None

    def test_inadmissible_initial_law(self):
        x, _, _, f, _ = three_state_emc_inputs()
        witness = exact_lumping_discover(x, f)
        shifted = ChainSpec(initial=Distribution({"1": F(1)}), kernel=x.kernel)
        assert not initial_law_admissible(shifted.initial, f, witness)


class TestLiftStrong:
    def test_unit_fibres_reproduce_image(self):
        _, _, z, _, _ = three_state_emc_inputs()
        lifted, lmap = lift_strong(z, {c: 1 for c in z.space}, seed=1)
        assert list(lifted.space.states) == list(z.space.states)
        for s in z.space.states:
            assert lifted.kernel.row(s) == z.kernel.row(s)

    @pytest.mark.parametrize("seed", range(8))
    def test_lift_passes_dynkin(self, seed):
        rng = random.Random(seed)
        _, _, z, _, _ = three_state_emc_inputs()
        sizes = {c: rng.randint(1, 3) for c in z.space}
        lifted, lmap = lift_strong(z, sizes, seed=seed)
        report = dynkin_check(lifted.kernel, lmap)
        assert report.is_strong
        for c in z.space.states:
            assert report.image_kernel.row(c) == z.kernel.row(c)

    def test_lift_image_process_matches_image_chain(self):
        _, _, z, _, _ = three_state_emc_inputs()
        lifted, lmap = lift_strong(z, {"0": 1, "1": 2}, seed=42)
        assert compare_image_to_chain(lifted, lmap, z, 5) == 0


class TestStrongExactDuality:
    def test_strong_iff_reversed_exact(self):
        # Positive direction on a random strong lift, negative on the
        # 3-state instance whose map is exact but not strong.
        x, f, _, _, _ = strong_strong_instance(3)
        pi = stationary_distribution(x.kernel)
        rev = time_reversal(x.kernel, pi)
        nu = {c: pi.restrict(f.fibre(c)).normalize() for c in f.codomain}
        rows = {}
        for c in f.codomain:
            lhs: dict[str, Fraction] = {}
            for s, w in nu[c].items():
                for s2, v in rev.row(s).items():
                    lhs[s2] = lhs.get(s2, F(0)) + w * v
            row = {}
            for c2 in f.codomain:
                rep = max(f.fibre(c2), key=lambda t: nu[c2][t])
                val = lhs.get(rep, F(0)) / nu[c2][rep]
                if val:
                    row[c2] = val
            rows[c] = row
        witness = ExactLumpingWitness(
            nu=nu, image_kernel=TransitionKernel(space=f.codomain, rows=rows))
        assert dynkin_check(x.kernel, f).is_strong
        assert exact_lumping_verify(rev, f, witness) == 0

        x2, _, _, f2, _ = three_state_emc_inputs()
        assert not dynkin_check(x2.kernel, f2).is_strong
        pi2 = stationary_distribution(x2.kernel)
        rev2 = time_reversal(x2.kernel, pi2)
        rev_chain = ChainSpec(initial=pi2, kernel=rev2)
        nu2 = {c: pi2.restrict(f2.fibre(c)).normalize() for c in f2.codomain}
        w2 = exact_lumping_discover(rev_chain, f2)
        # The reversed chain's canonical candidate must fail, matching
        # the failure of the strong condition for the forward kernel.
        assert w2 is None
