from fractions import Fraction

import pytest

from lumpcouple import numeric
from lumpcouple.chains import (
    ChainSpec,
    Distribution,
    StateSpace,
    TransitionKernel,
    dense_kernel,
    fdd,
    marginal_at,
)
from lumpcouple.coupling import (
    InhomogeneousChainSpec,
    build_R,
    build_coupling,
    build_delta,
    build_inhomogeneous_coupling,
    build_quasistationary_coupling,
    build_stationary_coupling,
    couple_many,
    diaconis_fill_intertwining,
    iterate_phi,
    join_id,
    split_id,
)
from lumpcouple.errors import (
    AbsorptionMismatch,
    HypothesisEvidenceFailed,
    LumpCoupleError,
    NormalizationFailed,
    NotIntertwined,
    NotStationary,
    PhiNotConverged,
)
from lumpcouple.lumping import LumpingMap, identity_map
from lumpcouple.registry import (
    batcave_inputs,
    three_bit_shift_inputs,
    three_state_emc_inputs,
)
from conftest import strong_exact_instance, strong_strong_instance

F = Fraction


class TestDelta:
    def test_emc_pairs_in_published_order(self):
        _, _, _, f, g = three_state_emc_inputs()
        delta = build_delta(f, g)
        assert list(delta.ids) == ["0|0'", "1|1'", "1|2'", "2|1'", "2|2'"]
        assert delta.image_of("1|2'") == "1"

    def test_identity_maps_give_diagonal(self):
        x, _, _, _, _ = three_state_emc_inputs()
        ident = identity_map(x.space)
        delta = build_delta(ident, ident)
        assert list(delta.ids) == [f"{s}|{s}" for s in x.space.states]


class TestBuildR:
    def test_entrywise_ratio(self):
        x, y, z, f, g = three_state_emc_inputs()
        r = build_R(x.kernel, y.kernel, z.kernel, build_delta(f, g))
        # (1/2)(1/3)/1 from the displayed matrices.
        assert r.row("0|0'")["1|1'"] == F(1, 6)
        assert r.row("2|2'") == {"0|0'": F(3, 2)}
        assert r.row("2|1'") == {}

    def test_strong_first_map_makes_rows_stochastic(self):
        x, f, y, g, z = strong_strong_instance(17)
        delta = build_delta(f, g)
        r = build_R(x.kernel, y.kernel, z.kernel, delta)
        for pid in delta.ids:
            assert sum(r.row(pid).values()) == 1

    def test_identity_triple_reproduces_kernel_on_diagonal(self):
        x, _, _, _, _ = three_state_emc_inputs()
        ident = identity_map(x.space)
        r = build_R(x.kernel, x.kernel, x.kernel, build_delta(ident, ident))
        for s in x.space.states:
            row = r.row(f"{s}|{s}")
            assert row == {f"{t}|{t}": v for t, v in x.kernel.row(s).items()}


class TestIteratePhi:
    def test_emc_fixed_vector(self):
        x, y, z, f, g = three_state_emc_inputs()
        r = build_R(x.kernel, y.kernel, z.kernel, build_delta(f, g))
        phi = iterate_phi(r)
        assert phi.converged and phi.residual == 0
        assert {s: phi[s] for s in r.space.ids} == {
            "0|0'": F(1), "1|1'": F(2), "1|2'": F(1, 2), "2|1'": F(0), "2|2'": F(3, 2)}

    def test_strong_case_is_identically_one(self):
        x, f, y, g, z = strong_strong_instance(23)
        r = build_R(x.kernel, y.kernel, z.kernel, build_delta(f, g))
        phi = iterate_phi(r)
        assert all(v == 1 for v in phi.values.values())
        assert phi.iterations <= 2

    def test_shift_register_phi_is_two_on_matching_third_bit(self):
        x, y, z, f, g = three_bit_shift_inputs()
        r = build_R(x.kernel, y.kernel, z.kernel, build_delta(f, g))
        phi = iterate_phi(r)
        for pid in r.space.ids:
            a, b = split_id(pid)
            assert phi[pid] == (F(2) if a[2] == b[2] else F(0))

    def test_phi_invariants_on_stationary_instances(self):
        # Upper bound from full-support initial laws, and zero propagation.
        for inputs in (three_state_emc_inputs(), three_bit_shift_inputs()):
            x, y, z, f, g = inputs
            delta = build_delta(f, g)
            r = build_R(x.kernel, y.kernel, z.kernel, delta)
            phi = iterate_phi(r)
            for pid in delta.ids:
                a, b = delta.tuple_of(pid)
                c = delta.image_of(pid)
                assert phi[pid] <= z.initial[c] / (x.initial[a] * y.initial[b])
                if phi[pid] == 0:
                    for pid2, v in r.row(pid).items():
                        assert v == 0 or phi[pid2] == 0


class TestBuildCoupling:
    def test_emc_tables(self):
        x, y, z, f, g = three_state_emc_inputs()
        result = build_coupling(x, y, z, f, g)
        assert list(result.space.ids) == ["0|0'", "1|1'", "1|2'", "2|2'"]
        assert result.initial.probs == {
            "0|0'": F(1, 3), "1|1'": F(2, 9), "1|2'": F(1, 9), "2|2'": F(1, 3)}
        assert result.kernel.row("0|0'") == {
            "1|1'": F(1, 3), "1|2'": F(1, 6), "2|2'": F(1, 2)}
        assert result.kernel.row("1|1'") == {"1|2'": F(1, 4), "2|2'": F(3, 4)}
        assert result.kernel.row("1|2'") == {"1|1'": F(1)}
        assert result.kernel.row("2|2'") == {"0|0'": F(1)}

    def test_identity_maps_give_diagonal_coupling(self):
        x, _, _, _, _ = three_state_emc_inputs()
        ident = identity_map(x.space)
        result = build_coupling(x, x, x, ident, ident)
        assert all(split_id(pid)[0] == split_id(pid)[1] for pid in result.space.ids)
        for s in x.space.states:
            assert result.initial[f"{s}|{s}"] == x.initial[s]
            row = result.kernel.row(f"{s}|{s}")
            assert row == {f"{t}|{t}": v for t, v in x.kernel.row(s).items()}

    def test_structural_image_equality(self):
        x, y, z, f, g = three_state_emc_inputs()
        result = build_coupling(x, y, z, f, g)
        for pid in result.space.ids:
            a, b = split_id(pid)
            assert f.apply(a) == g.apply(b)

    def test_refusal_on_non_markov_image(self):
        x, y, z, f, g = batcave_inputs()
        with pytest.raises(HypothesisEvidenceFailed):
            build_coupling(x, y, z, f, g)

    def test_weak_evidence_horizon_still_refuses(self):
        # Below the refutation horizon the gate passes, but the false
        # hypothesis makes the iteration diverge (ratio matrix gains
        # mass), so construction still refuses.
        x, y, z, f, g = batcave_inputs()
        with pytest.raises((PhiNotConverged, NormalizationFailed)):
            build_coupling(x, y, z, f, g, evidence_horizon=2, max_iter=200)

    def test_shift_register_coupling_meets_after_one_step(self):
        x, y, z, f, g = three_bit_shift_inputs()
        result = build_coupling(x, y, z, f, g)
        chain = result.chain()
        masses = [sum((v for pid, v in marginal_at(chain, t).items()
                       if split_id(pid)[0] == split_id(pid)[1]), F(0))
                  for t in range(6)]
        assert masses[0] == F(1, 2)
        assert all(m == 1 for m in masses[1:])


class TestStationaryCoupling:
    def test_emc_exact_first_map_coincides_with_homogeneous(self):
        x, y, z, f, g = three_state_emc_inputs()
        homogeneous = build_coupling(x, y, z, f, g)
        stationary = build_stationary_coupling(x, y, z, f, g)
        assert all(v == 1 for v in stationary.phi_rev.values.values())
        assert list(stationary.space.ids) == list(homogeneous.space.ids)
        assert stationary.initial.probs == homogeneous.initial.probs
        for pid in stationary.space.ids:
            assert stationary.kernel.row(pid) == homogeneous.kernel.row(pid)

    def test_shift_register_collapses_to_diagonal(self):
        x, y, z, f, g = three_bit_shift_inputs()
        result = build_stationary_coupling(x, y, z, f, g)
        assert len(result.space) == 8
        assert all(split_id(pid)[0] == split_id(pid)[1] for pid in result.space.ids)
        assert all(v == F(1, 8) for v in result.initial.probs.values())

    def test_identity_maps_on_stationary_chain(self):
        x, _, _, _, _ = three_state_emc_inputs()
        ident = identity_map(x.space)
        result = build_stationary_coupling(x, x, x, ident, ident)
        for s in x.space.states:
            assert result.initial[f"{s}|{s}"] == x.initial[s]

    def test_non_stationary_initial_rejected(self):
        x, y, z, f, g = three_state_emc_inputs()
        x_bad = ChainSpec(initial=Distribution({"0": F(1)}), kernel=x.kernel)
        with pytest.raises(NotStationary):
            build_stationary_coupling(x_bad, y, z, f, g)


def quasistationary_toy():
    """3-state absorbing chain over a 2-state absorbing image; lambda = 1/4."""
    x = ChainSpec(
        initial=Distribution({"a": F(1, 2), "b": F(1, 2)}),
        kernel=dense_kernel(["a", "b", "rA"], [
            [F(1, 2), F(1, 4), F(1, 4)],
            [F(1, 4), F(1, 2), F(1, 4)],
            [0, 0, 1],
        ]),
    )
    z = ChainSpec(
        initial=Distribution({"c": F(1)}),
        kernel=dense_kernel(["c", "rC"], [
            [F(3, 4), F(1, 4)],
            [0, 1],
        ]),
    )
    f = LumpingMap(assignment={"a": "c", "b": "c", "rA": "rC"}, codomain=z.space)
    g = LumpingMap(assignment={"c": "c", "rC": "rC"}, codomain=z.space)
    return x, z, f, g


class TestQuasistationaryCoupling:
    def test_identity_toy_diagonal(self):
        _, z, _, g = quasistationary_toy()
        result = build_quasistationary_coupling(z, z, z, g, g, ("rC", "rC", "rC"))
        assert result.absorber == "rC|rC"
        assert result.initial.probs == {"c|c": F(1)}
        assert result.kernel.row("c|c") == {"c|c": F(3, 4), "rC|rC": F(1, 4)}
        assert result.kernel.row("rC|rC") == {"rC|rC": F(1)}
        assert result.diagnostics["absorption_probability"] == F(1, 4)

    def test_absorption_mismatch_rejected(self):
        x, z, f, g = quasistationary_toy()
        z_slow = ChainSpec(
            initial=Distribution({"c": F(1)}),
            kernel=dense_kernel(["c", "rC"], [
                [F(4, 5), F(1, 5)],
                [0, 1],
            ]),
        )
        with pytest.raises(AbsorptionMismatch):
            build_quasistationary_coupling(x, z_slow, z_slow, f, g, ("rA", "rC", "rC"))

    def test_three_over_two_absorption_times_coincide(self):
        x, z, f, g = quasistationary_toy()
        result = build_quasistationary_coupling(x, z, z, f, g, ("rA", "rC", "rC"))
        # Pathwise equality of absorption times is structural: the only
        # coupled state with an absorbed coordinate is the absorber pair.
        for pid in result.space.ids:
            a, b = split_id(pid)
            assert (a == "rA") == (b == "rC")
        # Both absorption-time laws are geometric(1/4): P(alive at t) = (3/4)^t.
        chain = result.chain()
        for t in range(1, 21):
            alive = 1 - marginal_at(chain, t)[result.absorber]
            assert alive == F(3, 4) ** t

    def test_marginals_reproduced(self):
        x, z, f, g = quasistationary_toy()
        result = build_quasistationary_coupling(x, z, z, f, g, ("rA", "rC", "rC"))
        coupled = fdd(result.chain(), 4)
        for coord, chain in ((0, x), (1, z)):
            pushed = coupled.pushforward(lambda pid, c=coord: split_id(pid)[c])
            assert pushed.entries == fdd(chain, 4).entries


def handmade_inhomogeneous_instance():
    """Two-layer lifts of a two-kernel image; fibre sums match per layer."""
    z_states = ["0", "1"]
    k1 = dense_kernel(z_states, [[0, 1], [F(1, 2), F(1, 2)]])
    k2 = dense_kernel(z_states, [[F(1, 3), F(2, 3)], [1, 0]])
    z = InhomogeneousChainSpec(
        space=StateSpace(z_states),
        initial=Distribution({"0": F(1)}),
        kernels=[k1, k2],
    )
    x_states = ["0", "1a", "1b"]
    x_k1 = TransitionKernel(space=StateSpace(x_states), rows={
        "0": {"1a": F(1, 4), "1b": F(3, 4)},
        "1a": {"0": F(1, 2), "1a": F(1, 4), "1b": F(1, 4)},
        "1b": {"0": F(1, 2), "1a": F(1, 2)},
    })
    x_k2 = TransitionKernel(space=StateSpace(x_states), rows={
        "0": {"0": F(1, 3), "1a": F(1, 3), "1b": F(1, 3)},
        "1a": {"0": F(1)},
        "1b": {"0": F(1)},
    })
    x = InhomogeneousChainSpec(
        space=StateSpace(x_states),
        initial=Distribution({"0": F(1)}),
        kernels=[x_k1, x_k2],
    )
    f = LumpingMap(assignment={"0": "0", "1a": "1", "1b": "1"})
    g = LumpingMap(assignment={"0": "0", "1": "1"})
    return x, z, f, g


def inhomogeneous_fdd(chain: InhomogeneousChainSpec, horizon: int):
    entries = {(s,): v for s, v in chain.initial.items()}
    for t in range(horizon):
        nxt = {}
        for traj, p in entries.items():
            for s2, v in chain.kernels[t].row(traj[-1]).items():
                nxt[traj + (s2,)] = nxt.get(traj + (s2,), F(0)) + p * v
        entries = nxt
    return entries


class TestInhomogeneousCoupling:
    def test_constant_sequence_matches_homogeneous(self):
        x, y, z, f, g = three_state_emc_inputs()
        horizon = 3
        xi = InhomogeneousChainSpec(space=x.space, initial=x.initial,
                                    kernels=[x.kernel] * horizon)
        yi = InhomogeneousChainSpec(space=y.space, initial=y.initial,
                                    kernels=[y.kernel] * horizon)
        zi = InhomogeneousChainSpec(space=z.space, initial=z.initial,
                                    kernels=[z.kernel] * horizon)
        result = build_inhomogeneous_coupling(xi, yi, zi, f, g)
        homogeneous = build_coupling(x, y, z, f, g)
        assert result.initial.probs == homogeneous.initial.probs
        for kern in result.kernel_sequence:
            for pid in kern.space.states:
                assert kern.row(pid) == homogeneous.kernel.row(pid)

    def test_zero_horizon_couples_initial_laws(self):
        x, y, z, f, g = three_state_emc_inputs()
        xi = InhomogeneousChainSpec(space=x.space, initial=x.initial, kernels=[])
        yi = InhomogeneousChainSpec(space=y.space, initial=y.initial, kernels=[])
        zi = InhomogeneousChainSpec(space=z.space, initial=z.initial, kernels=[])
        result = build_inhomogeneous_coupling(xi, yi, zi, f, g)
        assert result.kernel_sequence == []
        expected = {}
        for a in x.space.states:
            for b in y.space.states:
                if f.apply(a) == g.apply(b) and z.initial[f.apply(a)] > 0:
                    v = x.initial[a] * y.initial[b] / z.initial[f.apply(a)]
                    if v:
                        expected[join_id((a, b))] = v
        assert result.initial.probs == expected

    def test_two_step_toy_marginals_match(self):
        x, z, f, g = handmade_inhomogeneous_instance()
        result = build_inhomogeneous_coupling(x, z, z, f, g)
        assert len(result.kernel_sequence) == 2
        entries = {(s,): v for s, v in result.initial.items()}
        for kern in result.kernel_sequence:
            nxt = {}
            for traj, p in entries.items():
                for s2, v in kern.row(traj[-1]).items():
                    nxt[traj + (s2,)] = nxt.get(traj + (s2,), F(0)) + p * v
            entries = nxt
        for coord, chain in ((0, x), (1, z)):
            pushed = {}
            for traj, p in entries.items():
                key = tuple(split_id(s)[coord] for s in traj)
                pushed[key] = pushed.get(key, F(0)) + p
            assert pushed == inhomogeneous_fdd(chain, 2)


class TestCoupleMany:
    def test_single_chain_is_itself(self):
        x, _, _, f, _ = three_state_emc_inputs()
        result = couple_many([x], [f], x)
        assert list(result.space.ids) == list(x.space.states)
        assert result.initial.probs == x.initial.probs

    def test_two_chains_match_pairwise_construction(self):
        x, y, z, f, g = three_state_emc_inputs()
        many = couple_many([x, y], [f, g], z)
        pairwise = build_coupling(x, y, z, f, g)
        assert list(many.space.ids) == list(pairwise.space.ids)
        assert many.initial.probs == pairwise.initial.probs
        for pid in many.space.ids:
            assert many.kernel.row(pid) == pairwise.kernel.row(pid)

    def test_three_copies_pairwise_projections(self):
        x, _, z, f, _ = three_state_emc_inputs()
        result = couple_many([x, x, x], [f, f, f], z)
        assert result.space.components == 3
        pairwise = build_coupling(x, x, z, f, f)
        table = fdd(result.chain(), 3)
        target = fdd(pairwise.chain(), 3)
        for i, j in ((0, 1), (0, 2), (1, 2)):
            pushed = {}
            for traj, p in table.entries.items():
                key = tuple(join_id((split_id(s)[i], split_id(s)[j])) for s in traj)
                pushed[key] = pushed.get(key, F(0)) + p
            assert pushed == target.entries

    def test_images_agree_across_components(self):
        x, _, z, f, _ = three_state_emc_inputs()
        result = couple_many([x, x, x], [f, f, f], z)
        for pid in result.space.ids:
            images = {f.apply(s) for s in split_id(pid)}
            assert len(images) == 1


class TestDiaconisFill:
    def test_identity_link_gives_diagonal(self):
        x, _, _, _, _ = three_state_emc_inputs()
        link = {s: Distribution({s: F(1)}) for s in x.space.states}
        result = diaconis_fill_intertwining(x.kernel, x.kernel, link, x.initial)
        for s in x.space.states:
            row = result.kernel.row(f"{s}|{s}")
            assert row == {f"{t}|{t}": v for t, v in x.kernel.row(s).items()}
        assert result.diagnostics["proj1_strong_to_px"]
        assert result.diagnostics["proj2_exact_residual"] == 0

    def test_broken_link_rejected(self):
        # A uniform link intertwines only doubly stochastic kernels; the
        # second instance kernel has non-uniform column sums.
        x, y, _, _, _ = three_state_emc_inputs()
        link = {a: Distribution({b: F(1, 3) for b in y.space.states})
                for a in x.space.states}
        with pytest.raises(NotIntertwined):
            diaconis_fill_intertwining(y.kernel, x.kernel, link, x.initial)

    @pytest.mark.parametrize("seed", [2, 9, 31])
    def test_coincidence_with_strong_exact_coupling(self, seed):
        x, f, y, g, z, witness = strong_exact_instance(seed)
        coupled = build_coupling(x, y, z, f, g)
        link = {
            a: Distribution({b: witness.nu[f.apply(a)][b] for b in y.space.states
                             if witness.nu[f.apply(a)][b] > 0})
            for a in x.space.states
        }
        result = diaconis_fill_intertwining(y.kernel, x.kernel, link, x.initial)
        assert result.diagnostics["proj1_strong_to_px"]
        assert result.diagnostics["proj2_exact_residual"] == 0
        for pid in result.space.ids:
            b, a = split_id(pid)
            swapped = join_id((a, b))
            row = result.kernel.row(pid)
            target = coupled.kernel.row(swapped)
            assert {join_id(tuple(reversed(split_id(t)))): v for t, v in row.items()} == target
            assert result.initial[pid] == coupled.initial[swapped]
