"""JSON file formats for chains, maps, witnesses, links and couplings.

Numbers serialize as lowest-terms "p/q" strings in exact mode and as
bare floats in float mode; both forms are accepted on input ("p/q"
strings stay exact only in exact mode).  Output is byte-deterministic
for fixed inputs, flags and seed.
"""
from __future__ import annotations

import json
from typing import Any

from . import numeric
from .chains import ChainSpec, Distribution, StateSpace, TransitionKernel
from .coupling import CouplingResult, InhomogeneousChainSpec, PhiVector, ProductStateSpace, split_id
from .lumping import ExactLumpingWitness, LumpingMap


def _parse_transitions(states, data) -> dict[str, dict[str, Any]]:
    rows: dict[str, dict[str, Any]] = {s: {} for s in states}
    if not isinstance(data, list):
        raise ValueError("transitions must be a dense matrix or a sparse triple list")
    if data and isinstance(data[0], list) and len(data[0]) == 3 and isinstance(data[0][0], str):
        for src, dst, val in data:
            v = numeric.parse_number(val)
            if v != 0:
                rows[src][dst] = v
    else:
        if len(data) != len(states):
            raise ValueError("dense transition matrix must have one row per state")
        for s, row in zip(states, data):
            if len(row) != len(states):
                raise ValueError("dense transition matrix must be square")
            for t, val in zip(states, row):
                v = numeric.parse_number(val)
                if v != 0:
                    rows[s][t] = v
    return rows


def chain_from_dict(doc: dict) -> ChainSpec:
    states = list(doc["states"])
    initial = Distribution({s: numeric.parse_number(v) for s, v in doc["initial"].items()})
    rows = _parse_transitions(states, doc["transitions"])
    kernel = TransitionKernel(space=StateSpace(states), rows=rows)
    return ChainSpec(initial=initial, kernel=kernel)


def chain_to_dict(chain: ChainSpec) -> dict:
    states = list(chain.space.states)
    triples = []
    for s in states:
        for t, v in chain.kernel.row(s).items():
            triples.append([s, t, numeric.format_number(v)])
    return {
        "states": states,
        "initial": {s: numeric.format_number(v) for s, v in chain.initial.items()},
        "transitions": triples,
    }


def inhomogeneous_chain_from_dict(doc: dict) -> InhomogeneousChainSpec:
    states = list(doc["states"])
    space = StateSpace(states)
    initial = Distribution({s: numeric.parse_number(v) for s, v in doc["initial"].items()})
    kernels = [
        TransitionKernel(space=space, rows=_parse_transitions(states, k))
        for k in doc["kernels"]
    ]
    return InhomogeneousChainSpec(space=space, initial=initial, kernels=kernels)


def map_from_dict(doc: dict, codomain: StateSpace | None = None) -> LumpingMap:
    return LumpingMap(assignment=dict(doc), codomain=codomain)


def map_to_dict(lmap: LumpingMap) -> dict:
    return {s: lmap.apply(s) for s in lmap.domain}


def witness_from_dict(doc: dict) -> ExactLumpingWitness:
    nu = {
        z: Distribution({x: numeric.parse_number(v) for x, v in row.items()})
        for z, row in doc["nu"].items()
    }
    zs = list(doc["nu"].keys())
    space = StateSpace(zs)
    rows = {
        z: {z2: numeric.parse_number(v) for z2, v in doc["q"].get(z, {}).items() if numeric.parse_number(v) != 0}
        for z in zs
    }
    return ExactLumpingWitness(nu=nu, image_kernel=TransitionKernel(space=space, rows=rows))


def witness_to_dict(witness: ExactLumpingWitness) -> dict:
    zs = list(witness.image_kernel.space.states)
    return {
        "nu": {
            z: {x: numeric.format_number(v) for x, v in witness.nu[z].items()}
            for z in zs
        },
        "q": {
            z: {z2: numeric.format_number(v) for z2, v in witness.image_kernel.row(z).items()}
            for z in zs
        },
    }


def link_from_dict(doc: dict) -> dict[str, Distribution]:
    return {
        b: Distribution({a: numeric.parse_number(v) for a, v in row.items()})
        for b, row in doc.items()
    }


def coupling_to_dict(result: CouplingResult) -> dict:
    if not result.kernel.is_finite:
        raise ValueError("generator-backed couplings cannot be serialized in full")
    ids = list(result.space.ids)
    triples = []
    for s in ids:
        for t, v in result.kernel.row(s).items():
            triples.append([s, t, numeric.format_number(v)])
    doc = {
        "kind": result.kind,
        "states": ids,
        "initial": {s: numeric.format_number(v) for s, v in result.initial.items()},
        "transitions": triples,
        "phi": {s: numeric.format_number(result.phi[s]) for s in ids},
        "diagnostics": {
            "iterations": result.phi.iterations,
            "supDiff": numeric.format_number(result.phi.sup_diff),
            "residual": numeric.format_number(result.phi.residual),
        },
    }
    if result.phi_rev is not None:
        doc["phiRev"] = {s: numeric.format_number(result.phi_rev[s]) for s in ids}
    if result.kernel_rev is not None:
        trip_rev = []
        for s in ids:
            for t, v in result.kernel_rev.row(s).items():
                trip_rev.append([s, t, numeric.format_number(v)])
        doc["transitionsRev"] = trip_rev
    if result.kernel_sequence is not None:
        seq = []
        for kern in result.kernel_sequence:
            trip = []
            for s in kern.space.states:
                for t, v in kern.row(s).items():
                    trip.append([s, t, numeric.format_number(v)])
            seq.append(trip)
        doc["kernelSequence"] = seq
    if result.absorber is not None:
        doc["absorber"] = result.absorber
    return doc


def coupling_from_dict(doc: dict) -> CouplingResult:
    ids = list(doc["states"])
    tuples = [split_id(s) for s in ids]
    space = ProductStateSpace(tuples)
    rows: dict[str, dict] = {s: {} for s in ids}
    for src, dst, val in doc["transitions"]:
        v = numeric.parse_number(val)
        if v != 0:
            rows[src][dst] = v
    kernel = TransitionKernel(space=StateSpace(ids), rows=rows)
    initial = Distribution({s: numeric.parse_number(v) for s, v in doc["initial"].items()})
    diag = doc.get("diagnostics", {})
    phi = PhiVector(
        values={s: numeric.parse_number(v) for s, v in doc["phi"].items()},
        iterations=int(diag.get("iterations", 0)),
        sup_diff=numeric.parse_number(diag.get("supDiff", 0)),
        residual=numeric.parse_number(diag.get("residual", 0)),
        converged=True,
    )
    phi_rev = None
    if "phiRev" in doc:
        phi_rev = PhiVector(
            values={s: numeric.parse_number(v) for s, v in doc["phiRev"].items()},
            iterations=0, sup_diff=numeric.zero(), residual=numeric.zero(), converged=True,
        )
    kernel_rev = None
    if "transitionsRev" in doc:
        rows_rev: dict[str, dict] = {s: {} for s in ids}
        for src, dst, val in doc["transitionsRev"]:
            v = numeric.parse_number(val)
            if v != 0:
                rows_rev[src][dst] = v
        kernel_rev = TransitionKernel(space=StateSpace(ids), rows=rows_rev)
    return CouplingResult(
        kind=doc.get("kind", "homogeneous"),
        space=space,
        initial=initial,
        kernel=kernel,
        phi=phi,
        phi_rev=phi_rev,
        kernel_rev=kernel_rev,
        absorber=doc.get("absorber"),
        diagnostics=dict(diag),
    )


def load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def dump_json(doc: dict, path: str | None = None) -> str:
    text = json.dumps(doc, indent=2, ensure_ascii=True) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
