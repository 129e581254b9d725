"""Command-line interface.

Exit status: 0 success, 1 computational error (error name reported),
2 usage error.  ``--json`` emits machine-readable JSON on stdout.
Numeric mode defaults to float; ``--exact`` or LUMPCOUPLE_NUMERIC=exact
selects rationals.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import numeric
from . import io as lcio
from .chains import ChainSpec, fdd, sample_trajectory, validate_chain
from .coupling import (
    build_coupling,
    build_inhomogeneous_coupling,
    build_quasistationary_coupling,
    build_stationary_coupling,
    couple_many,
    diaconis_fill_intertwining,
)
from .errors import LumpCoupleError
from .lumping import (
    dynkin_check,
    exact_lumping_discover,
    exact_lumping_verify,
    image_markov_test,
    initial_law_admissible,
)
from .registry import EXAMPLES, run_example
from .verify import (
    monte_carlo_check,
    verify_conditional_independence,
    verify_marginals,
    verify_stationarity,
)


def _fmt(x):
    return numeric.format_number(x) if not isinstance(x, (bool, int, str, type(None))) else x


def _emit(doc: dict, args) -> None:
    if getattr(args, "json", False):
        sys.stdout.write(json.dumps(doc, indent=2, default=str) + "\n")
    else:
        for key, value in doc.items():
            sys.stdout.write(f"{key}: {value}\n")


def _load_chain(path: str) -> ChainSpec:
    return lcio.chain_from_dict(lcio.load_json(path))


def _load_map(path: str, codomain=None):
    return lcio.map_from_dict(lcio.load_json(path), codomain=codomain)


def _set_mode(args) -> None:
    env = numeric.mode_from_env()
    mode = numeric.EXACT if getattr(args, "exact", False) else (env or numeric.FLOAT)
    numeric.set_mode(mode, getattr(args, "tol", None) or numeric.DEFAULT_EPS)


def _cmd_validate(args) -> int:
    chain = _load_chain(args.chain)
    report = validate_chain(chain)
    _emit({
        "passed": report.passed,
        "rowSumDefects": {k: _fmt(v) for k, v in report.row_sum_defects.items()},
        "negativeEntries": [[s, t, _fmt(v)] for s, t, v in report.negative_entries],
        "initialDefect": _fmt(report.initial_defect),
        "messages": report.messages,
    }, args)
    return 0 if report.passed else 1


def _markov_report_doc(report) -> dict:
    doc = {"horizon": report.horizon, "isMarkovUpTo": report.is_markov_up_to}
    if report.counterexample is not None:
        ce = report.counterexample
        doc["counterexample"] = {
            "time": ce.time,
            "history": list(ce.history),
            "state": ce.state,
            "markovLaw": {k: _fmt(v) for k, v in sorted(ce.markov_law.items())},
            "historyLaw": {k: _fmt(v) for k, v in sorted(ce.history_law.items())},
            "deviation": _fmt(ce.deviation),
        }
    return doc


def _cmd_image_markov(args) -> int:
    chain = _load_chain(args.chain)
    lmap = _load_map(args.map)
    report = image_markov_test(chain, lmap, args.horizon)
    _emit(_markov_report_doc(report), args)
    return 0


def _cmd_check_weak(args) -> int:
    chain = _load_chain(args.chain)
    lmap = _load_map(args.map)
    report = image_markov_test(chain, lmap, args.horizon)
    doc = _markov_report_doc(report)
    doc["verdict"] = (
        f"weak up to {args.horizon}" if report.is_markov_up_to
        else f"not weakly lumpable (violation at time {report.counterexample.time})"
    )
    _emit(doc, args)
    return 0 if report.is_markov_up_to else 1


def _cmd_check_strong(args) -> int:
    chain = _load_chain(args.chain)
    lmap = _load_map(args.map)
    report = dynkin_check(chain.kernel, lmap)
    doc = {"isStrong": report.is_strong}
    if report.image_kernel is not None:
        doc["imageKernel"] = [
            [z, z2, _fmt(v)]
            for z in report.image_kernel.space.states
            for z2, v in report.image_kernel.row(z).items()
        ]
    if report.counterexample is not None:
        ce = report.counterexample
        doc["counterexample"] = {
            "z": ce.z, "zNext": ce.z_next, "x1": ce.x1, "x2": ce.x2,
            "sum1": _fmt(ce.sum1), "sum2": _fmt(ce.sum2),
        }
    _emit(doc, args)
    return 0 if report.is_strong else 1


def _cmd_check_exact(args) -> int:
    chain = _load_chain(args.chain)
    lmap = _load_map(args.map)
    if args.witness:
        witness = lcio.witness_from_dict(lcio.load_json(args.witness))
        residual = exact_lumping_verify(chain.kernel, lmap, witness)
        admissible = initial_law_admissible(chain.initial, lmap, witness)
        _emit({
            "residual": _fmt(residual),
            "exact": residual <= numeric.eps(),
            "initialAdmissible": admissible,
        }, args)
        return 0 if residual <= numeric.eps() else 1
    witness = exact_lumping_discover(chain, lmap)
    if witness is None:
        _emit({"found": False}, args)
        return 1
    admissible = initial_law_admissible(chain.initial, lmap, witness)
    doc = {"found": True, "initialAdmissible": admissible}
    doc["witness"] = lcio.witness_to_dict(witness)
    _emit(doc, args)
    return 0


def _couple_options(args) -> dict:
    opts = {}
    if args.tol is not None:
        opts["tol"] = args.tol
    if args.max_iter is not None:
        opts["max_iter"] = args.max_iter
    return opts


def _cmd_couple(args) -> int:
    opts = _couple_options(args)
    if args.inhomogeneous:
        x = lcio.inhomogeneous_chain_from_dict(lcio.load_json(args.x))
        y = lcio.inhomogeneous_chain_from_dict(lcio.load_json(args.y))
        z = lcio.inhomogeneous_chain_from_dict(lcio.load_json(args.z))
        f = _load_map(args.f)
        g = _load_map(args.g)
        result = build_inhomogeneous_coupling(x, y, z, f, g, **opts)
        doc = {
            "kind": result.kind,
            "states": list(result.space.ids),
            "initial": {s: _fmt(v) for s, v in result.initial.items()},
            "kernelSequence": [
                [[s, t, _fmt(v)] for s in k.space.states for t, v in k.row(s).items()]
                for k in result.kernel_sequence
            ],
        }
        text = json.dumps(doc, indent=2) + "\n"
        if args.output:
            with open(args.output, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0

    x = _load_chain(args.x)
    y = _load_chain(args.y)
    z = _load_chain(args.z)
    f = _load_map(args.f, codomain=z.space)
    g = _load_map(args.g, codomain=z.space)
    if args.quasistationary:
        absorbers = tuple(args.quasistationary.split(","))
        if len(absorbers) != 3:
            raise SystemExit(2)
        result = build_quasistationary_coupling(x, y, z, f, g, absorbers, **opts)
    elif args.stationary:
        result = build_stationary_coupling(x, y, z, f, g, **opts)
    else:
        result = build_coupling(x, y, z, f, g, **opts)
    text = lcio.dump_json(lcio.coupling_to_dict(result), args.output)
    if not args.output:
        sys.stdout.write(text)
    return 0


def _cmd_couple_many(args) -> int:
    z = _load_chain(args.z)
    chains = [_load_chain(p) for p in args.chains]
    maps = [_load_map(p, codomain=z.space) for p in args.maps]
    result = couple_many(chains, maps, z, **_couple_options(args))
    text = lcio.dump_json(lcio.coupling_to_dict(result), args.output)
    if not args.output:
        sys.stdout.write(text)
    return 0


def _cmd_intertwine(args) -> int:
    x = _load_chain(args.x)
    y = _load_chain(args.y)
    link = lcio.link_from_dict(lcio.load_json(args.link))
    result = diaconis_fill_intertwining(x.kernel, y.kernel, link, y.initial)
    text = lcio.dump_json(lcio.coupling_to_dict(result), args.output)
    if not args.output:
        sys.stdout.write(text)
    return 0


def _cmd_verify(args) -> int:
    coupling = lcio.coupling_from_dict(lcio.load_json(args.coupling))
    x = _load_chain(args.x)
    y = _load_chain(args.y)
    checks = []
    report = verify_marginals(coupling, x, y, args.horizon)
    checks.extend(report.checks)
    if args.z and args.f and args.g:
        z = _load_chain(args.z)
        f = _load_map(args.f, codomain=z.space)
        g = _load_map(args.g, codomain=z.space)
        window = args.window if args.window is not None else args.horizon
        dev = verify_conditional_independence(
            coupling, x, y, z, f, g, args.horizon, window)
        from .verify import CheckResult

        checks.append(CheckResult(
            name=f"conditional-independence-w{window}",
            passed=dev <= numeric.eps(),
            deviation=dev,
            note="deviation tends to 0 as the window grows",
        ))
    if coupling.kind == "stationary":
        checks.extend(verify_stationarity(coupling).checks)
    if args.mc:
        checks.extend(monte_carlo_check(
            coupling, x, y, samples=args.mc, horizon=args.horizon,
            seed=args.seed or 0).checks)
    doc = {
        "passed": all(c.passed or c.skipped for c in checks),
        "checks": [
            {
                "name": c.name,
                "passed": c.passed,
                "skipped": c.skipped,
                "deviation": _fmt(c.deviation),
                "note": c.note,
            }
            for c in checks
        ],
    }
    text = json.dumps(doc, indent=2) + "\n"
    sys.stdout.write(text)
    return 0 if doc["passed"] else 1


def _cmd_simulate(args) -> int:
    chain = _load_chain(args.chain)
    traj = sample_trajectory(chain, args.horizon, args.seed)
    _emit({"trajectory": traj}, args)
    return 0


def _cmd_examples(args) -> int:
    if args.list or not args.name:
        _emit({name: case.description for name, case in sorted(EXAMPLES.items())}, args)
        return 0
    if args.name not in EXAMPLES:
        sys.stderr.write(f"unknown example {args.name!r}; choices: {sorted(EXAMPLES)}\n")
        return 2
    outcome = run_example(args.name)
    if getattr(args, "json", False):
        doc = {
            "name": outcome.name,
            "passed": outcome.passed,
            "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in outcome.checks],
        }
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        for name, ok, detail in outcome.checks:
            status = "ok" if ok else "MISMATCH"
            sys.stdout.write(f"{status:9s} {name}: {detail}\n")
        sys.stdout.write(("PASS" if outcome.passed else "FAIL") + f" {outcome.name}\n")
    return 0 if outcome.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lumpcouple",
        description="Lumping checks and common-image couplings for Markov chains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, chain_map=False, horizon=False):
        p.add_argument("--exact", action="store_true", help="exact rational arithmetic")
        p.add_argument("--tol", type=float, default=None, help="float-mode tolerance")
        p.add_argument("--json", action="store_true", help="JSON output")
        if chain_map:
            p.add_argument("chain")
            p.add_argument("map")
        if horizon:
            p.add_argument("--horizon", type=int, required=True)

    p = sub.add_parser("validate", help="check chain file invariants")
    p.add_argument("chain")
    common(p)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("check-weak", help="finite-horizon weak-lumping evidence")
    common(p, chain_map=True, horizon=True)
    p.set_defaults(fn=_cmd_check_weak)

    p = sub.add_parser("image-markov", help="Markov property of the image process")
    common(p, chain_map=True, horizon=True)
    p.set_defaults(fn=_cmd_image_markov)

    p = sub.add_parser("check-strong", help="fibre-sum (Dynkin) strong-lumping check")
    common(p, chain_map=True)
    p.set_defaults(fn=_cmd_check_strong)

    p = sub.add_parser("check-exact", help="exact-lumping verification or discovery")
    common(p, chain_map=True)
    p.add_argument("--witness", default=None, help="witness JSON file")
    p.set_defaults(fn=_cmd_check_exact)

    p = sub.add_parser("couple", help="build a coupling with a common image chain")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("z")
    p.add_argument("--f", required=True)
    p.add_argument("--g", required=True)
    p.add_argument("--stationary", action="store_true")
    p.add_argument("--quasistationary", default=None, metavar="RA,RB,RC")
    p.add_argument("--inhomogeneous", action="store_true")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("-o", "--output", default=None)
    common(p)
    p.set_defaults(fn=_cmd_couple)

    p = sub.add_parser("couple-many", help="couple several chains over one image chain")
    p.add_argument("z")
    p.add_argument("--chains", nargs="+", required=True)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("-o", "--output", default=None)
    common(p)
    p.set_defaults(fn=_cmd_couple_many)

    p = sub.add_parser("intertwine", help="coupling from a link kernel")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("--link", required=True)
    p.add_argument("-o", "--output", default=None)
    common(p)
    p.set_defaults(fn=_cmd_intertwine)

    p = sub.add_parser("verify", help="verify a coupling file against its marginals")
    p.add_argument("coupling")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--z", default=None)
    p.add_argument("--f", default=None)
    p.add_argument("--g", default=None)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--mc", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("simulate", help="sample a trajectory")
    p.add_argument("chain")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    common(p)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("examples", help="run a bundled example against its goldens")
    p.add_argument("name", nargs="?", default=None)
    p.add_argument("--list", action="store_true")
    common(p)
    p.set_defaults(fn=_cmd_examples)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_mode(args)
    try:
        code = args.fn(args)
    except LumpCoupleError as err:
        doc = {"error": err.name, "message": str(err)}
        if getattr(args, "json", False):
            sys.stdout.write(json.dumps(doc, indent=2) + "\n")
        else:
            sys.stderr.write(f"{err.name}: {err}\n")
        return 1
    except FileNotFoundError as err:
        sys.stderr.write(f"{err}\n")
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
