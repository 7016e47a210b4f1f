"""Command-line entry point ``mfgldp``.

Exit codes: 0 success (an infinite rate is a valid answer), 2 parse error or
missing file, 3 model validation error, 4 equilibrium solver did not converge.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .entropy import MarkovPathMeasure, i_project_exact
from .io import config_hash, dump_json, sidecar_path, to_jsonable, write_csv, write_manifest
from .mfe import solve_mfe
from .model import ConfigParseError, ModelError, ModelSpec, load_model, mean_field_flow
from .particles import (
    EventSpec,
    _sub_seed,
    estimate_probability,
    ldp_slope,
    lln_curve,
    phi_check,
    save_trace,
    simulate,
)
from .rates import (
    ball_rate_inf,
    dv_lower_bound,
    j_rate,
    path_rate,
    prop1_residual,
    reference_path_measure,
    v_rate,
)

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def _read_json(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Fail(EXIT_PARSE, f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_PARSE, f"{path}: malformed JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from None


def _model(path: str) -> ModelSpec:
    try:
        return load_model(path)
    except OSError as exc:
        raise _Fail(EXIT_PARSE, f"cannot read {path}: {exc.strerror}") from None
    except ConfigParseError as exc:
        raise _Fail(EXIT_PARSE, f"{path}: {exc}") from None
    except ModelError as exc:
        raise _Fail(EXIT_INVALID, "\n".join(f"{path}: {v}" for v in exc.violations)) from None


def _with_policy(model: ModelSpec) -> ModelSpec:
    """Resolve a ``"solve"`` policy by computing the mean-field equilibrium."""
    if model.policy is not None:
        return model
    res = solve_mfe(model)
    if not res.converged:
        raise _Fail(EXIT_NONCONVERGED, f"equilibrium solver did not converge (residual {res.residual:.3e})")
    return model.with_policy(res.policy)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _gamma(path: str, model: ModelSpec) -> np.ndarray:
    raw = _read_json(path)
    if isinstance(raw, dict):
        raw = raw.get("gamma", raw.get("flow"))
    try:
        g = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise _Fail(EXIT_PARSE, f"{path}: gamma must be a list of probability vectors") from None
    if g.ndim != 2 or g.shape[1] != model.ne or g.shape[0] > model.horizon + 1:
        raise _Fail(EXIT_INVALID, f"{path}: gamma shape {g.shape} incompatible with |E|={model.ne}, T={model.horizon}")
    if np.any(g < -1e-12) or np.any(np.abs(g.sum(axis=1) - 1) > 1e-9):
        raise _Fail(EXIT_INVALID, f"{path}: every gamma row must be a probability vector")
    return np.clip(g, 0.0, None) / np.clip(g, 0.0, None).sum(axis=1, keepdims=True)


def _event(args, model: ModelSpec) -> EventSpec:
    if len(args.target) != model.ne:
        raise _Fail(EXIT_INVALID, f"--target needs {model.ne} entries, got {len(args.target)}")
    if not 0 <= args.t <= model.horizon:
        raise _Fail(EXIT_INVALID, f"--t must lie in [0, {model.horizon}]")
    try:
        return EventSpec(args.t, args.target, args.epsilon)
    except ValueError as exc:
        raise _Fail(EXIT_INVALID, str(exc)) from None


def _finish(args, model, outputs, t0, extra=None):
    if args.out:
        write_manifest(sidecar_path(args.out), model, sys.argv if args.argv is None else args.argv,
                       getattr(args, "seed", None), time.perf_counter() - t0, outputs, extra)


# --- commands -----------------------------------------------------------------


def cmd_validate(args) -> int:
    model = _model(args.model)
    print(f"ok: |X|={model.nx} |A|={model.na} T={model.horizon} "
          f"policy={'solve' if model.policy is None else 'explicit'} sha256={config_hash(model)}")
    return EXIT_OK


def cmd_flow(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    flow = mean_field_flow(model)
    if args.out:
        dump_json({"config_sha256": config_hash(model), "flow": flow}, args.out)
        _finish(args, model, [args.out], t0)
    print(json.dumps(to_jsonable(flow)))
    return EXIT_OK


def cmd_rate(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    result: dict
    if args.kind == "path":
        if not args.phi:
            raise _Fail(EXIT_PARSE, "--kind path needs --phi")
        raw = _read_json(args.phi)
        try:
            phi = MarkovPathMeasure(np.asarray(raw["initial"], float), tuple(np.asarray(k, float) for k in raw["kernels"]))
        except (KeyError, TypeError, ValueError):
            raise _Fail(EXIT_PARSE, f"{args.phi}: expected {{'initial': [...], 'kernels': [...]}}") from None
        rep = path_rate(model, phi)
        result = rep.to_dict()
    else:
        if not args.gamma:
            raise _Fail(EXIT_PARSE, f"--kind {args.kind} needs --gamma")
        gamma = _gamma(args.gamma, model)
        if args.kind == "v":
            result = v_rate(model, gamma).to_dict()
        elif args.kind == "j":
            result = j_rate(model, gamma, tol=args.tol).to_dict()
        elif args.kind == "exact":
            value = i_project_exact(reference_path_measure(model, gamma), gamma, max_size=args.max_size)
            result = {"value": value}
        elif args.kind == "prop1":
            j = j_rate(model, gamma, tol=args.tol)
            v = v_rate(model, gamma)
            r = prop1_residual(model, gamma, tol=args.tol)
            gap = abs(j.value - v.value - r.value) if all(map(math.isfinite, (j.value, v.value, r.value))) else None
            result = {"value": r.value, "j": j.value, "v": v.value, "residual": r.value,
                      "identity_gap": gap, "j_report": j.to_dict(), "residual_report": r.to_dict()}
        else:  # prop2
            t = gamma.shape[0] - 1 if args.t is None else args.t
            if not 0 <= t < gamma.shape[0]:
                raise _Fail(EXIT_INVALID, f"--t must index a row of gamma (0..{gamma.shape[0] - 1})")
            if args.g_family:
                G = np.asarray(_read_json(args.g_family), dtype=float)
            else:
                G = np.random.default_rng(args.seed).normal(scale=2.0, size=(args.n_g, model.ne))
                G[0] = 0.0
            rep = dv_lower_bound(model, gamma[t], t, G, args.resolution)
            result = rep.to_dict()
    result["config_sha256"] = config_hash(model)
    result["kind"] = args.kind
    if args.out:
        dump_json(result, args.out)
        _finish(args, model, [args.out], t0)
    value = result["value"]
    print(f"{args.kind}: {value if isinstance(value, str) else _fmt(value)}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    trace, flow = simulate(model, N=args.N, seed=args.seed, variant=args.variant, replication=args.replication)
    digest = config_hash(model)
    outputs = []
    if args.out:
        header = ["t"] + [f"b_{x}_{a}" for x in model.state_space.labels for a in model.action_space.labels]
        rows = [[t] + [float(w) for w in flow.weights[t]] for t in range(model.horizon + 1)]
        write_csv(args.out, header, rows, digest)
        outputs.append(args.out)
    if args.trace:
        save_trace(args.trace, trace, model)
        outputs.append(args.trace)
    check = phi_check(model, trace) if args.variant == "own" else None
    if args.out:
        _finish(args, model, outputs, t0, {"phi_check": None if check is None else check._asdict()})
    if check is not None:
        print(f"phi_check: {'ok' if check.ok else 'FAILED'} discrepancy={check.discrepancy!r}")
    print(f"simulated N={args.N} T={model.horizon} variant={args.variant}")
    return EXIT_OK


def cmd_prob(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    event = _event(args, model)
    rows = []
    for N in args.N:
        est = estimate_probability(model, None, event, N, args.reps, _sub_seed(args.seed, N), args.variant, args.workers)
        rows.append([N, args.reps, est.hits, est.p_hat, est.lo, est.hi, est.hits == 0])
        print(f"N={N} p_hat={est.p_hat!r} [{est.lo!r}, {est.hi!r}]")
    if args.out:
        write_csv(args.out, ["N", "reps", "hits", "p_hat", "wilson_lo", "wilson_hi", "zero_hits"], rows, config_hash(model))
        _finish(args, model, [args.out], t0)
    return EXIT_OK


def cmd_ldp(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    event = _event(args, model)
    prefactor = {"auto": "auto", "on": True, "off": False}[args.prefactor]
    res = ldp_slope(model, None, event, args.N, args.reps, args.seed, args.variant, prefactor, args.workers)
    oracle = None
    # the ancestor variant has no proven rate here; its slope is compared with V as a hypothesis
    oracle_rate = "v" if args.variant == "ancestor" else "j"
    if not args.no_oracle:
        oracle = ball_rate_inf(model, event.target, event.epsilon, event.t, rate=oracle_rate).value
    if args.out:
        rows = [[r["N"], r["reps"], r["hits"], r["p_hat"], r["lo"], r["hi"], r["rate"], r["dropped"]] for r in res.rows]
        write_csv(args.out, ["N", "reps", "hits", "p_hat", "wilson_lo", "wilson_hi", "neg_log_p_over_N", "dropped"],
                  rows, config_hash(model))
        summary = {"slope": res.slope, "slope_se": res.slope_se, "slope_plain": res.slope_plain,
                   "prefactor_corrected": res.prefactor_corrected, "dropped_N": res.dropped,
                   "ball_rate_inf": oracle, "oracle_rate": oracle_rate}
        _finish(args, model, [args.out], t0, {"summary": summary})
    for r in res.rows:
        flag = "  (zero hits, dropped)" if r["dropped"] else ""
        print(f"N={r['N']} p_hat={r['p_hat']!r} rate={_fmt(r['rate'])}{flag}")
    print(f"extrapolated slope: {_fmt(res.slope)} +/- {_fmt(res.slope_se)}")
    if oracle is not None:
        label = "" if oracle_rate == "j" else " (V, exploratory for the ancestor variant)"
        print(f"ball rate infimum{label}: {_fmt(oracle)}")
    return EXIT_OK


def cmd_lln(args) -> int:
    t0 = time.perf_counter()
    model = _with_policy(_model(args.model))
    if not 0 <= args.t <= model.horizon:
        raise _Fail(EXIT_INVALID, f"--t must lie in [0, {model.horizon}]")
    rows = lln_curve(model, None, args.t, args.N, args.reps, args.seed, args.variant, args.workers)
    if args.out:
        write_csv(args.out, ["N", "reps", "mean_l1_error", "se"],
                  [[r["N"], r["reps"], r["mean_l1_error"], r["se"]] for r in rows], config_hash(model))
        _finish(args, model, [args.out], t0)
    for r in rows:
        print(f"N={r['N']} mean_l1_error={r['mean_l1_error']!r}")
    return EXIT_OK


def cmd_mfe(args) -> int:
    t0 = time.perf_counter()
    model = _model(args.model)
    if model.costs is None:
        raise _Fail(EXIT_INVALID, f"{args.model}: solving an equilibrium needs costs")
    res = solve_mfe(model, damping=args.damping, tol=args.tol, max_iter=args.max_iter)
    if args.out:
        dump_json({"config_sha256": config_hash(model), "policy": res.policy, "flow": res.flow,
                   "state_flow": res.state_flow, "iterations": res.iterations, "residual": res.residual,
                   "converged": res.converged}, args.out)
        _finish(args, model, [args.out], t0)
    print(f"residual: {res.residual!r} iterations: {res.iterations} converged: {res.converged}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgldp", description="Finite mean-field games: flows, rate functions and particle simulations.",
                                epilog="exit codes: 0 ok (an infinite rate is a valid answer), 2 parse error, 3 invalid model, 4 no convergence")
    p.add_argument("--version", action="version", version=f"mfgldp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--model", required=True, help="model config (JSON)")
        if out:
            sp.add_argument("--out", help="primary output file; a .manifest.json sidecar is written next to it")

    def sim_flags(sp, listed=True):
        if listed:
            sp.add_argument("--N", type=_ints, required=True, help="population sizes, comma separated")
            sp.add_argument("--reps", type=int, default=1000)
            sp.add_argument("--workers", type=int, default=None, help="threads (default: $MFGLDP_THREADS or 1)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--variant", choices=("own", "ancestor"), default="own")

    def event_flags(sp):
        sp.add_argument("--t", type=int, required=True, help="event time")
        sp.add_argument("--target", type=_floats, required=True, help="target law over E, comma separated")
        sp.add_argument("--epsilon", type=float, required=True, help="L1 radius")

    sp = sub.add_parser("validate", help="check a model config")
    common(sp, out=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("flow", help="mean-field state-action flow")
    common(sp)
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("rate", help="rate functions of a flow")
    common(sp)
    sp.add_argument("--gamma", help="JSON list of T+1 laws over E")
    sp.add_argument("--phi", help="Markov path law JSON for --kind path")
    sp.add_argument("--kind", choices=("v", "j", "exact", "prop1", "prop2", "path"), required=True)
    sp.add_argument("--tol", type=float, default=1e-10, help="bridge solver tolerance")
    sp.add_argument("--max-size", type=int, default=10_000, help="size cap for --kind exact")
    sp.add_argument("--t", type=int, default=None, help="time index for --kind prop2")
    sp.add_argument("--g-family", help="JSON list of test vectors for --kind prop2")
    sp.add_argument("--n-g", type=int, default=50, help="random test vectors for --kind prop2")
    sp.add_argument("--resolution", type=int, default=1000, help="simplex grid subdivisions for --kind prop2")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_rate)

    sp = sub.add_parser("simulate", help="one seeded particle run")
    common(sp)
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--replication", type=int, default=0)
    sp.add_argument("--trace", help="write the binary trace here")
    sim_flags(sp, listed=False)
    sp.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("prob", cmd_prob, "Monte Carlo ball probability"),
                                 ("ldp", cmd_ldp, "decay-rate table and extrapolated slope")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sim_flags(sp)
        event_flags(sp)
        if name == "ldp":
            sp.add_argument("--prefactor", choices=("auto", "on", "off"), default="auto")
            sp.add_argument("--no-oracle", action="store_true", help="skip the ball rate infimum")
        sp.set_defaults(func=func)

    sp = sub.add_parser("lln", help="mean L1 error to the mean-field flow")
    common(sp)
    sim_flags(sp)
    sp.add_argument("--t", type=int, required=True)
    sp.set_defaults(func=cmd_lln)

    sp = sub.add_parser("mfe", help="solve the mean-field equilibrium")
    common(sp)
    sp.add_argument("--damping", type=float, default=0.5)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=1000)
    sp.set_defaults(func=cmd_mfe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = ["mfgldp"] + list(argv) if argv is not None else None
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ModelError as exc:
        print("error: " + "\n".join(exc.violations), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
