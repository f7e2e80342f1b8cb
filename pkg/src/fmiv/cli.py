"""Command-line front end.

Every report starts with ``#`` manifest lines recording the subcommand, input,
resolved flags, seed, package version and a timestamp.  The timestamp honours
``SOURCE_DATE_EPOCH`` so reruns can be made byte-identical.

Exit codes: 0 success, 2 invalid input, 3 infeasible match, 4 balance gate
failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass

from . import __version__
from .balance import balance_gate, format_report, standardized_differences
from .data import check_match_consistency, format_match, load_cohort, read_match
from .distance import dump_distances
from .exceptions import DegenerateVarianceError, FmivError, InfeasibleMatchError, ValidationError, WeakInstrumentError
from .fullmatch import MatchConstraints, match_cohort, strata_histogram
from .inference import StratifiedSample, first_stage_test, infer, sign_score_test
from .propensity import expand_design, fit_propensity
from .sensitivity import DEFAULT_GAMMAS, amplify, bounds_from_sample
from .simulation import F_KINDS, SimulationPlan, run_study
from .tsls import fit_tsls

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_GATE = 0, 2, 3, 4


class GateFailure(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    input: str | None
    flags: dict
    seed: int | None
    timestamp: str

    def lines(self) -> list[str]:
        out = [
            f"# tool=fmiv {__version__}",
            f"# subcommand={self.subcommand}",
            f"# input={self.input}",
            f"# seed={self.seed}",
            f"# timestamp={self.timestamp}",
        ]
        out += [f"# {k}={v}" for k, v in sorted(self.flags.items())]
        return out


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None and epoch.strip().isdigit() else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _manifest(args, keys) -> RunManifest:
    flags = {k: getattr(args, k) for k in keys}
    return RunManifest(args.command, getattr(args, "input", None), flags, getattr(args, "seed", None), _timestamp())


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return f"{x:.10g}"
    return str(x)


def _emit(out, rows):
    for row in rows:
        out.write(",".join(_fmt(v) for v in row) + "\n")


def _constraints(args) -> MatchConstraints:
    return MatchConstraints(args.max_controls, args.max_treated)


def _histogram_lines(match):
    diag = strata_histogram(match)
    rows = [("stratum_size", "count")] + [(k, v) for k, v in diag.histogram.items()]
    rows += [("pairs", diag.pairs), ("one_treated_many_controls", diag.one_treated), ("one_control_many_treated", diag.one_control)]
    return rows


def cmd_match(args, out) -> int:
    cohort = load_cohort(args.input, blind=True)
    pipe = match_cohort(cohort, _constraints(args), args.caliper_sd)
    manifest = _manifest(args, ("caliper_sd", "max_controls", "max_treated", "threshold"))
    header = [line[2:] for line in manifest.lines()]
    header.append(f"total_distance={pipe.result.total_distance:.10g}")
    header.append(f"caliper_violations={pipe.distances.caliper_violations}")
    header += [f"flag={f}" for f in pipe.distances.flags]
    with open(args.match, "w", newline="") as fh:
        fh.write(format_match(pipe.match, cohort, header))
    if args.dump_distances:
        dump_distances(pipe.distances, args.dump_distances)
    report = standardized_differences(cohort, pipe.match, pipe.design, pipe.propensity.fitted_logits)
    gate = balance_gate(report, args.threshold)
    out.write("\n".join(manifest.lines()) + "\n")
    _emit(out, _histogram_lines(pipe.match))
    out.write(format_report(report))
    out.write(f"gate,{'pass' if gate.passed else 'fail'},{';'.join(gate.failing)}\n")
    if not gate.passed:
        raise GateFailure(gate.failing)
    return EXIT_OK


def _cohort_and_match(args, blind=False):
    if not args.match:
        raise ValidationError("--match is required")
    cohort = load_cohort(args.input, blind=blind)
    match, recorded = read_match(args.match)
    check_match_consistency(match, recorded, cohort)
    return cohort, match


def cmd_balance(args, out) -> int:
    cohort, match = _cohort_and_match(args, blind=True)
    design = expand_design(cohort)
    model = fit_propensity(cohort, design)
    report = standardized_differences(cohort, match, design, model.fitted_logits)
    gate = balance_gate(report, args.threshold)
    out.write("\n".join(_manifest(args, ("match", "threshold")).lines()) + "\n")
    out.write(format_report(report))
    out.write(f"gate,{'pass' if gate.passed else 'fail'},{';'.join(gate.failing)}\n")
    if not gate.passed:
        raise GateFailure(gate.failing)
    return EXIT_OK


def cmd_estimate(args, out) -> int:
    cohort, match = _cohort_and_match(args)
    sample = StratifiedSample.from_match(cohort, match)
    lambda_hat = sample.estimate()
    try:
        res = infer(cohort, match, args.null, args.alpha)
        test = (res.test_value, res.p_value, res.ci_low, res.ci_high, res.ci_shape)
    except DegenerateVarianceError as exc:
        # One stratum, or no spread in V: the estimate stands, the test does not.
        print(f"warning: {exc}", file=sys.stderr)
        res = None
        test = (math.nan, math.nan, math.nan, math.nan, "undefined")
    t_d, p_d = first_stage_test(cohort, match) if len(match) > 1 else (float(sample.H.mean()), math.nan)
    out.write("\n".join(_manifest(args, ("match", "null", "alpha", "per_stratum")).lines()) + "\n")
    _emit(
        out,
        [
            ("quantity", "value"),
            ("lambda_hat", lambda_hat),
            ("null", args.null),
            ("test_value", test[0]),
            ("p_value", test[1]),
            ("ci_low", test[2]),
            ("ci_high", test[3]),
            ("ci_shape", test[4]),
            ("alpha", args.alpha),
            ("strata", len(match)),
            ("first_stage_T", t_d),
            ("first_stage_p", p_d),
        ],
    )
    if args.per_stratum:
        v = sample.V(args.null)
        _emit(out, [("stratum", "V", "G", "H")])
        _emit(out, [(i + 1, vi, g, h) for i, (vi, g, h) in enumerate(zip(v, sample.G, sample.H))])
    return EXIT_OK


def cmd_sensitivity(args, out) -> int:
    cohort, match = _cohort_and_match(args)
    sample = StratifiedSample.from_match(cohort, match)
    gammas = args.gamma or list(DEFAULT_GAMMAS)
    out.write("\n".join(_manifest(args, ("match", "gamma", "amplify")).lines()) + "\n")
    rows = [("gamma", "p_min", "p_max", "statistic")]
    for g in gammas:
        res = bounds_from_sample(sample, g)
        rows.append((g, res.p_min, res.p_max, res.statistic))
    _emit(out, rows)
    ss = sign_score_test(sample)
    try:
        primary = sample.p_value(0.0)
    except DegenerateVarianceError:
        primary = math.nan
    _emit(out, [("sign_score_p_gamma1", ss.p_value), ("effect_ratio_p_null0", primary)])
    if args.amplify:
        _emit(out, [("gamma", "delta", "lambda")])
        for g in gammas:
            if g > 1:
                _emit(out, [(g, d, lam) for d, lam in amplify(g).curve])
    return EXIT_OK


def cmd_tsls(args, out) -> int:
    cohort = load_cohort(args.input)
    design = expand_design(cohort)
    fit = fit_tsls(cohort, design, args.null)
    out.write("\n".join(_manifest(args, ("null",)).lines()) + "\n")
    _emit(
        out,
        [
            ("quantity", "value"),
            ("beta_hat", fit.beta_hat),
            ("se", fit.se),
            ("t_stat", fit.t_stat),
            ("p_value", fit.p_value),
            ("first_stage_F", fit.first_stage_F),
        ],
    )
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    kinds = args.f_kind or ["linear"]
    manifest = _manifest(args, ("f_kind", "strength", "replicates", "discretize", "caliper_sd"))
    out.write("\n".join(manifest.lines()) + "\n")
    cols = ("f_kind", "concentration", "estimator", "median", "abs_bias_of_median", "mad", "type1_rate", "type1_halfwidth", "n_used", "n_failed")
    _emit(out, [cols])
    for kind in kinds:
        plan = SimulationPlan.with_concentration(
            args.strength,
            f_kind=kind,
            replicates=args.replicates,
            master_seed=args.seed,
            discretize_exposure=args.discretize,
            caliper_sd=args.caliper_sd,
        )
        rep = run_study(plan)
        for s in rep.estimators.values():
            _emit(out, [(kind, rep.concentration_parameter, s.name, s.median, s.abs_bias_of_median, s.mad, s.type1_rate, s.type1_halfwidth, s.n_used, s.n_failed)])
    return EXIT_OK


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmiv", description="Full-matching instrumental-variables analysis.")
    parser.add_argument("--version", action="version", version=f"fmiv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_match=False, match_help="match file"):
        p.add_argument("--input", required=True, help="cohort table (comma or tab separated, header row)")
        p.add_argument("--match", required=needs_match, help=match_help)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("match", help="propensity fit, distances and optimal full match (outcome-blind)")
    common(p, True, "output path for the match file")
    p.add_argument("--caliper-sd", type=float, default=0.2)
    p.add_argument("--max-controls", type=_positive_int, default=None)
    p.add_argument("--max-treated", type=_positive_int, default=None)
    p.add_argument("--threshold", type=float, default=0.1, help="balance gate threshold")
    p.add_argument("--dump-distances", default=None, metavar="PATH")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("balance", help="balance report for an existing match")
    common(p, True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("estimate", help="effect ratio, test and confidence interval")
    common(p, True)
    p.add_argument("--null", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--per-stratum", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="sign-score p-value bounds for binary outcomes")
    common(p, True)
    p.add_argument("--gamma", type=float, action="append")
    p.add_argument("--amplify", action="store_true")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("tsls", help="two-stage least squares reference fit")
    p.add_argument("--input", required=True)
    p.add_argument("--null", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_tsls)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of matching and 2SLS")
    p.add_argument("--f-kind", action="append", choices=sorted(F_KINDS))
    p.add_argument("--strength", type=float, default=80.0, help="target concentration parameter")
    p.add_argument("--replicates", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=SimulationPlan.master_seed)
    p.add_argument("--discretize", action="store_true")
    p.add_argument("--caliper-sd", type=float, default=0.2)
    p.set_defaults(func=cmd_simulate, input=None)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except GateFailure as exc:
        print(f"balance gate failed: {', '.join(exc.args[0])}", file=sys.stderr)
        return EXIT_GATE
    except InfeasibleMatchError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValidationError, WeakInstrumentError, DegenerateVarianceError, FmivError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
