"""Command-line front end: ``safereg run | identify | validate | report``.

Exit codes: 0 all checks pass, 1 configuration error, 2 safety (or other
closed-loop property) violation, 3 identification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dmd
from .errors import (AliasingError, ClassificationError, ConfigurationError, ConjugatePairingError,
                     DataInconsistencyError, RankDeficiencyError, SaferegError, SimpleSpectrumError)
from .simloop import BUILTIN_SCENARIOS, RunAborted, load_scenario, run_batch

EXIT_OK, EXIT_CONFIG, EXIT_SAFETY, EXIT_IDENT = 0, 1, 2, 3

IDENT_ERRORS = (RankDeficiencyError, ClassificationError, SimpleSpectrumError, AliasingError,
                ConjugatePairingError, DataInconsistencyError)

# which identification hypothesis each failure breaks
HYPOTHESIS = {
    RankDeficiencyError: "snapshot Hankel rank condition (every mode excited by the initial state)",
    SimpleSpectrumError: "simple spectrum of the extended system",
    AliasingError: "no aliasing of discrete eigenvalues at the sampling period",
    ClassificationError: "separability of disturbance (imaginary-axis) and plant eigenvalues",
    ConjugatePairingError: "real reconstruction from conjugate-paired eigenvalues",
    DataInconsistencyError: "consistency of the delay/gain regression data",
}


def _err(msg: str) -> None:
    print(f"safereg: {msg}", file=sys.stderr)


def exit_code_for_error(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, RunAborted) else exc
    return EXIT_IDENT if isinstance(cause, IDENT_ERRORS) else EXIT_CONFIG


def describe_error(exc: BaseException) -> str:
    cause = exc.cause if isinstance(exc, RunAborted) else exc
    for kind, hyp in HYPOTHESIS.items():
        if isinstance(cause, kind):
            return f"{exc} [violated hypothesis: {hyp}]"
    return str(exc)


def exit_code_for_metrics(metrics: dict) -> int:
    checks = metrics.get("checks", {})
    if checks.get("safety") is False:
        return EXIT_SAFETY
    if checks.get("identification") is False:
        return EXIT_IDENT
    if any(v is False for v in checks.values()):
        return EXIT_SAFETY
    return EXIT_OK


def parse_overrides(items) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible, else kept as strings."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def report_lines(metrics: dict) -> list[str]:
    lines = [f"scenario {metrics.get('scenario')} ({metrics.get('mode')})"]
    for name, ok in metrics.get("checks", {}).items():
        lines.append(f"  {'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}  {name}")
    for key in ("min_h_after_D", "min_h1_after_D", "min_h_after_recovery", "final_abs_e", "max_abs_series",
                "t_f", "D_err_at_tf", "b_err_at_tf", "a_err_at_tf", "Sd_err_at_tf", "envelope_violations",
                "observer_decay_rate", "delta_L"):
        if metrics.get(key) is not None:
            lines.append(f"  {key} = {metrics[key]}")
    return lines


# -- subcommands ---------------------------------------------------------------

def cmd_run(args) -> int:
    overrides = parse_overrides(args.override)
    cfgs = [load_scenario(ref) for ref in args.scenario]
    if overrides:
        cfgs = [c.with_overrides(overrides) for c in cfgs]
    if args.t_end is not None:
        cfgs = [c.with_overrides({"T_end": args.t_end}) for c in cfgs]
    for c in cfgs:
        c.validate()
    results = run_batch(cfgs, max_workers=args.jobs)
    out = Path(args.out)
    codes = []
    for cfg, res in zip(cfgs, results):
        target = out / cfg.name if len(cfgs) > 1 else out
        if isinstance(res, BaseException):
            target.mkdir(parents=True, exist_ok=True)
            if isinstance(res, RunAborted):
                (target / "events.json").write_text(json.dumps(res.events, indent=2) + "\n")
            _err(f"{cfg.name}: {describe_error(res)}")
            codes.append(exit_code_for_error(res))
            continue
        res.write(target)
        print("\n".join(report_lines(res.metrics)))
        codes.append(exit_code_for_metrics(res.metrics))
    return max(codes) if codes else EXIT_OK


def cmd_identify(args) -> int:
    try:
        T_d, names, S = dmd.read_snapshots(args.snapshots)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read snapshots: {exc}") from exc
    if args.T_d is not None and abs(args.T_d - T_d) > 1e-9 * max(1.0, T_d):
        raise ConfigurationError(f"--T-d {args.T_d} disagrees with the snapshot spacing {T_d}")
    nt = args.n + args.n_d
    if args.n_tilde is not None and args.n_tilde != nt:
        raise ConfigurationError(f"--n-tilde {args.n_tilde} differs from n + n_d = {nt}")
    if args.mode == "output" and S.shape[0] != 1:
        raise ConfigurationError("output mode needs exactly one snapshot component")
    if args.mode == "full" and S.shape[0] != nt:
        raise ConfigurationError(f"full mode needs {nt} components, file has {S.shape[0]}")
    if S.shape[1] < 2 * nt:
        raise ConfigurationError(f"need {2 * nt} snapshots, file has {S.shape[1]}")
    S = S[:, :2 * nt]
    if args.mode == "full":
        res = dmd.identify_full(S, args.n, args.n_d, T_d)
    else:
        res = dmd.identify_output(S[0], args.n, args.n_d, T_d)
    doc = {
        "mode": args.mode, "n": args.n, "n_d": args.n_d, "T_d": T_d,
        "A": res.A_hat.tolist(), "S_d": res.S_d_hat.tolist(),
        "eigenvalues": [[float(z.real), float(z.imag)] for z in np.asarray(res.eigenvalues, dtype=complex)],
        "residuals": res.diagnostics,
    }
    if args.mode == "full":
        doc["G_bar"] = np.asarray(res.G_bar_hat).tolist()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "theta1.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out / 'theta1.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_scenario(args.scenario)
    overrides = parse_overrides(args.override)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    items = dmd.validate_scenario(cfg.system(), cfg.exosystem(), cfg.T_d)
    code = EXIT_OK
    print(f"scenario {cfg.name}: configuration OK")
    for it in items:
        print(f"  {'PASS' if it.passed else 'FAIL'}  {it.name}: {it.detail}")
        if not it.passed:
            code = EXIT_IDENT
    return code


def cmd_report(args) -> int:
    path = Path(args.run)
    path = path / "metrics.json" if path.is_dir() else path
    try:
        metrics = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read metrics from {path}: {exc}") from exc
    print("\n".join(report_lines(metrics)))
    return exit_code_for_metrics(metrics)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safereg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one or more scenarios and write series/events/metrics")
    r.add_argument("--scenario", action="append", required=True,
                   help=f"built-in name ({', '.join(BUILTIN_SCENARIOS)}) or JSON file; repeatable")
    r.add_argument("--out", default="out", help="output directory (one subdirectory per scenario when several)")
    r.add_argument("--override", action="append", metavar="KEY=VALUE", help="override a scenario field")
    r.add_argument("--t-end", type=float, default=None, help="shorten or extend the horizon")
    r.add_argument("--jobs", type=int, default=None, help="worker processes for several scenarios")
    r.set_defaults(func=cmd_run)

    i = sub.add_parser("identify", help="identify (A, S_d[, G_bar]) from a snapshot CSV")
    i.add_argument("--snapshots", required=True, help="CSV with header k,t,<components>")
    i.add_argument("--n", type=int, required=True, help="plant order")
    i.add_argument("--n-d", type=int, required=True, help="disturbance model order")
    i.add_argument("--n-tilde", type=int, default=None, help="extended order (must equal n + n_d)")
    i.add_argument("--T-d", dest="T_d", type=float, default=None, help="sampling period (checked against the file)")
    i.add_argument("--mode", choices=("full", "output"), default="full")
    i.add_argument("--out", default="out")
    i.set_defaults(func=cmd_identify)

    v = sub.add_parser("validate", help="check a scenario and its identification hypotheses")
    v.add_argument("--scenario", required=True)
    v.add_argument("--override", action="append", metavar="KEY=VALUE")
    v.set_defaults(func=cmd_validate)

    rp = sub.add_parser("report", help="pass/fail summary of a finished run")
    rp.add_argument("--run", required=True, help="run directory or metrics.json")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SaferegError as exc:
        _err(describe_error(exc))
        return exit_code_for_error(exc)


if __name__ == "__main__":
    sys.exit(main())
