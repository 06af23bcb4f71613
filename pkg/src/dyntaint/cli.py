"""Command-line front end.

Exit codes: 0 clean run, 1 parse/config error, 2 alarm raised,
3 divergence between modes in ``compare``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from typing import Optional

from .apps import APP_POLICY, APPS
from .engine import HANDLER_MODES, MODES, EngineConfig, ExecStats, execute, summary_csv
from .isa import ParseError, parse_program
from .policy import POLICIES, make_policy

EXIT_OK, EXIT_CONFIG, EXIT_ALARM, EXIT_DIVERGENCE = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _read_program(path: str):
    try:
        with open(path) as fh:
            return parse_program(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read program: {exc}") from None
    except ParseError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _read_input(path: Optional[str]) -> bytes:
    if not path:
        return b""
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from None


def _resolve_policy(app: str, policy: Optional[str]) -> str:
    if app != "none":
        need = APP_POLICY[app]
        if policy is None:
            return need
        if policy != need:
            raise ConfigError(f"app {app!r} requires policy {need!r}, got {policy!r}")
        return policy
    return policy or "bitwise"


def _config(args, mode: str, max_paths: Optional[int] = None) -> EngineConfig:
    try:
        return EngineConfig(mode=mode, handlers=args.handlers, threshold=args.threshold,
                            max_paths=args.max_paths if max_paths is None else max_paths,
                            max_steps=args.max_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write(path: Optional[str], text: str):
    if path:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_run(args) -> int:
    program = _read_program(args.program)
    data = _read_input(args.input)
    policy_name = _resolve_policy(args.app, args.policy)
    config = _config(args, args.mode)
    monitor = APPS[args.app]() if args.app != "none" else None
    result = execute(program, make_policy(policy_name), config,
                     [monitor] if monitor else [], data)
    _write(args.stats_out, result.stats.dumps())
    _write(args.shadow_out, result.shadow.dump())
    alarms = monitor.alarms if monitor else []
    for alarm in alarms:
        print(alarm.json_line())
    if monitor is not None:
        if args.app == "fuzz":
            report = monitor.offsets.dumps() + "\n"
        else:
            report = "".join(a.json_line() + "\n" for a in alarms)
        _write(args.report_out, report)
    if result.error is not None:
        print(f"error: run aborted: {result.error}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_ALARM if alarms else EXIT_OK


COMPARE_COLUMNS = [
    "policy", "mode", "max_paths", "handler_invocations", "context_switches", "exec_none",
    "exec_fp", "exec_full", "fp_generated", "reverts", "flushes", "clean_calls",
]


def _int_list(text: str) -> list:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None
    if not out or any(x < 0 for x in out):
        raise ConfigError(f"bad integer list {text!r}")
    return out


def compare_rows(program, data: bytes, policies, modes, sweep, args) -> tuple:
    """Run every (policy, mode, max-paths) cell; returns (rows, divergences)."""
    rows, divergent = [], []
    for policy_name in policies:
        reference = None
        for mode in modes:
            for mp in sweep:
                result = execute(program, make_policy(policy_name), _config(args, mode, mp), (), data)
                if result.error is not None:
                    raise ConfigError(f"run aborted ({policy_name}, {mode}): {result.error}")
                observed = (result.shadow.dump(), result.state.snapshot())
                if reference is None:
                    reference = observed
                elif observed != reference:
                    divergent.append((policy_name, mode, mp))
                s = result.stats
                rows.append({
                    "policy": policy_name, "mode": mode, "max_paths": mp,
                    "handler_invocations": s.handler_invocations,
                    "context_switches": s.context_switches, "exec_none": s.exec_none,
                    "exec_fp": s.exec_fp, "exec_full": s.exec_full,
                    "fp_generated": s.fp_generated, "reverts": s.reverts,
                    "flushes": s.flushes, "clean_calls": s.clean_calls,
                })
    return rows, divergent


def cmd_compare(args) -> int:
    program = _read_program(args.program)
    data = _read_input(args.input)
    policies = args.policy.split(",") if args.policy else ["bitwise"]
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}")
    modes = args.modes.split(",")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    sweep = _int_list(args.sweep) if args.sweep else [args.max_paths]
    rows, divergent = compare_rows(program, data, policies, modes, sweep, args)
    if divergent:
        for cell in divergent:
            print("divergence: shadow or machine state differs for policy=%s mode=%s max_paths=%d"
                  % cell, file=sys.stderr)
        return EXIT_DIVERGENCE
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        _write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_stats_table(args) -> int:
    if not args.files:
        raise ConfigError("no stats files given")
    runs = {}
    for path in args.files:
        try:
            with open(path) as fh:
                runs[os.path.basename(path)] = ExecStats.from_json(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: schema mismatch: {exc}") from None
    text = summary_csv(runs)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _engine_flags(p: argparse.ArgumentParser, with_mode: bool = True):
    p.add_argument("--program", required=True)
    p.add_argument("--input")
    if with_mode:
        p.add_argument("--policy", choices=sorted(POLICIES))
        p.add_argument("--mode", choices=MODES, default="dynamic-fp")
    p.add_argument("--handlers", choices=HANDLER_MODES, default="call")
    p.add_argument("--threshold", type=int, default=16)
    p.add_argument("--max-paths", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=1_000_000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyntaint", description="Dynamic taint analysis "
                                     "with just-in-time fast paths on a small register machine.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one program under a policy and mode")
    _engine_flags(run)
    run.add_argument("--app", choices=["none", *APPS], default="none")
    run.add_argument("--stats-out")
    run.add_argument("--shadow-out")
    run.add_argument("--report-out")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="run all modes, check they agree, emit counters as CSV")
    _engine_flags(cmp, with_mode=False)
    cmp.add_argument("--policy", help="comma-separated policies (default bitwise)")
    cmp.add_argument("--modes", default=",".join(MODES))
    cmp.add_argument("--sweep", help="comma-separated max-paths values")
    cmp.add_argument("--out")
    cmp.set_defaults(func=cmd_compare)

    st = sub.add_parser("stats-table", help="summarise stats JSON files as a CSV table")
    st.add_argument("files", nargs="*")
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
