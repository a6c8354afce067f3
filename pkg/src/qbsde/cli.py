"""Command-line front end.

``qbsde run <config>``, ``qbsde validate <config>`` and
``qbsde converge <config> --N 50,100,200,400``.  Exit codes: 0 success,
1 an applicable check failed (or the numerics failed), 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod

log = logging.getLogger("qbsde")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _report_config_error(exc: cfgmod.ConfigError) -> int:
    for path, msg in exc.errors:
        print(f"config error at {path}: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _parse_n_list(text: str) -> list[int]:
    try:
        out = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise cfgmod.ConfigError([("--N", f"not a comma-separated list of integers: {text!r}")]) from exc
    if not out or any(n < 1 for n in out):
        raise cfgmod.ConfigError([("--N", "step counts must be positive")])
    if any(b <= a for a, b in zip(out[:-1], out[1:])):
        raise cfgmod.ConfigError([("--N", "step counts must be strictly increasing")])
    return out


def _outdir(cfg: dict, override: str | None) -> str:
    return override if override else cfg["output"]["directory"]


def cmd_validate(args) -> int:
    try:
        cfg = cfgmod.load(args.config)
    except cfgmod.ConfigError as exc:
        return _report_config_error(exc)
    print(f"ok: {args.config} (config_sha256={cfgmod.config_hash(cfg)})")
    return EXIT_OK


def _execute(args, job) -> int:
    from .output import write_result
    from .solver import PicardError, RegressionError

    try:
        cfg = cfgmod.load(args.config)
        result = job(cfg)
    except cfgmod.ConfigError as exc:
        return _report_config_error(exc)
    except (PicardError, RegressionError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    digest = cfgmod.config_hash(cfg)
    outdir = _outdir(cfg, args.out)
    for path in write_result(result, cfg, digest, outdir):
        log.info("wrote %s", path)
    status = "FAIL" if result.failed else "ok"
    print(f"{status}: {result.command} -> {outdir} (config_sha256={digest})")
    return result.exit_code


def cmd_run(args) -> int:
    from .experiments import run

    return _execute(args, run)


def cmd_converge(args) -> int:
    from .experiments import convergence_table

    try:
        n_list = _parse_n_list(args.N)
    except cfgmod.ConfigError as exc:
        return _report_config_error(exc)
    return _execute(args, lambda cfg: convergence_table(cfg, n_list))


def cmd_schema(args) -> int:
    print(json.dumps(cfgmod.SCHEMA, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbsde", description="Quadratic BSDE solver, utility maximisation and theorem checks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log written files")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a solve/maximize/verify/ladder config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output.directory)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="validate a config against the schema")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    c = sub.add_parser("converge", help="table of Y0 against the number of lattice steps")
    c.add_argument("config")
    c.add_argument("--N", default="50,100,200,400", help="increasing comma-separated step counts")
    c.add_argument("--out", help="output directory (overrides output.directory)")
    c.set_defaults(func=cmd_converge)
    s = sub.add_parser("schema", help="print the config JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if os.environ.get("QBSDE_THREADS"):
        log.info("QBSDE_THREADS=%s", os.environ["QBSDE_THREADS"])
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
