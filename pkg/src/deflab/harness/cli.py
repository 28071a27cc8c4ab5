"""Command-line entry point.

Exit codes: 0 when every verdict passes, 2 when some verdict fails, 1 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time

from ..errors import DeflabError
from .config import config_from_mapping, load_config_file, parse_n_list
from .experiments import ORACLE_QUANTITIES, run_experiment

EXIT_PASS, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

SUBCOMMANDS = {
    "verify-counterexample": "counterexample",
    "max-closure": "max-closure",
    "arbitrage": "arbitrage",
    "oracle": "oracle",
    "simulate": "simulate",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with config keys; flags override it")
    p.add_argument("--a", type=float, help="passage level (required)")
    p.add_argument("--T", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--scheme", choices=("exact", "euler"))
    p.add_argument("--bridge", type=_on_off, metavar="on|off")
    p.add_argument("--n", dest="n_list", type=parse_n_list, metavar="LIST",
                   help="comma-separated kernel levels, e.g. 0,1,2,4,8")
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--refine-paths", dest="refine_paths", type=int,
                   help="paths used by the step-doubling studies")
    p.add_argument("--out", help="JSON report path; a CSV is written next to it")
    p.add_argument("--csv", help="explicit CSV side-file path")
    p.add_argument("--record-runtime", dest="record_runtime", action="store_true", default=None,
                   help="store wall-clock time in the report (breaks byte-identical reruns)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deflab", description="Deflator and arbitrage experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "max-closure":
            p.add_argument("--nu1")
            p.add_argument("--nu2")
            p.add_argument("--checkpoint", type=float)
        if name == "arbitrage":
            p.add_argument("--threshold", type=float)
            p.add_argument("--hedge-ceiling", dest="hedge_ceiling", type=float)
        if name == "oracle":
            p.add_argument("--quantity", choices=ORACLE_QUANTITIES)
            p.add_argument("--tol", type=float)
            p.add_argument("--x0", type=float)
            p.add_argument("--u", type=float)
            p.add_argument("--t", type=float)
            p.add_argument("--x", type=float)
    return parser


def _config(args):
    data = load_config_file(args.config) if args.config else {}
    skip = {"command", "config", "csv"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            data[key] = value
    if "a" not in data:
        raise UsageError(f"{build_parser().format_usage()}deflab: error: --a is required")
    data["experiment"] = SUBCOMMANDS[args.command]
    return config_from_mapping(data)


def _print_oracle(report, out):
    for q in report.quantities:
        extra = report.diagnostics.get(q.name, {})
        err = f"  error {extra['error']:.3e}" if "error" in extra else ""
        out.write(f"{q.name} = {q.oracle:.12g}{err}\n")


def run_cli(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        start = time.perf_counter()
        report = run_experiment(cfg)
        if cfg.record_runtime:
            report.runtime_seconds = time.perf_counter() - start
    except UsageError as exc:
        stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except DeflabError as exc:
        stderr.write(f"deflab: error: {exc}\n")
        return EXIT_USAGE
    if cfg.experiment == "oracle":
        _print_oracle(report, stdout)
    if cfg.out:
        report.write(cfg.out, args.csv)
    elif cfg.experiment != "oracle":
        stdout.write(report.to_json())
    if not report.passed:
        stderr.write(f"deflab: verdict failed: {', '.join(report.failures)}\n")
        return EXIT_FAIL
    return EXIT_PASS


def main():
    sys.exit(run_cli())
