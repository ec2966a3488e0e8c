"""Command-line entry point: ``vsriss run | list | export``.

Exit codes: 0 when every check met its expectation, 1 when one did not,
2 for configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import __version__, runner, scenarios

EXIT_OK, EXIT_UNMET, EXIT_ERROR = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsriss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vsriss {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run scenarios (built-in names or config files)")
    r.add_argument("targets", nargs="*", help="scenario names or YAML/JSON paths")
    r.add_argument("--all", action="store_true", help="run every built-in scenario")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--slack", type=float, help="override the inequality slack")
    r.add_argument("--threads", type=int, default=1, help="run check blocks concurrently")
    r.add_argument("--out-dir", type=Path, help="output root (env VSRISS_OUT_DIR)")

    ls = sub.add_parser("list", help="list built-in scenarios")
    ls.add_argument("--show", metavar="NAME", help="print a scenario's config as YAML")

    e = sub.add_parser("export", help="write a scenario's trajectory as CSV")
    e.add_argument("target")
    e.add_argument("-o", "--out", type=Path, help="CSV path (stdout if omitted)")
    e.add_argument("--seed", type=int)
    e.add_argument("--system", choices=["approx", "exact"], default="approx")
    e.add_argument("--dense", type=float, metavar="DT",
                   help="integrate the plant under zero-order hold and emit every DT")
    return p


def _run(args) -> int:
    targets = list(args.targets) + (scenarios.builtin_names() if args.all else [])
    if not targets:
        print("run: give at least one scenario or --all", file=sys.stderr)
        return EXIT_ERROR
    out_dir = args.out_dir or runner.default_out_dir()
    code = EXIT_OK
    for t in targets:
        try:
            sc = runner.validate(runner.load_config(t), args.seed, args.slack)
            res = runner.run_scenario(sc, out_dir, max(1, args.threads))
        except runner.ConfigError as exc:
            print(f"{t}: config error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        except Exception as exc:  # runtime failures are reported, not raised
            print(f"{t}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_ERROR
        for c in res.checks:
            mark = "ok " if c.met else "UNMET"
            print(f"[{mark}] {sc.name} / {c.name} ({c.kind}): expected {c.expect}, got {c.outcome}")
        print(f"{sc.name}: {'all expectations met' if res.all_met else 'unmet expectations'}"
              f" -> {out_dir / sc.name}")
        if not res.all_met:
            code = EXIT_UNMET
    return code


def _list(args) -> int:
    if args.show:
        try:
            print(yaml.safe_dump(scenarios.builtin(args.show), sort_keys=False), end="")
        except KeyError as exc:
            print(exc.args[0], file=sys.stderr)
            return EXIT_ERROR
        return EXIT_OK
    for name in scenarios.builtin_names():
        print(f"{name}\t{scenarios.BUILTIN[name]['description']}")
    return EXIT_OK


def _export(args) -> int:
    try:
        sc = runner.validate(runner.load_config(args.target), args.seed)
        text = runner.export_trajectory(sc, args.system, args.dense)
    except runner.ConfigError as exc:
        print(f"{args.target}: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": _run, "list": _list, "export": _export}[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
