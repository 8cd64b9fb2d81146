"""Command-line interface: ``swssre power | simulate | figure``.

Exit codes: 0 success, 2 usage error, 3 invalid configuration or input,
4 runtime failure (including scenarios recorded as error rows).
"""

from __future__ import annotations

import argparse
import logging
import sys

from swssre.design import VarianceComponents, build_standard_allocation
from swssre.manifest import NAMED_DESIGNS, ManifestError, bundled_config_names, load_manifest
from swssre.power import TestSpec, power_fixed, required_n_fixed
from swssre.report import emit_figure_data, run_manifest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

DEFAULT_OUT = "swssre-out"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="manifest path or bundled config name")
    p.add_argument("--replicates", type=int, help="override the manifest's replicate count")
    p.add_argument("--seed", type=int, help="override the manifest's seed")
    p.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
    p.add_argument("--out", help="output directory (default: manifest 'out' or ./swssre-out)")
    p.add_argument("--resume", action="store_true", help="skip scenarios already in progress.jsonl")
    p.add_argument("--quiet", action="store_true", help="no per-scenario progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swssre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("power", help="planned sample size per cluster per period")
    p.add_argument("--config", help="manifest whose base scenario supplies the design and assumed variances")
    p.add_argument("--design", choices=sorted(NAMED_DESIGNS), help="named standard design")
    p.add_argument("--clusters", type=int, help="number of clusters C")
    p.add_argument("--periods", type=int, help="number of periods T")
    p.add_argument("--switches", type=_int_list, help="clusters switching in each period, e.g. 0,1,1,1,1")
    p.add_argument("--sigma-c-sq", type=float, help="assumed between-cluster variance")
    p.add_argument("--sigma-e-sq", type=float, help="assumed residual variance")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--delta", type=float)
    p.add_argument("--n", type=int, help="report the power at this n instead of searching")
    p.add_argument("--verbose", action="store_true", help="also print the inputs and attained power")

    p = sub.add_parser("simulate", help="run a manifest and write results.csv")
    _add_run_flags(p)
    p = sub.add_parser("figure", help="run a period-effect sweep and write figure_data.csv")
    _add_run_flags(p)
    sub.add_parser("configs", help="list bundled configs")
    return parser


def _power(args, parser) -> int:
    if args.config:
        m = load_manifest(args.config)
        spec = m.scenarios[0].spec if m.scenarios else None
        if spec is None:
            raise ManifestError(f"{args.config}: no scenarios")
        X, vc, ts = spec.X, spec.assumed, spec.test
    else:
        if args.design:
            C, T, sw = NAMED_DESIGNS[args.design]
        elif args.clusters and args.periods and args.switches:
            C, T, sw = args.clusters, args.periods, args.switches
        else:
            parser.error("power needs --config, --design, or --clusters/--periods/--switches")
        missing = [f for f in ("sigma_c_sq", "sigma_e_sq", "delta") if getattr(args, f) is None]
        if missing:
            parser.error("power needs " + ", ".join("--" + f.replace("_", "-") for f in missing))
        X = build_standard_allocation(C, T, sw)
        vc = VarianceComponents(args.sigma_c_sq, args.sigma_e_sq)
        ts = TestSpec(args.alpha, args.beta, args.delta)
    if args.n is not None:
        print(f"{power_fixed(X, args.n, vc, ts):.6g}")
        return EXIT_OK
    n = required_n_fixed(X, vc, ts)
    print(n)
    if args.verbose:
        print(f"C={X.C} T={X.T} sigma_c_sq={vc.sigma_c_sq:.6g} sigma_e_sq={vc.sigma_e_sq:.6g}")
        print(f"alpha={ts.alpha:.6g} beta={ts.beta:.6g} delta={ts.delta:.6g}")
        print(f"power(n)={power_fixed(X, n, vc, ts):.6g} power(n-1)={power_fixed(X, n - 1, vc, ts):.6g}")
    return EXIT_OK


def _run(args, figure: bool) -> int:
    m = load_manifest(args.config)
    out = args.out or m.out or DEFAULT_OUT

    def show(row):
        if not args.quiet:
            tag = row["err"] if row["status"] == "ok" else "ERROR " + row["message"]
            print(
                f"[{row['index']}] {row['tds']} {row['method']} {row['rate']} "
                f"{row['variance_scenario']} t={row['t']} sigma_pi_sq={row['sigma_pi_sq']}: {tag}",
                file=sys.stderr,
            )

    runner = emit_figure_data if figure else run_manifest
    table = runner(m, out, args.replicates, args.seed, args.workers, args.resume, show)
    print(f"{out}")
    failed = [r for r in table.rows if r["eti"] == ""] if figure else table.errors
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "power":
            return _power(args, parser)
        if args.command == "configs":
            print("\n".join(bundled_config_names()))
            return EXIT_OK
        return _run(args, figure=args.command == "figure")
    except ManifestError as exc:
        print(f"swssre: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"swssre: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"swssre: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
