"""Command-line entry point.

Subcommands:

* ``simulate``  run a scenario, write the trace CSV and a metrics file
* ``verify``    structure/consistency checks; exit 0 only if all pass
* ``sweep``     run a scenario across a parameter axis
* ``params``    dump the stack parameters (defaults or a scenario's)

Exit codes: 0 success, 1 verification failure, 2 runtime/integration
fault, 3 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import config, sim, verify
from .errors import ConfigError, FdsimError, IntegrationFault
from .params import StackParams

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_RUNTIME_FAULT = 2
EXIT_CONFIG = 3


def _add_common(sub):
    sub.add_argument("--scenario", required=True, help="scenario config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE",
                     help="override a config entry (repeatable)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    sub.add_argument("--quiet", "-q", action="store_true")
    sub.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fdsim",
        description="Segmented hydrogen-delivery pressure dynamics: "
                    "simulation, energy-shaping control and verification.")
    subs = ap.add_subparsers(dest="command", required=True)

    s = subs.add_parser("simulate", help="run a scenario and write trace/metrics")
    _add_common(s)
    s.add_argument("--out", default=None, help="trace CSV path")
    s.add_argument("--metrics", default=None, help="metrics text path")

    s = subs.add_parser("verify", help="run the structure verification battery")
    _add_common(s)

    s = subs.add_parser("sweep", help="run a scenario across a parameter axis")
    _add_common(s)
    s.add_argument("--out-dir", required=True, help="directory for outputs")

    s = subs.add_parser("params", help="parameter utilities")
    s.add_argument("action", choices=["dump", "template"])
    s.add_argument("--scenario", default=None)
    s.add_argument("--set", dest="overrides", action="append", default=[])
    return ap


def _load(args) -> tuple[sim.Scenario, dict]:
    cfg = config.load_config(args.scenario)
    config.apply_overrides(cfg, args.overrides)
    scn, extras = config.build_scenario(cfg)
    if args.seed is not None:
        scn = dataclasses.replace(scn, seed=args.seed)
    return scn, extras


def cmd_simulate(args) -> int:
    scn, _ = _load(args)
    out_path = Path(args.out) if args.out else Path(f"{scn.name}_trace.csv")
    metrics_path = (Path(args.metrics) if args.metrics
                    else out_path.with_suffix(".metrics.txt"))
    try:
        trace = sim.run_scenario(scn)
    except IntegrationFault as exc:
        print(f"integration fault: {exc}", file=sys.stderr)
        partial = getattr(exc, "partial_trace", None)
        if partial is not None and len(partial):
            partial.to_csv(out_path)
            print(f"partial trace written to {out_path}", file=sys.stderr)
        if exc.state is not None:
            print(f"state dump: {list(exc.state)}", file=sys.stderr)
        return EXIT_RUNTIME_FAULT
    trace.to_csv(out_path)
    m = sim.metrics(trace, settle_band=scn.settle_band)
    metrics_path.write_text(sim.metrics_text(m))
    if not args.quiet:
        print(f"trace: {out_path} ({len(trace)} rows)")
        print(f"metrics: {metrics_path}")
        if args.verbose:
            print(sim.metrics_text(m), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    scn, extras = _load(args)
    results, ok = verify.run_verify(scn, extras.get("verify", {}))
    for r in results:
        print(r.line())
    print("verify:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_sweep(args) -> int:
    cfg = config.load_config(args.scenario)
    config.apply_overrides(cfg, args.overrides)
    _, extras = config.build_scenario(cfg)
    swp = extras.get("sweep", {})
    if "parameter" not in swp or "values" not in swp:
        raise ConfigError("sweep needs [sweep] parameter and values")
    target = swp["parameter"]
    if "." not in target:
        raise ConfigError(f"sweep parameter must be section.key, got {target!r}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in swp["values"]:
        cfg_i = config.load_config(args.scenario)
        config.apply_overrides(cfg_i, args.overrides)
        config.apply_overrides(cfg_i, [f"{target}={value!r}"])
        scn_i, _ = config.build_scenario(cfg_i)
        if args.seed is not None:
            scn_i = dataclasses.replace(scn_i, seed=args.seed)
        tag = f"{target.split('.', 1)[1]}_{value:g}"
        trace = sim.run_scenario(scn_i)
        trace.to_csv(out_dir / f"{scn_i.name}_{tag}.csv")
        m = sim.metrics(trace, settle_band=scn_i.settle_band)
        rows.append((value, m))
        if not args.quiet:
            print(f"{target} = {value:g}: {len(trace)} rows")

    keys = sorted({k for _, m in rows for k in m})
    lines = ["value\t" + "\t".join(keys)]
    for value, m in rows:
        lines.append("\t".join([f"{value:g}"] + [repr(m.get(k, "")) for k in keys]))
    (out_dir / "sweep_metrics.tsv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print(f"combined metrics: {out_dir / 'sweep_metrics.tsv'}")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.action == "template":
        print(config.default_config_text())
        return EXIT_OK
    if args.scenario:
        cfg = config.load_config(args.scenario)
        config.apply_overrides(cfg, args.overrides)
        scn, _ = config.build_scenario(cfg)
        print(scn.params.dump())
    else:
        print(StackParams().dump())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"simulate": cmd_simulate, "verify": cmd_verify,
                "sweep": cmd_sweep, "params": cmd_params}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationFault as exc:
        print(f"integration fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_FAULT
    except FdsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_FAULT


if __name__ == "__main__":
    sys.exit(main())
