"""Command line entry point: ``mobiscope <subcommand> --config <file>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import pandas as pd

from .config import ConfigError, load_config
from .estimator import EstimationError
from .ingest import IngestError
from .pipeline import STAGES, MissingArtifactError, Pipeline, fit_frame, outcome_slug, simulate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_ESTIMATION = 3

SUBCOMMANDS = STAGES + ("simulate", "all", "report")

logger = logging.getLogger("mobiscope")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobiscope",
                                description="Pings to stays, homes, panels and event-study fits.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    p.add_argument("--seed", type=int, default=None, help="scenario seed for simulate")
    p.add_argument("--outcome", default=None, help="report only this outcome")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _report_lines(fit: dict) -> tuple[list[str], pd.DataFrame]:
    table = fit_frame(fit)
    table["excludes_zero"] = (table["ci_lo"] > 0) | (table["ci_hi"] < 0)
    lines = [f"outcome {fit.get('outcome', '?')}: base {fit['base_period']}, opening {fit['opening']}, "
             f"se {fit['se_mode']}",
             f"{'month':<8} {'beta':>10} {'se':>9} {'ci_lo':>10} {'ci_hi':>10}"]
    for row in table.itertuples(index=False):
        flag = "  *" if row.excludes_zero else ""
        lines.append(f"{row.month:<8} {row.beta:>10.3f} {row.se:>9.3f} {row.ci_lo:>10.3f} "
                     f"{row.ci_hi:>10.3f}{flag}")
    pooled = fit["pooled"]
    lines.append(f"pooled post-opening effect: {pooled['beta']:.3f} (se {pooled['se']:.3f})")
    pt = fit.get("pretrend")
    if pt:
        lines.append(f"pretrend test: chi2 = {pt['stat']:.3f} on {pt['df']} df, p = {pt['p']:.4f}")
    else:
        lines.append("pretrend test: not available (no pre-opening periods besides the base)")
    lines.append("* 95% interval excludes zero")
    return lines, table


def report(cfg, outcome=None, out=None) -> int:
    out = out or sys.stdout
    wd = cfg.path("workdir")
    outcomes = [outcome] if outcome else cfg.outcome_list
    for o in outcomes:
        path = wd / f"fit_{outcome_slug(o)}.json"
        if not path.exists():
            raise MissingArtifactError(f"no fit for {o}: {path} is missing; run fit first")
        try:
            fit = json.loads(path.read_text())
            lines, table = _report_lines(fit)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed fit file {path}: {exc}") from exc
        print("\n".join(lines), file=out)
        table.to_csv(wd / f"report_{outcome_slug(o)}.csv", index=False, lineterminator="\n")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config)
        if args.subcommand == "simulate":
            simulate(cfg, args.seed)
        elif args.subcommand == "report":
            return report(cfg, args.outcome)
        else:
            pipe = Pipeline(cfg, force=args.force, threads=args.threads)
            names = STAGES if args.subcommand == "all" else (args.subcommand,)
            done = pipe.run(names)
            for name, ran in done.items():
                logger.info("%s %s", name, "ran" if ran else "skipped")
    except ConfigError as exc:
        print(f"mobiscope: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"mobiscope: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except EstimationError as exc:
        print(f"mobiscope: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ValueError, IngestError) as exc:
        # malformed inputs surface as validation errors
        print(f"mobiscope: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
