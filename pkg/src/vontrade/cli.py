"""Command line entry point: ``vontrade run|single|fig1|verify-chain``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from vontrade.chain import Chain, verify_chain
from vontrade.engine import Trade
from vontrade.errors import VonTradeError
from vontrade.harness import MODE_CHOICES, RunConfig, build_instance, emit_report, run_experiment
from vontrade.scenarios import fig1
from vontrade.sim import RunResult, simulate
from vontrade.topology import load_topology

log = logging.getLogger("vontrade")


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "engine", None):
        cfg.engine = args.engine
    if getattr(args, "replications", None):
        cfg.replications = args.replications
    if getattr(args, "debug", False):
        cfg.debug = True
    cfg.validate()
    return cfg


def _formats(text: str) -> list[str]:
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in ("csv", "json")]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"formats must be csv and/or json, got {text!r}")
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, args.sweep, MODE_CHOICES[args.mode])
    for path in emit_report(report, args.out, args.format):
        print(path)
    for entry in report.summary():
        mean = entry.get("mean_improvement_pct")
        shown = "n/a" if mean is None else f"{mean:.2f}%"
        print(
            f"fs={entry['fs_per_vlink']:>3} mu={entry['mu']:>7g} "
            f"infeasible={entry['infeasible']}/{entry['replications']} improvement={shown}"
        )
    if any(r.note and r.feasible for r in report.rows):
        print("block verification failures recorded in the report", file=sys.stderr)
        return 3
    return 0


def _export(res: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    assert res.chain is not None
    res.chain.save(out / "chain.bin")
    (out / "chain.json").write_text(res.chain.dump() + "\n")
    (out / "trades.json").write_text(json.dumps([t.to_dict() for t in res.trades], indent=1) + "\n")
    if res.trace:
        (out / "trace.jsonl").write_text(res.trace)
    summary = {
        "offered": res.offered,
        "carried": res.carried,
        "blocked": res.blocked,
        "trades": len(res.trades),
        "ledger_micro": {str(k): v for k, v in res.ledgers[-1].items()} if res.ledgers else {},
        "chain": res.chain.summary(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


def cmd_single(args: argparse.Namespace) -> int:
    cfg = _config(args)
    fs = args.fs if args.fs is not None else cfg.fs_per_vlink[0]
    mu = args.mu if args.mu is not None else cfg.threshold_mu
    inst = build_instance(cfg, load_topology(cfg.topology, cfg.norm_km), fs, args.rep)
    res = simulate(
        inst.topology, inst.vons, inst.demands, inst.spectrum,
        mode="st", engine=cfg.engine, threshold_mu=mu, vcat_mode=cfg.vcat_mode,
        creator_metric=cfg.creator_metric, record_trace=cfg.engine == "protocol", debug=cfg.debug,
    )
    _export(res, Path(args.out))
    return 0 if not res.block_failures else 3


def cmd_fig1(args: argparse.Namespace) -> int:
    sc = fig1()
    res = simulate(
        sc.topology, sc.vons, sc.demands, sc.spectrum,
        mode="st", engine=args.engine, record_trace=args.engine == "protocol", debug=True,
    )
    base = simulate(sc.topology, sc.vons, sc.demands, sc.spectrum, mode="nonst")
    _export(res, Path(args.out))
    print(f"blocked without trading: {base.blocked:g} of {base.offered:g} Gb/s")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    data = Path(args.chain).read_bytes()
    trades = [Trade.from_dict(d) for d in json.loads(Path(args.trades).read_text())]
    verdict = verify_chain(data, trades, args.creator_metric)
    if verdict:
        print(f"ok: {len(Chain.from_bytes(data))} blocks")
        return 0
    print(f"invalid at block {verdict.block_index}: {verdict.reason}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vontrade", description="Spectrum trading between virtual optical networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--engine", choices=("protocol", "central"))
        sp.add_argument("--debug", action="store_true", help="audit the spectrum grid after every change")
        sp.add_argument("--out", default="out", help="output directory")

    run = sub.add_parser("run", help="sweep FS counts or thresholds, ST against non-ST")
    common(run)
    run.add_argument("--sweep", choices=("fs", "mu"), default="fs")
    run.add_argument("--format", type=_formats, default=["csv", "json"], help="csv,json")
    run.add_argument("--mode", choices=tuple(MODE_CHOICES), default="both")
    run.add_argument("--replications", type=int)
    run.set_defaults(func=cmd_run)

    single = sub.add_parser("single", help="one ST run, exporting chain, trades and trace")
    common(single)
    single.add_argument("--fs", type=int)
    single.add_argument("--mu", type=float)
    single.add_argument("--rep", type=int, default=0)
    single.set_defaults(func=cmd_single)

    f1 = sub.add_parser("fig1", help="the two-VON triangle example")
    f1.add_argument("--engine", choices=("protocol", "central"), default="protocol")
    f1.add_argument("--out", default="out/fig1")
    f1.set_defaults(func=cmd_fig1)

    ver = sub.add_parser("verify-chain", help="check a chain file against a trade log")
    ver.add_argument("chain")
    ver.add_argument("trades")
    ver.add_argument("--creator-metric", choices=("credit", "fs"), default="credit")
    ver.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (VonTradeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
