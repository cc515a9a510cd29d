"""Seeded experiment sweeps comparing traffic carried with and without trading.

A sweep point is a (fs_per_vlink, mu) pair. For every point and replication the
VONs, embedding and demand matrix come from random streams keyed on the FS count
and replication alone, so the ST and non-ST runs of a replication see identical
inputs, and every mu value of a mu sweep sees the same inputs too.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import yaml

from vontrade.embedding import MAX_RETRIES, Von, all_vlinks, embed_all
from vontrade.errors import ConfigError, EmbeddingError
from vontrade.sim import ENGINES, RunResult, simulate
from vontrade.topology import SpectrumState, Topology, load_topology
from vontrade.traffic import generate_demands

log = logging.getLogger(__name__)

SWEEPS = ("fs", "mu")
MODE_CHOICES = {"st": ("st",), "nonst": ("nonst",), "both": ("nonst", "st")}

ASSUMPTIONS = (
    "virtual topologies are connected: a random spanning tree plus extra edges",
    "offered traffic is uniform on [10, 2X - 10] Gb/s per virtual link and slot",
    "RC sessions run one at a time, highest slot-start credit first",
)

# Purpose codes mixed into seed keys so the streams never collide.
_EMBED = 1
_DEMAND = 2


@dataclass
class RunConfig:
    topology: str = "usnet"
    von_count: int = 50
    slots: int = 4
    fs_per_vlink: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    threshold_mu: float = -30.0
    mu_sweep: list[float] = field(default_factory=lambda: [0.0, -10.0, -20.0, -30.0, -40.0, -50.0])
    vcat_mode: bool = True
    guard_fs: int = 0
    fs_total: int = 358
    seed: int = 1
    replications: int = 10
    engine: str = "protocol"
    creator_metric: str = "credit"
    norm_km: float | None = None
    max_retries: int = MAX_RETRIES
    debug: bool = False

    def __post_init__(self) -> None:
        self.fs_per_vlink = [int(x) for x in self.fs_per_vlink]
        self.mu_sweep = [float(x) for x in self.mu_sweep]
        self.threshold_mu = float(self.threshold_mu)
        self.validate()

    def validate(self) -> None:
        for name in ("von_count", "slots", "fs_total", "replications"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.guard_fs < 0 or self.max_retries < 0:
            raise ConfigError("guard_fs and max_retries must be nonnegative")
        if not self.fs_per_vlink:
            raise ConfigError("fs_per_vlink needs at least one value")
        for fs in self.fs_per_vlink:
            if fs <= 0 or fs % 2:
                raise ConfigError(f"fs_per_vlink values must be positive and even, got {fs}")
        if not self.mu_sweep:
            raise ConfigError("mu_sweep needs at least one value")
        if not all(math.isfinite(m) for m in [*self.mu_sweep, self.threshold_mu]):
            raise ConfigError("thresholds must be finite")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")
        if self.creator_metric not in ("credit", "fs"):
            raise ConfigError("creator_metric must be 'credit' or 'fs'")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        """YAML or JSON (JSON is valid YAML)."""
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        cfg = cls.from_dict(doc)
        topo = Path(cfg.topology)
        if not topo.is_absolute() and not topo.exists() and (Path(path).parent / topo).exists():
            cfg.topology = str(Path(path).parent / topo)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Row:
    sweep: str
    fs_per_vlink: int
    mu: float
    rep: int
    mode: str
    feasible: bool
    offered: float = 0.0
    carried: float = 0.0
    blocked: float = 0.0
    improvement_pct: float | None = None
    retries: int = 0
    trades: int = 0
    blocks: int = 0
    transactions: int = 0
    chain_head: str = ""
    zero_sum: bool = True
    note: str = ""


CSV_FIELDS = [f.name for f in fields(Row)]


@dataclass
class RunReport:
    config: dict[str, Any]
    sweep: str
    rows: list[Row] = field(default_factory=list)

    def points(self) -> list[tuple[int, float]]:
        seen: dict[tuple[int, float], None] = {}
        for r in self.rows:
            seen[(r.fs_per_vlink, r.mu)] = None
        return list(seen)

    def improvements(self, fs: int, mu: float) -> list[float]:
        return [
            r.improvement_pct
            for r in self.rows
            if r.mode == "st" and r.fs_per_vlink == fs and r.mu == mu and r.improvement_pct is not None
        ]

    def summary(self) -> list[dict[str, Any]]:
        out = []
        for fs, mu in self.points():
            imp = self.improvements(fs, mu)
            rows = [r for r in self.rows if r.fs_per_vlink == fs and r.mu == mu]
            entry: dict[str, Any] = {
                "fs_per_vlink": fs,
                "mu": mu,
                "replications": len({r.rep for r in rows}),
                "infeasible": len({r.rep for r in rows if not r.feasible}),
            }
            for mode in ("nonst", "st"):
                carried = [r.carried for r in rows if r.mode == mode and r.feasible]
                if carried:
                    entry[f"mean_carried_{mode}"] = float(np.mean(carried))
            if imp:
                entry.update(
                    mean_improvement_pct=float(np.mean(imp)),
                    min_improvement_pct=float(min(imp)),
                    max_improvement_pct=float(max(imp)),
                )
            out.append(entry)
        return out

    def mean_improvement(self, fs: int, mu: float) -> float | None:
        imp = self.improvements(fs, mu)
        return float(np.mean(imp)) if imp else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "sweep": self.sweep,
            "assumptions": list(ASSUMPTIONS),
            "summary": self.summary(),
            "rows": [asdict(r) for r in self.rows],
        }


@dataclass
class Instance:
    """Inputs shared by every run of one (fs, replication)."""

    fs_per_vlink: int
    rep: int
    topology: Topology
    vons: list[Von]
    spectrum: SpectrumState
    demands: np.ndarray

    @property
    def retries(self) -> int:
        return sum(v.retries for v in self.vons)


def stream(seed: int, purpose: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, *key]))


def build_instance(cfg: RunConfig, topology: Topology, fs: int, rep: int) -> Instance:
    """Embed the VONs and draw demands for one replication; raises EmbeddingError."""
    spectrum = SpectrumState(topology.n_links, cfg.fs_total)
    vons = embed_all(
        topology,
        spectrum,
        cfg.von_count,
        fs,
        lambda von, attempt: stream(cfg.seed, _EMBED, fs, rep, von, attempt),
        cfg.guard_fs,
        cfg.max_retries,
    )
    demands = generate_demands(stream(cfg.seed, _DEMAND, fs, rep), all_vlinks(vons), cfg.slots)
    return Instance(fs, rep, topology, vons, spectrum, demands)


def _row(sweep: str, inst: Instance, mu: float, mode: str, res: RunResult) -> Row:
    row = Row(
        sweep,
        inst.fs_per_vlink,
        mu,
        inst.rep,
        mode,
        True,
        offered=res.offered,
        carried=res.carried,
        blocked=res.blocked,
        retries=inst.retries,
        trades=len(res.trades),
        zero_sum=res.zero_sum(),
    )
    if res.chain is not None:
        s = res.chain.summary()
        row.blocks, row.transactions, row.chain_head = s["blocks"], s["transactions"], s["head"]
    if res.block_failures:
        row.note = "; ".join(res.block_failures)
    return row


OnRun = Callable[[Instance, float, str, RunResult], None]


def run_experiment(
    cfg: RunConfig,
    sweep: str = "fs",
    modes: Sequence[str] = ("nonst", "st"),
    on_run: OnRun | None = None,
) -> RunReport:
    """Run every (point, replication, mode) of ``sweep``.

    ``sweep="fs"`` walks ``fs_per_vlink`` at ``threshold_mu``; ``sweep="mu"``
    walks ``mu_sweep`` for each FS count. ``on_run`` sees every simulation.
    """
    if sweep not in SWEEPS:
        raise ConfigError(f"sweep must be one of {SWEEPS}")
    if not modes or any(m not in ("st", "nonst") for m in modes):
        raise ConfigError("modes must be drawn from 'st' and 'nonst'")
    topology = load_topology(cfg.topology, cfg.norm_km)
    mus = [cfg.threshold_mu] if sweep == "fs" else list(cfg.mu_sweep)
    report = RunReport(cfg.to_dict(), sweep)

    for fs in cfg.fs_per_vlink:
        for rep in range(cfg.replications):
            try:
                inst = build_instance(cfg, topology, fs, rep)
            except EmbeddingError as exc:
                log.warning("fs=%d rep=%d infeasible: %s", fs, rep, exc)
                for mu in mus:
                    for mode in modes:
                        report.rows.append(Row(sweep, fs, mu, rep, mode, False, note=str(exc)))
                continue
            base: RunResult | None = None
            if "nonst" in modes:
                base = simulate(inst.topology, inst.vons, inst.demands, inst.spectrum, mode="nonst")
            for mu in mus:
                if base is not None:
                    report.rows.append(_row(sweep, inst, mu, "nonst", base))
                    if on_run is not None:
                        on_run(inst, mu, "nonst", base)
                if "st" not in modes:
                    continue
                res = simulate(
                    inst.topology,
                    inst.vons,
                    inst.demands,
                    inst.spectrum,
                    mode="st",
                    engine=cfg.engine,
                    threshold_mu=mu,
                    vcat_mode=cfg.vcat_mode,
                    creator_metric=cfg.creator_metric,
                    debug=cfg.debug,
                )
                row = _row(sweep, inst, mu, "st", res)
                if base is not None:
                    row.improvement_pct = improvement_pct(res.carried, base.carried)
                report.rows.append(row)
                if on_run is not None:
                    on_run(inst, mu, "st", res)
            log.info("fs=%d rep=%d done", fs, rep)
    return report


def improvement_pct(carried_st: float, carried_nonst: float) -> float:
    if carried_nonst <= 0:
        raise ValueError("non-ST carried traffic must be positive")
    return (carried_st - carried_nonst) / carried_nonst * 100.0


def emit_report(report: RunReport, out_dir: str | Path, formats: Iterable[str] = ("csv", "json")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = out / f"report_{report.sweep}.csv"
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
                writer.writeheader()
                for r in report.rows:
                    writer.writerow(asdict(r))
        elif fmt == "json":
            path = out / f"report_{report.sweep}.json"
            path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def read_csv_rows(path: str | Path) -> list[Row]:
    """Inverse of the CSV writer."""
    out = []
    with Path(path).open(newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(
                Row(
                    sweep=d["sweep"],
                    fs_per_vlink=int(d["fs_per_vlink"]),
                    mu=float(d["mu"]),
                    rep=int(d["rep"]),
                    mode=d["mode"],
                    feasible=d["feasible"] == "True",
                    offered=float(d["offered"]),
                    carried=float(d["carried"]),
                    blocked=float(d["blocked"]),
                    improvement_pct=float(d["improvement_pct"]) if d["improvement_pct"] else None,
                    retries=int(d["retries"]),
                    trades=int(d["trades"]),
                    blocks=int(d["blocks"]),
                    transactions=int(d["transactions"]),
                    chain_head=d["chain_head"],
                    zero_sum=d["zero_sum"] == "True",
                    note=d["note"],
                )
            )
    return out
