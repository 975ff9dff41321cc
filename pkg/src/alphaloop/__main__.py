# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
The ``alphaloop`` command line.

Exit status is 0 on success, 2 for configuration errors, 3 for data errors
and 4 for anything else; failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from ._fileio import atomic_write_json, atomic_write_text
from .agents import Miner, MinerResult, Screener, SignalCache, Trader
from .analysis import (
    DecayMode,
    alpha_decay_report,
    coherence_matrices,
    diversity_report,
    exposure_volatility,
    friction_report,
    write_coherence,
    write_decay,
    write_friction,
)
from .config import Ablation, ConfigError, RunConfig, example_config, load_config
from .exchange import get_profile
from .expressions import classical_set
from .factors import CorruptRecord, DuplicateFactorId, FactorLibrary
from .loop import (
    EpisodeResult,
    LibrarySnapshot,
    build_assessor,
    market_proxies,
    run_reference,
    run_trials,
)
from .loop import run_loop as _run_loop
from .memory import MemoryStore
from .metrics import EquityCurve, metrics_report
from .panel import (
    DateOutOfRange,
    DateRange,
    EmptyUniverse,
    HorizonTooLarge,
    MalformedCsv,
    OhlcViolation,
    PricePanel,
    UnknownField,
    load_panel,
)
from .regime import InsufficientHistory, RegimeAssessment
from .strategy import Ensemble, Theta, backtest, write_targets
from .synthetic import SyntheticSpec, write_synthetic

logger = logging.getLogger("alphaloop")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_DATA_ERRORS = (
    MalformedCsv,
    OhlcViolation,
    EmptyUniverse,
    DateOutOfRange,
    UnknownField,
    HorizonTooLarge,
    CorruptRecord,
    DuplicateFactorId,
)


class _Context:
    """Configuration, data and output locations for one command."""

    def __init__(self, args: argparse.Namespace, *, check_paths: bool = True) -> None:
        self.args = args
        config = load_config(args.config, check_paths=check_paths and bool(args.config))
        changes: dict[str, Any] = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.profile is not None:
            changes["profile"] = args.profile
        self.config: RunConfig = config.replace(**changes) if changes else config
        self._panel: PricePanel | None = None

    @property
    def workspace(self) -> Path:
        return self.config.workspace_path

    @property
    def factors_dir(self) -> Path:
        return self.workspace / "factors"

    @property
    def panel(self) -> PricePanel:
        if self._panel is None:
            self._panel = load_panel(self.config.data_dir, self.config.market)
        return self._panel

    def library(self) -> FactorLibrary:
        if self.factors_dir.is_dir():
            return FactorLibrary.load(self.factors_dir)
        return FactorLibrary()

    def out_dir(self, default: str) -> Path:
        if self.args.out:
            out = Path(self.args.out)
        else:
            out = self.workspace / "runs" / default
        out.mkdir(parents=True, exist_ok=True)
        return out

    def split(self, name: str) -> DateRange:
        found = self.config.splits.range(name)
        if found is not None:
            return found
        logger.warning("No [splits] %s range; using the whole panel", name)
        return DateRange(self.panel.days[0], self.panel.days[-1])

    def data_checksums(self) -> dict[str, str]:
        directory = Path(self.config.data_dir)
        return {
            path.name: hashlib.sha256(path.read_bytes()).hexdigest()
            for path in sorted(directory.glob("*.csv"))
        }

    def manifest(self, command: str, **extra: Any) -> dict[str, Any]:
        return {
            "command": command,
            "version": __version__,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "panel_digest": self.panel.digest(),
            "data": self.data_checksums(),
            **extra,
        }


# --------------------------------------------------------------------------------------
# Artifact writers
# --------------------------------------------------------------------------------------
def _write_equity(path: Path, curve: EquityCurve) -> None:
    frame = pd.DataFrame(
        {"day": [day.isoformat() for day in curve.days], "nav": curve.values}
    )
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.6f"))


def _ndjson(rows: Sequence[dict[str, Any]]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)


def _write_episode(out: Path, episode: EpisodeResult) -> None:
    _write_equity(out / "equity.csv", episode.equity)
    atomic_write_text(out / "trades.csv", episode.trades.to_csv(index=False))
    episode.memory.write(out / "memory.ndjson")
    atomic_write_text(out / "accounts.ndjson", _ndjson(episode.accounts))
    atomic_write_json(
        out / "assessments.json", [a.to_dict() for a in episode.assessments]
    )
    rates = pd.DataFrame(
        [
            {"day": day.isoformat(), "net_position_rate": rate}
            for day, rate in episode.net_positions
        ],
        columns=["day", "net_position_rate"],
    )
    atomic_write_text(out / "net_positions.csv", rates.to_csv(index=False))
    atomic_write_json(
        out / "snapshots.json", [s.to_dict() for s in episode.snapshots]
    )
    episode.library.save(out / "factors")
    atomic_write_json(out / "metrics.json", episode.metrics())
    atomic_write_json(out / "memory_summary.json", episode.memory.summary())


# --------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------
def cmd_config(args: argparse.Namespace) -> int:
    sys.stdout.write(example_config())
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    ctx = _Context(args, check_paths=args.synthetic is None)
    if args.synthetic is not None:
        spec = SyntheticSpec.from_json(args.synthetic)
        target = Path(args.data or ctx.config.data_dir)
        written = write_synthetic(spec, target)
        logger.info("Wrote %d synthetic files to '%s'", len(written), target)
        ctx.config = ctx.config.replace(data_dir=str(target), profile=spec.profile)
    elif args.data:
        ctx.config = ctx.config.replace(data_dir=args.data)
    panel = ctx.panel
    cache = ctx.workspace / "cache"
    atomic_write_text(cache / "panel.txt", panel.serialize().decode("utf-8"))
    summary = {
        "assets": len(panel.assets),
        "days": len(panel.days),
        "first": panel.days[0].isoformat(),
        "last": panel.days[-1].isoformat(),
        "fields": list(panel.field_names),
        "digest": panel.digest(),
        "data": ctx.data_checksums(),
    }
    atomic_write_json(cache / "panel.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_mine(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    panel = ctx.panel
    window = ctx.split("train")
    rows = panel.calendar.span(window.start, window.end)
    visible = panel.head(rows.stop)
    day = visible.days[-1]
    library = ctx.library()
    memory = MemoryStore()
    miner = Miner(
        ctx.config.miner,
        ctx.config.acceptance,
        rng=np.random.default_rng(ctx.config.seed),
    )
    result: MinerResult = miner.generate(library, visible, memory, window, day)
    miner.maintain(library, visible, memory, day, result)
    library.save(ctx.factors_dir)
    out = ctx.out_dir(f"mine-s{ctx.config.seed}")
    memory.write(out / "memory.ndjson")
    atomic_write_json(
        out / "manifest.json", ctx.manifest("mine", window=str(window))
    )
    print(
        json.dumps(
            {
                "accepted": [r.factor_id for r in result.accepted],
                "deprecated": result.deprecated,
                "evaluated": result.evaluated,
                "exhausted": result.exhausted,
                "library": len(library),
            },
            sort_keys=True,
        )
    )
    return 0


def _regime_at(ctx: _Context, row: int) -> RegimeAssessment | None:
    assessor = build_assessor(ctx.panel, ctx.config, row)
    if assessor is None or row < 1:
        return None
    try:
        return assessor.assess(row - 1)
    except InsufficientHistory:
        return None


def cmd_screen(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    panel = ctx.panel
    if args.day:
        day = datetime.date.fromisoformat(args.day)
    else:
        day = ctx.split("backtest").start
    row = panel.calendar.index(day)
    memory = MemoryStore()
    screener = Screener(ctx.config.screener, acceptance=ctx.config.acceptance)
    ensemble = screener.cycle(
        ctx.library(), SignalCache(panel), row, _regime_at(ctx, row), memory
    )
    payload = ensemble.to_dict()
    out = ctx.out_dir(f"screen-{day.isoformat()}")
    atomic_write_json(out / "ensemble.json", payload)
    memory.write(out / "memory.ndjson")
    print(json.dumps(payload, sort_keys=True))
    return 0


def _parse_theta(text: str) -> Theta:
    try:
        n_long, n_short, beta, gamma = text.split(",")
        return Theta(int(n_long), int(n_short), float(beta), float(gamma))
    except ValueError as e:
        raise ConfigError(f"--theta must be n_long,n_short,beta,gamma: {e}") from e


def cmd_backtest(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    panel = ctx.panel
    window = ctx.split("backtest")
    library = ctx.library()
    theta = _parse_theta(args.theta) if args.theta else None
    targets: list[dict[str, Any]] | None = [] if args.dump_targets else None
    if args.ensemble:
        data = json.loads(Path(args.ensemble).read_text(encoding="utf-8"))
        ensemble = Ensemble.from_dict(data)
        rows = panel.calendar.span(window.start, window.end)
        profile = get_profile(ctx.config.market)
        if theta is None:
            theta = Trader(ctx.config.trader, profile).fixed_theta(ensemble.regime)
        signals = SignalCache(panel).signals(
            [library.get(i) for i in ensemble.factor_ids]
        )
        curve = backtest(
            panel,
            signals,
            ensemble,
            theta,
            profile,
            range(max(rows.start, 1), rows.stop),
            initial_capital=ctx.config.initial_capital,
            target_log=targets,
        )
    else:
        curve, ensemble = run_reference(
            panel, ctx.config, library, window, theta=theta, target_log=targets
        )
    out = ctx.out_dir(f"backtest-s{ctx.config.seed}")
    _write_equity(out / "equity.csv", curve)
    report = metrics_report(curve)
    atomic_write_json(out / "metrics.json", report)
    atomic_write_json(out / "ensemble.json", ensemble.to_dict())
    if targets is not None:
        write_targets(out / "targets.csv", targets)
    atomic_write_json(
        out / "manifest.json",
        ctx.manifest(
            "backtest",
            window=str(window),
            theta=None if theta is None else theta.to_dict(),
        ),
    )
    print(json.dumps(report, sort_keys=True))
    return 0


def _run(args: argparse.Namespace, ablation: Ablation | None) -> int:
    ctx = _Context(args)
    panel = ctx.panel
    window = ctx.split(getattr(args, "window", "backtest") or "backtest")
    mode = ablation or ctx.config.ablation_mode
    library = ctx.library()
    name = f"{'run' if ablation is None else 'ablate'}-{mode.value}-s{ctx.config.seed}"
    out = ctx.out_dir(name)
    manifest = ctx.manifest(
        "run" if ablation is None else "ablate",
        window=str(window),
        ablation=mode.name,
        library=[r.factor_id for r in library],
    )
    trials = getattr(args, "trials", 1) or 1
    if trials > 1:
        summary = run_trials(
            panel, ctx.config, window, trials=trials, ablation=mode, library=library
        )
        atomic_write_json(out / "trials.json", summary.to_dict())
        atomic_write_json(
            out / "trial_snapshots.json", [s.to_dict() for s in summary.snapshots]
        )
        manifest["trials"] = trials
        atomic_write_json(out / "manifest.json", manifest)
        print(json.dumps(summary.trimmed(), sort_keys=True))
        return 0

    episode = _run_loop(
        panel,
        ctx.config,
        window,
        ablation=mode,
        library=library,
        memory_journal=out / "memory.ndjson",
    )
    _write_episode(out, episode)
    atomic_write_json(out / "manifest.json", manifest)
    print(json.dumps(episode.metrics(), sort_keys=True))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    return _run(args, None)


def cmd_ablate(args: argparse.Namespace) -> int:
    return _run(args, Ablation.parse(args.mode))


def _run_dirs(args: argparse.Namespace) -> list[Path]:
    dirs = [Path(path) for path in args.run]
    for path in dirs:
        if not (path / "manifest.json").is_file():
            raise FileNotFoundError(f"{str(path)!r} has no run manifest")
    return dirs


def _load_snapshots(run: Path) -> list[LibrarySnapshot]:
    data = json.loads((run / "snapshots.json").read_text(encoding="utf-8"))
    return [LibrarySnapshot.from_dict(item) for item in data]


def cmd_analyze(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    runs = _run_dirs(args)
    out = Path(args.out) if args.out else runs[0]
    out.mkdir(parents=True, exist_ok=True)
    kind = args.analysis
    result: Any
    if kind == "decay":
        panel = ctx.panel
        run = runs[0]
        snapshots = _load_snapshots(run)
        library = FactorLibrary.load(run / "factors")
        candidates = sorted(
            {r.expression for r in library}
            | {
                str(e)
                for e in classical_set()
                if all(panel.has_field(f) for f in e.fields)
            }
        )
        start_row = panel.calendar.index(snapshots[0].day) if snapshots else 0
        rows = []
        for mode in DecayMode:
            rows.extend(
                alpha_decay_report(
                    panel,
                    candidates,
                    mode,
                    args.k,
                    snapshots=[(s.day, s.oriented()) for s in snapshots],
                    start_row=start_row,
                )
            )
        write_decay(out / "decay_report.csv", rows)
        result = [row.to_dict() for row in rows]
    elif kind == "coherence":
        data = json.loads((runs[0] / "assessments.json").read_text(encoding="utf-8"))
        assessments = [RegimeAssessment.from_dict(item) for item in data]
        proxies = market_proxies(ctx.panel, ctx.config, assessments)
        matrices = coherence_matrices(assessments, proxies)
        write_coherence(out, matrices, svg=not args.no_svg)
        result = {name: m.degenerate for name, m in matrices.items()}
    elif kind == "exposure":
        frame = pd.read_csv(runs[0] / "net_positions.csv")
        rates = {
            datetime.date.fromisoformat(day): (None if pd.isna(rate) else float(rate))
            for day, rate in zip(frame["day"], frame["net_position_rate"])
        }
        fit = exposure_volatility(ctx.panel.market_index(), rates)
        atomic_write_text(
            out / "exposure.csv", fit.series.to_frame().to_csv(index=False)
        )
        atomic_write_json(out / "exposure_fit.json", fit.to_dict())
        result = fit.to_dict()
    elif kind == "diversity":
        snapshots_per_trial: list[list[str]] = []
        for run in runs:
            trial_file = run / "trial_snapshots.json"
            if trial_file.is_file():
                data = json.loads(trial_file.read_text(encoding="utf-8"))
                snapshots_per_trial.extend(
                    [f["expression"] for f in item["factors"]] for item in data
                )
            else:
                snaps = _load_snapshots(run)
                if snaps:
                    snapshots_per_trial.append([f for _, f in snaps[-1].factors])
        report = diversity_report(snapshots_per_trial, classical_set())
        atomic_write_json(out / "diversity.json", report.to_dict())
        result = report.to_dict()
    else:
        run = runs[0]
        trades = pd.read_csv(run / "trades.csv")
        equity = pd.read_csv(run / "equity.csv")
        friction = friction_report(
            trades,
            list(zip(equity["day"], equity["nav"])),
            typical_slippage=args.slippage,
            worst_slippage=args.worst_slippage,
        )
        write_friction(out, friction)
        result = friction.to_dict()
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


def _percent(value: float | None) -> str:
    return "n/a" if value is None else f"{value * 100:.2f}%"


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for run in _run_dirs(args):
        metrics = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
        rows.append(
            (
                run.name,
                _percent(metrics["ar"]),
                "undefined" if metrics["sr"] is None else f"{metrics['sr']:.2f}",
                _percent(metrics["mdd"]),
            )
        )
    header = ("run", "AR", "SR", "MDD")
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(4)]
    for line in [header, *rows]:
        print("  ".join(str(cell).ljust(width) for cell, width in zip(line, widths)))
    return 0


# --------------------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------------------
def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="INI run configuration")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--profile", choices=("csi", "us"), help="market profile")
    parser.add_argument("--out", metavar="DIR", help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alphaloop",
        description="Closed-loop factor mining, screening and trading.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="more logging (-vv: debug)"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        name: str, handler: Callable[[argparse.Namespace], int], text: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=text, description=text)
        sub.set_defaults(handler=handler)
        _common(sub)
        return sub

    command("config", cmd_config, "print the example configuration")

    ingest = command("ingest", cmd_ingest, "validate market data and cache the panel")
    ingest.add_argument("--data", metavar="DIR", help="data directory")
    ingest.add_argument(
        "--synthetic", metavar="SPEC", help="generate data from a JSON spec first"
    )

    command("mine", cmd_mine, "mine factors over the training window")

    screen = command("screen", cmd_screen, "emit one ensemble")
    screen.add_argument("--day", help="decision day (ISO date)")

    backtest = command("backtest", cmd_backtest, "run the reference strategy")
    backtest.add_argument("--theta", help="n_long,n_short,beta,gamma")
    backtest.add_argument("--ensemble", metavar="PATH", help="ensemble JSON")
    backtest.add_argument(
        "--dump-targets", action="store_true", help="write daily target holdings"
    )

    run = command("run", cmd_run, "run the closed loop over the backtest range")
    run.add_argument("--trials", type=int, default=1, help="independent seeds")
    run.add_argument("--window", choices=("backtest", "live"), default="backtest")

    ablate = command("ablate", cmd_ablate, "run the loop with one agent removed")
    ablate.add_argument(
        "--mode",
        required=True,
        choices=[a.value for a in Ablation if a is not Ablation.NONE],
    )
    ablate.add_argument("--trials", type=int, default=1, help="independent seeds")

    analyze = command("analyze", cmd_analyze, "analyze run artifacts")
    analyze.add_argument(
        "analysis", choices=("decay", "coherence", "exposure", "diversity", "friction")
    )
    analyze.add_argument("--run", action="append", required=True, metavar="DIR")
    analyze.add_argument("--k", type=int, default=20, help="top-k for decay")
    analyze.add_argument("--no-svg", action="store_true", help="skip heatmaps")
    analyze.add_argument("--slippage", type=float, default=0.002)
    analyze.add_argument("--worst-slippage", type=float, default=0.01)

    report = command("report", cmd_report, "print the AR/SR/MDD table")
    report.add_argument("--run", action="append", required=True, metavar="DIR")
    return parser


def _fail(code: int, error: BaseException) -> int:
    sys.stderr.write(
        json.dumps({"error": type(error).__name__, "message": str(error)}) + "\n"
    )
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.handler(args))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except _DATA_ERRORS as e:
        return _fail(EXIT_DATA, e)
    except (ValueError, OSError, KeyError) as e:
        return _fail(EXIT_RUNTIME, e)


if __name__ == "__main__":
    sys.exit(main())
