"""Command-line driver: ``agemort {simulate,twin,fit,forecast}``.

Progress goes to stderr; results go to files in ``--out``. Each run also
writes ``<command>.config`` with the fully resolved configuration, which
can be passed back through ``--config`` to repeat the run exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import COMMANDS, RunConfig, coerce, parse_config
from .dataio import load_observations, parse_population, write_output, write_plot_data
from .errors import ConfigurationError, NumericalError, ParseError
from .experiments import plot_rows, run_overdose, run_simulate, run_twin

log = logging.getLogger("agemort")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agemort", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "closed-form density profiles and peak ages",
        "twin": "twin experiment recovering mu and lambda from synthetic data",
        "fit": "assimilate yearly overdose deaths and report one-year-ahead predictions",
        "forecast": "fit, then predict the following years without updates",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="flat key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--ensemble-size", type=int)
        p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
        p.add_argument("--data", type=Path, help="directory with observation files")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key; may be repeated")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config(text, cfg)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = coerce(key.strip(), value)
    flags = {"seed": args.seed, "ensemble_size": args.ensemble_size, "format": args.format,
             "out_dir": None if args.out is None else str(args.out),
             "data_dir": None if args.data is None else str(args.data)}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return dataclasses.replace(cfg, **overrides).resolved(args.command)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _metadata(cfg: RunConfig, command: str, data_files: dict | None = None) -> dict:
    meta = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.canonical_text(),
        "config_hash": cfg.digest(),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    if data_files is not None:
        meta["data_files"] = data_files
    return meta


def _data_files(data_dir: Path) -> dict:
    return {p.name: _sha256(p) for p in sorted(data_dir.iterdir()) if p.is_file()}


def _population_note(data_dir: Path, cfg: RunConfig) -> dict | None:
    path = data_dir / "population.csv"
    if not path.exists():
        return None
    series = parse_population(path.read_text(encoding="utf-8"))
    if len(series) < 2:
        return None
    t = series.years - cfg.start_year
    slope, intercept = np.polyfit(t, series.persons, 1)
    model = cfg.n0 + cfg.delta_n * t
    return {"fitted_n0": float(intercept), "fitted_delta_n": float(slope),
            "max_relative_gap": float(np.max(np.abs(model / series.persons - 1.0)))}


def cmd_simulate(cfg: RunConfig, out: Path) -> list:
    res = run_simulate(cfg)
    res.output.metadata = _metadata(cfg, "simulate")
    files = [write_output(res.output, cfg.format, out / f"simulate.{cfg.format}")]
    times = list(res.profiles)
    cols = ["age"] + [f"n_t{t:g}" for t in times]
    rows = [dict(zip(cols, [a] + [float(res.profiles[t][j]) for t in times])) for j, a in enumerate(res.ages)]
    files.append(write_plot_data(rows, out / "simulate_profiles.csv", cols))
    return files


def cmd_twin(cfg: RunConfig, out: Path) -> list:
    res = run_twin(cfg)
    res.output.metadata = _metadata(cfg, "twin")
    return [write_output(res.output, cfg.format, out / f"twin.{cfg.format}")]


def _cmd_overdose(cfg: RunConfig, out: Path, forecast: bool) -> list:
    if not cfg.data_dir:
        raise ConfigurationError("no data directory given (--data or data_dir)")
    data_dir = Path(cfg.data_dir)
    if not data_dir.is_dir():
        raise ConfigurationError(f"data directory {data_dir} does not exist")
    observations = load_observations(data_dir)
    res = run_overdose(cfg, observations, forecast=forecast)
    name = "forecast" if forecast else "fit"
    meta = _metadata(cfg, name, _data_files(data_dir))
    note = _population_note(data_dir, cfg)
    if note is not None:
        meta["population_check"] = note
    res.output.metadata = meta
    files = [write_output(res.output, cfg.format, out / f"{name}.{cfg.format}")]
    k_sigma = 2.0 if forecast else 3.0
    files.append(write_plot_data(plot_rows(res.predictions, k_sigma), out / f"{name}_plot.csv"))
    return files


def cmd_fit(cfg: RunConfig, out: Path) -> list:
    return _cmd_overdose(cfg, out, forecast=False)


def cmd_forecast(cfg: RunConfig, out: Path) -> list:
    return _cmd_overdose(cfg, out, forecast=True)


HANDLERS = {"simulate": cmd_simulate, "twin": cmd_twin, "fit": cmd_fit, "forecast": cmd_forecast}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.config").write_text(cfg.canonical_text(), encoding="utf-8")
        files = HANDLERS[args.command](cfg, out)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ParseError as exc:
        log.error("input error: %s", exc)
        return EXIT_PARSE
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    for f in files:
        print(f"wrote {f}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
