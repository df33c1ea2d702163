"""
Batch command-line front end.

Every command reads an INI-style config (flat ``key = value`` entries in
bracketed sections), runs one pipeline stage and writes its outputs plus a
``manifest.ini``.  The manifest is itself a valid config: rerunning the
command with ``--config manifest.ini`` reproduces every output bit for bit.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error,
3 input/output error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import platform
import sys
import traceback
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .core import ExtractionConfig, ExtractionError, extract_sources, nu_values, observable_matrix, whiten
from .dynsim import ModelConfig, fit_model, initialize, simulate
from .field import FieldFormatError, _atomic_write_text, _fmt, field_series, fill, read_field, series_field, write_field
from .infostats import negentropy
from .numdiff import RegressionError
from .predictability import predictability_map
from .spacetime import decompose, estimate_coevolution
from .synthetic import DEFAULTS, KINDS, Scenario, generate, score_recovery

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2
EXIT_IO = 3

COMMANDS = ("synth", "extract", "decompose", "predict", "simulate", "report")
FORMATS = ("column-text", "csv-grid")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; exit code 2."""


class InputError(OSError):
    """Unreadable or malformed input file; exit code 3."""


# ---------------------------------------------------------------------------
# Configuration

# key -> (type, default); a default of None marks an optional key, REQUIRED a mandatory one
REQUIRED = object()

SCHEMA = {
    "run": {"seed": (int, 0), "threads": (int, None), "format": (str, "column-text")},
    "synth": {"kind": (str, REQUIRED)},
    "extract": {
        "input": (Path, REQUIRED),
        "truth": (Path, None),
        "beta": (int, 3),
        "m_max": (int, 8),
        "kind": (str, "linear"),
        "restarts": (int, 16),
        "shuffles": (int, 200),
        "fraction": (float, 0.1),
        "negentropy_shuffles": (int, 200),
    },
    "decompose": {"input": (Path, REQUIRED), "component": (int, 0)},
    "predict": {
        "sources": (Path, REQUIRED),
        "predictand": (Path, REQUIRED),
        "orders": (str, "1,2"),
        "shuffles": (int, 1000),
    },
    "simulate": {
        "sources": (Path, REQUIRED),
        "predictand": (Path, REQUIRED),
        "obs": (Path, None),
        "q": (int, 5),
        "beta": (int, 5),
        "ensemble": (int, 200),
        "horizon": (int, 100),
        "perturbation": (float, 0.1),
        "concentration": (float, 1.0),
        "shuffles": (int, 200),
        "floor": (float, None),
    },
    "report": {"input": (Path, REQUIRED)},
}


@dataclass
class RunConfig:
    """Resolved configuration of one command."""

    command: str
    seed: int
    threads: int
    format: str
    section: dict
    scenario: dict

    def manifest(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"command": self.command, "seed": str(self.seed), "threads": str(self.threads), "format": self.format}
        if self.command == "synth":
            cp["synth"] = {k: _fmt_value(v) for k, v in self.scenario.items()}
        else:
            cp[self.command] = {k: _fmt_value(v) for k, v in self.section.items() if v is not None}
        cp["versions"] = {
            "dsa": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        }
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)


def _fmt_value(v) -> str:
    return _fmt(v) if isinstance(v, float) else str(v)


def _convert(section: str, key: str, raw: str, typ, base: Path):
    try:
        if typ is Path:
            p = Path(raw).expanduser()
            return p if p.is_absolute() else (base / p).resolve()
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _number(section: str, key: str, raw: str):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None
    return int(v) if v.is_integer() and "." not in raw and "e" not in raw.lower() else v


def _resolve_threads(flag, configured) -> int:
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get("DSA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DSA_THREADS: cannot parse {env!r} as int") from None
    return 1


def load_config(command: str, path: Path | None, seed=None, threads=None) -> RunConfig:
    """Parse and validate the config for ``command``; raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from None
        base = path.resolve().parent
    run = _section(cp, "run", base, ignore=("command",))
    written_by = cp["run"].get("command") if cp.has_section("run") else None
    if written_by is not None and written_by != command:
        raise ConfigError(f"[run] command: config was written by {written_by!r}, not {command!r}")
    fmt = run["format"]
    if fmt not in FORMATS:
        raise ConfigError(f"[run] format: expected one of {', '.join(FORMATS)}, got {fmt!r}")
    seed = run["seed"] if seed is None else seed
    threads = _resolve_threads(threads, run["threads"])
    if threads < 1:
        raise ConfigError("threads must be positive")
    scenario = {}
    section = {}
    if command == "synth":
        if not cp.has_section("synth") or "kind" not in cp["synth"]:
            raise ConfigError("[synth] kind: required key missing")
        kind = cp["synth"]["kind"].strip()
        if kind not in KINDS:
            raise ConfigError(f"[synth] kind: unknown scenario {kind!r}; expected one of {', '.join(KINDS)}")
        scenario["kind"] = kind
        for key, raw in cp["synth"].items():
            if key == "kind":
                continue
            if key not in DEFAULTS[kind]:
                raise ConfigError(f"[synth] {key}: unknown parameter for scenario {kind}")
            scenario[key] = _number("synth", key, raw)
    else:
        section = _section(cp, command, base)
    cfg = RunConfig(command, int(seed), int(threads), fmt, section, scenario)
    _validate(cfg)
    return cfg


def _section(cp, name: str, base: Path, ignore=()) -> dict:
    schema = SCHEMA[name]
    raw = cp[name] if cp.has_section(name) else {}
    out = {}
    for key in raw:
        if key not in schema and key not in ignore:
            raise ConfigError(f"[{name}] {key}: unknown key")
    for key, (typ, default) in schema.items():
        if key in raw:
            out[key] = _convert(name, key, raw[key], typ, base)
        elif default is REQUIRED:
            raise ConfigError(f"[{name}] {key}: required key missing")
        else:
            out[key] = default
    return out


def _positive(cfg: RunConfig, *keys):
    for k in keys:
        if cfg.section[k] is not None and cfg.section[k] < 1:
            raise ConfigError(f"[{cfg.command}] {k}: must be positive")


def _validate(cfg: RunConfig) -> None:
    """Range checks against the module constraints."""
    s = cfg.section
    try:
        if cfg.command == "extract":
            _positive(cfg, "restarts", "m_max")
            if s["shuffles"] < 0 or s["negentropy_shuffles"] < 0:
                raise ConfigError("[extract] shuffles: must be non-negative")
            if not 0.0 < s["fraction"] <= 1.0:
                raise ConfigError("[extract] fraction: must lie in (0, 1]")
            ExtractionConfig(beta=s["beta"], m_max=s["m_max"], kind=s["kind"], restarts=s["restarts"])
        elif cfg.command == "predict":
            orders = _orders(s["orders"])
            if any(not 1 <= k <= 6 for k in orders):
                raise ConfigError("[predict] orders: each order must lie in 1..6")
            if s["shuffles"] < 0:
                raise ConfigError("[predict] shuffles: must be non-negative")
        elif cfg.command == "simulate":
            if s["q"] > s["beta"]:
                raise ConfigError(f"[simulate] q: truncation order {s['q']} exceeds beta {s['beta']}")
            _model_config(cfg)
        elif cfg.command == "decompose":
            if s["component"] < 0:
                raise ConfigError("[decompose] component: must be non-negative")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{cfg.command}] {exc}") from None


def _orders(text: str) -> list[int]:
    try:
        out = [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"[predict] orders: cannot parse {text!r}") from None
    if not out:
        raise ConfigError("[predict] orders: at least one order is required")
    return out


def _model_config(cfg: RunConfig) -> ModelConfig:
    s = cfg.section
    return ModelConfig(
        q=s["q"],
        ensemble_size=s["ensemble"],
        horizon=s["horizon"],
        seed=cfg.seed,
        beta=s["beta"],
        perturbation=s["perturbation"],
        concentration=s["concentration"],
        shuffles=s["shuffles"],
    )


# ---------------------------------------------------------------------------
# Commands


def _read(path: Path, fmt: str = "column-text"):
    if not Path(path).exists():
        raise ConfigError(f"missing input: {path}")
    try:
        return read_field(path, fmt)
    except FieldFormatError as exc:
        raise InputError(f"{path}: {exc}") from None


class Report:
    def __init__(self):
        self.lines: list[str] = []
        self.warnings: list[str] = []

    def add(self, line: str = "") -> None:
        self.lines.append(line)

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)
        self.lines.append(f"WARNING: {msg}")

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def cmd_synth(cfg: RunConfig, out: Path, rep: Report) -> None:
    kind = cfg.scenario["kind"]
    params = {k: v for k, v in cfg.scenario.items() if k != "kind"}
    try:
        truth, observed, meta = generate(Scenario(kind, params, cfg.seed))
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from None
    write_field(observed, out / "observed.txt", cfg.format)
    if truth is not None:
        write_field(truth, out / "truth.txt", cfg.format)
    lines = []
    for k, v in meta.items():
        if isinstance(v, np.ndarray):
            for i, row in enumerate(np.atleast_2d(v)):
                lines.append(f"{k} {i} " + " ".join(_fmt(x) for x in row))
        else:
            lines.append(f"{k} {_fmt(v) if isinstance(v, float) else v}")
    _atomic_write_text(out / "metadata.txt", "\n".join(lines) + "\n")
    rep.add(f"scenario {kind} seed {cfg.seed}")
    rep.add(f"observed components {observed.n_components} time {observed.n_time} cells {observed.n_cells}")


def cmd_extract(cfg: RunConfig, out: Path, rep: Report) -> None:
    s = cfg.section
    y = fill(_read(s["input"], cfg.format))
    ecfg = ExtractionConfig(
        beta=s["beta"],
        m_max=s["m_max"],
        kind=s["kind"],
        restarts=s["restarts"],
        seed=cfg.seed,
        fraction=s["fraction"],
        shuffles=s["shuffles"],
    )
    res = extract_sources(y, ecfg)
    res.write(out)
    keep = res.retained
    if keep.any():
        write_field(series_field(res.retained_sources(), y.time), out / "retained_sources.txt", cfg.format)

    Y, w = observable_matrix(y)
    if Y.shape[1] <= ecfg.m_max:
        obs_label = "standardized observables"
        obs = (Y - Y.mean(axis=0)) / Y.std(axis=0)
    else:
        obs_label = "whitened observables"
        obs = whiten(Y, w, ecfg.m_max)[0]
    obs_nu = nu_values(obs, y.time.step, 1, shared_jumps=True)[0]
    rep.add(f"sources {res.n_sources} retained {int(keep.sum())} objective {_fmt(res.objective)}")
    rep.add("nu_k (extraction order k, extracted set)")
    for k, v in enumerate(res.nu, start=1):
        rep.add(f"  nu_{k} {_fmt(v)}")
    rep.add(f"nu_1 {obs_label} {_fmt(obs_nu)} ratio {_fmt(res.nu[0] / obs_nu) if obs_nu > 0 else 'inf'}")
    if res.physical is not None:
        p = res.physical
        rep.add("physical scores")
        rep.add(f"  gamma {_fmt(p.gamma)} xi {_fmt(p.xi)}")
        rep.add("  lyapunov " + " ".join(_fmt(v) for v in np.atleast_1d(p.lyapunov)))
    rep.add("retention (lag-1 mutual information with the observables)")
    for i, r in enumerate(res.cutoff):
        if r is None:
            rep.add(f"  source {i} constant, dropped")
        else:
            rep.add(f"  source {i} mi {_fmt(r.value)} null_q95 {_fmt(r.mc_null_q95)} retained {bool(keep[i])}")
    if not keep.any():
        rep.warn("no source carries dynamic information above the shuffle null")
    rep.add("negentropy screen")
    x = res.series
    for i in np.flatnonzero(keep):
        j = negentropy(x[:, i], s["negentropy_shuffles"], [cfg.seed, 7, int(i)])
        rep.add(f"  source {i} J {_fmt(j.value)} null_q95 {_fmt(j.mc_null_q95)}")
        if s["negentropy_shuffles"] > 0 and not j.significant:
            rep.warn(f"source {i} is indistinguishable from Gaussian; Gaussian-assuming statistics apply to it")
    if s["truth"] is not None:
        truth = _read(s["truth"], cfg.format)
        rec = score_recovery(field_series(truth), res.retained_sources() if keep.any() else x)
        rep.add("recovery against truth (|corr| of normal scores)")
        for (ti, ri), sc in zip(rec.pairs, rec.scores):
            rep.add(f"  true {ti} recovered {ri} score {_fmt(sc)}")
    if y.n_cells > 1 and _nonuniform(y):
        pair = decompose(y, estimate_coevolution(y, 0), 0)
        pair.write(out / "decomposition")
        rep.add(f"decomposition of component 0: dimension {pair.dimension} residual {_fmt(pair.residual)}")


def _nonuniform(f) -> bool:
    v = f.cell_series()
    return bool(np.any(np.ptp(v, axis=2) > 1e-12 * max(np.max(np.abs(v)), 1e-300)))


def cmd_decompose(cfg: RunConfig, out: Path, rep: Report) -> None:
    s = cfg.section
    x = fill(_read(s["input"], cfg.format))
    if s["component"] >= x.n_components:
        raise ConfigError(f"[decompose] component: field has {x.n_components} component(s)")
    man = estimate_coevolution(x, s["component"])
    pair = decompose(x, man, s["component"])
    pair.write(out)
    rep.add(f"rank {man.rank} r_space {man.r_space} r_time {man.r_time} dimension {pair.dimension}")
    rep.add(f"residual {_fmt(pair.residual)}")


def _predictand(path: Path, fmt: str):
    z = fill(_read(path, fmt))
    if z.n_components != 1:
        raise ConfigError(f"{path}: predictand must have a single component")
    return z


def cmd_predict(cfg: RunConfig, out: Path, rep: Report) -> None:
    s = cfg.section
    x = field_series(fill(_read(s["sources"], cfg.format)))
    z = _predictand(s["predictand"], cfg.format)
    maps = {}
    for k in _orders(s["orders"]):
        pm = predictability_map(x, z, k, shuffles=s["shuffles"], seed=[cfg.seed, k])
        pm.write(out)
        maps[k] = pm
        frac = float(np.mean(pm.above_null))
        rep.add(f"order {k}: cells above null {_fmt(frac)} clipped {pm.clip_count}")
    if 1 in maps and 2 in maps and s["shuffles"] > 0:
        gap = maps[2].above_null & ~maps[1].above_null
        n_gap = int(gap.sum())
        rep.add(
            f"order 2 effective map exceeds the null where order 1 does not: {n_gap} of {gap.size} source-cells"
            + (" (asserted)" if n_gap > 0 else "")
        )


def cmd_simulate(cfg: RunConfig, out: Path, rep: Report) -> None:
    s = cfg.section
    mcfg = _model_config(cfg)
    x = field_series(fill(_read(s["sources"], cfg.format)))
    z = _predictand(s["predictand"], cfg.format)
    ref = fit_model(x, z, q=mcfg.q, shuffles=mcfg.shuffles, seed=cfg.seed)
    _atomic_write_text(out / "model.txt", ref.to_text())
    init = initialize(ref, mcfg)
    t0 = float(z.time.timestamps[-1])
    ens = simulate(ref, init, mcfg, t0)
    w = z.grid.cell_area_weights.ravel()
    obs = None
    if s["obs"] is not None:
        of = _predictand(s["obs"], cfg.format)
        obs = (field_series(of)[:, 0] - np.sum(w * ref.z_mean) / w.sum()) / (np.sum(w * ref.z_scale) / w.sum())
    ens.write_summary(out / "ensemble.csv", obs, w)
    rep.add(f"members {init.states.shape[0]} flagged {ens.n_flagged} horizon {mcfg.horizon}")
    rep.add("significant coefficient counts by order " + " ".join(str(int(ref.significant[k].sum())) for k in range(ref.q + 1)))
    if s["floor"] is not None:
        _, clip = ens.destandardize(s["floor"])
        rep.add(f"clip fraction at floor {_fmt(s['floor'])}: {_fmt(clip)}")
    if obs is not None:
        rep.add("observation ranks written to ensemble.csv")


def cmd_report(cfg: RunConfig, out: Path, rep: Report) -> None:
    d = cfg.section["input"]
    if not d.is_dir():
        raise ConfigError(f"missing input: {d}")
    files = sorted(p for p in d.rglob("*") if p.is_file() and not p.name.endswith(".tmp"))
    rep.add(f"run directory {d.name}")
    for p in files:
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        rep.add(f"  {p.relative_to(d)} {p.stat().st_size} {digest}")
    prev = d / "report.txt"
    if prev.is_file():
        rep.add("")
        rep.add(prev.read_text().rstrip("\n"))


HANDLERS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "decompose": cmd_decompose,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry point


def _provenance(exc: BaseException) -> str:
    mod = "dsa"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("dsa."):
            mod = name
    return mod


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsa", description="Dynamic source analysis batch pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="INI config file (a manifest.ini from an earlier run works)")
    ap.add_argument("--out", type=Path, default=Path("dsa-out"), help="output directory")
    ap.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    ap.add_argument("--threads", type=int, help="thread count recorded in the manifest (falls back to DSA_THREADS)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    rep = Report()
    try:
        cfg = load_config(args.command, args.config, args.seed, args.threads)
    except ConfigError as exc:
        print(f"dsa: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            HANDLERS[cfg.command](cfg, out, rep)
        for w in caught:
            rep.warn(str(w.message))
        _atomic_write_text(out / "report.txt", rep.text())
        _atomic_write_text(out / "manifest.ini", cfg.manifest())
    except ConfigError as exc:
        print(f"dsa: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dsa: io error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RegressionError, ExtractionError, FloatingPointError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        print(f"dsa: numerical failure [{_provenance(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for msg in rep.warnings:
        print(f"dsa: warning: {msg}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
