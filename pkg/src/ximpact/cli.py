"""Command-line front end.

Every subcommand reads an optional YAML config; command-line flags override
file values. Outputs go to ``--out`` together with ``manifest.json``, which
records the resolved-config hash, the seed, the data-contract versions and
a checksum of every file written. The exit code is 0 only if every output
was written and passed schema validation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import yaml

from . import __version__, schemas
from .ingest import bin_ticks, load_calendar, load_ticks, write_calendar, write_ticks
from .metrics import (DEFAULT_TAU_GRID, WeightSpec, covariates, fit_models, pair_sampling,
                      pooled_impact_matrix, prepare_fit, scan_models, y_regression_series)
from .models import ImpactMatrix, ModelKind
from .moments import correlations_to_csv, daily_vols, reconstruct_all, stationary_correlations
from .ratecurve import (RATES_TAU, TenorMeta, curve_fixture, mean_prices, nested_r2_table,
                        write_normalized)
from .simulator import BinSimConfig, TickSimConfig, simulate_bin_level, simulate_ticks
from .stats import benjamini_hochberg, bonferroni, f_from_r2, robust_f_pvalue

logger = logging.getLogger("ximpact")

EXIT_CONFIG = 2
EXIT_SCHEMA = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved run settings; see README for the file layout."""

    ticks: str | None = None
    calendar: str | None = None
    assets: list[str] | None = None
    tau: float = 300.0
    tau_grid: list[float] = field(default_factory=lambda: list(DEFAULT_TAU_GRID))
    models: list[str] = field(default_factory=lambda: ["diag", "ml", "kyle"])
    weights: list[str] = field(default_factory=lambda: ["basket"])
    train_fraction: float = 0.5
    train_days: list[int] | None = None
    test_days: list[int] | None = None
    pairs: list[list[int]] | None = None
    pair_buckets: int | None = None
    vol_mode: str = "same_day"
    min_bins: int = 100
    alpha: float = 0.05
    seed: int = 0
    out: str = "out"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    simulate: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        d = {k.replace("-", "_"): v for k, v in (d or {}).items()}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def validate(self) -> None:
        if not self.tau_grid:
            raise ConfigError("empty tau grid")
        self.tau_grid = [float(t) for t in self.tau_grid]
        if any(t <= 0 for t in self.tau_grid) or any(b <= a for a, b in zip(self.tau_grid, self.tau_grid[1:])):
            raise ConfigError("tau grid must be positive and strictly increasing")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        try:
            self.models = [ModelKind.parse(m).value for m in self.models]
            self.weights = [str(WeightSpec.parse(w)) for w in self.weights]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if (self.train_days is None) != (self.test_days is None):
            raise ConfigError("give both train_days and test_days, or neither")
        if self.train_days is not None and set(self.train_days) & set(self.test_days):
            raise ConfigError("train and test days overlap")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.vol_mode not in ("same_day", "lagged"):
            raise ConfigError("vol_mode must be same_day or lagged")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")

    def canonical(self) -> str:
        d = asdict(self)
        d.pop("out")
        d.pop("workers")  # never changes results
        return json.dumps(d, sort_keys=True, default=str)


class Emitter:
    """Single ordered sink for every output file of a run."""

    def __init__(self, out: Path):
        self.out = out
        self.written: list[Path] = []
        self.errors: list[str] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    def _check(self, name, obj, schema):
        try:
            jsonschema.validate(obj, schema)
        except jsonschema.ValidationError as exc:
            self.errors.append(f"{name}: {exc.message}")

    def json(self, name: str, obj, schema=None) -> None:
        if schema is not None:
            self._check(name, obj, schema)
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def jsonl(self, name: str, records, schema=None) -> None:
        with open(self.path(name), "w") as fh:
            for k, rec in enumerate(records):
                if schema is not None:
                    self._check(f"{name}[{k}]", rec, schema)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    def register(self, name: str) -> Path:
        return self.path(name)

    def manifest(self, command: str, cfg: RunConfig) -> None:
        outputs = []
        for p in self.written:
            outputs.append({"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        man = {"command": command, "config_sha256": hashlib.sha256(cfg.canonical().encode()).hexdigest(),
               "seed": cfg.seed, "contracts": schemas.CONTRACT_VERSIONS, "package_version": __version__,
               "outputs": outputs}
        self._check("manifest.json", man, schemas.MANIFEST)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _f(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# inputs


def _load(cfg: RunConfig):
    if not cfg.ticks or not cfg.calendar:
        raise ConfigError("this command needs 'ticks' and 'calendar' inputs")
    for p in (cfg.ticks, cfg.calendar):
        if not Path(p).is_file():
            raise ConfigError(f"missing input {p}")
    return load_ticks(cfg.ticks, assets=cfg.assets), load_calendar(cfg.calendar)


def _split(cfg: RunConfig, n_days: int) -> tuple[list[int], list[int]]:
    if cfg.train_days is not None:
        return list(cfg.train_days), list(cfg.test_days)
    cut = int(round(n_days * cfg.train_fraction))
    if not 0 < cut < n_days:
        raise ConfigError("train/test split leaves an empty segment")
    return list(range(cut)), list(range(cut, n_days))


def _units(cfg: RunConfig, ticks, cal) -> list[tuple[int, ...]]:
    n = ticks.n_assets
    if cfg.pairs:
        units = [tuple(int(a) for a in p) for p in cfg.pairs]
        if any(not 1 <= len(u) <= 2 or max(u) >= n for u in units):
            raise ConfigError("pairs must list one or two valid asset indices")
        return units
    if n == 1:
        return [(0,)]
    if cfg.pair_buckets:
        return pair_sampling(covariates(ticks, cal).rho, int(cfg.pair_buckets))
    return list(itertools.combinations(range(n), 2))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, em: Emitter) -> None:
    params = dict(cfg.simulate)
    level = params.pop("level", "tick")
    if level == "tick":
        params.setdefault("seed", cfg.seed)
        params.setdefault("workers", cfg.workers)
        sim = simulate_ticks(TickSimConfig.from_dict(params))
        write_ticks(sim.ticks, em.register("ticks.csv"))
        write_calendar(sim.calendar, em.register("calendar.csv"))
        truth = sim.truth.to_dict()
        truth["config"].pop("workers", None)
        em.json("truth.json", truth, schemas.TRUTH)
    elif level == "bin":
        params.setdefault("seed", cfg.seed)
        sim = simulate_bin_level(BinSimConfig.from_dict(params))
        sim.panel.to_csv(em.register("panel.csv"))
        t = sim.truth
        em.json("truth.json", {"lambda": t.lam.tolist(), "omega": t.omega.tolist(), "sigma": t.sigma.tolist(),
                               "sigma_eta": sim.config.sigma_eta.tolist(), "seed": sim.config.seed,
                               "n_bins": sim.config.n_bins, "tau": sim.config.tau}, schemas.TRUTH)
    else:
        raise ConfigError(f"unknown simulation level {level!r}")


def cmd_bin(cfg: RunConfig, em: Emitter) -> None:
    ticks, cal = _load(cfg)
    bin_ticks(ticks, cfg.tau, cal).to_csv(em.register("panel.csv"))


def cmd_estimate(cfg: RunConfig, em: Emitter) -> None:
    ticks, cal = _load(cfg)
    panel = bin_ticks(ticks, cfg.tau, cal)
    vols = daily_vols(panel)
    corr = stationary_correlations(panel, vols)
    em.json("moments.json", reconstruct_all(vols, corr).to_records(), schemas.MOMENTS)
    for p in correlations_to_csv(corr, str(em.out / "correlations"), panel.symbols):
        em.written.append(Path(p))


def cmd_fit(cfg: RunConfig, em: Emitter) -> None:
    ticks, cal = _load(cfg)
    panel = bin_ticks(ticks, cfg.tau, cal)
    tr_days, te_days = _split(cfg, len(cal))
    train, test = panel.select_days(tr_days), panel.select_days(te_days)
    cov = covariates(ticks, cal)
    pair = list(range(ticks.n_assets))
    records, matrices = [], {}
    for w in cfg.weights:
        reports = fit_models(train, test, cfg.models, w, vol_mode=cfg.vol_mode)
        for m in cfg.models:
            rec = {"pair": pair, **reports[m].to_dict()}
            rec["covariates"] = cov.for_pair(pair[:2])
            records.append(rec)
    setup = prepare_fit(train, None, cfg.weights[0])
    for m in cfg.models:
        matrices[m] = pooled_impact_matrix(setup, m).to_dict()
    em.jsonl("fits.jsonl", records, schemas.FIT)
    for m, d in matrices.items():
        em.json(f"lambda_{m}.json", d, schemas.IMPACT_MATRIX)


def cmd_scan(cfg: RunConfig, em: Emitter) -> None:
    ticks, cal = _load(cfg)
    split = _split(cfg, len(cal))
    cov = covariates(ticks, cal)
    records, rows = [], []
    for unit in _units(cfg, ticks, cal):
        sub = ticks.select_assets(list(unit))
        for w in cfg.weights:
            res = scan_models(sub, cal, cfg.models, w, cfg.tau_grid, split, min_bins=cfg.min_bins,
                              workers=cfg.workers, vol_mode=cfg.vol_mode)
            c = cov.for_pair(unit)
            for m in cfg.models:
                r = res[m]
                records.extend(r.records(unit))
                i, j = unit[0], unit[-1]
                rows.append([i, j, m, str(w), _f(r.tau_star), _f(r.r2_star), _f(r.delta_r2_star),
                             _f(c["f_i"]), _f(c["f_j"]), _f(c["rho"]), _f(c["liq_i"]), _f(c["liq_j"])])
                for tau, why in r.skipped:
                    logger.info("pair %s model %s: tau=%g skipped (%s)", unit, m, tau, why)
    em.jsonl("scan.jsonl", records, schemas.SCAN)
    em.csv("summary.csv", ["pair_i", "pair_j", "model", "weight", "tau_star", "r2_star", "delta_r2_star",
                           "f_i", "f_j", "rho", "liq_i", "liq_j"], rows)


def cmd_significance(cfg: RunConfig, em: Emitter) -> None:
    ticks, cal = _load(cfg)
    tr_days, te_days = _split(cfg, len(cal))
    records = []
    for unit in _units(cfg, ticks, cal):
        panel = bin_ticks(ticks.select_assets(list(unit)), cfg.tau, cal)
        train, test = panel.select_days(tr_days), panel.select_days(te_days)
        w = cfg.weights[0]
        setup = prepare_fit(train, test, w, vol_mode=cfg.vol_mode)
        reports = fit_models(train, test, cfg.models, w, vol_mode=cfg.vol_mode)
        for m in cfg.models:
            y, x = y_regression_series(setup, m)
            rob = robust_f_pvalue(y, x)
            records.append(rob.to_dict(pair=list(unit), model=m, tau=cfg.tau))
            r2 = reports[m].r2
            if 0 <= r2 < 1:
                cls = f_from_r2(r2, setup.eval.n_bins)
                records.append(cls.to_dict(pair=list(unit), model=m, tau=cfg.tau))
    em.jsonl("significance.jsonl", records, schemas.SIGNIFICANCE)
    rows = []
    for m in cfg.models:
        for robust in (True, False):
            p = [r["p"] for r in records if r["model"] == m and r["robust"] is robust]
            if p:
                rows.append([m, robust, len(p), cfg.alpha, int(bonferroni(p, cfg.alpha).sum()),
                             int(benjamini_hochberg(p, cfg.alpha).sum())])
    em.csv("multiple_testing.csv", ["model", "robust", "m", "alpha", "bonferroni_rejections",
                                    "bh_rejections"], rows)


def cmd_rates(cfg: RunConfig, em: Emitter) -> None:
    rc = dict(cfg.rates)
    tau = float(rc.get("tau", RATES_TAU))
    kind = ModelKind.parse(rc.get("model", "kyle")).value
    if rc.get("fixture"):
        sim, meta = curve_fixture(seed=cfg.seed, tau=tau)
        panel = sim.panel
        k = len(panel.days)
        tr_days, te_days = _split(cfg, k)
    else:
        tenors = rc.get("tenors")
        if not tenors:
            raise ConfigError("rates command needs tenor metadata ('rates.tenors')")
        ticks, cal = _load(cfg)
        if len(tenors) != ticks.n_assets:
            raise ConfigError("one tenor entry per asset required")
        panel = bin_ticks(ticks, tau, cal)
        p = mean_prices(panel)
        meta = [TenorMeta(i, t.get("kind", "cash"), float(t["tenor"]), float(t.get("mean_price", p[i])),
                          float(t.get("notional", 100.0))) for i, t in enumerate(tenors)]
        tr_days, te_days = _split(cfg, len(cal))
    labels = [m.label for m in meta]
    train, test = panel.select_days(tr_days), panel.select_days(te_days)
    nested_r2_table(train, test, kind, labels=labels, workers=cfg.workers).to_csv(em.register("nested_table.csv"))
    nested_r2_table(panel, None, "ml", labels=labels, moments="sample",
                    workers=cfg.workers).to_csv(em.register("nested_table_insample.csv"))
    if rc.get("lambda"):
        with open(rc["lambda"]) as fh:
            lam = ImpactMatrix.from_dict(json.load(fh))
        if lam.n != len(meta):
            raise ConfigError("impact matrix size does not match the tenor list")
    else:
        lam = pooled_impact_matrix(prepare_fit(train, None, "basket"), "kyle")
    em.json("kyle_lambda.json", lam.to_dict(), schemas.IMPACT_MATRIX)
    for p in write_normalized(lam, meta, str(em.out / "kyle")):
        em.written.append(Path(p))
        em.written.append(Path(p[:-4] + ".json"))


COMMANDS = {"simulate": cmd_simulate, "bin": cmd_bin, "estimate": cmd_estimate, "fit": cmd_fit,
            "scan": cmd_scan, "rates": cmd_rates, "significance": cmd_significance}


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ximpact", description="Cross-impact estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", ""))
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--tau-grid", type=_csv_floats, help="comma-separated bin sizes in seconds")
        p.add_argument("--models", help="comma-separated subset of diag,ml,kyle")
        p.add_argument("--weight", help="basket, asset:i or invcov")
        p.add_argument("--ticks", help="tick CSV")
        p.add_argument("--calendar", help="calendar CSV")
        p.add_argument("--tau", type=float, help="bin size in seconds")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    overrides = {"out": args.out, "seed": args.seed, "workers": args.workers, "tau_grid": args.tau_grid,
                 "ticks": args.ticks, "calendar": args.calendar, "tau": args.tau}
    if args.models:
        overrides["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if args.weight:
        overrides["weights"] = [args.weight]
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("XIMPACT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        em = Emitter(Path(cfg.out))
        COMMANDS[args.command](cfg, em)
    except (ConfigError, FileNotFoundError, ValueError, TypeError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    em.manifest(args.command, cfg)
    if em.errors:
        for e in em.errors:
            print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    return 0
