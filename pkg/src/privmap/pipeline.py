"""End-to-end pipeline stages behind a single validated config document.

Every stage reads only its declared input files, writes its outputs
atomically (temp file + rename), and appends a manifest entry with content
hashes so a run can be audited and reproduced byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .carmodel import McmcConfig, build_spec, fit, mrr_summary, predict_counts, write_draws
from .das import DasConfig, NoiseModel, PrivacyBudget, das_preset, run_topdown, write_audit
from .errors import ConfigError, MissingInputError
from .geo import build_synthetic_geography, read_adjacency, read_hierarchy, write_adjacency, write_hierarchy
from .simulate import (
    DEFAULT_HAZARDS as DEFAULT_HAZARD_SCHEDULE,
    DgpConfig,
    run_study,
    synth_deaths,
    synth_population,
    synth_poverty,
)
from .standardize import (
    ExpectedCounts,
    expected_counts,
    percent_error,
    rates_from_cubes,
    read_expected,
    underestimation_fraction,
    write_expected,
    zero_count_percent,
)
from .tabulation import (
    AgeSchema,
    GroupSchema,
    default_group_schema,
    ingest,
    read_covariates,
    write_covariates,
    write_tabulation,
)

DEFAULT_AGE_BANDS = ["0-4", "5-14", "15-24", "25-34", "35-44", "45-54", "55-64"]


# ---------------------------------------------------------------------------
# config schema


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _parse_eps(v):
    if v is None:
        return None
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    if _is_num(v) and v > 0:
        return float(v)
    raise ConfigError(f"epsilon_total must be a positive number or 'inf', got {v!r}")


DEFAULT_CONFIG = {
    "seed": 0,
    "geo": {"leaves": 300, "branching": [2, 2, 3, 5, 5], "layout": "grid"},
    "das": {
        "variant": "v19",
        "epsilon_total": None,
        "level_shares": None,
        "pass_shares": None,
        "noise_family": "discrete-laplace",
    },
    "std": {"age_bands": DEFAULT_AGE_BANDS, "race_specific_rates": True},
    "model": {
        "priors": {"beta_var": 1e5, "ig_shape": 1.0, "ig_scale": 0.01},
        "mcmc": {"iterations": 2400, "burnin": 1200, "thin": 4},
    },
    "sim": {
        "n_reps": 50,
        "beta": [0.0, 0.4, 0.01],
        "rho": 0.2,
        "phi_var": 0.25,
        "minority_ratio": 12.0,
        "pop_scale": 174.0,
        "minority_sigma": 0.7,
        "hazard_scale": 1.0,
        "sources": ["truth", "v19", "v20", "v22"],
    },
    "io": {"out": "privmap-out"},
}


def _merge_section(defaults: dict, given: dict, path: str) -> dict:
    out = {}
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be a section")
            out[key] = _merge_section(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    for key, value in defaults.items():
        if key not in out:
            out[key] = json.loads(json.dumps(value)) if isinstance(value, (dict, list)) else value
    return out


def load_config(path: str | Path | None = None, seed_override: int | None = None) -> dict:
    """Parse, validate, and fill defaults; unknown keys are rejected.

    A manifest file is also accepted: its embedded resolved config is used,
    which makes any finished run replayable as-is.
    """
    if path is None:
        raw = {}
    else:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        if "config" in raw and "stages" in raw:  # replay from a manifest
            raw = raw["config"]
    cfg = _merge_section(DEFAULT_CONFIG, raw, "")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    geo = cfg["geo"]
    if not isinstance(geo["leaves"], int) or geo["leaves"] < 4:
        raise ConfigError("geo.leaves must be an integer >= 4")
    if not isinstance(geo["branching"], list) or not all(
        isinstance(b, int) and b >= 1 for b in geo["branching"]
    ):
        raise ConfigError("geo.branching must be a list of positive integers")
    if geo["layout"] not in ("grid", "random-planar"):
        raise ConfigError(f"geo.layout must be grid or random-planar, got {geo['layout']!r}")
    das = cfg["das"]
    if das["variant"] not in ("v19", "v20", "v22", "custom"):
        raise ConfigError(f"das.variant must be one of v19/v20/v22/custom, got {das['variant']!r}")
    _parse_eps(das["epsilon_total"])
    if das["variant"] == "custom" and das["epsilon_total"] is None:
        raise ConfigError("das.variant 'custom' requires das.epsilon_total")
    if das["noise_family"] not in ("discrete-laplace", "discrete-gaussian"):
        raise ConfigError(f"unknown das.noise_family {das['noise_family']!r}")
    std = cfg["std"]
    if not isinstance(std["age_bands"], list) or len(std["age_bands"]) < 1:
        raise ConfigError("std.age_bands must be a non-empty list of labels")
    mcmc = cfg["model"]["mcmc"]
    for key in ("iterations", "burnin", "thin"):
        if not isinstance(mcmc[key], int) or mcmc[key] < 1:
            raise ConfigError(f"model.mcmc.{key} must be a positive integer")
    sim = cfg["sim"]
    if not isinstance(sim["n_reps"], int) or sim["n_reps"] < 1:
        raise ConfigError("sim.n_reps must be a positive integer")
    if not isinstance(sim["beta"], list) or not all(_is_num(b) for b in sim["beta"]):
        raise ConfigError("sim.beta must be a list of numbers")
    if not isinstance(sim["sources"], list) or "truth" not in sim["sources"]:
        raise ConfigError("sim.sources must be a list containing 'truth'")
    for src in sim["sources"]:
        if src not in ("truth", "v19", "v20", "v22", "custom"):
            raise ConfigError(f"unknown simulation source {src!r}")


# ---------------------------------------------------------------------------
# manifest and atomic IO


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class StageWriter:
    """Collects a stage's outputs, writing each atomically."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.outputs: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.out_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_via(self, rel: str, writer_fn) -> Path:
        """Run a file-writing callable against a temp path, then rename."""
        final = self.path(rel)
        tmp = final.with_name(final.name + ".tmp")
        writer_fn(tmp)
        os.replace(tmp, final)
        self.outputs.append(final)
        return final


def require_inputs(out_dir: Path, rels: list[str]) -> list[Path]:
    paths = [Path(out_dir) / rel for rel in rels]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingInputError(f"missing stage inputs: {missing}")
    return paths


def append_manifest(out_dir: Path, cfg: dict, stage: str, inputs: list[Path], outputs: list[Path], extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    else:
        manifest = {"tool": "privmap", "version": __version__, "seed": cfg["seed"], "config": cfg, "stages": []}
    entry = {
        "stage": stage,
        "wall_s": None,  # filled by the caller
        "inputs": {str(p.relative_to(out_dir)): sha256_file(p) for p in inputs},
        "outputs": {str(p.relative_to(out_dir)): sha256_file(p) for p in outputs},
    }
    if extra:
        entry["extra"] = extra
    manifest["stages"].append(entry)
    write_atomic(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))


class _Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.start


def _finish(out_dir, cfg, stage, inputs, outputs, timer, extra=None):
    extra = dict(extra or {})
    append_manifest(out_dir, cfg, stage, inputs, outputs, extra)
    manifest_path = Path(out_dir) / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["stages"][-1]["wall_s"] = round(timer.wall, 3)
    write_atomic(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# shared loaders


def _schemas(cfg) -> tuple[AgeSchema, GroupSchema]:
    return AgeSchema(tuple(cfg["std"]["age_bands"])), default_group_schema()


def _load_geo(cfg, out_dir: Path):
    require_inputs(out_dir, ["geo/hierarchy.csv", "geo/adjacency.csv"])
    h = read_hierarchy(out_dir / "geo" / "hierarchy.csv")
    adj = read_adjacency(out_dir / "geo" / "adjacency.csv", h.leaf_ids)
    return h, adj


def _das_seed(cfg, variant: str) -> int:
    vidx = ("v19", "v20", "v22", "custom").index(variant)
    return int(np.random.SeedSequence([cfg["seed"], 7700 + vidx]).generate_state(1)[0])


def _das_config(cfg, variant: str) -> DasConfig:
    das = cfg["das"]
    eps = _parse_eps(das["epsilon_total"])
    seed = _das_seed(cfg, variant)
    shares = tuple(das["level_shares"]) if das["level_shares"] else None
    passes = tuple(das["pass_shares"]) if das["pass_shares"] else None
    if variant == "custom":
        if eps is None:
            raise ConfigError("custom variant requires das.epsilon_total")
        budget = PrivacyBudget(eps, shares, passes)
        return DasConfig("custom", budget, NoiseModel(das["noise_family"]), seed)
    if eps is not None and math.isinf(eps):
        budget = PrivacyBudget(eps, shares, passes)
        return DasConfig(variant, budget, NoiseModel(das["noise_family"]), seed)
    return das_preset(variant, seed, das["noise_family"], shares, passes)


# ---------------------------------------------------------------------------
# stages


def stage_geo(cfg: dict, out_dir: Path) -> dict:
    """Synthesize geography, population, events registry, and covariates."""
    out_dir = Path(out_dir)
    ages, groups = _schemas(cfg)
    geo = cfg["geo"]
    with _Timer() as t:
        h, adj = build_synthetic_geography(
            geo["leaves"], geo["branching"], geo["layout"], cfg["seed"]
        )
        pop = synth_population(
            h,
            ages,
            groups,
            minority_ratio=cfg["sim"]["minority_ratio"],
            pop_scale=cfg["sim"]["pop_scale"],
            minority_sigma=cfg["sim"]["minority_sigma"],
            seed=cfg["seed"],
        )
        if ages.n == len(DEFAULT_HAZARD_SCHEDULE):
            hazards = DEFAULT_HAZARD_SCHEDULE
        else:  # resample the age-rising schedule onto the configured bands
            xs = np.linspace(0, 1, len(DEFAULT_HAZARD_SCHEDULE))
            hazards = tuple(np.interp(np.linspace(0, 1, ages.n), xs, DEFAULT_HAZARD_SCHEDULE))
        deaths = synth_deaths(pop, hazards, seed=cfg["seed"], hazard_scale=cfg["sim"]["hazard_scale"])
        poverty = synth_poverty(len(h.leaf_ids), seed=cfg["seed"])
        w = StageWriter(out_dir)
        w.write_via("geo/hierarchy.csv", lambda p: write_hierarchy(h, p))
        w.write_via("geo/adjacency.csv", lambda p: write_adjacency(adj, p))
        w.write_via("geo/population.csv", lambda p: write_tabulation(pop, p))
        w.write_via("geo/deaths.csv", lambda p: write_tabulation(deaths, p, value_column="deaths"))
        w.write_via(
            "geo/covariates.csv",
            lambda p: write_covariates(p, h.leaf_ids, "poverty", poverty),
        )
    _finish(out_dir, cfg, "geo", [], w.outputs, t)
    return {"outputs": [str(p) for p in w.outputs]}


def stage_protect(cfg: dict, out_dir: Path, variant: str | None = None) -> dict:
    """Apply the top-down mechanism to the true population cube."""
    out_dir = Path(out_dir)
    variant = variant or cfg["das"]["variant"]
    ages, groups = _schemas(cfg)
    with _Timer() as t:
        h, _ = _load_geo(cfg, out_dir)
        inputs = require_inputs(out_dir, ["geo/population.csv"])
        pop = ingest(out_dir / "geo" / "population.csv", ages, groups, h)
        das_cfg = _das_config(cfg, variant)
        protected, audit = run_topdown(pop, das_cfg)
        w = StageWriter(out_dir)
        w.write_via(f"protect/protected_{variant}.csv", lambda p: write_tabulation(protected, p))
        w.write_via(f"protect/audit_{variant}.csv", lambda p: write_audit(audit, p))
    _finish(out_dir, cfg, f"protect:{variant}", inputs, w.outputs, t, {"variant": variant})
    return {"outputs": [str(p) for p in w.outputs]}


def stage_expect(cfg: dict, out_dir: Path, source: str | None = None) -> dict:
    """Indirectly age-standardize one denominator source into expected counts."""
    out_dir = Path(out_dir)
    source = source or "truth"
    ages, groups = _schemas(cfg)
    with _Timer() as t:
        h, _ = _load_geo(cfg, out_dir)
        inputs = require_inputs(out_dir, ["geo/population.csv", "geo/deaths.csv"])
        pop_true = ingest(out_dir / "geo" / "population.csv", ages, groups, h)
        deaths = ingest(out_dir / "geo" / "deaths.csv", ages, groups, h, value_column="deaths")
        # rates always come from the unprotected statewide totals
        rates = rates_from_cubes(deaths, pop_true, cfg["std"]["race_specific_rates"])
        if source == "truth":
            cube = pop_true
        else:
            inputs += require_inputs(out_dir, [f"protect/protected_{source}.csv"])
            cube = ingest(out_dir / "protect" / f"protected_{source}.csv", ages, groups, h)
        ec = expected_counts(cube, rates, source)
        w = StageWriter(out_dir)
        w.write_via(f"expect/expected_{source}.csv", lambda p: write_expected(ec, p))
    _finish(out_dir, cfg, f"expect:{source}", inputs, w.outputs, t, {"source": source})
    return {"outputs": [str(p) for p in w.outputs]}


def _load_expected(cfg, out_dir: Path, source: str, h, groups) -> ExpectedCounts:
    require_inputs(out_dir, [f"expect/expected_{source}.csv"])
    return read_expected(
        out_dir / "expect" / f"expected_{source}.csv", h.leaf_ids, groups.groups, source
    )


def stage_fit(cfg: dict, out_dir: Path, source: str | None = None) -> dict:
    """Fit the spatial model to the observed event counts with one source's
    expected counts as offsets."""
    out_dir = Path(out_dir)
    source = source or "truth"
    ages, groups = _schemas(cfg)
    with _Timer() as t:
        h, adj = _load_geo(cfg, out_dir)
        inputs = require_inputs(
            out_dir, ["geo/deaths.csv", "geo/covariates.csv", f"expect/expected_{source}.csv"]
        )
        deaths = ingest(out_dir / "geo" / "deaths.csv", ages, groups, h, value_column="deaths")
        poverty = read_covariates(out_dir / "geo" / "covariates.csv", h.leaf_ids, "poverty")
        ec = _load_expected(cfg, out_dir, source, h, groups)
        priors = cfg["model"]["priors"]
        spec = build_spec(
            ec,
            poverty,
            adj,
            prior_beta_var=priors["beta_var"],
            prior_ig_shape=priors["ig_shape"],
            prior_ig_scale=priors["ig_scale"],
        )
        y = spec.flatten(deaths.values.sum(axis=1))  # events per (unit, group)
        m = cfg["model"]["mcmc"]
        seed = int(np.random.SeedSequence([cfg["seed"], 8800]).generate_state(1)[0])
        draws = fit(y, spec, McmcConfig(m["iterations"], m["burnin"], m["thin"], seed))
        summary = mrr_summary(draws)
        smr = predict_counts(draws, spec)
        w = StageWriter(out_dir)
        w.write_via(f"fit/draws_{source}.csv", lambda p: write_draws(draws, p))
        payload = {
            "source": source,
            "params": summary.params,
            "mrr": summary.mrr,
            "mrr_lines": {name: summary.mrr_line(name) for name in summary.mrr},
            "converged": summary.converged,
            "excluded_cells": [list(c) for c in spec.excluded],
        }
        w.write_via(
            f"fit/summary_{source}.json",
            lambda p: Path(p).write_text(json.dumps(payload, indent=2, sort_keys=True)),
        )

        def _write_smr(p):
            import csv as _csv

            with open(p, "w", newline="") as fh:
                wr = _csv.writer(fh)
                wr.writerow(["unit_id", "group", "predicted", "smr"])
                for i, uid in enumerate(smr.unit_ids):
                    for g, grp in enumerate(smr.groups):
                        wr.writerow(
                            [uid, grp, format(smr.yhat[i, g], ".10g"), format(smr.smr[i, g], ".10g")]
                        )

        w.write_via(f"fit/smr_{source}.csv", _write_smr)
    _finish(out_dir, cfg, f"fit:{source}", inputs, w.outputs, t, {"source": source})
    return {"outputs": [str(p) for p in w.outputs], "converged": summary.converged}


def _write_table(path, rows: list[dict]) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("")
            return
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    k: (format(v, ".10g") if isinstance(v, float) else v)
                    for k, v in row.items()
                }
            )


def stage_simulate(cfg: dict, out_dir: Path, jobs: int = 1) -> dict:
    """Run the replicated multi-source study and emit the metric tables."""
    out_dir = Path(out_dir)
    ages, groups = _schemas(cfg)
    sim = cfg["sim"]
    with _Timer() as t:
        h, adj = _load_geo(cfg, out_dir)
        inputs = require_inputs(out_dir, ["geo/covariates.csv"])
        inputs += require_inputs(
            out_dir, [f"expect/expected_{s}.csv" for s in sim["sources"]]
        )
        poverty = read_covariates(out_dir / "geo" / "covariates.csv", h.leaf_ids, "poverty")
        sources = [_load_expected(cfg, out_dir, s, h, groups) for s in sim["sources"]]
        dgp = DgpConfig(
            beta=tuple(sim["beta"]),
            rho=sim["rho"],
            phi_var=sim["phi_var"],
            n_reps=sim["n_reps"],
            master_seed=cfg["seed"],
        )
        m = cfg["model"]["mcmc"]
        priors = cfg["model"]["priors"]
        report = run_study(
            dgp,
            sources,
            poverty,
            adj,
            McmcConfig(m["iterations"], m["burnin"], m["thin"], 0),
            jobs=jobs,
            spec_options={
                "prior_beta_var": priors["beta_var"],
                "prior_ig_shape": priors["ig_shape"],
                "prior_ig_scale": priors["ig_scale"],
            },
        )
        tables = report.tables()
        w = StageWriter(out_dir)
        for name in ("coef_bias", "smr_bias", "smr_mape", "fractions", "replicates"):
            w.write_via(f"simulate/{name}.csv", lambda p, rows=tables[name]: _write_table(p, rows))
        convergence = {src: report.convergence[src] for src in report.sources}
    _finish(
        out_dir,
        cfg,
        "simulate",
        inputs,
        w.outputs,
        t,
        {"n_reps": sim["n_reps"], "convergence": convergence},
    )
    return {"outputs": [str(p) for p in w.outputs], "report": report}


def stage_report(cfg: dict, out_dir: Path) -> dict:
    """Denominator-error comparison plus a readable digest of the study."""
    out_dir = Path(out_dir)
    ages, groups = _schemas(cfg)
    sim = cfg["sim"]
    with _Timer() as t:
        h, _ = _load_geo(cfg, out_dir)
        inputs = require_inputs(out_dir, [f"expect/expected_{s}.csv" for s in sim["sources"]])
        sources = {s: _load_expected(cfg, out_dir, s, h, groups) for s in sim["sources"]}
        truth = sources["truth"]
        denom_rows = []
        for s, ec in sources.items():
            if s == "truth":
                zp = zero_count_percent(ec)
                for group in ec.groups:
                    denom_rows.append(
                        {
                            "source": s,
                            "group": group,
                            "mean_pct_error": 0.0,
                            "sd_pct_error": 0.0,
                            "q25": 0.0,
                            "median": 0.0,
                            "q75": 0.0,
                            "under_pct": 0.0,
                            "zero_pct": zp[group],
                        }
                    )
                continue
            pe = percent_error(ec, truth)
            under = underestimation_fraction(ec, truth)
            zp = zero_count_percent(ec)
            for group in ec.groups:
                s_stats = pe.summary[group]
                denom_rows.append(
                    {
                        "source": s,
                        "group": group,
                        "mean_pct_error": s_stats.get("mean", float("nan")),
                        "sd_pct_error": s_stats.get("sd", float("nan")),
                        "q25": s_stats.get("q25", float("nan")),
                        "median": s_stats.get("median", float("nan")),
                        "q75": s_stats.get("q75", float("nan")),
                        "under_pct": under[group],
                        "zero_pct": zp[group],
                    }
                )
        w = StageWriter(out_dir)
        w.write_via("report/denominators.csv", lambda p: _write_table(p, denom_rows))

        lines = ["privmap study report", "====================", ""]
        lines.append("Denominator accuracy against the unprotected source")
        for row in denom_rows:
            lines.append(
                f"  {row['source']:>6} {row['group']:>8}: "
                f"mean %err {row['mean_pct_error']:+.3f}, sd {row['sd_pct_error']:.3f}, "
                f"under-estimated {row['under_pct']:.2f}%, zero cells {row['zero_pct']:.2f}%"
            )
        sim_frac = out_dir / "simulate" / "fractions.csv"
        if sim_frac.exists():
            inputs.append(sim_frac)
            lines += ["", "Simulation study (per source and group)"]
            import csv as _csv

            with open(sim_frac, newline="") as fh:
                for row in _csv.DictReader(fh):
                    lines.append(
                        f"  {row['source']:>6} {row['group']:>8}: "
                        f"SMR bias {float(row['mean_smr_bias']):+.4f}, "
                        f"MAPE {float(row['mean_smr_mape']):.4f}, "
                        f"upward {float(row['upward_bias_pct']):.2f}%"
                    )
            coef_path = out_dir / "simulate" / "coef_bias.csv"
            if coef_path.exists():
                inputs.append(coef_path)
                lines += ["", "Coefficient bias (mean over replicates)"]
                with open(coef_path, newline="") as fh:
                    for row in _csv.DictReader(fh):
                        lines.append(
                            f"  {row['source']:>6} {row['coefficient']:>12}: "
                            f"{float(row['mean_bias']):+.5f}"
                        )
        lines.append("")
        w.write_via("report/report.txt", lambda p: Path(p).write_text("\n".join(lines)))
    _finish(out_dir, cfg, "report", inputs, w.outputs, t)
    return {"outputs": [str(p) for p in w.outputs]}
