"""Indirect age-standardization: reference rates and expected event counts.

Expected counts are the model denominators/offsets: for unit i and group j,
the expected value is the sum over age bands of population times the
statewide band-specific reference rate. Rates are always taken from the
unprotected statewide totals so that downstream comparisons isolate
denominator error introduced by the protection mechanism.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import StandardizationError
from .tabulation import AgeSchema, GroupSchema, TabulationCube, aggregate


@dataclass(frozen=True)
class ReferenceRates:
    """Events per person per age band; optionally one schedule per group."""

    bands: tuple[str, ...]
    rates: np.ndarray  # (A,) pooled or (A, G) group-specific
    groups: tuple[str, ...] | None = None

    @property
    def group_specific(self) -> bool:
        return self.groups is not None


def reference_rates(
    deaths: np.ndarray,
    population: np.ndarray,
    ages: AgeSchema,
    groups: GroupSchema | None = None,
) -> ReferenceRates:
    """Rates = statewide deaths over statewide population, per band.

    Bands with zero population and zero deaths get a zero rate; deaths in an
    empty band are rejected. Pass ``groups`` for group-specific schedules
    (deaths/population then have shape (A, G)).
    """
    deaths = np.asarray(deaths, dtype=float)
    population = np.asarray(population, dtype=float)
    want = (ages.n,) if groups is None else (ages.n, groups.n)
    if deaths.shape != want or population.shape != want:
        raise StandardizationError(
            f"deaths/population shapes {deaths.shape}/{population.shape} do not match {want}"
        )
    bad = (population == 0) & (deaths > 0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise StandardizationError(
            f"band {ages.bands[idx[0]]!r} has {deaths[tuple(idx)]} deaths but zero population"
        )
    rates = np.divide(deaths, population, out=np.zeros_like(deaths), where=population > 0)
    return ReferenceRates(ages.bands, rates, None if groups is None else groups.groups)


def rates_from_cubes(
    deaths_cube: TabulationCube,
    population_cube: TabulationCube,
    group_specific: bool = True,
) -> ReferenceRates:
    """Convenience: aggregate both cubes to the root and form rates."""
    d_root = aggregate(deaths_cube, 0).values[0]
    p_root = aggregate(population_cube, 0).values[0]
    ages = deaths_cube.ages
    if group_specific:
        return reference_rates(d_root, p_root, ages, deaths_cube.groups)
    return reference_rates(d_root.sum(axis=1), p_root.sum(axis=1), ages)


@dataclass
class ExpectedCounts:
    """Expected events per (unit, group) plus a tag naming the denominator source."""

    unit_ids: list[str]
    groups: tuple[str, ...]
    values: np.ndarray  # (n_units, n_groups), non-negative reals
    source: str = "custom"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.unit_ids), len(self.groups)):
            raise StandardizationError(
                f"expected-count shape {self.values.shape} does not match "
                f"{len(self.unit_ids)} units x {len(self.groups)} groups"
            )
        if np.any(self.values < 0):
            raise StandardizationError("expected counts must be non-negative")

    def aligned_with(self, other: "ExpectedCounts") -> bool:
        return self.unit_ids == other.unit_ids and self.groups == other.groups


def expected_counts(cube: TabulationCube, rates: ReferenceRates, source: str = "custom") -> ExpectedCounts:
    """Apply the reference schedule to a leaf-level cube."""
    if cube.rank != cube.hierarchy.depth - 1:
        raise StandardizationError("expected counts are defined at the leaf level")
    if rates.bands != cube.ages.bands:
        raise StandardizationError(
            f"rate bands {rates.bands} do not match cube bands {cube.ages.bands}"
        )
    if rates.group_specific:
        if rates.groups != cube.groups.groups:
            raise StandardizationError("rate groups do not match cube groups")
        values = np.einsum("iag,ag->ig", cube.values, rates.rates)
    else:
        values = np.einsum("iag,a->ig", cube.values, rates.rates)
    return ExpectedCounts(list(cube.unit_ids), cube.groups.groups, values, source)


# ---------------------------------------------------------------------------
# error metrics on expected counts


@dataclass
class PercentErrorResult:
    errors: np.ndarray  # (n_units, n_groups), NaN where the truth is zero
    zero_truth: list[tuple[str, str]]
    summary: dict[str, dict[str, float]]  # per group and "all"


def _summary_stats(err: np.ndarray) -> dict[str, float]:
    err = err[~np.isnan(err)]
    if err.size == 0:
        return {"n": 0.0}
    q25, q50, q75 = np.percentile(err, [25, 50, 75])
    return {
        "n": float(err.size),
        "mean": float(err.mean()),
        "sd": float(err.std(ddof=1)) if err.size > 1 else 0.0,
        "q25": float(q25),
        "median": float(q50),
        "q75": float(q75),
        "under_pct": float(100.0 * np.mean(err < 0)),
    }


def percent_error(test: ExpectedCounts, truth: ExpectedCounts) -> PercentErrorResult:
    """Cell-level 100*(test-truth)/truth with zero-truth cells diverted."""
    if not test.aligned_with(truth):
        raise StandardizationError("expected-count sources are not aligned")
    zero_mask = truth.values == 0
    zero_truth = [
        (truth.unit_ids[i], truth.groups[g]) for i, g in np.argwhere(zero_mask)
    ]
    errors = np.full_like(truth.values, np.nan)
    ok = ~zero_mask
    errors[ok] = 100.0 * (test.values[ok] - truth.values[ok]) / truth.values[ok]
    summary = {"all": _summary_stats(errors)}
    for g, group in enumerate(truth.groups):
        summary[group] = _summary_stats(errors[:, g])
    return PercentErrorResult(errors, zero_truth, summary)


def underestimation_fraction(test: ExpectedCounts, truth: ExpectedCounts) -> dict[str, float]:
    """Percent of cells with test strictly below truth, per group, over cells
    with positive truth."""
    if not test.aligned_with(truth):
        raise StandardizationError("expected-count sources are not aligned")
    out = {}
    for g, group in enumerate(truth.groups):
        mask = truth.values[:, g] > 0
        if not mask.any():
            out[group] = float("nan")
            continue
        under = test.values[mask, g] < truth.values[mask, g]
        out[group] = float(100.0 * under.mean())
    return out


def zero_count_percent(source: ExpectedCounts) -> dict[str, float]:
    """Percent of zero expected counts per group (a published-data pathology)."""
    return {
        group: float(100.0 * np.mean(source.values[:, g] == 0))
        for g, group in enumerate(source.groups)
    }


# ---------------------------------------------------------------------------
# file round-trip (10 significant digits)


def write_expected(ec: ExpectedCounts, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "group", "expected"])
        for i, uid in enumerate(ec.unit_ids):
            for g, group in enumerate(ec.groups):
                writer.writerow([uid, group, format(ec.values[i, g], ".10g")])


def read_expected(path, unit_ids: list[str], groups: tuple[str, ...], source: str = "custom") -> ExpectedCounts:
    index = {uid: i for i, uid in enumerate(unit_ids)}
    gindex = {g: j for j, g in enumerate(groups)}
    values = np.full((len(unit_ids), len(groups)), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["unit_id", "group", "expected"]:
            raise StandardizationError(f"bad expected-counts header {header}")
        for uid, group, raw in reader:
            if uid not in index or group not in gindex:
                raise StandardizationError(f"unknown cell ({uid}, {group}) in {path}")
            values[index[uid], gindex[group]] = float(raw)
    if np.any(np.isnan(values)):
        raise StandardizationError(f"incomplete expected-counts file {path}")
    return ExpectedCounts(list(unit_ids), tuple(groups), values, source)
