"""Stratified population count cubes over a geographic hierarchy.

A cube holds one value per (unit, age band, group) cell for the units of a
single level. Published and ground-truth cubes are integer valued; noisy
intermediate cubes carry reals and may go negative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import TabulationError
from .geo import Hierarchy

DEFAULT_AGE_BANDS = ["0-4", "5-14", "15-24", "25-34", "35-44", "45-54", "55-64"]
DEFAULT_GROUPS = ["NHW", "Black"]


@dataclass(frozen=True)
class AgeSchema:
    bands: tuple[str, ...]

    def __post_init__(self):
        if len(self.bands) < 1:
            raise TabulationError("age schema needs at least one band")
        if len(set(self.bands)) != len(self.bands):
            raise TabulationError("age band labels must be unique")

    @property
    def n(self) -> int:
        return len(self.bands)

    def index(self, band: str) -> int:
        try:
            return self.bands.index(band)
        except ValueError:
            raise TabulationError(f"unknown age band {band!r}") from None


@dataclass(frozen=True)
class GroupSchema:
    groups: tuple[str, ...]

    def __post_init__(self):
        if len(self.groups) < 1:
            raise TabulationError("group schema needs at least one group")
        if len(set(self.groups)) != len(self.groups):
            raise TabulationError("group labels must be unique")

    @property
    def n(self) -> int:
        return len(self.groups)

    def index(self, group: str) -> int:
        try:
            return self.groups.index(group)
        except ValueError:
            raise TabulationError(f"unknown group {group!r}") from None


def default_age_schema() -> AgeSchema:
    return AgeSchema(tuple(DEFAULT_AGE_BANDS))


def default_group_schema() -> GroupSchema:
    return GroupSchema(tuple(DEFAULT_GROUPS))


class TabulationCube:
    """Counts for every unit of one hierarchy level, dense over (band, group)."""

    def __init__(
        self,
        hierarchy: Hierarchy,
        rank: int,
        ages: AgeSchema,
        groups: GroupSchema,
        values: np.ndarray,
        integer_valued: bool,
    ):
        self.hierarchy = hierarchy
        self.rank = rank
        self.ages = ages
        self.groups = groups
        self.unit_ids = hierarchy.units_at(rank)
        values = np.asarray(values, dtype=float)
        expect = (len(self.unit_ids), ages.n, groups.n)
        if values.shape != expect:
            raise TabulationError(f"cube shape {values.shape} does not match {expect}")
        if integer_valued:
            if np.any(values < 0):
                raise TabulationError("integer cube contains negative cells")
            if not np.allclose(values, np.round(values)):
                raise TabulationError("integer cube contains non-integral cells")
            values = np.round(values)
        self.values = values
        self.values.flags.writeable = False
        self.integer_valued = integer_valued
        self._index = {uid: i for i, uid in enumerate(self.unit_ids)}

    def unit_index(self, unit_id: str) -> int:
        try:
            return self._index[unit_id]
        except KeyError:
            raise TabulationError(f"unit {unit_id!r} not in cube") from None

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def cell(self, unit_id: str, band: str, group: str) -> float:
        return float(
            self.values[self.unit_index(unit_id), self.ages.index(band), self.groups.index(group)]
        )

    def with_values(self, values: np.ndarray, integer_valued: bool | None = None) -> "TabulationCube":
        flag = self.integer_valued if integer_valued is None else integer_valued
        return TabulationCube(self.hierarchy, self.rank, self.ages, self.groups, values, flag)


def ingest(path, ages: AgeSchema, groups: GroupSchema, h: Hierarchy, *, value_column: str = "count") -> TabulationCube:
    """Read a complete leaf-or-other-level cube; missing or duplicate cells fail."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["unit_id", "age_band", "group", value_column]:
            raise TabulationError(f"bad tabulation header {header}")
        rows = list(reader)
    if not rows:
        raise TabulationError(f"{path}: empty tabulation file")

    ranks = set()
    for uid, _, _, _ in rows:
        ranks.add(h.unit(uid).rank)  # raises GeographyError for unknown units
    if len(ranks) != 1:
        raise TabulationError(f"tabulation mixes units from ranks {sorted(ranks)}")
    rank = ranks.pop()

    unit_ids = h.units_at(rank)
    index = {uid: i for i, uid in enumerate(unit_ids)}
    values = np.full((len(unit_ids), ages.n, groups.n), np.nan)
    for uid, band, group, raw in rows:
        i, a, g = index[uid], ages.index(band), groups.index(group)
        if not np.isnan(values[i, a, g]):
            raise TabulationError(f"duplicate cell ({uid}, {band}, {group})")
        val = float(raw)
        if val < 0:
            raise TabulationError(f"negative count {raw} in cell ({uid}, {band}, {group})")
        values[i, a, g] = val
    missing = np.argwhere(np.isnan(values))
    if len(missing):
        i, a, g = missing[0]
        raise TabulationError(
            f"missing cell ({unit_ids[i]}, {ages.bands[a]}, {groups.groups[g]}) "
            f"and {len(missing) - 1} more"
        )
    return TabulationCube(h, rank, ages, groups, values, integer_valued=True)


def write_tabulation(cube: TabulationCube, path, *, value_column: str = "count") -> None:
    """Canonical ordering (unit, band, group); integers rendered without a point."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "age_band", "group", value_column])
        for i, uid in enumerate(cube.unit_ids):
            for a, band in enumerate(cube.ages.bands):
                for g, group in enumerate(cube.groups.groups):
                    v = cube.values[i, a, g]
                    text = str(int(v)) if cube.integer_valued else format(v, ".10g")
                    writer.writerow([uid, band, group, text])


def aggregate(cube: TabulationCube, target_rank: int) -> TabulationCube:
    """Sum each stratum bottom-up until the cube sits at ``target_rank``."""
    if target_rank >= cube.rank:
        if target_rank == cube.rank:
            return cube
        raise TabulationError(f"target rank {target_rank} is below cube rank {cube.rank}")
    if target_rank < 0 or target_rank >= cube.hierarchy.depth:
        raise TabulationError(f"rank {target_rank} not in hierarchy")
    h = cube.hierarchy
    current = cube
    while current.rank > target_rank:
        parent_ids = h.units_at(current.rank - 1)
        parent_index = {uid: i for i, uid in enumerate(parent_ids)}
        out = np.zeros((len(parent_ids), cube.ages.n, cube.groups.n))
        for i, uid in enumerate(current.unit_ids):
            parent = h.unit(uid).parent_id
            out[parent_index[parent]] += current.values[i]
        current = TabulationCube(
            h, current.rank - 1, cube.ages, cube.groups, out, cube.integer_valued
        )
    return current


def leveled_cubes(cube: TabulationCube) -> dict[int, TabulationCube]:
    """One cube per rank from the root down to the input cube's rank."""
    out = {cube.rank: cube}
    for rank in range(cube.rank - 1, -1, -1):
        out[rank] = aggregate(out[rank + 1], rank)
    return out


_ALL = "all"


def marginals(cube: TabulationCube, over: str | None) -> TabulationCube:
    """Sum out the named axes; ``over`` in {age, group, both}; None is a no-op."""
    if over in (None, "", "none"):
        return cube
    if over not in ("age", "group", "both"):
        raise TabulationError(f"unknown marginal axis {over!r}")
    values = cube.values
    ages, groups = cube.ages, cube.groups
    if over in ("age", "both"):
        values = values.sum(axis=1, keepdims=True)
        ages = AgeSchema((_ALL,))
    if over in ("group", "both"):
        values = values.sum(axis=2, keepdims=True)
        groups = GroupSchema((_ALL,))
    return TabulationCube(cube.hierarchy, cube.rank, ages, groups, values, cube.integer_valued)


def unit_totals(cube: TabulationCube) -> np.ndarray:
    """Total population per unit (both axes summed)."""
    return cube.values.sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# covariate file


def write_covariates(path, unit_ids: list[str], name: str, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "name", "value"])
        for uid, v in zip(unit_ids, values):
            writer.writerow([uid, name, format(float(v), ".10g")])


def read_covariates(path, unit_ids: list[str], name: str) -> np.ndarray:
    index = {uid: i for i, uid in enumerate(unit_ids)}
    values = np.full(len(unit_ids), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["unit_id", "name", "value"]:
            raise TabulationError(f"bad covariate header {header}")
        for uid, cname, raw in reader:
            if cname != name:
                continue
            if uid not in index:
                raise TabulationError(f"covariate file references unknown unit {uid!r}")
            values[index[uid]] = float(raw)
    if np.any(np.isnan(values)):
        missing = [uid for uid in unit_ids if np.isnan(values[index[uid]])]
        raise TabulationError(f"covariate {name!r} missing for units {missing[:5]}")
    return values
