"""Indirect age-standardization and the denominator-error comparison.

Statewide band-specific event rates (from the unprotected data) convert
population cubes into expected counts. Protected cubes give distorted
expected counts; the percent-error distribution is much wider for the
small minority denominators, and low-budget variants distort them most.
"""

import numpy as np

from privmap import build_synthetic_geography
from privmap.das import das_preset, run_topdown
from privmap.simulate import synth_deaths, synth_population
from privmap.standardize import (
    expected_counts,
    percent_error,
    rates_from_cubes,
    underestimation_fraction,
    zero_count_percent,
)
from privmap.tabulation import default_age_schema, default_group_schema

h, _ = build_synthetic_geography(300, [2, 2, 3, 5, 5], "grid", seed=7)
ages, groups = default_age_schema(), default_group_schema()
pop = synth_population(h, ages, groups, minority_ratio=12.0, pop_scale=174.0, seed=7)
deaths = synth_deaths(pop, seed=7)

rates = rates_from_cubes(deaths, pop, group_specific=True)
truth = expected_counts(pop, rates, "truth")
print("expected counts (truth source):")
for g, label in enumerate(groups.groups):
    vals = truth.values[:, g]
    print(
        f"  {label:>6}: median {np.median(vals):6.2f}, "
        f"share below 5: {100 * np.mean(vals < 5):5.1f}%, zero: {100 * np.mean(vals == 0):.2f}%"
    )

for variant in ("v19", "v20", "v22"):
    protected, _ = run_topdown(pop, das_preset(variant, seed=8))
    ec = expected_counts(protected, rates, variant)
    pe = percent_error(ec, truth)
    under = underestimation_fraction(ec, truth)
    zero = zero_count_percent(ec)
    print(f"\n{variant} vs truth (percent error in expected counts):")
    for label in groups.groups:
        s = pe.summary[label]
        print(
            f"  {label:>6}: mean {s['mean']:+7.2f}%, sd {s['sd']:7.2f}, "
            f"IQR [{s['q25']:+7.2f}, {s['q75']:+7.2f}], "
            f"under-estimated {under[label]:.1f}%, zero cells {zero[label]:.2f}%"
        )
