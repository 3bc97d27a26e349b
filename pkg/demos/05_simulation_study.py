"""A compact replicated study comparing denominator sources.

Counts are generated from the model using the true expected counts; the
model is then refit once per denominator source (truth plus three
protection presets) and coefficient and standardized-ratio errors are
aggregated over replicates. At full scale this runs with 300 leaves and 50
replicates; here a reduced version keeps the runtime to a couple of
minutes.
"""

from privmap import build_synthetic_geography
from privmap.carmodel import McmcConfig
from privmap.das import das_preset, run_topdown
from privmap.simulate import DgpConfig, run_study, synth_deaths, synth_population, synth_poverty
from privmap.standardize import expected_counts, rates_from_cubes
from privmap.tabulation import default_age_schema, default_group_schema

SEED = 7
h, adj = build_synthetic_geography(120, [2, 3, 4, 5], "grid", SEED)
ages, groups = default_age_schema(), default_group_schema()
pop = synth_population(h, ages, groups, minority_ratio=12.0, pop_scale=174.0, seed=SEED)
deaths = synth_deaths(pop, seed=SEED)
rates = rates_from_cubes(deaths, pop, True)
truth = expected_counts(pop, rates, "truth")
poverty = synth_poverty(120, seed=SEED)

sources = [truth]
for variant in ("v19", "v20", "v22"):
    protected, _ = run_topdown(pop, das_preset(variant, seed=SEED + 1))
    sources.append(expected_counts(protected, rates, variant))

dgp = DgpConfig(beta=(0.0, 0.4, 0.01), n_reps=10, master_seed=SEED)
report = run_study(dgp, sources, poverty, adj, McmcConfig(1600, 800, 4, seed=0), jobs=1)

print(f"{report.n_reps} replicates x {len(report.sources)} sources on {len(report.unit_ids)} units\n")
print("coefficient bias (mean over replicates):")
for src in report.sources:
    cb = report.coef_bias_mean[src]
    print(f"  {src:>6}: intercept {cb[0]:+.4f}  group {cb[1]:+.4f}  covariate {cb[2]:+.4f}")

print("\nstandardized-ratio metrics by group:")
header = f"  {'source':>6} {'group':>6} {'bias':>8} {'MAPE':>7} {'upward%':>8} {'under%':>7} {'zero%':>6}"
print(header)
for src in report.sources:
    for group in report.groups:
        print(
            f"  {src:>6} {group:>6} "
            f"{report.group_bias[src][group]:+8.4f} "
            f"{report.group_mape[src][group]:7.4f} "
            f"{report.upward_pct[src][group]:8.1f} "
            f"{report.under_pct[src][group]:7.1f} "
            f"{report.zero_pct[src][group]:6.2f}"
        )
print("\nconverged replicate fits per source:")
for src in report.sources:
    flags = report.convergence[src]
    print(f"  {src:>6}: {sum(flags)}/{len(flags)}")
