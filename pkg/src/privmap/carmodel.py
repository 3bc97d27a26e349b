"""Multilevel spatial Poisson regression fit by Metropolis-within-Gibbs.

The count for unit i and group j is Poisson with log mean

    x_ij' beta + theta_i + phi_ij + log(offset_ij)

where theta carries a proper conditionally autoregressive (CAR) prior over
the leaf adjacency (each unit normal around rho times the mean of its
neighbors, variance tau^2 over its neighbor count) and phi is an
unstructured overdispersion term. Coefficients, random effects, variances
and the spatial dependence parameter are all sampled; exponentiated
coefficient summaries give multiplicative rate-ratio estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import ModelError
from .geo import Adjacency
from .standardize import ExpectedCounts


# ---------------------------------------------------------------------------
# model specification


@dataclass
class ModelSpec:
    """Design, offsets, random-effect structure and priors for one fit."""

    unit_ids: list[str]
    groups: tuple[str, ...]
    colnames: list[str]
    x: np.ndarray          # (S, p)
    offset: np.ndarray     # (S,) log expected counts
    unit_idx: np.ndarray   # (S,) stratum -> leaf index
    group_idx: np.ndarray  # (S,) stratum -> group index
    adjacency: Adjacency | None = None
    include_spatial: bool = True
    include_overdispersion: bool = True
    prior_beta_var: float = 1e5
    prior_ig_shape: float = 1.0
    prior_ig_scale: float = 0.01
    fix_tau2: float | None = None
    fix_sigma2: float | None = None
    excluded: list[tuple[str, str]] = field(default_factory=list)
    covariate_scaling: dict = field(default_factory=dict)

    @property
    def n_strata(self) -> int:
        return self.x.shape[0]

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def flatten(self, per_cell: np.ndarray) -> np.ndarray:
        """Pull a (units x groups) matrix down to the included-strata vector."""
        return np.asarray(per_cell)[self.unit_idx, self.group_idx]


ZERO_POLICIES = ("exclude", "floor")
ZERO_FLOOR = 1e-6


def build_spec(
    expected: ExpectedCounts,
    covariate: np.ndarray | None,
    adjacency: Adjacency | None,
    *,
    include_spatial: bool = True,
    include_overdispersion: bool = True,
    zero_policy: str = "exclude",
    prior_beta_var: float = 1e5,
    prior_ig_shape: float = 1.0,
    prior_ig_scale: float = 0.01,
    fix_tau2: float | None = None,
    fix_sigma2: float | None = None,
) -> ModelSpec:
    """Assemble the design from expected counts, an optional area covariate,
    and the leaf adjacency.

    Cells with zero expected count cannot enter the likelihood (their log
    offset is undefined); by default they are excluded and reported, or with
    ``zero_policy="floor"`` the offset is floored at a tiny constant.
    """
    if zero_policy not in ZERO_POLICIES:
        raise ModelError(f"unknown zero policy {zero_policy!r}")
    if include_spatial and adjacency is None:
        raise ModelError("spatial effects need an adjacency")
    if include_spatial and adjacency.leaf_ids != expected.unit_ids:
        raise ModelError("adjacency leaves do not match expected-count units")

    n, n_groups = expected.values.shape
    p_vals = expected.values
    excluded = []
    unit_idx, group_idx = [], []
    for i in range(n):
        for g in range(n_groups):
            if p_vals[i, g] <= 0 and zero_policy == "exclude":
                excluded.append((expected.unit_ids[i], expected.groups[g]))
                continue
            unit_idx.append(i)
            group_idx.append(g)
    unit_idx = np.array(unit_idx, dtype=int)
    group_idx = np.array(group_idx, dtype=int)
    offset_vals = p_vals[unit_idx, group_idx]
    offset = np.log(np.maximum(offset_vals, ZERO_FLOOR if zero_policy == "floor" else 0))

    cols = [np.ones(unit_idx.size)]
    colnames = ["intercept"]
    for g in range(1, n_groups):
        cols.append((group_idx == g).astype(float))
        colnames.append(f"group:{expected.groups[g]}")
    scaling = {}
    if covariate is not None:
        covariate = np.asarray(covariate, dtype=float)
        if covariate.shape != (n,):
            raise ModelError(f"covariate must have one value per unit, got {covariate.shape}")
        mean, sd = float(covariate.mean()), float(covariate.std())
        if sd == 0:
            raise ModelError("covariate is constant; cannot scale")
        scaled = (covariate - mean) / sd
        cols.append(scaled[unit_idx])
        colnames.append("covariate")
        scaling = {"mean": mean, "sd": sd}

    return ModelSpec(
        unit_ids=list(expected.unit_ids),
        groups=tuple(expected.groups),
        colnames=colnames,
        x=np.column_stack(cols),
        offset=offset,
        unit_idx=unit_idx,
        group_idx=group_idx,
        adjacency=adjacency,
        include_spatial=include_spatial,
        include_overdispersion=include_overdispersion,
        prior_beta_var=prior_beta_var,
        prior_ig_shape=prior_ig_shape,
        prior_ig_scale=prior_ig_scale,
        fix_tau2=fix_tau2,
        fix_sigma2=fix_sigma2,
        excluded=excluded,
        covariate_scaling=scaling,
    )


@dataclass
class McmcConfig:
    iterations: int = 10_000
    burnin: int = 5_000
    thin: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.burnin >= self.iterations:
            raise ModelError("burn-in must be shorter than the total iteration count")
        if self.thin < 1:
            raise ModelError("thinning interval must be >= 1")

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burnin) // self.thin


# ---------------------------------------------------------------------------
# CAR structure helpers


def car_conditional(
    theta: np.ndarray, adjacency: Adjacency, rho: float, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Full-conditional mean and variance of each spatial effect given the rest:
    mean rho * sum_k w_ik theta_k / w_i+, variance scale / w_i+."""
    w_theta = adjacency.weights @ theta
    deg = adjacency.row_sums
    return rho * w_theta / deg, scale / deg


def sample_car_prior(
    adjacency: Adjacency, rho: float, scale: float, rng: np.random.Generator, size: int = 1
) -> np.ndarray:
    """Exact joint draw(s) from the proper CAR prior with precision
    (D - rho*W)/scale, via Cholesky of the precision matrix."""
    if not (0.0 <= rho < 1.0):
        raise ModelError(f"rho must lie in [0, 1), got {rho}")
    if scale <= 0:
        raise ModelError(f"scale must be positive, got {scale}")
    d = np.diag(adjacency.row_sums)
    q = (d - rho * adjacency.weights) / scale
    try:
        chol = scipy.linalg.cholesky(q, lower=False)  # q = chol' chol
    except scipy.linalg.LinAlgError as exc:
        raise ModelError(f"CAR precision not positive definite: {exc}") from None
    z = rng.standard_normal((adjacency.n, size))
    draws = scipy.linalg.solve_triangular(chol, z, lower=False)
    return draws[:, 0] if size == 1 else draws.T


def greedy_coloring(weights: np.ndarray) -> np.ndarray:
    """Proper vertex coloring so units updated together share no edge."""
    n = weights.shape[0]
    colors = np.full(n, -1, dtype=int)
    for i in range(n):
        used = {colors[k] for k in np.flatnonzero(weights[i] > 0) if colors[k] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[i] = c
    return colors


# ---------------------------------------------------------------------------
# posterior containers


@dataclass
class PosteriorDraws:
    colnames: list[str]
    beta: np.ndarray    # (K, p)
    theta: np.ndarray   # (K, n) or (K, 0)
    phi: np.ndarray     # (K, S) or (K, 0)
    tau2: np.ndarray    # (K,)
    sigma2: np.ndarray  # (K,)
    rho: np.ndarray     # (K,)
    mcmc: McmcConfig
    accept_rates: dict[str, float]

    @property
    def n_stored(self) -> int:
        return self.beta.shape[0]


def _mean_variance(x: np.ndarray) -> float:
    """Variance of the segment mean via batch means (autocorrelation-aware)."""
    batch = max(int(math.sqrt(x.size)), 2)
    n_batches = x.size // batch
    if n_batches < 2:
        return float(x.var(ddof=1) / x.size)
    bm = x[: batch * n_batches].reshape(n_batches, batch).mean(axis=1)
    return float(bm.var(ddof=1) / n_batches)


def geweke_z(chain: np.ndarray, first: float = 0.25, last: float = 0.4) -> float:
    """Convergence z-score comparing the early and late chain segments,
    with batch-means variances so autocorrelation does not deflate them."""
    if np.ptp(chain) == 0:
        return 0.0
    k = chain.size
    a = chain[: max(int(first * k), 2)]
    b = chain[k - max(int(last * k), 2) :]
    denom = math.sqrt(_mean_variance(a) + _mean_variance(b))
    if denom == 0:
        return 0.0
    return float((a.mean() - b.mean()) / denom)


@dataclass
class FitSummary:
    params: dict[str, dict[str, float]]  # name -> mean/sd/q025/q975/geweke_z
    mrr: dict[str, dict[str, float]]     # coefficient -> point/lower/upper
    converged: bool

    def mrr_line(self, name: str) -> str:
        m = self.mrr[name]
        return f"{m['point']:.2f} ({m['lower']:.2f},{m['upper']:.2f})"


# the z-scores behave like t statistics with modest degrees of freedom on
# short stored chains, so the flag threshold carries some slack
GEWEKE_FLAG = 3.5


def mrr_summary(draws: PosteriorDraws) -> FitSummary:
    """Posterior summaries plus exponentiated-mean rate ratios with 95%
    percentile intervals per coefficient."""
    if draws.n_stored < 100:
        raise ModelError(f"need at least 100 stored draws, have {draws.n_stored}")
    params: dict[str, dict[str, float]] = {}
    mrr: dict[str, dict[str, float]] = {}

    def add(name: str, chain: np.ndarray, as_mrr: bool) -> None:
        lo, hi = np.percentile(chain, [2.5, 97.5])
        params[name] = {
            "mean": float(chain.mean()),
            "sd": float(chain.std(ddof=1)),
            "q025": float(lo),
            "q975": float(hi),
            "geweke_z": geweke_z(chain),
        }
        if as_mrr:
            mrr[name] = {
                "point": float(np.exp(chain.mean())),
                "lower": float(np.exp(lo)),
                "upper": float(np.exp(hi)),
            }

    for j, name in enumerate(draws.colnames):
        add(name, draws.beta[:, j], as_mrr=True)
    add("tau2", draws.tau2, as_mrr=False)
    add("sigma2", draws.sigma2, as_mrr=False)
    add("rho", draws.rho, as_mrr=False)
    converged = all(abs(p["geweke_z"]) < GEWEKE_FLAG for p in params.values())
    return FitSummary(params, mrr, converged)


@dataclass
class SmrEstimates:
    """Posterior-mean predicted counts and standardized ratios per cell;
    cells outside the likelihood come back as NaN and are listed."""

    unit_ids: list[str]
    groups: tuple[str, ...]
    yhat: np.ndarray  # (n_units, n_groups)
    smr: np.ndarray   # (n_units, n_groups)
    missing: list[tuple[str, str]]


def predict_counts(draws: PosteriorDraws, spec: ModelSpec) -> SmrEstimates:
    """Predicted count = posterior mean of the Poisson mean per stratum;
    the ratio divides by the offset scale (the expected count)."""
    eta = spec.x @ draws.beta.T  # (S, K)
    if spec.include_spatial:
        eta += draws.theta.T[spec.unit_idx]
    if spec.include_overdispersion:
        eta += draws.phi.T
    eta += spec.offset[:, None]
    yhat_strata = np.exp(eta).mean(axis=1)
    p_strata = np.exp(spec.offset)

    n, n_groups = len(spec.unit_ids), len(spec.groups)
    yhat = np.full((n, n_groups), np.nan)
    smr = np.full((n, n_groups), np.nan)
    yhat[spec.unit_idx, spec.group_idx] = yhat_strata
    smr[spec.unit_idx, spec.group_idx] = yhat_strata / p_strata
    return SmrEstimates(list(spec.unit_ids), spec.groups, yhat, smr, list(spec.excluded))


# ---------------------------------------------------------------------------
# the sampler


_ADAPT_WINDOW = 50
_TARGET_ACCEPT = 0.44


class _Adapter:
    """Per-block random-walk scales, tuned only during burn-in."""

    def __init__(self, size: int, initial: float):
        self.log_scale = np.full(size, math.log(initial))
        self.accepted = np.zeros(size)
        self.proposed = np.zeros(size)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def record(self, accepted) -> None:
        self.accepted += accepted
        self.proposed += 1

    def adapt(self) -> None:
        rate = np.divide(
            self.accepted, self.proposed, out=np.zeros_like(self.accepted), where=self.proposed > 0
        )
        self.log_scale += np.where(rate > _TARGET_ACCEPT, 0.15, -0.15)
        self.log_scale = np.clip(self.log_scale, math.log(1e-4), math.log(50.0))
        self.accepted[:] = 0
        self.proposed[:] = 0


def fit(y: np.ndarray, spec: ModelSpec, mcmc: McmcConfig | None = None) -> PosteriorDraws:
    """Run the Metropolis-within-Gibbs sampler.

    Random-walk updates for the coefficients and each random effect (spatial
    effects move in graph-coloring blocks, which are conditionally
    independent), conjugate inverse-gamma updates for the two variances, and
    a bounded random walk for the spatial dependence parameter. Step sizes
    adapt during burn-in only, so the post-burn-in chain is a fixed-kernel
    sampler and runs are bit-reproducible for a given seed.
    """
    if mcmc is None:
        mcmc = McmcConfig()
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n_strata,):
        raise ModelError(f"y has shape {y.shape}, expected ({spec.n_strata},)")
    if np.any(y < 0) or not np.allclose(y, np.round(y)):
        raise ModelError("counts must be non-negative integers")
    if not np.all(np.isfinite(spec.offset)):
        raise ModelError("offsets must be finite; exclude or floor zero expected counts")
    if spec.include_spatial and not spec.adjacency.is_connected():
        raise ModelError("adjacency must be connected for the spatial prior")

    rng = np.random.default_rng(np.random.SeedSequence([mcmc.seed]))
    s_count, p = spec.x.shape
    n_units = spec.n_units

    # initial state
    with np.errstate(over="ignore"):
        p_sum = float(np.exp(spec.offset).sum())
    if not math.isfinite(p_sum) or p_sum <= 0:
        raise ModelError("divergent initialization: offsets overflow the Poisson means")
    beta = np.zeros(p)
    beta[0] = math.log((y.sum() + 0.5) / p_sum)
    theta = np.zeros(n_units)
    phi = np.zeros(s_count)
    tau2 = spec.fix_tau2 if spec.fix_tau2 is not None else 0.1
    sigma2 = spec.fix_sigma2 if spec.fix_sigma2 is not None else 0.1
    rho = 0.5

    eta = spec.x @ beta + spec.offset
    if spec.include_spatial:
        eta += theta[spec.unit_idx]
    if spec.include_overdispersion:
        eta += phi
    exp_eta = np.exp(eta)
    if not np.all(np.isfinite(exp_eta)):
        raise ModelError("divergent initialization: non-finite Poisson means")

    y_by_unit = np.bincount(spec.unit_idx, weights=y, minlength=n_units)

    if spec.include_spatial:
        w_dense = spec.adjacency.weights
        w_sparse = scipy.sparse.csr_matrix(w_dense)
        deg = spec.adjacency.row_sums
        colors = greedy_coloring(w_dense)
        color_masks = [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]
        # eigenvalues of D^-1/2 W D^-1/2 for the spatial-dependence determinant
        d_isqrt = 1.0 / np.sqrt(deg)
        sym = d_isqrt[:, None] * w_dense * d_isqrt[None, :]
        car_eigs = scipy.linalg.eigh(sym, eigvals_only=True)
        log_det_d = float(np.sum(np.log(deg)))

    beta_adapt = _Adapter(p, 0.1)
    theta_adapt = _Adapter(n_units, 0.5)
    phi_adapt = _Adapter(s_count, 0.5)
    rho_adapt = _Adapter(1, 0.1)
    ridge_adapt = _Adapter(p, 0.1)
    # channels whose coefficient is confounded with a block of phi terms:
    # the intercept spans every stratum, each group contrast its own strata
    ridge_channels: list[tuple[int, np.ndarray]] = []
    if spec.include_overdispersion:
        ridge_channels.append((0, np.arange(s_count)))
        for j, name in enumerate(spec.colnames):
            if name.startswith("group:"):
                g = spec.groups.index(name.split(":", 1)[1])
                ridge_channels.append((j, np.flatnonzero(spec.group_idx == g)))

    n_stored = mcmc.n_stored
    store_beta = np.empty((n_stored, p))
    store_theta = np.empty((n_stored, n_units if spec.include_spatial else 0))
    store_phi = np.empty((n_stored, s_count if spec.include_overdispersion else 0))
    store_tau2 = np.empty(n_stored)
    store_sigma2 = np.empty(n_stored)
    store_rho = np.empty(n_stored)

    accept_totals = {"beta": 0.0, "theta": 0.0, "phi": 0.0, "rho": 0.0}
    proposal_totals = {"beta": 0.0, "theta": 0.0, "phi": 0.0, "rho": 0.0}
    stored = 0

    for sweep in range(1, mcmc.iterations + 1):
        in_burnin = sweep <= mcmc.burnin

        # --- coefficients, one coordinate at a time
        scales = beta_adapt.scale
        for j in range(p):
            step = scales[j] * rng.standard_normal()
            delta_eta = spec.x[:, j] * step
            new_eta = eta + delta_eta
            new_exp = np.exp(new_eta)
            b_new = beta[j] + step
            log_r = (
                float(y @ delta_eta)
                - float(new_exp.sum() - exp_eta.sum())
                - (b_new**2 - beta[j] ** 2) / (2 * spec.prior_beta_var)
            )
            accept = math.log(rng.random()) < log_r
            if accept:
                beta[j] = b_new
                eta, exp_eta = new_eta, new_exp
            beta_adapt.accepted[j] += accept
            beta_adapt.proposed[j] += 1
            accept_totals["beta"] += accept
            proposal_totals["beta"] += 1

        # --- spatial effects, by color class
        if spec.include_spatial:
            t_scales = theta_adapt.scale
            # per-unit sums of Poisson means; a theta_i step of eps scales
            # every stratum of unit i by e^eps, so the sums update in place
            exp_by_unit = np.bincount(spec.unit_idx, weights=exp_eta, minlength=n_units)
            eta_dirty = False
            for members in color_masks:
                eps = t_scales[members] * rng.standard_normal(members.size)
                w_theta = w_sparse @ theta
                m = rho * w_theta[members] / deg[members]
                lik = y_by_unit[members] * eps - exp_by_unit[members] * np.expm1(eps)
                t_old = theta[members]
                pri = -deg[members] / (2 * tau2) * ((t_old + eps - m) ** 2 - (t_old - m) ** 2)
                accept = np.log(rng.random(members.size)) < lik + pri
                if accept.any():
                    moved = members[accept]
                    theta[moved] += eps[accept]
                    exp_by_unit[moved] *= np.exp(eps[accept])
                    delta_unit = np.zeros(n_units)
                    delta_unit[moved] = eps[accept]
                    eta += delta_unit[spec.unit_idx]
                    eta_dirty = True
                theta_adapt.accepted[members[accept]] += 1.0
                theta_adapt.proposed[members] += 1.0
                accept_totals["theta"] += float(accept.sum())
                proposal_totals["theta"] += members.size
            if eta_dirty:
                exp_eta = np.exp(eta)
            # identifiability: recenter the field, absorb the shift in the intercept
            shift = theta.mean()
            theta -= shift
            beta[0] += shift

        # --- overdispersion effects, all at once (conditionally independent)
        if spec.include_overdispersion:
            f_scales = phi_adapt.scale
            eps = f_scales * rng.standard_normal(s_count)
            lik = y * eps - exp_eta * np.expm1(eps)
            pri = -((phi + eps) ** 2 - phi**2) / (2 * sigma2)
            accept = np.log(rng.random(s_count)) < lik + pri
            phi += eps * accept
            eta += eps * accept
            exp_eta = np.exp(eta)
            phi_adapt.record(accept.astype(float))
            accept_totals["phi"] += float(accept.sum())
            proposal_totals["phi"] += s_count

            # ridge moves: a coefficient and its channel's phi values are
            # confounded through the likelihood, so shift them jointly
            # (Poisson means unchanged; accepted on the prior ratio alone)
            for j, members in ridge_channels:
                u = ridge_adapt.scale[j] * rng.standard_normal()
                phis = phi[members]
                d_phi = (2 * u * phis.sum() - members.size * u**2) / (2 * sigma2)
                b_new = beta[j] + u
                d_beta = -(b_new**2 - beta[j] ** 2) / (2 * spec.prior_beta_var)
                if math.log(rng.random()) < d_phi + d_beta:
                    beta[j] = b_new
                    phi[members] -= u
                    ridge_adapt.accepted[j] += 1
                ridge_adapt.proposed[j] += 1

        # --- variances, conjugate inverse-gamma
        if spec.include_spatial and spec.fix_tau2 is None:
            quad = float(deg @ theta**2 - rho * (theta @ (w_sparse @ theta)))
            shape = spec.prior_ig_shape + n_units / 2
            rate = spec.prior_ig_scale + quad / 2
            tau2 = rate / rng.gamma(shape)
        if spec.include_overdispersion and spec.fix_sigma2 is None:
            shape = spec.prior_ig_shape + s_count / 2
            rate = spec.prior_ig_scale + float(phi @ phi) / 2
            sigma2 = rate / rng.gamma(shape)

        # --- spatial dependence, bounded random walk on [0, 1)
        if spec.include_spatial:
            step = rho_adapt.scale[0] * rng.standard_normal()
            rho_new = rho + step
            u = rng.random()
            accept = False
            if 0.0 <= rho_new < 1.0:
                quad_w = float(theta @ (w_sparse @ theta))
                quad_d = float(deg @ theta**2)
                logdet_old = log_det_d + float(np.sum(np.log1p(-rho * car_eigs)))
                logdet_new = log_det_d + float(np.sum(np.log1p(-rho_new * car_eigs)))
                log_r = 0.5 * (logdet_new - logdet_old) - (
                    (quad_d - rho_new * quad_w) - (quad_d - rho * quad_w)
                ) / (2 * tau2)
                accept = math.log(u) < log_r
            if accept:
                rho = rho_new
            rho_adapt.record(np.array([float(accept)]))
            accept_totals["rho"] += accept
            proposal_totals["rho"] += 1

        if in_burnin and sweep % _ADAPT_WINDOW == 0:
            beta_adapt.adapt()
            theta_adapt.adapt()
            phi_adapt.adapt()
            rho_adapt.adapt()
            ridge_adapt.adapt()

        if not in_burnin and (sweep - mcmc.burnin) % mcmc.thin == 0 and stored < n_stored:
            store_beta[stored] = beta
            if spec.include_spatial:
                store_theta[stored] = theta
            if spec.include_overdispersion:
                store_phi[stored] = phi
            store_tau2[stored] = tau2
            store_sigma2[stored] = sigma2
            store_rho[stored] = rho
            stored += 1

    rates = {
        k: (accept_totals[k] / proposal_totals[k] if proposal_totals[k] else float("nan"))
        for k in accept_totals
    }
    return PosteriorDraws(
        colnames=list(spec.colnames),
        beta=store_beta,
        theta=store_theta,
        phi=store_phi,
        tau2=store_tau2,
        sigma2=store_sigma2,
        rho=store_rho,
        mcmc=mcmc,
        accept_rates=rates,
    )


# ---------------------------------------------------------------------------
# draw persistence


def write_draws(draws: PosteriorDraws, path, *, include_effects: bool = False, spec: ModelSpec | None = None) -> None:
    """One row per stored iteration, named columns, 10 significant digits."""
    import csv as _csv

    header = ["iteration"] + [f"beta:{c}" for c in draws.colnames] + ["tau2", "sigma2", "rho"]
    if include_effects:
        if spec is None:
            raise ModelError("writing random effects needs the model spec")
        header += [f"theta:{u}" for u in spec.unit_ids] if draws.theta.shape[1] else []
        header += (
            [f"phi:{spec.unit_ids[i]}:{spec.groups[g]}" for i, g in zip(spec.unit_idx, spec.group_idx)]
            if draws.phi.shape[1]
            else []
        )
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for k in range(draws.n_stored):
            row = [k] + [format(v, ".10g") for v in draws.beta[k]]
            row += [format(draws.tau2[k], ".10g"), format(draws.sigma2[k], ".10g"), format(draws.rho[k], ".10g")]
            if include_effects:
                row += [format(v, ".10g") for v in draws.theta[k]]
                row += [format(v, ".10g") for v in draws.phi[k]]
            writer.writerow(row)
