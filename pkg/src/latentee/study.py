"""Desk-scale simulation studies: interval coverage, paired forecast scores and
simulation-based calibration on small rare-disease panels.

Every study is a loop of (simulate, fit, summarize) over replicate datasets
whose seeds come from :func:`dgp.dataset_seed`, so a study is reproducible
from its configuration alone.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np
from scipy import stats

from . import dgp, forecast, posterior
from .panel import write_csv
from .sampler import DrawSet, SamplerConfig, nuts_sample


@dataclass(frozen=True)
class StudyConfig:
    G: int = 3
    I: int = 3  # noqa: E741
    T_train: int = 60
    H: int = 1
    replicates: int = 20
    chains: int = 4
    warmup_iters: int = 500
    sampling_iters: int = 500
    forecast_draws: int = 1000
    level: float = 0.9
    seed: int = 0

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(chains=self.chains, warmup_iters=self.warmup_iters,
                             sampling_iters=self.sampling_iters, seed=seed)


def fit_rare(panel, variant: str, config: SamplerConfig, *, orders=None, C_known=None,
             prior=None, jobs: int = 1, progress=None):
    """Fit one rare-disease variant to ``panel``; returns (DrawSet, model, data)."""
    model = posterior.RareModel(variant, panel.G, panel.I, panel.T, prior)
    data = model.make_data(panel, orders=orders, C_known=C_known)
    draws = nuts_sample(posterior.logdensity_fn(model), model.dim, config, args=(data,),
                        param_names=model.layout.names(), progress=progress, jobs=jobs)
    return draws, model, data


def credible_interval(draws: DrawSet, name: str, level: float = 0.9, positive: bool = True):
    """Equal-tailed interval of one scalar parameter on its natural scale."""
    x = draws.flat()[:, draws.param_names.index(name)]
    lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2])
    return (float(np.exp(lo)), float(np.exp(hi))) if positive else (float(lo), float(hi))


def _panel(base, theta, psi, scenario, rep, T, seed, E):
    params = base.replace(theta=float(theta), psi=float(psi))
    for attempt in range(20):
        s = dgp.dataset_seed(seed, scenario, rep + attempt * 1_000_003)
        try:
            return dgp.simulate_rare(params, E, T, "full", s)[0], s
        except dgp.DivergenceError:
            continue
    raise dgp.DivergenceError(f"scenario {scenario} replicate {rep} kept diverging")


@dataclass
class CoverageResult:
    rows: list = field(default_factory=list)
    header = ("scenario", "theta", "psi", "replicate", "seed", "model", "lower", "upper",
              "covered", "max_rhat", "divergent")

    def coverage(self, theta, model) -> float:
        hits = [r[8] for r in self.rows if r[1] == theta and r[5] == model]
        return float(np.mean(hits)) if hits else float("nan")

    def write(self, path) -> None:
        write_csv(path, self.header, self.rows)


def coverage_study(thetas, psi: float, cfg: StudyConfig = StudyConfig(),
                   variants=("full", "reduced"), jobs: int = 1, progress=None) -> CoverageResult:
    """Coverage of the psi interval by each variant, one scenario per theta."""
    base = dgp.default_rare_params(cfg.G, cfg.I, psi=psi)
    E = dgp.default_populations(cfg.G, cfg.I)
    C = base.C
    out = CoverageResult()
    for scenario, theta in enumerate(thetas):
        for rep in range(cfg.replicates):
            panel, seed = _panel(base, theta, psi, scenario, rep, cfg.T_train, cfg.seed, E)
            for variant in variants:
                draws, _, _ = fit_rare(panel, variant, cfg.sampler(seed % 2**31), C_known=C,
                                       jobs=jobs)
                lo, hi = credible_interval(draws, "psi", cfg.level)
                row = (scenario, float(theta), float(psi), rep, seed, variant, lo, hi,
                       int(lo <= psi <= hi), draws.max_rhat(), draws.n_divergent)
                out.rows.append(row)
                if progress is not None:
                    progress(row)
    return out


@dataclass
class ScoreResult:
    scores: dict = field(default_factory=dict)  # model -> {replicate: scores over h}

    def table(self, a="full", b="reduced") -> forecast.ScoreTable:
        return forecast.paired_scores(self.scores[a], self.scores[b], a, b)

    def rows(self):
        return [(m, d, h + 1, float(v)) for m, per in self.scores.items()
                for d, ls in sorted(per.items()) for h, v in enumerate(ls)]


def score_study(theta: float, psi: float, cfg: StudyConfig = StudyConfig(), scenario: int = 0,
                variants=("full", "reduced"), jobs: int = 1, progress=None) -> ScoreResult:
    """Fit each variant to the first T_train weeks and score forecasts of the
    next H weeks."""
    base = dgp.default_rare_params(cfg.G, cfg.I, psi=psi)
    E = dgp.default_populations(cfg.G, cfg.I)
    C = base.C
    out = ScoreResult({v: {} for v in variants})
    for rep in range(cfg.replicates):
        panel, seed = _panel(base, theta, psi, scenario, rep, cfg.T_train + cfg.H, cfg.seed, E)
        train = panel.window(0, cfg.T_train)
        future = panel.counts[cfg.T_train:]
        for variant in variants:
            draws, model, _ = fit_rare(train, variant, cfg.sampler(seed % 2**31), C_known=C,
                                       jobs=jobs)
            fc = forecast.posterior_predictive(draws, train, cfg.H, model, seed + 1, C_known=C,
                                               n_draws=cfg.forecast_draws)
            out.scores[variant][rep] = forecast.log_scores(fc, future)
            if progress is not None:
                progress((rep, variant, out.scores[variant][rep]))
    return out


# ---------------------------------------------------------------------------
# Simulation-based calibration

SBC_FREE = ("beta0", "psi", "theta", "z")


@functools.lru_cache(maxsize=None)
def _clamped_density(model, free: tuple):
    """Log density over the ``free`` coordinates with the rest held at
    ``data['u_fixed']``."""
    idx = jnp.asarray(free)

    def f(u, data):
        return model.log_density(data["u_fixed"].at[idx].set(u), data)
    return f


def _free_index(model, names=SBC_FREE) -> tuple:
    out = []
    for n in names:
        lo, hi = model.layout.offsets[n]
        out.extend(range(lo, hi))
    return tuple(out)


@dataclass
class SBCResult:
    ranks: dict
    n_draws: int
    bins: int

    def chi2(self, name) -> tuple[float, float]:
        """Chi-square statistic and p-value for uniformity of the binned ranks."""
        counts = np.bincount(np.asarray(self.ranks[name]) * self.bins // (self.n_draws + 1),
                             minlength=self.bins)
        stat, p = stats.chisquare(counts)
        return float(stat), float(p)

    def rows(self):
        return [(n, j, int(r)) for n, rs in self.ranks.items() for j, r in enumerate(rs)]


def sbc(replications: int = 100, *, G: int = 2, I: int = 2, T: int = 20,  # noqa: E741
        n_draws: int = 99, bins: int = 10, chains: int = 4, warmup_iters: int = 300,
        sampling_iters: int = 250, seed: int = 0, progress=None) -> SBCResult:
    """Simulation-based calibration of (beta0, psi, theta) in the full model with
    every other parameter fixed at its default.

    Each replication draws the three parameters from their priors, simulates a
    panel with the lognormal latent layer and a fixed first week, fits, and
    records the rank of each true value among ``n_draws`` evenly thinned
    posterior draws.
    """
    if (n_draws + 1) % bins:
        raise ValueError("n_draws + 1 must be divisible by bins")
    model = posterior.RareModel("full", G, I, T)
    base = dgp.default_rare_params(G, I)
    E = dgp.default_populations(G, I)
    free = _free_index(model)
    scalar = [model.layout.offsets[n][0] for n in ("beta0", "psi", "theta")]
    density = _clamped_density(model, free)
    prior = model.prior.as_dict()
    initial = np.full((G, I), 5)
    ranks = {n: [] for n in ("beta0", "psi", "theta")}
    for rep in range(replications):
        rng = dgp.make_rng(dgp.dataset_seed(seed, 0, rep))
        beta0 = rng.normal(*prior["beta0"][1])
        log_psi = rng.normal(*prior["psi"][1])
        log_theta = rng.normal(*prior["theta"][1])
        params = base.replace(beta0=beta0, psi=float(np.exp(log_psi)), theta=float(np.exp(log_theta)))
        try:
            panel, _ = dgp.simulate_rare(params, E, T, "full", rng, initial=initial,
                                         latent="lognormal")
        except dgp.DivergenceError:
            raise dgp.DivergenceError(f"SBC replication {rep} diverged") from None
        c = {b.name: np.zeros(b.shape) for b in model.layout.blocks}
        c.update(beta0=beta0, beta_geo=base.beta_geo[1:], beta_age=base.beta_age[1:],
                 beta_sin=base.beta_sin, beta_cos=base.beta_cos, beta_xmas=base.beta_xmas,
                 psi=params.psi, eta0=base.eta0, eta_geo=base.eta_geo[1:],
                 eta_age=base.eta_age[1:], eta_logpop=base.eta_logpop, rho=base.rho,
                 contact=base.C, theta=params.theta)
        data = model.make_data(panel)
        data["u_fixed"] = jnp.asarray(posterior.unconstrain(c, model))
        cfg = SamplerConfig(chains=chains, warmup_iters=warmup_iters,
                            sampling_iters=sampling_iters, seed=rep)
        draws = nuts_sample(density, len(free), cfg, args=(data,))
        flat = draws.flat()
        keep = np.unique(np.linspace(0, len(flat) - 1, n_draws).round().astype(int))
        truth = {"beta0": beta0, "psi": log_psi, "theta": log_theta}
        for name, col in zip(ranks, scalar):
            j = free.index(col)
            ranks[name].append(int(np.sum(flat[keep, j] < truth[name])))
        if progress is not None:
            progress(rep, {n: r[-1] for n, r in ranks.items()}, draws)
    return SBCResult(ranks, n_draws, bins)


__all__ = ["StudyConfig", "fit_rare", "credible_interval", "coverage_study", "CoverageResult",
           "score_study", "ScoreResult", "sbc", "SBCResult"]
