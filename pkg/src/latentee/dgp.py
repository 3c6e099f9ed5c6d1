"""Forward simulation of the latent-infectiousness model instances.

Random numbers come from ``numpy.random.Generator(numpy.random.Philox(seed))``
(a counter-based bit generator), so a seed written into a manifest reproduces
the same panel on any platform with the same numpy major version.

Negative binomial convention: ``NegBin(mu, psi)`` has mean ``mu`` and variance
``mu * (1 + psi * mu)``; in the usual (size, prob) form size = 1/psi and
prob = 1 / (1 + psi * mu).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import mixing
from .panel import PanelData, default_weeks, save_panel, write_csv

OMEGA = 2 * np.pi / 52
MAX_RATE = 1e9
VARIANTS = ("full", "reduced", "naive")
GRID_THETAS = (0.05, 5.0, 15.0, 40.0)
GRID_PSIS = (0.05, 0.5, 1.0, 3.0)


class DivergenceError(RuntimeError):
    """Simulated rates exceeded the overflow guard."""


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# Count distributions

def negbin_logpmf(y, mu, psi):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.all(psi == 0):
        return special.xlogy(y, mu) - mu - special.gammaln(y + 1)
    s = 1.0 / psi
    return (special.gammaln(y + s) - special.gammaln(s) - special.gammaln(y + 1)
            - (s + y) * np.log1p(mu / s) + special.xlogy(y, mu) - y * np.log(s))


def negbin_sample(mu, psi, rng):
    mu = np.asarray(mu, dtype=float)
    if psi == 0:
        return rng.poisson(mu)
    s = 1.0 / psi
    return rng.negative_binomial(s, 1.0 / (1.0 + psi * mu))


def betabinom_logpmf(y, N, p, k):
    """Beta-binomial log pmf with mean probability ``p`` and precision ``k``.

    Returns -inf outside the support ``0 <= y <= N``.
    """
    y, N, p, k = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, N, p, k)))
    a = p * k
    b = (1.0 - p) * k
    inside = (y >= 0) & (y <= N)
    ys = np.where(inside, y, 0.0)
    out = (special.gammaln(N + 1) - special.gammaln(ys + 1) - special.gammaln(N - ys + 1)
           + special.betaln(ys + a, N - ys + b) - special.betaln(a, b))
    return np.where(inside, out, -np.inf)


def betabinom_sample(N, p, k, rng):
    N, p, k = np.broadcast_arrays(np.asarray(N), np.asarray(p, dtype=float),
                                  np.asarray(k, dtype=float))
    q = rng.beta(p * k, (1.0 - p) * k)  # one success probability per cell
    return rng.binomial(N.astype(np.int64), q)


def betabinom_variance(N, p, k):
    return N * p * (1 - p) * (k + N) / (k + 1)


# ---------------------------------------------------------------------------
# Parameter containers

def _vec(x, n, name, first_zero=False):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got {x.shape[0]}")
    if first_zero and x[0] != 0:
        raise ValueError(f"{name}[1] is the reference level and must be 0")
    return x


@dataclass(frozen=True)
class RareDiseaseParams:
    """Parameters of the rare-disease (negative binomial) instance.

    Reference levels ``beta_geo[0]``, ``beta_age[0]``, ``eta_geo[0]`` and
    ``eta_age[0]`` are fixed at zero.
    """

    beta0: float
    beta_geo: np.ndarray
    beta_age: np.ndarray
    beta_sin: np.ndarray
    beta_cos: np.ndarray
    beta_xmas: float
    eta0: float
    eta_geo: np.ndarray
    eta_age: np.ndarray
    eta_logpop: float
    rho: float
    psi: float
    theta: float
    C: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        G = len(np.atleast_1d(self.beta_geo))
        I = len(np.atleast_1d(self.beta_age))  # noqa: E741
        for name, n, fz in (("beta_geo", G, True), ("beta_age", I, True), ("beta_sin", I, False),
                            ("beta_cos", I, False), ("eta_geo", G, True), ("eta_age", I, True)):
            object.__setattr__(self, name, _vec(getattr(self, name), n, name, fz))
        C = np.asarray(self.C, dtype=float)
        if C.shape != (I, I):
            raise ValueError(f"C must be {I}x{I}")
        mixing._check_contact(C)
        object.__setattr__(self, "C", C)
        if not self.psi > 0:
            raise ValueError("psi must be positive")
        if not self.theta >= 0:
            raise ValueError("theta must be nonnegative")
        if not self.rho >= 0 or not self.kappa > 0:
            raise ValueError("rho must be nonnegative and kappa positive")

    @property
    def G(self) -> int:
        return len(self.beta_geo)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.beta_age)

    def replace(self, **changes) -> "RareDiseaseParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class OutbreakParams:
    """Parameters of the outbreak (beta-binomial) instance.

    ``log_R[t-2]`` is the log multiplier applied to prevalence at week t-1
    (one entry per predicted week t = 2..T). ``rho_geo`` are the per-source
    distance-decay rates; ``mean_log_rho``/``sd_log_rho`` describe their
    lognormal population and are used only by the prior.
    """

    delta: np.ndarray
    log_R: np.ndarray
    C: np.ndarray
    tau: np.ndarray
    rho_geo: np.ndarray
    gamma: float
    theta: float
    k: float
    mean_log_rho: float = 0.0
    sd_log_rho: float = 0.5

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=float)
        G, I = delta.shape  # noqa: E741
        if np.any(delta <= 0):
            raise ValueError("delta must be positive")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "log_R", np.asarray(self.log_R, dtype=float).reshape(-1))
        object.__setattr__(self, "C", mixing._check_contact(self.C))
        object.__setattr__(self, "tau", _vec(self.tau, G, "tau"))
        object.__setattr__(self, "rho_geo", _vec(self.rho_geo, G, "rho_geo"))
        if np.any(self.tau <= 0) or np.any(self.rho_geo <= 0):
            raise ValueError("tau and rho_geo must be positive")
        if not (self.gamma >= 0 and self.theta >= 0 and self.k > 0):
            raise ValueError("gamma, theta must be nonnegative and k positive")

    @property
    def alpha(self) -> np.ndarray:
        return mixing.activity_from_contact(self.C)

    def replace(self, **changes) -> "OutbreakParams":
        return dataclasses.replace(self, **changes)


def default_contact(I: int) -> np.ndarray:  # noqa: E741
    """A diagonally dominant (hence positive definite) contact matrix."""
    idx = np.arange(I)
    C = 0.25 + 0.5 * np.exp(-np.abs(idx[:, None] - idx[None, :]))
    C[idx, idx] = 1.5
    return C


def default_populations(G: int, I: int) -> np.ndarray:  # noqa: E741
    # the interaction term keeps log shares out of the span of the additive
    # region and age effects, so a log-population slope stays identifiable
    g = np.linspace(0.8, 1.25, G)
    i = np.linspace(1.2, 0.8, I)
    twist = 1.0 + 0.35 * np.cos(np.pi * (np.arange(G)[:, None] + 2 * np.arange(I)[None, :]) / 3)
    return np.round(1e5 * np.outer(g, i) * twist).astype(np.int64)


def path_orders(G: int) -> np.ndarray:
    idx = np.arange(G)
    return np.abs(idx[:, None] - idx[None, :])


def default_distance(G: int) -> np.ndarray:
    """Distances (km) between regions on a line, 20 km apart; the diagonal is a
    5 km within-region distance so gravity weights stay finite."""
    return 5.0 + 20.0 * path_orders(G)


def default_rare_params(G: int, I: int, theta: float = 5.0, psi: float = 0.5,  # noqa: E741
                        C=None) -> RareDiseaseParams:
    """Desk-scale parameter set with a seasonal endemic baseline of a few
    cases per cell-week and epidemic feedback below criticality."""
    return RareDiseaseParams(
        beta0=np.log(6.0 * G * I) - 0.3,
        beta_geo=np.linspace(0, 0.3, G) * (np.arange(G) % 2 * 2 - 1) * (np.arange(G) > 0),
        beta_age=np.linspace(0, -0.4, I),
        beta_sin=np.full(I, 0.35),
        beta_cos=np.full(I, 0.5),
        beta_xmas=-0.3,
        eta0=np.log(0.55),
        eta_geo=np.zeros(G),
        eta_age=np.linspace(0, 0.2, I),
        eta_logpop=0.0,
        rho=1.5,
        psi=psi,
        theta=theta,
        C=default_contact(I) if C is None else C,
    )


# ---------------------------------------------------------------------------
# Rare-disease instance

def _share(E):
    E = np.asarray(E, dtype=float)
    return np.log(E / E.sum())


def endemic_log_rates(params: RareDiseaseParams, E, times, weeks) -> np.ndarray:
    """Log endemic rates for the given 1-based times; shape (len(times), G, I)."""
    times = np.asarray(times, dtype=float)
    if np.shape(weeks) != times.shape:
        raise ValueError(f"got {len(times)} times but {len(np.atleast_1d(weeks))} week labels")
    xmas = np.isin(np.asarray(weeks), (1, 52)).astype(float)
    base = _share(E) + params.beta0 + params.beta_geo[:, None] + params.beta_age[None, :]
    seasonal = (np.sin(OMEGA * times)[:, None] * params.beta_sin[None, :]
                + np.cos(OMEGA * times)[:, None] * params.beta_cos[None, :]
                + params.beta_xmas * xmas[:, None])
    return base[None, :, :] + seasonal[:, None, :]


def endemic_rate(params: RareDiseaseParams, panel: PanelData, t: int) -> np.ndarray:
    """Endemic rate matrix for week ``t`` (1-based) of ``panel``."""
    week = panel.week_of_year[t - 1]
    return np.exp(endemic_log_rates(params, panel.populations, [t], [week])[0])


def susceptibility(params: RareDiseaseParams, panel_or_E) -> np.ndarray:
    E = getattr(panel_or_E, "populations", panel_or_E)
    return np.exp(params.eta_logpop * _share(E) + params.eta0
                  + params.eta_geo[:, None] + params.eta_age[None, :])


def age_weights(params: RareDiseaseParams, variant: str) -> np.ndarray:
    if variant == "reduced":
        return mixing.eigen_deformation(params.C, params.kappa)
    return mixing.normalize_contact(params.C)


def sample_latent(prev, mean_mult, theta, rng, method: str = "gamma") -> np.ndarray:
    """Latent infectious potential given prevalence.

    ``r ~ Gamma(shape=mean_mult*prev/theta, scale=theta)``; zero where prev is
    zero and equal to ``mean_mult*prev`` when theta is zero. ``method="lognormal"``
    draws from the moment-matched lognormal instead.
    """
    prev = np.asarray(prev, dtype=float)
    m = np.broadcast_to(np.asarray(mean_mult, dtype=float), prev.shape) * prev
    if theta == 0:
        return m.copy()
    out = np.zeros(np.broadcast_shapes(m.shape))
    pos = m > 0
    if method == "gamma":
        with np.errstate(over="ignore"):
            shape = m[pos] / theta
        # past 1e300 the relative spread is below 1e-150: the point-mass limit
        ok = shape <= 1e300
        out[pos] = np.where(ok, rng.gamma(np.where(ok, shape, 1.0), theta), m[pos])
    elif method == "lognormal":
        s2 = np.log1p(theta / m[pos])
        out[pos] = np.exp(np.log(m[pos]) - 0.5 * s2 + np.sqrt(s2) * rng.standard_normal(pos.sum()))
    else:
        raise ValueError(f"unknown latent method {method!r}")
    return out


def linear_predictor(delta, phi, wG, wI, r) -> np.ndarray:
    """``delta + phi * sum_{g',i'} wG[g,g'] wI[i,i'] r[g',i']`` (r may carry leading axes)."""
    return np.asarray(delta) + np.asarray(phi) * (wG @ np.asarray(r, dtype=float) @ wI.T)


def forward_rare(params: RareDiseaseParams, E, Y_prev, times, weeks, variant: str, rng,
                 *, orders=None, latent: str = "gamma"):
    """Advance the rare-disease process from counts ``Y_prev`` over the given
    1-based ``times`` (with matching ``weeks``).

    Returns ``(counts, rates, latent)``, each of shape (len(times), G, I).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    E = np.asarray(E)
    G, I = E.shape  # noqa: E741
    if (G, I) != (params.G, params.I):
        raise ValueError("population shape does not match parameter dimensions")
    orders = path_orders(G) if orders is None else np.asarray(orders)
    delta = np.exp(endemic_log_rates(params, E, times, weeks))
    n = len(delta)
    Y = np.zeros((n, G, I), dtype=np.int64)
    lam = np.zeros((n, G, I))
    r = np.zeros((n, G, I))
    if variant != "naive":
        phi = susceptibility(params, E)
        wG = mixing.geo_weights_power_decay(orders, params.rho)
        wI = age_weights(params, variant)
    prev = np.asarray(Y_prev)
    for k in range(n):
        if variant == "naive":
            lam[k] = delta[k]
        else:
            if variant == "full":
                r[k] = sample_latent(prev, 1.0, params.theta, rng, latent)
            else:
                r[k] = prev
            lam[k] = linear_predictor(delta[k], phi, wG, wI, r[k])
        if np.any(lam[k] > MAX_RATE) or not np.all(np.isfinite(lam[k])):
            raise DivergenceError(f"rate exceeded {MAX_RATE:g} at time {times[k]}")
        Y[k] = negbin_sample(lam[k], params.psi, rng)
        prev = Y[k]
    return Y, lam, r


def simulate_rare(params: RareDiseaseParams, E, T: int, variant: str = "full", seed=0, *,
                  orders=None, week_of_year=None, initial=None, latent: str = "gamma",
                  ) -> tuple[PanelData, np.ndarray]:
    """Simulate a T-week panel from the rare-disease instance.

    ``variant`` selects the epidemic component: ``full`` draws latent
    infectiousness, ``reduced`` feeds lag-1 counts through the eigen-deformed
    age weights, ``naive`` has no epidemic component. Week-1 counts are drawn
    from the endemic-only distribution unless ``initial`` is given.

    Returns the panel and the latent array ``r`` (``r[0]`` is zero).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if T < 2:
        raise ValueError("T must be at least 2")
    rng = make_rng(seed)
    E = np.asarray(E)
    weeks = default_weeks(T) if week_of_year is None else np.asarray(week_of_year)
    if initial is None:
        delta1 = np.exp(endemic_log_rates(params, E, [1], weeks[:1])[0])
        initial = negbin_sample(delta1, params.psi, rng)
    Y, _, r = forward_rare(params, E, initial, np.arange(2, T + 1), weeks[1:], variant, rng,
                           orders=orders, latent=latent)
    counts = np.concatenate([np.asarray(initial, dtype=np.int64)[None], Y])
    r = np.concatenate([np.zeros((1,) + r.shape[1:]), r])
    return PanelData(counts, E, weeks), r


# ---------------------------------------------------------------------------
# Outbreak instance

def prevalence_estimate(history, gamma: float) -> np.ndarray:
    """Distributed-lag prevalence ``sum_d exp(-gamma (d-1)) Y[t-d]`` from the
    full history of weeks 1..t-1 (``history`` has shape (t-1, G, I))."""
    history = np.asarray(history, dtype=float)
    lags = np.arange(history.shape[0])[::-1]
    w = np.exp(-gamma * lags) if np.isfinite(gamma) else (lags == 0).astype(float)
    return np.tensordot(w, history, axes=1)


def susceptible_estimate(history, E, counter: list | None = None) -> np.ndarray:
    """Population minus cumulative incidence, floored at zero.

    When flooring happens and ``counter`` is a list, the number of floored
    cells is appended to it.
    """
    X = np.asarray(E, dtype=float) - np.asarray(history, dtype=float).sum(axis=0)
    neg = X < 0
    if np.any(neg) and counter is not None:
        counter.append(int(neg.sum()))
    return np.maximum(X, 0.0)


def infection_probability(delta, E, wG, wI, r) -> np.ndarray:
    hazard = np.asarray(delta) + (wG @ np.asarray(r, dtype=float) @ wI.T) / np.asarray(E)
    return -np.expm1(-hazard)


def forward_outbreak(params: OutbreakParams, E, history, n_steps: int, rng, *, D,
                     latent: str = "gamma", log_R=None):
    """Advance the outbreak process ``n_steps`` weeks beyond ``history``
    (shape (t0, G, I), weeks 1..t0).

    ``log_R`` gives the multipliers for the new weeks; by default they are
    ``params.log_R[t0 - 1 : t0 - 1 + n_steps]``. Returns ``(counts, N, p, r)``: the
    draws, the susceptible pool, the infection probabilities and the latent
    values per new week.
    """
    E = np.asarray(E)
    history = np.asarray(history, dtype=np.int64)
    t0 = history.shape[0]
    if log_R is None:
        log_R = params.log_R[t0 - 1:t0 - 1 + n_steps]
    log_R = np.asarray(log_R, dtype=float)
    if log_R.shape[0] < n_steps:
        raise ValueError(f"log_R needs {n_steps} entries from week {t0 + 1}")
    wG = mixing.geo_weights_gravity(D, params.tau, params.rho_geo)
    wI = mixing.normalize_contact(params.C)
    alpha = params.alpha
    Y = np.concatenate([history, np.zeros((n_steps,) + history.shape[1:], dtype=np.int64)])
    N = np.zeros((n_steps,) + E.shape)
    P = np.zeros((n_steps,) + E.shape)
    R = np.zeros((n_steps,) + E.shape)
    for k in range(n_steps):
        t = t0 + k
        X = susceptible_estimate(Y[:t], E)
        prev = prevalence_estimate(Y[:t], params.gamma)
        R[k] = sample_latent(prev, np.exp(log_R[k]) * alpha[None, :], params.theta, rng, latent)
        hazard = params.delta + (wG @ R[k] @ wI.T) / E
        if np.any(hazard > MAX_RATE) or not np.all(np.isfinite(hazard)):
            raise DivergenceError(f"hazard exceeded {MAX_RATE:g} at week {t + 1}")
        p = np.clip(-np.expm1(-hazard), 1e-300, 1.0 - 1e-12)
        Y[t] = betabinom_sample(X, p, params.k, rng)
        N[k], P[k] = X, p
    return Y[t0:], N, P, R


def simulate_outbreak(params: OutbreakParams, E, T: int, seed=0, *, D, initial,
                      week_of_year=None, latent: str = "gamma") -> tuple[PanelData, np.ndarray]:
    """Simulate an outbreak panel with susceptible depletion and distributed-lag
    prevalence. ``initial`` holds the week-1 counts.

    Returns the panel and the latent array ``r`` (``r[0]`` is zero).
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    if params.log_R.shape[0] < T - 1:
        raise ValueError(f"log_R needs {T - 1} entries for T={T}")
    rng = make_rng(seed)
    E = np.asarray(E)
    initial = np.asarray(initial, dtype=np.int64)
    if initial.shape != E.shape or np.any(initial < 0) or np.any(initial > E):
        raise ValueError("initial counts must be (G, I) and lie within 0..E")
    Y, _, _, r = forward_outbreak(params, E, initial[None], T - 1, rng, D=D, latent=latent)
    weeks = default_weeks(T) if week_of_year is None else week_of_year
    counts = np.concatenate([initial[None], Y])
    return PanelData(counts, E, weeks), np.concatenate([np.zeros((1,) + E.shape), r])


def default_outbreak_params(G: int, I: int, T: int) -> OutbreakParams:  # noqa: E741
    """A two-wave outbreak: growth, suppression, resurgence."""
    t = np.arange(T - 1)
    log_R = np.where(t < T // 4, 0.5, np.where(t < T // 2, -0.6, 0.25))
    return OutbreakParams(
        delta=np.full((G, I), 2e-6),
        log_R=log_R,
        C=default_contact(I) / I,
        tau=np.ones(G),
        rho_geo=np.full(G, 1.5),
        gamma=1.6,
        theta=5.0,
        k=5e4,
    )


# ---------------------------------------------------------------------------
# Scenario grid

def dataset_seed(base_seed: int, scenario: int, replicate: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), int(scenario), int(replicate)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class ScenarioManifest:
    rows: list = field(default_factory=list)
    path: Path | None = None

    header = ("scenario", "theta", "psi", "replicate", "seed", "path")


def scenario_grid(base: RareDiseaseParams, thetas=GRID_THETAS, psis=GRID_PSIS,
                  replicates: int = 200, T_train: int = 208, H: int = 52, seed: int = 0,
                  out_dir=None, *, E, orders=None, variant: str = "full",
                  latent: str = "gamma", max_attempts: int = 20):
    """Simulate ``replicates`` panels of ``T_train + H`` weeks for each (theta, psi).

    Scenario ids run theta-major. If ``out_dir`` is given, each panel is saved to
    ``out_dir/s{scenario:02d}_r{replicate:03d}/`` and ``manifest.csv`` is written.
    Returns ``(manifest, panels)`` where ``panels[(scenario, replicate)]`` is a
    PanelData. A replicate whose rates diverge is redrawn from the next seed in
    its schedule; the manifest records the seed actually used.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    manifest = ScenarioManifest()
    panels = {}
    scenario = 0
    for theta in thetas:
        for psi in psis:
            params = base.replace(theta=float(theta), psi=float(psi))
            for rep in range(replicates):
                for attempt in range(max_attempts):
                    s = dataset_seed(seed, scenario, rep + attempt * 1_000_003)
                    try:
                        panel, _ = simulate_rare(params, E, T_train + H, variant, s,
                                                 orders=orders, latent=latent)
                        break
                    except DivergenceError:
                        continue
                else:
                    raise DivergenceError(f"scenario {scenario} replicate {rep} diverged "
                                          f"{max_attempts} times")
                path = ""
                if out_dir is not None:
                    d = out_dir / f"s{scenario:02d}_r{rep:03d}"
                    save_panel(panel, d)
                    path = str(d.relative_to(out_dir))
                manifest.rows.append((scenario, float(theta), float(psi), rep, s, path))
                panels[(scenario, rep)] = panel
            scenario += 1
    if out_dir is not None:
        manifest.path = out_dir / "manifest.csv"
        write_csv(manifest.path, ScenarioManifest.header, manifest.rows)
    return manifest, panels


# ---------------------------------------------------------------------------
# Parameter files: one ``key = v1 v2 ...`` line per field, '#' starts a comment.
# Matrices are written row-major.

def _parse_kv(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = values'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {n}: duplicate key {key!r}")
        try:
            out[key] = np.array([float(v) for v in value.split()])
        except ValueError:
            raise ValueError(f"line {n}: non-numeric value for {key!r}") from None
    return out


def _format_kv(fields: dict) -> str:
    lines = []
    for key, value in fields.items():
        arr = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
        lines.append(f"{key} = " + " ".join(repr(float(v)) for v in arr))
    return "\n".join(lines) + "\n"


def _params_to_fields(params) -> dict:
    return {f.name: getattr(params, f.name) for f in dataclasses.fields(params)}


def save_params(params, path) -> None:
    Path(path).write_text(_format_kv(_params_to_fields(params)), encoding="utf-8")


def load_params(path, kind: str = "rare"):
    fields = _parse_kv(Path(path).read_text(encoding="utf-8"))
    cls = RareDiseaseParams if kind == "rare" else OutbreakParams
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(fields) - names
    if unknown:
        raise ValueError(f"unknown parameter(s) {sorted(unknown)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in fields:
            if f.default is dataclasses.MISSING:
                raise ValueError(f"missing parameter {f.name!r}")
            continue
        v = fields[f.name]
        if f.name == "C":
            n = int(round(np.sqrt(v.size)))
            v = v.reshape(n, n)
        elif f.name == "delta":
            continue
        elif v.size == 1 and f.type in ("float", float):
            v = float(v[0])
        kw[f.name] = v
    if cls is OutbreakParams:
        G = kw["tau"].size
        kw["delta"] = fields["delta"].reshape(G, -1)
    return cls(**kw)
