"""Unnormalized log posterior and gradient for the model variants.

Parameters live on an unconstrained real vector. Each named block maps to the
constrained scale by one of four transforms:

``real``      identity
``positive``  ``exp``; the log-Jacobian is the unconstrained value itself
``contact``   log of the lower triangle of a symmetric contact matrix, in
              ``numpy.tril_indices`` order, each entry exponentiated
``latent``    identity; standard-normal innovations of the latent layer

Priors are stated on the constrained scale and ``log_prior`` adds the
log-Jacobians, so every density here is a density of the unconstrained vector.

Data enter the compiled functions as a pytree (a dict of arrays), so models with
the same dimensions share compiled code across datasets.

The latent layer is non-centered: ``r = exp(mu_ln + sigma_ln * z)`` with moments
matched to the gamma layer (mean m, variance theta * m). Every (t, g, i) cell
carries an innovation; where the conditioning prevalence is zero the latent
value is pinned to zero and the innovation only meets its N(0, 1) prior.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import special as jsp
from scipy.special import gammaln

from . import dgp, mixing
from .panel import PanelData

jax.config.update("jax_enable_x64", True)

RARE_VARIANTS = ("naive", "reduced", "full")
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class LayoutError(ValueError):
    """Parameter vector does not match the model layout."""


class DataError(ValueError):
    """Data are inconsistent with the model."""


# ---------------------------------------------------------------------------
# Latent layer

def lognormal_latent(z, m, v):
    """Moment-matched lognormal draw ``exp(mu_ln + sigma_ln z)`` with mean m, variance v."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(m <= 0) or np.any(v <= 0):
        raise ValueError("lognormal_latent needs m > 0 and v > 0")
    s2 = np.log1p(v / m ** 2)
    return np.exp(np.log(m) - 0.5 * s2 + np.sqrt(s2) * np.asarray(z, dtype=float))


def _latent_jax(z, m, theta):
    """Lognormal latent with variance theta*m; exactly zero where m == 0."""
    pos = m > 0
    m_safe = jnp.where(pos, m, 1.0)
    s2 = jnp.log1p(theta / m_safe)
    r = jnp.exp(jnp.log(m_safe) - 0.5 * s2 + jnp.sqrt(s2) * z)
    return jnp.where(pos, r, 0.0)


# ---------------------------------------------------------------------------
# Layout

@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple
    kind: str  # real | positive | contact | latent

    @property
    def size(self) -> int:
        if self.kind == "contact":
            return self.shape[0] * (self.shape[0] + 1) // 2
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class Layout:
    blocks: tuple

    @functools.cached_property
    def offsets(self) -> dict:
        out, pos = {}, 0
        for b in self.blocks:
            out[b.name] = (pos, pos + b.size)
            pos += b.size
        return out

    @property
    def dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def block(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def names(self) -> list:
        """Flat parameter names, 1-based indices (contact entries as C[i,j])."""
        out = []
        for b in self.blocks:
            if b.kind == "contact":
                rows, cols = np.tril_indices(b.shape[0])
                out += [f"C[{r + 1},{c + 1}]" for r, c in zip(rows, cols)]
            elif b.shape == ():
                out.append(b.name)
            else:
                first = 2 if b.name in _REFERENCE_BLOCKS else 1
                for idx in np.ndindex(*b.shape):
                    label = ",".join(str(k + (first if len(b.shape) == 1 else 1)) for k in idx)
                    out.append(f"{b.name}[{label}]")
        return out

    def split(self, u) -> dict:
        if u.shape[-1] != self.dim:
            raise LayoutError(f"parameter vector has length {u.shape[-1]}, layout needs {self.dim}")
        out = {}
        for b in self.blocks:
            lo, hi = self.offsets[b.name]
            if b.kind == "contact":
                out[b.name] = u[..., lo:hi]
            else:
                out[b.name] = u[..., lo:hi].reshape(u.shape[:-1] + b.shape)
        return out


_OPTIONAL_BLOCKS = ("beta_geo", "beta_age", "eta_geo", "eta_age")
# blocks whose first level is a fixed reference and is not sampled
_REFERENCE_BLOCKS = ("beta_geo", "beta_age", "eta_geo", "eta_age")


def _contact_from_tri(tri, I, xp):  # noqa: E741
    rows, cols = np.tril_indices(I)
    if xp is np:
        C = np.zeros(tri.shape[:-1] + (I, I))
        C[..., rows, cols] = tri
        C[..., cols, rows] = tri
        return C
    C = jnp.zeros(tri.shape[:-1] + (I, I))
    C = C.at[..., rows, cols].set(tri)
    return C.at[..., cols, rows].set(tri)


def _constrain_blocks(layout: Layout, parts: dict, xp) -> dict:
    out = {}
    for b in layout.blocks:
        x = parts[b.name]
        if b.kind == "positive":
            out[b.name] = xp.exp(x)
        elif b.kind == "contact":
            out[b.name] = _contact_from_tri(xp.exp(x), b.shape[0], xp)
        else:
            out[b.name] = x
    return out


# ---------------------------------------------------------------------------
# Priors

FAMILIES = {
    # family: (number of hyperparameters, allowed kinds)
    "normal": (2, ("real",)),
    "std_normal": (0, ("real", "latent")),
    "lognormal": (2, ("positive",)),
    "halfnormal": (1, ("positive",)),
    "halfcauchy": (1, ("positive",)),
    "gamma": (2, ("positive",)),
    "contact_gamma": (2, ("contact",)),
}


@dataclass(frozen=True)
class PriorSpec:
    """Per-block priors as ``(name, family, hyperparameters)`` entries.

    Families: ``normal(mean, sd)``, ``std_normal``, ``lognormal(mean_log, sd_log)``
    (a normal prior on the log), ``halfnormal(sd)``, ``halfcauchy(scale)``,
    ``gamma(shape, rate)`` and ``contact_gamma(alpha_diag, alpha_offdiag)`` (common
    scale ``1/(2I)``).

    File format: one entry per line, ``name family p1 p2 ...``; ``#`` starts a
    comment. Values are parsed with ``float`` and written with ``repr``, so a
    write/read cycle is exact.
    """

    entries: tuple

    def as_dict(self) -> dict:
        return {name: (fam, tuple(p)) for name, fam, p in self.entries}

    def replace(self, name, family, *params) -> "PriorSpec":
        d = self.as_dict()
        if name not in d:
            raise KeyError(f"no prior entry for {name!r}")
        d[name] = (family, tuple(float(p) for p in params))
        return PriorSpec(tuple((n, f, p) for n, (f, p) in d.items()))

    @classmethod
    def parse(cls, text: str) -> "PriorSpec":
        entries, seen = [], set()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            if len(line) < 2:
                raise ValueError(f"line {n}: expected 'name family params...'")
            name, family, *params = line
            if family not in FAMILIES:
                raise ValueError(f"line {n}: unknown prior family {family!r}")
            if len(params) != FAMILIES[family][0]:
                raise ValueError(f"line {n}: {family} takes {FAMILIES[family][0]} parameter(s)")
            if name in seen:
                raise ValueError(f"line {n}: duplicate prior for {name!r}")
            seen.add(name)
            try:
                entries.append((name, family, tuple(float(p) for p in params)))
            except ValueError:
                raise ValueError(f"line {n}: non-numeric hyperparameter") from None
        return cls(tuple(entries))

    def format(self) -> str:
        return "".join(f"{name} {fam}" + "".join(f" {p!r}" for p in params) + "\n"
                       for name, fam, params in self.entries)

    def check(self, layout: Layout) -> None:
        d = self.as_dict()
        names = {b.name for b in layout.blocks}
        missing = names - set(d)
        extra = set(d) - names
        if missing or extra:
            raise LayoutError(f"prior spec mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for b in layout.blocks:
            fam, params = d[b.name]
            if b.kind not in FAMILIES[fam][1]:
                raise LayoutError(f"prior family {fam!r} cannot be used on {b.kind} block {b.name!r}")
            if fam != "normal" and any(p <= 0 for p in params[-1:]):
                raise LayoutError(f"prior for {b.name!r} needs positive scale")


def _rare_entries(variant: str, preset: str) -> list:
    if preset not in ("simstudy", "analysis"):
        raise ValueError(f"unknown prior preset {preset!r}")
    e = [("beta0", "normal", (3.0, 2.0)),
         ("beta_geo", "normal", (0.0, 3.0)),
         ("beta_age", "normal", (0.0, 3.0)),
         ("beta_sin", "normal", (0.0, 3.0)),
         ("beta_cos", "normal", (0.0, 3.0)),
         ("beta_xmas", "normal", (0.0, 3.0))]
    # -log(psi) ~ N(-1/2, 1) is log(psi) ~ N(1/2, 1); likewise theta
    e.append(("psi", "lognormal", (0.5, 1.0)) if preset == "simstudy"
             else ("psi", "halfcauchy", (1.0,)))
    if variant in ("reduced", "full"):
        e += [("eta0", "normal", (2.0, 5.0)),
              ("eta_geo", "normal", (0.0, 3.0)),
              ("eta_age", "normal", (0.0, 3.0)),
              ("eta_logpop", "normal", (0.0, 2.0)),
              ("rho", "lognormal", (0.0, 1.0))]
    if variant == "reduced":
        e.append(("kappa", "lognormal", (0.0, 0.75)))
    if variant == "full":
        e.append(("contact", "contact_gamma", (4.32, 1.296)))
        e.append(("theta", "lognormal", (2.0, 1.0)) if preset == "simstudy"
                 else ("theta", "halfcauchy", (1.0,)))
        e.append(("z", "std_normal", ()))
    return e


def _outbreak_entries() -> list:
    return [("delta", "halfnormal", (1.0,)),
            ("theta", "halfcauchy", (5.0,)),
            ("k", "halfcauchy", (1e4,)),
            ("gamma", "halfcauchy", (1.0,)),
            ("log_R", "normal", (0.0, 2.0)),
            ("contact", "contact_gamma", (4.32, 1.296)),
            ("tau", "lognormal", (0.0, 3.0)),
            ("mean_log_rho", "normal", (0.0, 2.0)),
            ("sd_log_rho", "halfnormal", (1.0,)),
            ("rho_raw", "std_normal", ()),
            ("z", "std_normal", ())]


def prior_preset(variant: str, preset: str = "simstudy", I: int = 6) -> PriorSpec:  # noqa: E741
    """Default priors. ``preset`` is ``simstudy`` or ``analysis`` for the
    rare-disease variants (they differ only for theta and psi); the outbreak
    variant has a single preset. Contact-prior shapes are those giving a 0.4
    expected diagonal mixing share at the given ``I``."""
    if variant == "outbreak":
        entries = _outbreak_entries()
    elif variant in RARE_VARIANTS:
        entries = _rare_entries(variant, preset)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    h = mixing.hyper_from_target(0.4, 1.8, I)
    entries = [(n, f, (h.alpha_diag, h.alpha_offdiag) if f == "contact_gamma" else p)
               for n, f, p in entries]
    return PriorSpec(tuple(entries))


def _logpdf(family, params, x, I=None):  # noqa: E741
    """Elementwise log density of the constrained value, summed."""
    if family == "normal":
        mu, sd = params
        return jnp.sum(-0.5 * ((x - mu) / sd) ** 2 - math.log(sd) - HALF_LOG_2PI)
    if family == "std_normal":
        return jnp.sum(-0.5 * x ** 2 - HALF_LOG_2PI)
    if family == "lognormal":
        mu, sd = params
        lx = jnp.log(x)
        return jnp.sum(-0.5 * ((lx - mu) / sd) ** 2 - math.log(sd) - HALF_LOG_2PI - lx)
    if family == "halfnormal":
        (sd,) = params
        return jnp.sum(-0.5 * (x / sd) ** 2 - math.log(sd) + math.log(2.0) - HALF_LOG_2PI)
    if family == "halfcauchy":
        (s,) = params
        return jnp.sum(math.log(2.0 / (math.pi * s)) - jnp.log1p((x / s) ** 2))
    if family == "gamma":
        a, rate = params
        return jnp.sum(a * math.log(rate) - math.lgamma(a) + (a - 1) * jnp.log(x) - rate * x)
    if family == "contact_gamma":
        a_diag, a_off = params
        rows, cols = np.tril_indices(I)
        shape = np.where(rows == cols, a_diag, a_off)
        scale = 1.0 / (2 * I)
        lgam = np.array([math.lgamma(a) for a in shape])
        return jnp.sum((shape - 1) * jnp.log(x) - x / scale - lgam - shape * math.log(scale))
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Models

def _negbin_sum(y_hist, lam, y, psi, n_cells, lgamma_y1):
    """Sum of NegBin(mean lam, dispersion psi) log pmf over cells.

    ``y_hist = (values, multiplicities)`` of the observed counts lets the
    ``lgamma(y + 1/psi)`` terms be evaluated once per distinct count.
    """
    s = 1.0 / psi
    values, mult = y_hist
    lg = jnp.sum(mult * jsp.gammaln(values + s)) - n_cells * jsp.gammaln(s)
    return (lg - lgamma_y1 - jnp.sum((s + y) * jnp.log1p(lam * psi))
            + jnp.sum(y * (jnp.log(lam) + jnp.log(psi))))


def _count_histogram(y):
    values, mult = np.unique(np.asarray(y, dtype=np.int64), return_counts=True)
    pad = -len(values) % 32  # keep array shapes in a few buckets
    return (np.concatenate([values, np.zeros(pad)]).astype(float),
            np.concatenate([mult, np.zeros(pad)]).astype(float))


@dataclass(frozen=True)
class RareModel:
    """Rare-disease instance: negative binomial counts, power-decay geographic
    weights and (full) latent infectiousness, (reduced) eigen-deformed known
    contacts or (naive) no epidemic component.

    The likelihood covers weeks 2..T conditional on week 1.
    """

    variant: str
    G: int
    I: int  # noqa: E741
    T: int
    prior: PriorSpec = None

    def __post_init__(self):
        if self.variant not in RARE_VARIANTS:
            raise ValueError(f"unknown rare-disease variant {self.variant!r}")
        if self.T < 2 or self.G < 1 or self.I < 1:
            raise ValueError("need T >= 2 and G, I >= 1")
        if self.variant == "full" and self.I < 2:
            raise ValueError("the full variant needs at least two age groups")
        if self.prior is None:
            object.__setattr__(self, "prior", prior_preset(self.variant, "simstudy", max(self.I, 2)))
        # entries for blocks that vanish when G or I is 1 are dropped
        names = {b.name for b in self.layout.blocks}
        object.__setattr__(self, "prior", PriorSpec(tuple(
            e for e in self.prior.entries if e[0] in names or e[0] not in _OPTIONAL_BLOCKS)))
        self.prior.check(self.layout)

    @functools.cached_property
    def layout(self) -> Layout:
        G, I, T = self.G, self.I, self.T  # noqa: E741
        b = [Block("beta0", (), "real"), Block("beta_geo", (G - 1,), "real"),
             Block("beta_age", (I - 1,), "real"), Block("beta_sin", (I,), "real"),
             Block("beta_cos", (I,), "real"), Block("beta_xmas", (), "real"),
             Block("psi", (), "positive")]
        if self.variant in ("reduced", "full"):
            b += [Block("eta0", (), "real"), Block("eta_geo", (G - 1,), "real"),
                  Block("eta_age", (I - 1,), "real"), Block("eta_logpop", (), "real"),
                  Block("rho", (), "positive")]
        if self.variant == "reduced":
            b.append(Block("kappa", (), "positive"))
        if self.variant == "full":
            b += [Block("contact", (I,), "contact"), Block("theta", (), "positive"),
                  Block("z", (T - 1, G, I), "latent")]
        # drop empty blocks (G == 1 or I == 1)
        return Layout(tuple(x for x in b if x.size > 0))

    @property
    def dim(self) -> int:
        return self.layout.dim

    def make_data(self, panel: PanelData, orders=None, C_known=None) -> dict:
        """Pack a panel (and fixed structure) into the pytree the density expects."""
        if (panel.T, panel.G, panel.I) != (self.T, self.G, self.I):
            raise DataError(f"panel is {(panel.T, panel.G, panel.I)}, model expects "
                            f"{(self.T, self.G, self.I)}")
        y = panel.counts.astype(float)
        E = panel.populations.astype(float)
        t = np.arange(2, self.T + 1, dtype=float)
        weeks = panel.week_of_year[1:]
        orders = dgp.path_orders(self.G) if orders is None else np.asarray(orders, dtype=float)
        if orders.shape != (self.G, self.G):
            raise DataError("adjacency orders do not match the number of regions")
        data = {
            "y": y[1:], "y_prev": y[:-1],
            "log_share": np.log(E / E.sum()),
            "sin": np.sin(dgp.OMEGA * t), "cos": np.cos(dgp.OMEGA * t),
            "xmas": np.isin(weeks, (1, 52)).astype(float),
            "orders": orders,
            "y_hist": _count_histogram(y[1:]),
            "lgamma_y1": float(np.sum(gammaln(y[1:] + 1))),
        }
        if self.variant == "reduced":
            if C_known is None:
                raise DataError("the reduced variant needs a known contact matrix")
            data.update(_eigen_parts(C_known))
        return data

    # -- density pieces -------------------------------------------------
    def rates(self, p: dict, data: dict):
        """Endemic rates (T-1, G, I) and the full linear predictor."""
        zero = jnp.zeros(1)
        bg = jnp.concatenate([zero, p.get("beta_geo", jnp.zeros(0))])
        ba = jnp.concatenate([zero, p.get("beta_age", jnp.zeros(0))])
        log_delta = (data["log_share"] + p["beta0"] + bg[:, None] + ba[None, :]
                     + data["sin"][:, None, None] * p["beta_sin"]
                     + data["cos"][:, None, None] * p["beta_cos"]
                     + data["xmas"][:, None, None] * p["beta_xmas"])
        delta = jnp.exp(log_delta)
        if self.variant == "naive":
            return delta, delta, jnp.asarray(False)
        eg = jnp.concatenate([zero, p.get("eta_geo", jnp.zeros(0))])
        ea = jnp.concatenate([zero, p.get("eta_age", jnp.zeros(0))])
        phi = jnp.exp(p["eta_logpop"] * data["log_share"] + p["eta0"] + eg[:, None] + ea[None, :])
        wG = (1.0 + data["orders"]) ** (-p["rho"])
        wG = wG / wG.sum(axis=0, keepdims=True)
        bad = jnp.asarray(False)
        if self.variant == "full":
            C = p["contact"]
            wI = C / C.sum(axis=0, keepdims=True)
            r = _latent_jax(p["z"], data["y_prev"], p["theta"])
        else:
            M = (data["eig_vec"] * data["eig_val"] ** p["kappa"]) @ data["eig_inv"]
            bad = jnp.any(M < -1e-10 * jnp.max(jnp.abs(M)))
            M = jnp.maximum(M, 0.0)
            wI = M / M.sum(axis=0, keepdims=True)
            r = data["y_prev"]
        lam = delta + phi * jnp.einsum("ga,tab,ib->tgi", wG, r, wI)
        return delta, lam, bad

    def log_likelihood(self, u, data):
        p = _constrain_blocks(self.layout, self.layout.split(u), jnp)
        _, lam, bad = self.rates(p, data)
        n = self.G * self.I * (self.T - 1)
        ll = _negbin_sum(data["y_hist"], lam, data["y"], p["psi"], n, data["lgamma_y1"])
        ok = jnp.isfinite(ll) & ~bad
        return jnp.where(ok, ll, -jnp.inf)

    def log_prior(self, u):
        return _log_prior(self.layout, self.prior, u, self.I)

    def log_density(self, u, data):
        return self.log_prior(u) + self.log_likelihood(u, data)

    def to_params(self, vec, data=None, C_known=None) -> dgp.RareDiseaseParams:
        """Constrained parameters of one draw as simulator parameters."""
        c = constrain(vec, self)
        G, I = self.G, self.I  # noqa: E741

        def lead0(name, n):
            return np.concatenate([[0.0], c[name]]) if name in c else np.zeros(n)

        if self.variant == "full":
            C = c["contact"]
        elif C_known is not None:
            C = np.asarray(C_known, dtype=float)
        else:
            C = np.ones((I, I))
        return dgp.RareDiseaseParams(
            beta0=float(c["beta0"]), beta_geo=lead0("beta_geo", G), beta_age=lead0("beta_age", I),
            beta_sin=c["beta_sin"], beta_cos=c["beta_cos"], beta_xmas=float(c["beta_xmas"]),
            eta0=float(c.get("eta0", 0.0)), eta_geo=lead0("eta_geo", G), eta_age=lead0("eta_age", I),
            eta_logpop=float(c.get("eta_logpop", 0.0)), rho=float(c.get("rho", 0.0)),
            psi=float(c["psi"]), theta=float(c.get("theta", 0.0)), C=C,
            kappa=float(c.get("kappa", 1.0)))


def _eigen_parts(C_known) -> dict:
    C = np.asarray(C_known, dtype=float)
    if np.allclose(C, C.T, rtol=1e-12, atol=0):
        lam, vec = np.linalg.eigh(0.5 * (C + C.T))
        inv = vec.T
    else:
        lam, vec = np.linalg.eig(C)
        if np.any(np.abs(lam.imag) > 1e-10 * np.abs(lam).max()):
            raise mixing.MixingError("known contact matrix has complex eigenvalues")
        lam, vec = lam.real, vec.real
        inv = np.linalg.inv(vec)
    if np.any(lam <= 1e-10 * np.abs(lam).max()):
        raise mixing.MixingError("known contact matrix has nonpositive eigenvalues")
    return {"eig_vec": vec, "eig_val": lam, "eig_inv": inv}


def _log_prior(layout: Layout, prior: PriorSpec, u, I):  # noqa: E741
    parts = layout.split(u)
    d = prior.as_dict()
    total = 0.0
    for b in layout.blocks:
        fam, params = d[b.name]
        x = parts[b.name]
        if b.kind == "positive":
            total = total + _logpdf(fam, params, jnp.exp(x)) + jnp.sum(x)
        elif b.kind == "contact":
            total = total + _logpdf(fam, params, jnp.exp(x), b.shape[0]) + jnp.sum(x)
        else:
            total = total + _logpdf(fam, params, x)
    return total


def _binom_const(N, y):
    return float(np.sum(gammaln(N + 1) - gammaln(y + 1) - gammaln(N - y + 1)))


@dataclass(frozen=True)
class OutbreakModel:
    """Outbreak instance: beta-binomial counts on the depleted susceptible pool,
    distributed-lag prevalence, time-varying reproduction multiplier and gravity
    geographic weights with hierarchical (non-centered) decay rates."""

    G: int
    I: int  # noqa: E741
    T: int
    prior: PriorSpec = None
    variant: str = field(default="outbreak", init=False)

    def __post_init__(self):
        if self.T < 2 or self.G < 1 or self.I < 2:
            raise ValueError("need T >= 2, G >= 1, I >= 2")
        if self.prior is None:
            object.__setattr__(self, "prior", prior_preset("outbreak", I=self.I))
        self.prior.check(self.layout)

    @functools.cached_property
    def layout(self) -> Layout:
        G, I, T = self.G, self.I, self.T  # noqa: E741
        return Layout((
            Block("delta", (G, I), "positive"), Block("theta", (), "positive"),
            Block("k", (), "positive"), Block("gamma", (), "positive"),
            Block("log_R", (T - 1,), "real"), Block("contact", (I,), "contact"),
            Block("tau", (G,), "positive"), Block("mean_log_rho", (), "real"),
            Block("sd_log_rho", (), "positive"), Block("rho_raw", (G,), "real"),
            Block("z", (T - 1, G, I), "latent")))

    @property
    def dim(self) -> int:
        return self.layout.dim

    def make_data(self, panel: PanelData, D) -> dict:
        if (panel.T, panel.G, panel.I) != (self.T, self.G, self.I):
            raise DataError(f"panel is {(panel.T, panel.G, panel.I)}, model expects "
                            f"{(self.T, self.G, self.I)}")
        D = np.asarray(D, dtype=float)
        if D.shape != (self.G, self.G) or np.any(D <= 0):
            raise DataError("distance matrix must be G x G with positive entries")
        y = panel.counts.astype(float)
        E = panel.populations.astype(float)
        X = E[None] - np.cumsum(y, axis=0)[:-1]  # susceptibles before weeks 2..T
        bad = y[1:] > X
        if np.any(bad):
            t, g, i = np.argwhere(bad)[0]
            raise DataError(f"count exceeds remaining susceptibles at (t={t + 2}, g={g + 1}, i={i + 1})")
        lag = np.arange(self.T - 1)[:, None] - np.arange(self.T - 1)[None, :]
        return {"y": y[1:], "hist": y[:-1], "X": X, "E": E, "log_D": np.log(D),
                "lag": np.where(lag >= 0, lag, -1).astype(float),
                "binom_const": _binom_const(X, y[1:])}

    def probabilities(self, p: dict, data: dict):
        lag = data["lag"]
        W = jnp.where(lag >= 0, jnp.exp(-p["gamma"] * jnp.maximum(lag, 0.0)), 0.0)
        prev = jnp.einsum("ts,sgi->tgi", W, data["hist"])
        C = p["contact"]
        alpha = C.sum(axis=0)
        wI = C / alpha[None, :]
        m = jnp.exp(p["log_R"])[:, None, None] * alpha[None, None, :] * prev
        r = _latent_jax(p["z"], m, p["theta"])
        log_rho = p["mean_log_rho"] + p["sd_log_rho"] * p["rho_raw"]
        logw = jnp.log(p["tau"])[:, None] - jnp.exp(log_rho)[None, :] * data["log_D"]
        wG = jax.nn.softmax(logw, axis=0)
        hazard = p["delta"] + jnp.einsum("ga,tab,ib->tgi", wG, r, wI) / data["E"]
        return -jnp.expm1(-hazard)

    def log_likelihood(self, u, data):
        p = _constrain_blocks(self.layout, self.layout.split(u), jnp)
        prob = self.probabilities(p, data)
        prob = jnp.clip(prob, 1e-300, 1.0 - 1e-15)
        k = p["k"]
        a, b = prob * k, (1.0 - prob) * k
        y, N = data["y"], data["X"]
        ll = data["binom_const"] + jnp.sum(
            _lgamma_ratio(a, y) + _lgamma_ratio(b, N - y) - _lgamma_ratio(k, N))
        return jnp.where(jnp.isfinite(ll), ll, -jnp.inf)

    def log_prior(self, u):
        return _log_prior(self.layout, self.prior, u, self.I)

    def log_density(self, u, data):
        return self.log_prior(u) + self.log_likelihood(u, data)

    def to_params(self, vec) -> dgp.OutbreakParams:
        c = constrain(vec, self)
        return dgp.OutbreakParams(
            delta=c["delta"], log_R=c["log_R"], C=c["contact"], tau=c["tau"],
            rho_geo=np.exp(c["mean_log_rho"] + c["sd_log_rho"] * c["rho_raw"]),
            gamma=float(c["gamma"]), theta=float(c["theta"]), k=float(c["k"]),
            mean_log_rho=float(c["mean_log_rho"]), sd_log_rho=float(c["sd_log_rho"]))


def _stirling_tail(x):
    x2 = x * x
    return (1 / 12 - (1 / 360 - (1 / 1260 - 1 / (1680 * x2)) / x2) / x2) / x


def _lgamma_ratio(x, n):
    """``lgamma(x + n) - lgamma(x)`` for x > 0, n >= 0.

    For large x the two log-gammas nearly cancel, so the difference is taken
    from Stirling's series instead (needed as the beta-binomial approaches the
    binomial, k -> inf).
    """
    big = x >= 30.0
    xb = jnp.where(big, x, 30.0)
    xs = jnp.where(big, 1.0, x)
    u = n / xb
    l1p = jnp.log1p(u)
    series = (n * jnp.log(xb) + xb * (l1p - u) + (n - 0.5) * l1p
              + _stirling_tail(xb + n) - _stirling_tail(xb))
    return jnp.where(big, series, jsp.gammaln(xs + n) - jsp.gammaln(xs))


# ---------------------------------------------------------------------------
# Public functional interface

def _check_vec(vec, model):
    u = jnp.asarray(vec, dtype=jnp.float64)
    if u.ndim != 1 or u.shape[0] != model.dim:
        raise LayoutError(f"parameter vector has shape {u.shape}, model needs ({model.dim},)")
    return u


@functools.lru_cache(maxsize=None)
def logdensity_fn(model):
    """Pure ``(u, data) -> log posterior`` for ``model``; one function object
    per distinct model, so compiled sampler kernels are reused."""
    def f(u, data):
        return model.log_density(u, data)
    return f


@functools.lru_cache(maxsize=None)
def _value_and_grad(model):
    return jax.jit(jax.value_and_grad(logdensity_fn(model)))


@functools.lru_cache(maxsize=None)
def _jitted(model, what):
    if what == "prior":
        return jax.jit(model.log_prior)
    return jax.jit(model.log_likelihood)


def log_prior(vec, model) -> float:
    return float(_jitted(model, "prior")(_check_vec(vec, model)))


def log_likelihood_rare(vec, model: RareModel, data: dict) -> float:
    if not isinstance(model, RareModel):
        raise TypeError("log_likelihood_rare needs a RareModel")
    return float(_jitted(model, "lik")(_check_vec(vec, model), data))


def log_likelihood_outbreak(vec, model: OutbreakModel, data: dict) -> float:
    if not isinstance(model, OutbreakModel):
        raise TypeError("log_likelihood_outbreak needs an OutbreakModel")
    return float(_jitted(model, "lik")(_check_vec(vec, model), data))


def log_posterior_grad(vec, model, data) -> tuple[float, np.ndarray]:
    """Log posterior and its gradient. A nonfinite gradient is returned as is;
    callers (the sampler) treat it as a divergence."""
    value, grad = _value_and_grad(model)(_check_vec(vec, model), data)
    return float(value), np.asarray(grad)


def constrain(vec, model) -> dict:
    """Named constrained blocks; the contact block becomes the full I x I matrix."""
    u = np.asarray(vec, dtype=float)
    if u.shape[-1] != model.dim:
        raise LayoutError(f"parameter vector has length {u.shape[-1]}, model needs {model.dim}")
    return _constrain_blocks(model.layout, model.layout.split(u), np)


def unconstrain(params: dict, model) -> np.ndarray:
    """Inverse of :func:`constrain`; checks positivity and contact symmetry."""
    out = np.empty(model.dim)
    for b in model.layout.blocks:
        lo, hi = model.layout.offsets[b.name]
        if b.name not in params:
            raise LayoutError(f"missing block {b.name!r}")
        x = np.asarray(params[b.name], dtype=float)
        if b.kind == "contact":
            C = mixing._check_contact(x)
            rows, cols = np.tril_indices(b.shape[0])
            out[lo:hi] = np.log(C[rows, cols])
            continue
        if x.shape != b.shape:
            raise LayoutError(f"block {b.name!r} has shape {x.shape}, expected {b.shape}")
        if b.kind == "positive":
            if np.any(x <= 0):
                raise ValueError(f"block {b.name!r} must be positive")
            x = np.log(x)
        out[lo:hi] = x.reshape(-1)
    return out


def log_jacobian(vec, model) -> float:
    """Log-determinant of the unconstrained-to-constrained map (free entries only)."""
    parts = model.layout.split(np.asarray(vec, dtype=float))
    return float(sum(np.sum(parts[b.name]) for b in model.layout.blocks
                     if b.kind in ("positive", "contact")))


def sample_prior(model, rng, size: int = 1) -> np.ndarray:
    """Draws from the prior, returned on the unconstrained scale (size, dim)."""
    d = model.prior.as_dict()
    out = np.empty((size, model.dim))
    for b in model.layout.blocks:
        lo, hi = model.layout.offsets[b.name]
        fam, p = d[b.name]
        n = hi - lo
        if fam == "normal":
            x = rng.normal(p[0], p[1], (size, n))
        elif fam == "std_normal":
            x = rng.standard_normal((size, n))
        elif fam == "lognormal":
            x = rng.normal(p[0], p[1], (size, n))
        elif fam == "halfnormal":
            x = np.log(np.abs(rng.normal(0, p[0], (size, n))))
        elif fam == "halfcauchy":
            x = np.log(np.abs(p[0] * rng.standard_cauchy((size, n))))
        elif fam == "gamma":
            x = np.log(rng.gamma(p[0], 1.0 / p[1], (size, n)))
        elif fam == "contact_gamma":
            I = b.shape[0]  # noqa: E741
            hyper = mixing.ContactPriorHyper(p[0], p[1], 1.0 / (2 * I))
            rows, cols = np.tril_indices(I)
            x = np.log(rng.gamma(hyper.shapes(I)[rows, cols], hyper.scale, (size, n)))
        out[:, lo:hi] = x
    return out
