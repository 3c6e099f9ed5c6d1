import math

import jax
import numpy as np

from latentee import dgp, posterior
from latentee.panel import TractTable
from latentee.sampler import DrawSet


def rare_dict(p: dgp.RareDiseaseParams, model, z=None):
    """Constrained blocks of ``model`` filled from simulator parameters."""
    c = dict(beta0=p.beta0, beta_geo=p.beta_geo[1:], beta_age=p.beta_age[1:],
             beta_sin=p.beta_sin, beta_cos=p.beta_cos, beta_xmas=p.beta_xmas, psi=p.psi,
             eta0=p.eta0, eta_geo=p.eta_geo[1:], eta_age=p.eta_age[1:],
             eta_logpop=p.eta_logpop, rho=p.rho, kappa=p.kappa, contact=p.C,
             theta=max(p.theta, 1e-300))
    if "z" in model.layout.offsets:
        c["z"] = np.zeros(model.layout.block("z").shape) if z is None else z
    return {b.name: c[b.name] for b in model.layout.blocks}


def point_draws(vec, model, copies=1):
    """A DrawSet holding ``copies`` repeats of one unconstrained vector."""
    x = np.tile(np.asarray(vec, dtype=float), (1, copies, 1))
    return DrawSet(x, model.layout.names())


def rare_point(p, model, copies=1):
    return point_draws(posterior.unconstrain(rare_dict(p, model), model), model, copies)


def fd_check(model, data, u, h=1e-5, rtol=1e-4, floor=1e-6):
    f = jax.jit(lambda x: model.log_density(x, data))
    _, g = posterior.log_posterior_grad(u, model, data)
    E = np.eye(len(u)) * h
    fd = np.array([(float(f(u + e)) - float(f(u - e))) / (2 * h) for e in E])
    err = np.abs(fd - g)
    return np.all(err <= rtol * np.abs(g) + floor), np.max(err / (np.abs(g) + floor / rtol))


def haversine_scalar(lat1, lon1, lat2, lon2, radius=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(h))


def double_sum(rows):
    """Direct population-weighted double sum over tract pairs, tens of km."""
    pumas = list(dict.fromkeys(r[0] for r in rows))
    tot = {p: sum(r[3] for r in rows if r[0] == p) for p in pumas}
    D = np.zeros((len(pumas), len(pumas)))
    for a, pa in enumerate(pumas):
        for b, pb in enumerate(pumas):
            s = 0.0
            for u in rows:
                if u[0] != pa:
                    continue
                for v in rows:
                    if v[0] != pb:
                        continue
                    s += u[3] * v[3] / (tot[pa] * tot[pb]) * haversine_scalar(u[1], u[2], v[1], v[2])
            D[a, b] = s / 10.0
    return D


THREE_PUMAS = [
    ("p1", 40.71, -74.00, 1200.0), ("p1", 40.73, -73.99, 800.0),
    ("p2", 40.80, -73.95, 500.0), ("p2", 40.78, -73.97, 1500.0),
    ("p3", 40.65, -73.80, 900.0), ("p3", 40.60, -73.85, 300.0),
]


def table(rows):
    return TractTable(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
                      np.array([r[2] for r in rows]), np.array([r[3] for r in rows]))
