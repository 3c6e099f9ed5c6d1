"""Closed-form one-step conditional moments and a Monte Carlo checker.

Given last week's counts ``Y_prev``, the rare-disease process with latent
dispersion theta and observation dispersion psi has

    mean        mu = delta + R0 * phi * (wG @ Y_prev @ wI.T)
    variance    mu (1 + psi mu) + theta (1 + psi) V,
                V = R0 * phi**2 * ((wG**2) @ Y_prev @ (wI**2).T)
    covariance  theta * R0 * phi[g,i] * phi[a,b]
                * sum_{g',i'} wG[g,g'] wI[i,i'] wG[a,g'] wI[b,i'] Y_prev[g',i']

The mean does not involve theta, and the covariance between distinct cells is
never negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dgp
from .panel import write_csv


def conditional_mean(delta, phi, wG, wI, Y_prev, R0=1.0) -> np.ndarray:
    return np.asarray(delta) + R0 * np.asarray(phi) * (wG @ np.asarray(Y_prev, dtype=float) @ wI.T)


def latent_spread(phi, wG, wI, Y_prev, R0=1.0) -> np.ndarray:
    """The variance kernel V (free of theta and psi)."""
    return R0 * np.asarray(phi) ** 2 * ((wG ** 2) @ np.asarray(Y_prev, dtype=float) @ (wI ** 2).T)


def conditional_variance(delta, phi, wG, wI, Y_prev, theta, psi, R0=1.0) -> np.ndarray:
    if theta < 0 or psi < 0:
        raise ValueError("theta and psi must be nonnegative")
    mu = conditional_mean(delta, phi, wG, wI, Y_prev, R0)
    return mu * (1 + psi * mu) + theta * (1 + psi) * latent_spread(phi, wG, wI, Y_prev, R0)


def conditional_covariance(cell_a, cell_b, delta, phi, wG, wI, Y_prev, theta, R0=1.0) -> float:
    """Covariance of two distinct recipient cells ``(g, i)`` and ``(a, b)``."""
    (g, i), (a, b) = cell_a, cell_b
    if (g, i) == (a, b):
        raise ValueError("cells must be distinct; use conditional_variance for one cell")
    phi = np.asarray(phi)
    Y = np.asarray(Y_prev, dtype=float)
    kernel = np.outer(wG[g] * wG[a], wI[i] * wI[b])
    return float(theta * R0 * phi[g, i] * phi[a, b] * np.sum(kernel * Y))


def one_step_simulator(delta, phi, wG, wI, Y_prev, theta, psi, R0=1.0, latent="gamma"):
    """Closure drawing ``n`` independent one-step outcomes, shape (n, G, I)."""
    delta = np.asarray(delta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    Y_prev = np.asarray(Y_prev, dtype=float)

    def simulate(rng, n):
        prev = np.broadcast_to(Y_prev, (n,) + Y_prev.shape)
        r = dgp.sample_latent(prev, R0, theta, rng, latent)
        lam = delta + phi * np.einsum("ga,nab,ib->ngi", wG, r, wI)
        return dgp.negbin_sample(lam, psi, rng)

    return simulate


@dataclass
class MomentReport:
    """Analytic versus empirical one-step moments.

    A comparison passes when ``|analytic - empirical| <= z * se``.
    """

    mean: np.ndarray
    var: np.ndarray
    emp_mean: np.ndarray
    emp_var: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray
    cov: dict = field(default_factory=dict)
    emp_cov: dict = field(default_factory=dict)
    se_cov: dict = field(default_factory=dict)
    z: float = 4.0
    n_draws: int = 0

    def _ok(self, a, e, s):
        return np.abs(np.asarray(a) - np.asarray(e)) <= self.z * np.asarray(s)

    @property
    def mean_ok(self) -> np.ndarray:
        return self._ok(self.mean, self.emp_mean, self.se_mean)

    @property
    def var_ok(self) -> np.ndarray:
        return self._ok(self.var, self.emp_var, self.se_var)

    @property
    def cov_ok(self) -> dict:
        return {k: bool(self._ok(self.cov[k], self.emp_cov[k], self.se_cov[k])) for k in self.cov}

    @property
    def passed(self) -> bool:
        return bool(self.mean_ok.all() and self.var_ok.all() and all(self.cov_ok.values()))

    def rows(self):
        out = []
        for (g, i), m in np.ndenumerate(self.mean):
            out.append(("mean", f"{g + 1},{i + 1}", m, self.emp_mean[g, i], self.se_mean[g, i],
                        bool(self.mean_ok[g, i])))
            out.append(("var", f"{g + 1},{i + 1}", self.var[g, i], self.emp_var[g, i],
                        self.se_var[g, i], bool(self.var_ok[g, i])))
        for k, v in self.cov.items():
            (g, i), (a, b) = k
            out.append(("cov", f"{g + 1},{i + 1}|{a + 1},{b + 1}", v, self.emp_cov[k],
                        self.se_cov[k], self.cov_ok[k]))
        return out

    def write(self, path) -> None:
        write_csv(path, ("moment", "cell", "analytic", "empirical", "se", "pass"),
                  ([m, c, repr(float(a)), repr(float(e)), repr(float(s)), int(ok)]
                   for m, c, a, e, s, ok in self.rows()))


def _moments(s1, s2, n):
    mean = s1 / n
    return mean, (s2 - n * mean ** 2) / (n - 1)


def mc_moments(simulate, n_draws: int, rng, *, analytic_mean, analytic_var, pairs=(),
               analytic_cov=None, batches: int = 20, z: float = 4.0) -> MomentReport:
    """Empirical one-step moments from ``simulate(rng, n)`` with delete-one-batch
    jackknife standard errors, compared with the analytic values.

    ``pairs`` lists cell pairs ``((g, i), (a, b))`` whose covariance is checked
    against ``analytic_cov[pair]``.
    """
    if n_draws < 10_000:
        raise ValueError("mc_moments needs at least 10^4 draws")
    rng = dgp.make_rng(rng)
    pairs = [tuple(map(tuple, p)) for p in pairs]
    sizes = np.full(batches, n_draws // batches)
    sizes[: n_draws % batches] += 1
    s1, s2, sc, sa, sb = [], [], [], [], []
    for n_b in sizes:
        y = np.asarray(simulate(rng, int(n_b)), dtype=float)
        s1.append(y.sum(axis=0))
        s2.append((y ** 2).sum(axis=0))
        sc.append([np.sum(y[:, g, i] * y[:, a, b]) for (g, i), (a, b) in pairs])
        sa.append([np.sum(y[:, g, i]) for (g, i), _ in pairs])
        sb.append([np.sum(y[:, a, b]) for _, (a, b) in pairs])
    s1, s2 = np.array(s1), np.array(s2)
    sc, sa, sb = (np.array(x, dtype=float).reshape(batches, len(pairs)) for x in (sc, sa, sb))

    def estimates(w):
        """Moments from the batches with weights w (0 drops a batch)."""
        n = np.sum(w * sizes)
        mean, var = _moments(np.tensordot(w, s1, 1), np.tensordot(w, s2, 1), n)
        ma = np.tensordot(w, sa, 1) / n
        mb = np.tensordot(w, sb, 1) / n
        cov = (np.tensordot(w, sc, 1) - n * ma * mb) / (n - 1)
        return mean, var, cov

    full = estimates(np.ones(batches))
    leave = [estimates(1.0 - np.eye(batches)[b]) for b in range(batches)]
    ses = []
    for k in range(3):
        reps = np.array([est[k] for est in leave])
        ses.append(np.sqrt((batches - 1) / batches * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0)))
    analytic_cov = analytic_cov or {}
    return MomentReport(
        mean=np.asarray(analytic_mean, dtype=float), var=np.asarray(analytic_var, dtype=float),
        emp_mean=full[0], emp_var=full[1], se_mean=ses[0], se_var=ses[1],
        cov={p: float(analytic_cov[p]) for p in pairs},
        emp_cov={p: float(full[2][j]) for j, p in enumerate(pairs)},
        se_cov={p: float(ses[2][j]) for j, p in enumerate(pairs)},
        z=z, n_draws=int(n_draws))


def check_one_step(delta, phi, wG, wI, Y_prev, theta, psi, n_draws, rng, R0=1.0,
                   latent="gamma", z=4.0, batches=20) -> MomentReport:
    """Simulate one step and compare with all three closed forms (every cell
    pair for the covariance)."""
    G, I = np.shape(delta)  # noqa: E741
    cells = [(g, i) for g in range(G) for i in range(I)]
    pairs = [(c, d) for k, c in enumerate(cells) for d in cells[k + 1:]]
    sim = one_step_simulator(delta, phi, wG, wI, Y_prev, theta, psi, R0, latent)
    return mc_moments(
        sim, n_draws, rng,
        analytic_mean=conditional_mean(delta, phi, wG, wI, Y_prev, R0),
        analytic_var=conditional_variance(delta, phi, wG, wI, Y_prev, theta, psi, R0),
        pairs=pairs,
        analytic_cov={p: conditional_covariance(p[0], p[1], delta, phi, wG, wI, Y_prev, theta, R0)
                      for p in pairs},
        batches=batches, z=z)
