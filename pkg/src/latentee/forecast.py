"""Posterior-predictive forecasts and log scores.

For each retained posterior draw the process is simulated forward from the end
of the training panel, drawing latent values and intermediate weeks; the
predictive distribution at horizon h is then the closed-form count
distribution given the simulated state one week earlier. Averaging those
densities over draws estimates the h-step predictive density.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import dgp
from .panel import PanelData, default_weeks, write_csv
from .posterior import OutbreakModel, RareModel
from .sampler import DrawSet


@dataclass
class ForecastSet:
    """Predictive draws ``counts[k, h, g, i]`` and, per draw and horizon, the
    parameters of the conditional count distribution.

    Rare-disease models store ``mean`` (the rate) and ``dispersion`` (psi per
    draw); the outbreak model stores ``mean`` (infection probability),
    ``size`` (susceptible pool) and ``dispersion`` (beta-binomial precision).
    """

    counts: np.ndarray
    mean: np.ndarray
    dispersion: np.ndarray
    kind: str
    size: np.ndarray | None = None

    def __post_init__(self):
        if self.counts.ndim != 4 or self.mean.shape != self.counts.shape:
            raise ValueError("forecast arrays must be (K, H, G, I) and agree in shape")
        if self.dispersion.shape != self.counts.shape[:1]:
            raise ValueError("one dispersion value per draw is required")
        if np.any(self.counts < 0):
            raise ValueError("predictive counts must be nonnegative")

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def H(self) -> int:
        return self.counts.shape[1]

    def draw_logpmf(self, truth, h: int) -> np.ndarray:
        """Joint (summed over cells) log pmf of ``truth`` at horizon ``h`` (1-based), per draw."""
        if not 1 <= h <= self.H:
            raise ValueError(f"horizon {h} outside 1..{self.H}")
        y = np.asarray(truth)
        if y.shape != self.counts.shape[2:]:
            raise ValueError("truth shape does not match the forecast cells")
        k = h - 1
        if self.kind == "rare":
            lp = [dgp.negbin_logpmf(y, self.mean[j, k], self.dispersion[j]) for j in range(self.K)]
        else:
            lp = [dgp.betabinom_logpmf(y, self.size[j, k], self.mean[j, k], self.dispersion[j])
                  for j in range(self.K)]
        return np.array([np.sum(x) for x in lp])

    header = ("kind", "draw", "h", "g", "i", "count", "mean", "size", "dispersion")

    def save(self, path) -> None:
        """One row per (draw, horizon, cell); cells are 1-based."""
        K, H, G, I = self.counts.shape  # noqa: E741
        rows = []
        for k in range(K):
            disp = repr(float(self.dispersion[k]))
            for h in range(H):
                for g in range(G):
                    for i in range(I):
                        size = "" if self.size is None else repr(float(self.size[k, h, g, i]))
                        rows.append((self.kind, k + 1, h + 1, g + 1, i + 1,
                                     int(self.counts[k, h, g, i]),
                                     repr(float(self.mean[k, h, g, i])), size, disp))
        write_csv(path, self.header, rows)

    @classmethod
    def load(cls, path) -> "ForecastSet":
        import csv
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != cls.header:
                raise ValueError(f"{path}: expected columns {','.join(cls.header)}")
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: no forecast rows")
        kinds = {r["kind"] for r in rows}
        if len(kinds) != 1 or not kinds <= {"rare", "outbreak"}:
            raise ValueError(f"{path}: mixed or unknown forecast kinds {sorted(kinds)}")
        idx = np.array([[int(r[c]) - 1 for c in ("draw", "h", "g", "i")] for r in rows])
        shape = tuple(idx.max(axis=0) + 1)
        if len(rows) != np.prod(shape):
            raise ValueError(f"{path}: incomplete forecast grid")
        counts = np.zeros(shape, dtype=np.int64)
        mean = np.zeros(shape)
        disp = np.zeros(shape[0])
        kind = kinds.pop()
        size = np.zeros(shape) if kind == "outbreak" else None
        for (k, h, g, i), r in zip(idx, rows):
            counts[k, h, g, i] = int(r["count"])
            mean[k, h, g, i] = float(r["mean"])
            disp[k] = float(r["dispersion"])
            if size is not None:
                size[k, h, g, i] = float(r["size"])
        return cls(counts, mean, disp, kind, size)

    def summary_rows(self, quantiles=(0.05, 0.5, 0.95)):
        """(h, g, i, mean count, quantiles...) with 1-based indices."""
        q = np.quantile(self.counts, quantiles, axis=0)
        m = self.counts.mean(axis=0)
        return [(h + 1, g + 1, i + 1, float(m[h, g, i]), *(float(x) for x in q[:, h, g, i]))
                for h, g, i in np.ndindex(m.shape)]


def _select(n_total: int, n_draws):
    if n_draws is None or n_draws >= n_total:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, n_draws).round().astype(int))


def posterior_predictive(draws: DrawSet, panel: PanelData, H: int, model, rng, *,
                         orders=None, C_known=None, D=None, n_draws=None,
                         latent: str = "gamma", future_weeks=None) -> ForecastSet:
    """Forecast weeks T+1..T+H from a fitted model.

    ``n_draws`` thins the pooled posterior draws evenly. Future weeks of year
    continue cyclically from the panel unless ``future_weeks`` is given. For the
    outbreak model the last fitted log_R is carried forward.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    flat = draws.flat()
    if flat.shape[1] != model.dim:
        raise ValueError(f"draws have {flat.shape[1]} parameters, model needs {model.dim}")
    if (panel.T, panel.G, panel.I) != (model.T, model.G, model.I):
        raise ValueError("training panel does not match the model dimensions")
    rng = dgp.make_rng(rng)
    idx = _select(len(flat), n_draws)
    K = len(idx)
    shape = (K, H, panel.G, panel.I)
    counts = np.zeros(shape, dtype=np.int64)
    mean = np.zeros(shape)
    size = None
    disp = np.zeros(K)
    times = np.arange(panel.T + 1, panel.T + H + 1)
    if future_weeks is None:
        future_weeks = default_weeks(H, int(panel.week_of_year[-1]) % 52 + 1)
    if isinstance(model, RareModel):
        kind = "rare"
        for j, d in enumerate(idx):
            params = model.to_params(flat[d], C_known=C_known)
            counts[j], mean[j], _ = dgp.forward_rare(
                params, panel.populations, panel.counts[-1], times, future_weeks,
                model.variant, rng, orders=orders, latent=latent)
            disp[j] = params.psi
    elif isinstance(model, OutbreakModel):
        if D is None:
            raise ValueError("the outbreak model needs the distance matrix D")
        kind = "outbreak"
        size = np.zeros(shape)
        for j, d in enumerate(idx):
            params = model.to_params(flat[d])
            counts[j], size[j], mean[j], _ = dgp.forward_outbreak(
                params, panel.populations, panel.counts, H, rng, D=D, latent=latent,
                log_R=np.full(H, params.log_R[-1]))
            disp[j] = params.k
    else:
        raise TypeError("unsupported model type")
    return ForecastSet(counts, mean, disp, kind, size)


def log_score(forecast: ForecastSet, truth, h: int) -> float:
    """Monte Carlo log score ``log mean_k p_k(truth)`` at horizon ``h``.

    Returns -inf (with a RuntimeWarning) when every draw gives zero mass.
    """
    lp = forecast.draw_logpmf(truth, h)
    if not np.any(np.isfinite(lp)):
        warnings.warn(f"all {len(lp)} predictive draws give zero mass at horizon {h}",
                      RuntimeWarning, stacklevel=2)
        return -math.inf
    return float(logsumexp(lp) - math.log(len(lp)))


def log_scores(forecast: ForecastSet, future_counts) -> np.ndarray:
    """Log scores for horizons 1..H against ``future_counts[h-1]``."""
    future_counts = np.asarray(future_counts)
    if future_counts.shape[0] < forecast.H:
        raise ValueError(f"truth covers {future_counts.shape[0]} weeks, forecast needs {forecast.H}")
    return np.array([log_score(forecast, future_counts[h - 1], h) for h in range(1, forecast.H + 1)])


@dataclass
class ScoreTable:
    """Paired log-score differences ``delta[d, h] = LS_A - LS_B`` for datasets d."""

    datasets: list
    delta: np.ndarray
    label_a: str = "A"
    label_b: str = "B"

    @property
    def mean(self) -> np.ndarray:
        return self.delta.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        D = self.delta.shape[0]
        if D < 2:
            return np.full(self.delta.shape[1], np.nan)
        dev = self.delta - self.mean
        return np.sqrt(np.sum(dev ** 2, axis=0) / (D * (D - 1)))

    def rows(self):
        """(model_a, model_b, h, mean, se, lower, upper) with 1.96 SE intervals."""
        m, s = self.mean, self.se
        return [(self.label_a, self.label_b, h + 1, m[h], s[h], m[h] - 1.96 * s[h], m[h] + 1.96 * s[h])
                for h in range(len(m))]

    def write(self, path) -> None:
        write_csv(path, ("model_a", "model_b", "h", "mean_diff", "se", "lower", "upper"),
                  ([a, b, h] + [repr(float(v)) for v in rest] for a, b, h, *rest in self.rows()))


def paired_scores(scores_a: dict, scores_b: dict, label_a: str = "A",
                  label_b: str = "B") -> ScoreTable:
    """Pair two models' log scores by dataset.

    Each argument maps a dataset id to a sequence of log scores over horizons.
    """
    if set(scores_a) != set(scores_b):
        raise ValueError("the two score sets cover different datasets: "
                         f"{sorted(set(scores_a) ^ set(scores_b))}")
    keys = sorted(scores_a)
    a = np.array([np.atleast_1d(scores_a[k]) for k in keys], dtype=float)
    b = np.array([np.atleast_1d(scores_b[k]) for k in keys], dtype=float)
    if a.shape != b.shape:
        raise ValueError("score arrays differ in horizon count")
    return ScoreTable(keys, a - b, label_a, label_b)
