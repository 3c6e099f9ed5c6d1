"""No-U-turn Hamiltonian Monte Carlo with windowed warmup, and convergence
diagnostics.

The transition is multinomial NUTS with a diagonal metric and the generalized
U-turn criterion, including the extra checks across merged subtrees. New
subtrees are built leaf by leaf inside a compiled loop; every completed
sub-subtree is checked as soon as its last leaf is added. Subtree proposals are
taken with the biased (progressive) rule at the top level and uniformly by
weight inside a subtree.

Warmup: an initial fast phase (15% of warmup) adapts only the step size, then
doubling slow windows estimate the diagonal metric, and a final fast phase
(10%) settles the step size. The step size is adapted by dual averaging
towards ``target_accept``.

Each chain adapts independently and chains may run on separate threads.
Random numbers come from ``jax.random`` keys derived from ``(seed, chain)``, so a chain's output depends only on those two values and the
target.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from scipy import stats

from .panel import write_csv

jax.config.update("jax_enable_x64", True)

MAX_ENERGY_ERROR = 1000.0


class SamplerError(RuntimeError):
    pass


class DegenerateParameterWarning(UserWarning):
    """A parameter is constant across all draws; its diagnostics are NaN."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_treedepth: int = 10
    metric: str = "diagonal"
    seed: int = 0

    def __post_init__(self):
        if min(self.chains, self.warmup_iters, self.sampling_iters, self.max_treedepth) < 1:
            raise ValueError("chains, iteration counts and max_treedepth must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.metric != "diagonal":
            raise ValueError("only the diagonal metric is supported")


STAT_NAMES = ("accept_stat", "treedepth", "n_leapfrog", "divergent", "energy")


@dataclass
class DrawSet:
    """Retained draws ``draws[chain, iter, param]`` with per-iteration sampler stats."""

    draws: np.ndarray
    param_names: list
    stats: dict = field(default_factory=dict)
    step_size: np.ndarray | None = None
    inv_metric: np.ndarray | None = None

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3:
            raise ValueError("draws must be (chain, iter, param)")
        if len(self.param_names) != self.draws.shape[2]:
            raise ValueError("parameter names do not match the draw dimension")
        for k, v in self.stats.items():
            if np.shape(v) != self.draws.shape[:2]:
                raise ValueError(f"stat {k!r} has the wrong shape")
        if "divergent" in self.stats:
            self.stats["divergent"] = np.asarray(self.stats["divergent"], dtype=bool)

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    @property
    def iters(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """Draws pooled over chains, shape (chains * iters, param)."""
        return self.draws.reshape(-1, self.draws.shape[2])

    @property
    def n_divergent(self) -> int:
        return int(np.sum(self.stats.get("divergent", 0)))

    def summary(self) -> list:
        """Rows of (parameter, rhat, ess_bulk, mean, q05, q50, q95)."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateParameterWarning)
            rhat = split_rhat(self.draws) if self.chains >= 2 else np.full(self.draws.shape[2], np.nan)
            ess = ess_bulk(self.draws)
        flat = self.flat()
        q = np.quantile(flat, [0.05, 0.5, 0.95], axis=0)
        return [(name, rhat[j], ess[j], flat[:, j].mean(), q[0, j], q[1, j], q[2, j])
                for j, name in enumerate(self.param_names)]

    def max_rhat(self) -> float:
        rows = self.summary()
        vals = np.array([r[1] for r in rows], dtype=float)
        return float(np.nanmax(vals)) if np.any(np.isfinite(vals)) else float("nan")

    # -- persistence ----------------------------------------------------
    def save(self, directory, prefix: str = "draws") -> list:
        """One CSV per chain (sampler stats first, then parameters) plus
        ``diagnostics.csv``."""
        directory = Path(directory)
        paths = []
        stat_cols = [k for k in STAT_NAMES if k in self.stats]
        header = [f"{k}__" for k in stat_cols] + list(self.param_names)
        for c in range(self.chains):
            rows = []
            for t in range(self.iters):
                rows.append([_fmt(self.stats[k][c, t]) for k in stat_cols]
                            + [repr(float(v)) for v in self.draws[c, t]])
            path = directory / f"{prefix}_chain{c + 1}.csv"
            write_csv(path, header, rows)
            paths.append(path)
        if self.step_size is not None:
            meta = [("step_size", *map(repr, map(float, self.step_size)))]
            write_csv(directory / f"{prefix}_adaptation.csv",
                      ["quantity"] + [f"chain{c + 1}" for c in range(self.chains)],
                      meta + [(f"inv_metric[{n}]", *map(repr, map(float, self.inv_metric[:, j])))
                              for j, n in enumerate(self.param_names)])
        write_diagnostics(self, directory / "diagnostics.csv")
        return paths

    @classmethod
    def load(cls, directory, prefix: str = "draws") -> "DrawSet":
        import csv
        directory = Path(directory)
        paths = sorted(directory.glob(f"{prefix}_chain*.csv"),
                       key=lambda p: int(p.stem.rsplit("chain", 1)[1]))
        if not paths:
            raise FileNotFoundError(f"no {prefix}_chain*.csv files in {directory}")
        chains, stats_all, names = [], {}, None
        for path in paths:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                rows = np.array([[float(v) for v in row] for row in reader if row])
            stat_cols = [h for h in header if h.endswith("__")]
            this_names = header[len(stat_cols):]
            if names is None:
                names = this_names
            elif names != this_names:
                raise ValueError(f"{path}: parameter columns differ between chains")
            chains.append(rows[:, len(stat_cols):])
            for j, h in enumerate(stat_cols):
                stats_all.setdefault(h[:-2], []).append(rows[:, j])
        lengths = {len(c) for c in chains}
        if len(lengths) != 1:
            raise ValueError("chains have different lengths")
        stats_arr = {k: np.array(v) for k, v in stats_all.items()}
        return cls(np.array(chains), names, stats_arr)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_diagnostics(drawset: DrawSet, path) -> None:
    write_csv(path, ("parameter", "rhat", "ess_bulk", "mean", "q05", "q50", "q95"),
              ([r[0]] + [repr(float(v)) for v in r[1:]] for r in drawset.summary()))


# ---------------------------------------------------------------------------
# Compiled transition

def _criterion(sharp_a, sharp_b, rho):
    """True while the trajectory segment is still not turning back on itself."""
    return (jnp.dot(sharp_a, rho) > 0) & (jnp.dot(sharp_b, rho) > 0)


def _popcount(n):
    return jax.lax.population_count(n)


def _trailing_zeros(n):
    # ctz via the lowest set bit; n == 0 gives 0 (callers mask that case)
    low = n & (-n)
    return jnp.where(n > 0, _popcount(low - 1), 0)


def _trailing_ones(n):
    return _trailing_zeros(n + 1)


def _make_kernel(logdensity, dim, max_depth):
    vg = jax.value_and_grad(logdensity)

    def value_grad(q, args):
        v, g = vg(q, *args)
        ok = jnp.isfinite(v) & jnp.all(jnp.isfinite(g))
        return jnp.where(ok, v, -jnp.inf), jnp.where(ok, g, 0.0)

    def leapfrog(q, p, g, eps, inv_m, args):
        p = p + 0.5 * eps * g
        q = q + eps * inv_m * p
        logp, g = value_grad(q, args)
        p = p + 0.5 * eps * g
        return q, p, g, logp

    def build_subtree(key, start, direction, depth, H0, eps, inv_m, args):
        """Add 2**depth leaves beyond ``start``; stops early on divergence or U-turn.

        U-turn checks use O(max_depth) checkpoints. Even leaf n is stored at
        slot popcount(n >> 1), where it stays until every subtree starting at
        n is complete; odd leaf n is stored at slot trailing_ones(n), where it
        stays until the merge whose left half it ends is complete.
        """
        n_leaves = 2 ** depth
        q0, p0, g0, _ = start
        ck = jnp.zeros((max_depth + 1, dim))
        init = dict(
            q=q0, p=p0, g=g0, logp=jnp.asarray(0.0), n=jnp.asarray(0), key=key,
            lsw=jnp.asarray(-jnp.inf), prop=(q0, jnp.asarray(-jnp.inf), g0, p0),
            rho=jnp.zeros(dim), inner=(jnp.zeros(dim), jnp.zeros(dim)),
            even_sharp=ck, even_rho=ck, odd_sharp=ck, odd_rho=ck,
            sum_acc=jnp.asarray(0.0), div=jnp.asarray(False), turn=jnp.asarray(False))

        def cond(s):
            return (s["n"] < n_leaves) & ~s["div"] & ~s["turn"]

        def body(s):
            key, k_take = jax.random.split(s["key"])
            q, p, g, logp = leapfrog(s["q"], s["p"], s["g"], direction * eps, inv_m, args)
            H = -logp + 0.5 * jnp.sum(inv_m * p * p)
            err = H - H0
            div = ~jnp.isfinite(err) | (err > MAX_ENERGY_ERROR)
            w = jnp.where(jnp.isfinite(err), -err, -jnp.inf)
            acc = jnp.where(jnp.isfinite(err), jnp.minimum(1.0, jnp.exp(-err)), 0.0)
            lsw = jnp.logaddexp(s["lsw"], w)
            take = jax.random.uniform(k_take) < jnp.exp(w - lsw)
            prop = jax.tree_util.tree_map(lambda new, old: jnp.where(take, new, old),
                                          (q, logp, g, p), s["prop"])
            n = s["n"]
            sharp = inv_m * p
            rho_before = s["rho"]
            rho = rho_before + p
            inner = jax.tree_util.tree_map(lambda new, old: jnp.where(n == 0, new, old),
                                           (sharp, p), s["inner"])
            odd = (n % 2) == 1
            ones = _trailing_ones(n)
            slot_even = _popcount(n >> 1)

            # even leaf: store, then check the merge whose right half starts here
            level = _trailing_zeros(n) + 1
            first = n - 2 ** (level - 1)
            slot_first = _popcount(first >> 1)
            left_ok = _criterion(s["even_sharp"][slot_first], sharp,
                                 rho - s["even_rho"][slot_first])
            turn_even = (n > 0) & ~odd & ~left_ok
            slot = jnp.where(odd, max_depth, slot_even)  # odd leaves write the spare row
            even_sharp = s["even_sharp"].at[slot].set(sharp)
            even_rho = s["even_rho"].at[slot].set(rho_before)

            # odd leaf: check every subtree that ends here (levels 1..ones)
            levels = jnp.arange(1, max_depth + 1)
            slots = jnp.clip(slot_even - (levels - 1), 0, max_depth)
            seg = rho[None, :] - s["even_rho"][slots]
            whole = ((seg @ sharp) > 0) & (jnp.sum(s["even_sharp"][slots] * seg, axis=1) > 0)
            seg = rho[None, :] - s["odd_rho"][levels - 1]
            right = ((seg @ sharp) > 0) & (jnp.sum(s["odd_sharp"][levels - 1] * seg, axis=1) > 0)
            right = right | (levels == 1)
            turn_odd = odd & jnp.any((levels <= ones) & ~(whole & right))
            slot = jnp.where(odd, ones, max_depth)
            odd_sharp = s["odd_sharp"].at[slot].set(sharp)
            odd_rho = s["odd_rho"].at[slot].set(rho_before)
            return dict(q=q, p=p, g=g, logp=logp, n=n + 1, key=key, lsw=lsw, prop=prop,
                        rho=rho, inner=inner, even_sharp=even_sharp, even_rho=even_rho,
                        odd_sharp=odd_sharp, odd_rho=odd_rho, sum_acc=s["sum_acc"] + acc,
                        div=div, turn=turn_even | turn_odd)

        s = jax.lax.while_loop(cond, body, init)
        outer = (s["q"], s["p"], s["g"], s["logp"])
        return dict(inner=s["inner"], outer=outer, outer_sharp=inv_m * s["p"], prop=s["prop"],
                    lsw=s["lsw"], rho=s["rho"], n=s["n"], sum_acc=s["sum_acc"],
                    div=s["div"], turn=s["turn"])

    def transition(key, q, logp, g, eps, inv_m, args):
        k_mom, key = jax.random.split(key)
        p0 = jax.random.normal(k_mom, (dim,)) / jnp.sqrt(inv_m)
        H0 = -logp + 0.5 * jnp.sum(inv_m * p0 * p0)
        end = (q, p0, g, logp)
        tree = dict(left=end, right=end, left_sharp=inv_m * p0, right_sharp=inv_m * p0,
                    prop=(q, logp, g, p0), lsw=jnp.asarray(0.0), rho=p0,
                    depth=jnp.asarray(0), n=jnp.asarray(0), sum_acc=jnp.asarray(0.0),
                    div=jnp.asarray(False), done=jnp.asarray(False), key=key)

        def cond(t):
            return (t["depth"] < max_depth) & ~t["done"]

        def body(t):
            key, k_dir, k_sub, k_acc = jax.random.split(t["key"], 4)
            forward = jax.random.bernoulli(k_dir)
            direction = jnp.where(forward, 1.0, -1.0)
            start = jax.tree_util.tree_map(lambda r, l: jnp.where(forward, r, l),
                                           t["right"], t["left"])
            sub = build_subtree(k_sub, start, direction, t["depth"], H0, eps, inv_m, args)
            valid = ~sub["div"] & ~sub["turn"]
            take = valid & (jax.random.uniform(k_acc) < jnp.exp(sub["lsw"] - t["lsw"]))
            prop = jax.tree_util.tree_map(lambda new, old: jnp.where(take, new, old),
                                          sub["prop"], t["prop"])
            lsw = jnp.where(valid, jnp.logaddexp(t["lsw"], sub["lsw"]), t["lsw"])
            rho = t["rho"] + sub["rho"]
            # old tree ends: the junction touches the new subtree, far is opposite
            junction_sharp = jnp.where(forward, t["right_sharp"], t["left_sharp"])
            junction_p = jnp.where(forward, t["right"][1], t["left"][1])
            far_sharp = jnp.where(forward, t["left_sharp"], t["right_sharp"])
            inner_sharp, inner_p = sub["inner"]
            ok = (_criterion(far_sharp, sub["outer_sharp"], rho)
                  & _criterion(far_sharp, inner_sharp, t["rho"] + inner_p)
                  & _criterion(junction_sharp, sub["outer_sharp"], sub["rho"] + junction_p))
            right = jax.tree_util.tree_map(lambda new, old: jnp.where(forward, new, old),
                                           sub["outer"], t["right"])
            left = jax.tree_util.tree_map(lambda new, old: jnp.where(forward, old, new),
                                          sub["outer"], t["left"])
            right_sharp = jnp.where(forward, sub["outer_sharp"], t["right_sharp"])
            left_sharp = jnp.where(forward, t["left_sharp"], sub["outer_sharp"])
            return dict(left=left, right=right, left_sharp=left_sharp, right_sharp=right_sharp,
                        prop=prop, lsw=lsw, rho=rho,
                        depth=t["depth"] + valid.astype(t["depth"].dtype),
                        n=t["n"] + sub["n"], sum_acc=t["sum_acc"] + sub["sum_acc"],
                        div=t["div"] | sub["div"], done=~valid | ~ok, key=key)

        t = jax.lax.while_loop(cond, body, tree)
        q_new, logp_new, g_new, p_new = t["prop"]
        energy = -logp_new + 0.5 * jnp.sum(inv_m * p_new * p_new)
        accept = t["sum_acc"] / jnp.maximum(t["n"], 1)
        return q_new, logp_new, g_new, (accept, t["depth"], t["n"], t["div"], energy)

    def init_step_size(key, q, logp, g, eps, inv_m, args):
        """Double or halve the step size until one leapfrog's acceptance
        crosses 0.8."""
        log_target = math.log(0.8)

        def delta_h(key, eps):
            p = jax.random.normal(key, (dim,)) / jnp.sqrt(inv_m)
            H0 = -logp + 0.5 * jnp.sum(inv_m * p * p)
            _, p1, _, logp1 = leapfrog(q, p, g, eps, inv_m, args)
            H1 = -logp1 + 0.5 * jnp.sum(inv_m * p1 * p1)
            d = H0 - H1
            return jnp.where(jnp.isfinite(d), d, -jnp.inf)

        key, k0 = jax.random.split(key)
        up = delta_h(k0, eps) > log_target

        def cond(s):
            return ~s[2] & (s[3] < 100)

        def body(s):
            key, eps, _, it = s
            key, k = jax.random.split(key)
            d = delta_h(k, eps)
            stop = jnp.where(up, ~(d > log_target), ~(d < log_target))
            new_eps = jnp.where(stop, eps, jnp.where(up, 2.0 * eps, 0.5 * eps))
            return key, new_eps, stop, it + 1

        _, eps, _, _ = jax.lax.while_loop(cond, body, (key, eps, jnp.asarray(False), 0))
        return eps

    return dict(transition=jax.jit(transition), init_step_size=jax.jit(init_step_size),
                value_grad=jax.jit(value_grad))


_KERNELS: dict = {}


def _kernel(logdensity, dim, max_depth):
    key = (logdensity, dim, max_depth)
    if key not in _KERNELS:
        _KERNELS[key] = _make_kernel(logdensity, dim, max_depth)
    return _KERNELS[key]


# ---------------------------------------------------------------------------
# Adaptation

def warmup_schedule(n_warmup: int, init_frac=0.15, term_frac=0.10, base_window=25) -> list:
    """Slow (metric) windows as (start, end) iteration ranges; end exclusive."""
    init_buf = int(init_frac * n_warmup)
    term_buf = int(term_frac * n_warmup)
    slow_end = n_warmup - term_buf
    if slow_end - init_buf < 20:  # too short to estimate a variance; step size only
        return []
    size = min(base_window, slow_end - init_buf)
    windows, start = [], init_buf
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        windows.append((start, end))
        start = end
        size *= 2
    return windows


class _DualAveraging:
    """Per-chain dual averaging of log step size (gamma=0.05, t0=10, kappa=0.75)."""

    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, eps, delta):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps):
        eps = np.asarray(eps, dtype=float)
        self.mu = np.log(10.0 * eps)
        self.count = 0
        self.s_bar = np.zeros_like(eps)
        self.x_bar = np.zeros_like(eps)

    def update(self, accept):
        self.count += 1
        accept = np.minimum(1.0, np.nan_to_num(accept, nan=0.0))
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * np.sqrt(self.count) / self.gamma
        w = self.count ** (-self.kappa)
        self.x_bar = w * x + (1 - w) * self.x_bar
        return np.exp(x)

    def final(self):
        return np.exp(self.x_bar)


def _regularized_variance(window_draws):
    n = window_draws.shape[1]
    var = window_draws.var(axis=1, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def _initialize(kern, key, dim, args, init):
    if init is not None:
        q = jnp.asarray(np.asarray(init, dtype=float).reshape(dim))
        logp, g = kern["value_grad"](q, args)
        if not np.isfinite(float(logp)):
            raise SamplerError("log density is not finite at the supplied initial point")
        return q, logp, g
    for attempt in range(100):
        key, k = jax.random.split(key)
        q = jax.random.uniform(k, (dim,), minval=-2.0, maxval=2.0)
        logp, g = kern["value_grad"](q, args)
        if np.isfinite(float(logp)) and np.all(np.isfinite(np.asarray(g))):
            return q, logp, g
    raise SamplerError("could not find a finite initial point in 100 attempts")


def _run_chain(kern, chain, dim, config, args, init, progress):
    key = jax.random.fold_in(jax.random.PRNGKey(config.seed), chain)
    key, k_init = jax.random.split(key)
    q, logp, g = _initialize(kern, k_init, dim, args, init)
    inv_m = jnp.ones(dim)
    key, sub = jax.random.split(key)
    eps = kern["init_step_size"](sub, q, logp, g, jnp.asarray(1.0), inv_m, args)
    da = _DualAveraging(float(eps), config.target_accept)

    W = config.warmup_iters
    windows = warmup_schedule(W)
    window_end = {end - 1: (start, end) for start, end in windows}
    slow = (windows[0][0], windows[-1][1]) if windows else (W, W)
    window_buf = []
    S = config.sampling_iters
    draws = np.empty((S, dim))
    st = {k: np.empty(S) for k in STAT_NAMES}
    for it in range(W + S):
        key, sub = jax.random.split(key)
        q, logp, g, info = kern["transition"](sub, q, logp, g, eps, inv_m, args)
        if it < W:
            eps = float(da.update(float(info[0])))
            if slow[0] <= it < slow[1]:
                window_buf.append(np.asarray(q))
            if it in window_end:
                inv_m = jnp.asarray(_regularized_variance(np.stack(window_buf)[None])[0])
                window_buf = []
                key, sub = jax.random.split(key)
                eps = float(kern["init_step_size"](sub, q, logp, g, jnp.asarray(eps), inv_m, args))
                da.restart(eps)
            if it == W - 1:
                eps = float(da.final())
        else:
            j = it - W
            draws[j] = np.asarray(q)
            for name, v in zip(STAT_NAMES, info):
                st[name][j] = float(v)
        if progress is not None:
            progress(chain, it + 1, W + S)
    return draws, st, eps, np.asarray(inv_m)


def nuts_sample(logdensity, dim: int, config: SamplerConfig = SamplerConfig(), args=(),
                init=None, param_names=None, progress=None, jobs: int = 1) -> DrawSet:
    """Run multinomial NUTS on ``logdensity(u, *args)`` (a JAX-traceable function
    of a length-``dim`` vector).

    ``args`` are passed through unchanged and may differ between calls without
    recompilation as long as their shapes stay the same. ``init`` optionally
    gives starting points, (dim,) or (chains, dim). Chains are independent
    (each adapts its own step size and metric) and run on ``jobs`` threads.
    ``progress``, if given, is called as ``progress(chain, iteration, total)``.
    """
    kern = _kernel(logdensity, dim, config.max_treedepth)
    args = tuple(args)
    inits = [None] * config.chains
    if init is not None:
        arr = np.asarray(init, dtype=float)
        inits = [arr if arr.ndim == 1 else arr[c] for c in range(config.chains)]

    def run(c):
        return _run_chain(kern, c, dim, config, args, inits[c], progress)

    if jobs > 1 and config.chains > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(config.chains)))
    else:
        results = [run(c) for c in range(config.chains)]
    draws = np.stack([r[0] for r in results])
    st = {k: np.stack([r[1][k] for r in results]) for k in STAT_NAMES}
    st["divergent"] = st["divergent"].astype(bool)
    names = list(param_names) if param_names is not None else [f"x[{j + 1}]" for j in range(dim)]
    return DrawSet(draws, names, st, np.array([r[2] for r in results]),
                   np.stack([r[3] for r in results]))


# ---------------------------------------------------------------------------
# Diagnostics

def _as_chains(draws):
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("draws must be (chain, iter) or (chain, iter, param)")
    return x


def _split(x):
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)


def _rank_normalize(x):
    """Normal scores of pooled fractional ranks, (rank - 3/8) / (S + 1/4)."""
    shape = x.shape
    flat = x.reshape(-1)
    r = stats.rankdata(flat, method="average")
    z = stats.norm.ppf((r - 0.375) / (flat.size + 0.25))
    return z.reshape(shape)


def _rhat_basic(x):
    m, n = x.shape
    means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    var_hat = (n - 1) / n * within + between / n
    return math.sqrt(var_hat / within)


def _degenerate(x, name):
    flags = np.array([np.ptp(x[:, :, j]) == 0 or not np.all(np.isfinite(x[:, :, j]))
                      for j in range(x.shape[2])])
    if np.any(flags):
        warnings.warn(f"{name}: {int(flags.sum())} constant or nonfinite parameter(s) "
                      "reported as NaN", DegenerateParameterWarning, stacklevel=3)
    return flags


def split_rhat(draws) -> np.ndarray:
    """Rank-normalized split R-hat, the larger of the bulk and folded versions.

    Needs at least two chains and four draws per chain. Constant parameters
    give NaN and a :class:`DegenerateParameterWarning`.
    """
    x = _as_chains(draws)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split_rhat needs >= 2 chains and >= 4 draws per chain")
    flags = _degenerate(x, "split_rhat")
    out = np.full(x.shape[2], np.nan)
    for j in np.flatnonzero(~flags):
        s = _split(x[:, :, j])
        bulk = _rhat_basic(_rank_normalize(s))
        folded = _rhat_basic(_rank_normalize(np.abs(s - np.median(s))))
        out[j] = max(bulk, folded)
    return out


def _autocov(x):
    """Autocovariance of each row (biased, FFT based)."""
    n = x.shape[1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n]
    return ac / n


def _ess_basic(x):
    """ESS of (chain, iter) draws with Geyer's initial positive and monotone sequences."""
    m, n = x.shape
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho_hat = np.zeros(n)
    rho_hat[0] = 1.0
    rho_hat_even = 1.0
    rho_hat_odd = 1 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_hat[1] = rho_hat_odd
    t = 1
    while t < n - 3 and rho_hat_even + rho_hat_odd > 0:
        rho_hat_even = 1 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_hat_odd = 1 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_hat_even + rho_hat_odd >= 0:
            rho_hat[t + 1] = rho_hat_even
            rho_hat[t + 2] = rho_hat_odd
        t += 2
    max_t = t - 2
    if rho_hat_even > 0:
        rho_hat[max_t + 1] = rho_hat_even
    # monotone: pair sums must not increase
    t = 1
    while t <= max_t - 2:
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t]:
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2
            rho_hat[t + 2] = rho_hat[t + 1]
        t += 2
    total = m * n
    tau = -1 + 2 * np.sum(rho_hat[:max_t + 1]) + rho_hat[max_t + 1]
    tau = max(tau, 1 / math.log10(total))
    return total / tau


def ess_bulk(draws) -> np.ndarray:
    """Bulk effective sample size (rank-normalized split chains)."""
    x = _as_chains(draws)
    if x.shape[1] < 4:
        raise ValueError("ess needs >= 4 draws per chain")
    flags = _degenerate(x, "ess")
    out = np.full(x.shape[2], np.nan)
    for j in np.flatnonzero(~flags):
        out[j] = _ess_basic(_rank_normalize(_split(x[:, :, j])))
    return out


ess = ess_bulk
