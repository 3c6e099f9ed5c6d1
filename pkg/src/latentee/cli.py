"""Command-line entry point.

    latentee COMMAND [--config FILE] [--seed N] [--jobs N] [--out-dir DIR]

Commands: simulate, fit, forecast, score, prior-check, diagnose.

Config files hold one ``key = value`` per line; ``#`` starts a comment and
list values are separated by whitespace. Keys not known to the command are
rejected. ``--seed`` overrides a ``seed`` key. Each run writes
``resolved_config.txt`` (every key after defaults and flags) into the output
directory next to its CSV outputs.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 convergence
warning (max R-hat above ``rhat_threshold``).
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dgp import GRID_PSIS, GRID_THETAS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: object  # "int", "float", "str", "floats", "bool", "path" or a tuple of choices
    default: object
    help: str = ""


_SAMPLER = {
    "chains": Key("int", 4),
    "warmup_iters": Key("int", 1000),
    "sampling_iters": Key("int", 1000),
    "target_accept": Key("float", 0.8),
    "max_treedepth": Key("int", 10),
    "rhat_threshold": Key("float", 1.01, "max R-hat above this gives exit code 3"),
}
_STRUCTURE = {
    "population": Key("path", "", "population.csv; defaults to the one next to the panel"),
    "contact": Key("path", "", "known contact matrix (CSV with labels), needed by reduced"),
    "adjacency": Key("path", "", "region edge list; adjacency orders for power-decay weights"),
    "distance": Key("path", "", "region distance matrix (CSV with labels), outbreak model"),
    "tracts": Key("path", "", "tract table; builds the distance matrix when given"),
}
MODELS = ("full", "reduced", "naive", "outbreak")

SCHEMAS = {
    "simulate": {
        "seed": Key("int", 0),
        "instance": Key(("rare", "outbreak"), "rare"),
        "variant": Key(("full", "reduced", "naive"), "full"),
        "G": Key("int", 3), "I": Key("int", 3), "T": Key("int", 60),
        "H": Key("int", 0, "extra weeks simulated after T (held-out truth)"),
        "theta": Key("float", 5.0), "psi": Key("float", 0.5),
        "grid": Key("bool", False, "simulate the theta x psi scenario grid"),
        "thetas": Key("floats", GRID_THETAS),
        "psis": Key("floats", GRID_PSIS),
        "replicates": Key("int", 1),
        "latent": Key(("gamma", "lognormal"), "gamma"),
        "params": Key("path", "", "parameter file; replaces the built-in defaults"),
        "population": _STRUCTURE["population"],
        "adjacency": _STRUCTURE["adjacency"],
        "distance": _STRUCTURE["distance"],
        "tracts": _STRUCTURE["tracts"],
        "initial": Key("int", 5, "week-1 count per cell for the outbreak instance"),
    },
    "fit": {
        "seed": Key("int", 0),
        "panel": Key("path", "", "panel.csv (required)"),
        "model": Key(MODELS, "full"),
        "prior_preset": Key(("simstudy", "analysis"), "simstudy"),
        "prior": Key("path", "", "prior file overriding the preset"),
        "train_weeks": Key("int", 0, "fit the first weeks only; 0 uses all"),
        **_STRUCTURE, **_SAMPLER,
    },
    "forecast": {
        "seed": Key("int", 0),
        "panel": Key("path", ""),
        "fit": Key("path", "", "directory written by fit"),
        "model": Key(MODELS, "full"),
        "train_weeks": Key("int", 0),
        "H": Key("int", 1),
        "n_draws": Key("int", 1000),
        "latent": Key(("gamma", "lognormal"), "gamma"),
        **_STRUCTURE,
    },
    "score": {
        "seed": Key("int", 0),
        "manifest": Key("path", "", "CSV: scenario,dataset,model,forecast,truth,train_weeks"),
        "H": Key("int", 0, "horizons to score; 0 uses every forecast horizon"),
        "pairs": Key("str", "", "model pairs as a:b, whitespace separated; default all"),
    },
    "prior-check": {
        "seed": Key("int", 0),
        "I": Key("int", 6),
        "alpha_diag": Key("float", 4.32), "alpha_offdiag": Key("float", 1.296),
        "scale": Key("float", 0.0, "gamma scale; 0 means 1/(2I)"),
        "n_draws": Key("int", 100_000),
        "variant": Key(("full", "reduced", "naive"), "full"),
        "preset": Key(("simstudy", "analysis"), "simstudy"),
        "G": Key("int", 3), "T": Key("int", 60),
        "n_predictive": Key("int", 200, "prior predictive panels"),
    },
    "diagnose": {
        "seed": Key("int", 0),
        "mode": Key(("draws", "moments"), "draws"),
        "fit": Key("path", ""),
        "rhat_threshold": Key("float", 1.01),
        "G": Key("int", 2), "I": Key("int", 2),
        "theta": Key("float", 5.0), "psi": Key("float", 0.5),
        "n_draws": Key("int", 1_000_000, "Monte Carlo draws for mode = moments"),
        "z": Key("float", 4.0),
    },
}


# ---------------------------------------------------------------------------
# Config handling

def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {n}: empty key")
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(name, key: Key, value):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(key.kind, tuple):
            if value not in key.kind:
                raise ConfigError(f"{name} must be one of {', '.join(key.kind)}; got {value!r}")
            return value
        if key.kind == "int":
            return int(value)
        if key.kind == "float":
            return float(value)
        if key.kind == "floats":
            return tuple(float(v) for v in value.split())
        if key.kind == "bool":
            low = value.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ConfigError(f"{name} must be a boolean; got {value!r}")
            return low in ("true", "yes", "1")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name}: cannot parse {value!r} as {key.kind}") from None
    return value


def resolve_config(command: str, raw: dict, seed=None) -> dict:
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {name: _convert(name, key, raw.get(name, key.default)) for name, key in schema.items()}
    if seed is not None:
        cfg["seed"] = int(seed)
    for name, key in schema.items():
        if key.kind == "int" and name not in ("seed",) and cfg[name] < 0:
            raise ConfigError(f"{name} must be nonnegative")
    return cfg


def format_config(command: str, cfg: dict, extra: dict) -> str:
    lines = [f"# resolved configuration for '{command}'", f"command = {command}"]
    for k, v in {**cfg, **extra}.items():
        if isinstance(v, tuple):
            v = " ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _require(cfg, *names):
    for n in names:
        if not cfg[n]:
            raise ConfigError(f"config key {n!r} is required")


def _base_dir(cfg):
    return Path(cfg.get("_config_dir", "."))


def _path(cfg, name):
    p = Path(cfg[name])
    return p if p.is_absolute() else _base_dir(cfg) / p


# ---------------------------------------------------------------------------
# Shared loading

def _load_panel(cfg):
    from .panel import load_panel
    _require(cfg, "panel")
    pop = _path(cfg, "population") if cfg.get("population") else None
    return load_panel(_path(cfg, "panel"), pop)


def _orders(cfg, regions):
    from .panel import adjacency_orders, load_adjacency
    if not cfg.get("adjacency"):
        return None
    return adjacency_orders(load_adjacency(_path(cfg, "adjacency"), regions))


def _distance(cfg, G):
    from . import dgp
    from .panel import build_distance_matrix, load_matrix_csv, load_tracts
    if cfg.get("tracts"):
        return build_distance_matrix(load_tracts(_path(cfg, "tracts")))
    if cfg.get("distance"):
        return load_matrix_csv(_path(cfg, "distance"))[0]
    return dgp.default_distance(G)


def _contact(cfg):
    from .panel import load_matrix_csv
    return load_matrix_csv(_path(cfg, "contact"))[0] if cfg.get("contact") else None


def _train(panel, weeks):
    if weeks == 0:
        return panel
    if weeks < 2 or weeks > panel.T:
        raise ConfigError(f"train_weeks must lie in 2..{panel.T}")
    return panel.window(0, weeks)


def _model(cfg, panel, prior_preset="simstudy", prior_file=""):
    from . import posterior
    prior = None
    if prior_file:
        prior = posterior.PriorSpec.parse(Path(prior_file).read_text(encoding="utf-8"))
    if cfg["model"] == "outbreak":
        return posterior.OutbreakModel(panel.G, panel.I, panel.T, prior)
    if prior is None:
        prior = posterior.prior_preset(cfg["model"], prior_preset, max(panel.I, 2))
    return posterior.RareModel(cfg["model"], panel.G, panel.I, panel.T, prior)


# ---------------------------------------------------------------------------
# Commands

def cmd_simulate(cfg, out: Path, jobs: int) -> int:
    from . import dgp
    from .panel import load_populations, save_matrix_csv, save_panel

    if cfg["population"]:
        E, regions, ages = load_populations(_path(cfg, "population"))
    else:
        E = dgp.default_populations(cfg["G"], cfg["I"])
        regions = tuple(f"r{g + 1}" for g in range(E.shape[0]))
        ages = tuple(f"a{i + 1}" for i in range(E.shape[1]))
    G, I = E.shape  # noqa: E741
    T = cfg["T"] + cfg["H"]
    if cfg["T"] < 2:
        raise ConfigError("T must be at least 2")

    if cfg["instance"] == "outbreak":
        params = (dgp.load_params(_path(cfg, "params"), "outbreak") if cfg["params"]
                  else dgp.default_outbreak_params(G, I, T))
        D = _distance(cfg, G)
        panel, r = dgp.simulate_outbreak(params, E, T, cfg["seed"], D=D,
                                         initial=np.full((G, I), cfg["initial"]),
                                         latent=cfg["latent"])
        panel = type(panel)(panel.counts, E, panel.week_of_year, regions, ages)
        save_panel(panel, out)
        save_matrix_csv(D, regions, out / "distance.csv")
        dgp.save_params(params, out / "params.txt")
        _write_latent(r, out / "latent.csv")
        return EXIT_OK

    base = (dgp.load_params(_path(cfg, "params"), "rare") if cfg["params"]
            else dgp.default_rare_params(G, I, theta=cfg["theta"], psi=cfg["psi"]))
    orders = _orders(cfg, regions)
    if cfg["grid"]:
        manifest, _ = dgp.scenario_grid(base, cfg["thetas"], cfg["psis"], cfg["replicates"],
                                        cfg["T"], cfg["H"], cfg["seed"], out, E=E, orders=orders,
                                        variant=cfg["variant"], latent=cfg["latent"])
        dgp.save_params(base, out / "params.txt")
        return EXIT_OK
    panel, r = dgp.simulate_rare(base, E, T, cfg["variant"], cfg["seed"], orders=orders,
                                 latent=cfg["latent"])
    panel = type(panel)(panel.counts, E, panel.week_of_year, regions, ages)
    save_panel(panel, out)
    dgp.save_params(base, out / "params.txt")
    _write_latent(r, out / "latent.csv")
    return EXIT_OK


def _write_latent(r, path):
    from .panel import write_csv
    write_csv(path, ("t", "g", "i", "r"),
              ((t + 1, g + 1, i + 1, repr(float(r[t, g, i]))) for t, g, i in np.ndindex(r.shape)))


def cmd_fit(cfg, out: Path, jobs: int) -> int:
    from . import posterior
    from .panel import write_csv
    from .sampler import SamplerConfig, nuts_sample

    panel = _train(_load_panel(cfg), cfg["train_weeks"])
    model = _model(cfg, panel, cfg["prior_preset"], _path(cfg, "prior") if cfg["prior"] else "")
    if cfg["model"] == "outbreak":
        data = model.make_data(panel, _distance(cfg, panel.G))
    else:
        C = _contact(cfg)
        if cfg["model"] == "reduced" and C is None:
            raise ConfigError("model = reduced needs a known contact matrix (key 'contact')")
        data = model.make_data(panel, orders=_orders(cfg, panel.regions), C_known=C)
    sc = SamplerConfig(chains=cfg["chains"], warmup_iters=cfg["warmup_iters"],
                       sampling_iters=cfg["sampling_iters"], target_accept=cfg["target_accept"],
                       max_treedepth=cfg["max_treedepth"], seed=cfg["seed"])
    draws = nuts_sample(posterior.logdensity_fn(model), model.dim, sc, args=(data,),
                        param_names=model.layout.names(), jobs=jobs)
    draws.save(out)
    max_rhat = draws.max_rhat()
    write_csv(out / "fit_summary.csv", ("model", "dim", "chains", "draws", "max_rhat",
                                        "divergent", "mean_treedepth"),
              [(cfg["model"], model.dim, sc.chains, sc.sampling_iters, repr(max_rhat),
                draws.n_divergent, repr(float(np.mean(draws.stats["treedepth"]))))])
    if not np.isfinite(max_rhat) or max_rhat > cfg["rhat_threshold"]:
        print(f"warning: max R-hat {max_rhat:.4f} exceeds {cfg['rhat_threshold']}",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_forecast(cfg, out: Path, jobs: int) -> int:
    from .forecast import posterior_predictive
    from .panel import write_csv
    from .sampler import DrawSet

    _require(cfg, "fit")
    full = _load_panel(cfg)
    panel = _train(full, cfg["train_weeks"])
    if cfg["H"] < 1:
        raise ConfigError("H must be at least 1")
    model = _model(cfg, panel)
    draws = DrawSet.load(_path(cfg, "fit"))
    kw = {}
    if cfg["model"] == "outbreak":
        kw["D"] = _distance(cfg, panel.G)
    else:
        kw["C_known"] = _contact(cfg)
        kw["orders"] = _orders(cfg, panel.regions)
        if cfg["model"] == "reduced" and kw["C_known"] is None:
            raise ConfigError("model = reduced needs a known contact matrix (key 'contact')")
    future_weeks = None
    if full.T >= panel.T + cfg["H"]:
        future_weeks = full.week_of_year[panel.T:panel.T + cfg["H"]]
    fc = posterior_predictive(draws, panel, cfg["H"], model, cfg["seed"],
                              n_draws=cfg["n_draws"], latent=cfg["latent"],
                              future_weeks=future_weeks, **kw)
    fc.save(out / "forecast_draws.csv")
    write_csv(out / "forecast_summary.csv", ("h", "g", "i", "mean", "q05", "q50", "q95"),
              ([h, g, i] + [repr(v) for v in rest] for h, g, i, *rest in fc.summary_rows()))
    return EXIT_OK


def _read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = ("scenario", "dataset", "model", "forecast", "truth", "train_weeks")
        missing = [c for c in need if c not in (reader.fieldnames or ())]
        if missing:
            raise ConfigError(f"{path}: manifest lacks column(s) {', '.join(missing)}")
        return list(reader)


def cmd_score(cfg, out: Path, jobs: int) -> int:
    from .forecast import ForecastSet, log_scores, paired_scores
    from .panel import load_panel, write_csv

    _require(cfg, "manifest")
    mpath = _path(cfg, "manifest")
    rows = _read_manifest(mpath)
    if not rows:
        raise ConfigError("score manifest is empty")
    scores = {}  # (scenario, model) -> {dataset: LS over h}
    tidy = []
    for row in rows:
        fpath = Path(row["forecast"])
        fpath = fpath if fpath.is_absolute() else mpath.parent / fpath
        if fpath.is_dir():
            fpath = fpath / "forecast_draws.csv"
        tpath = Path(row["truth"])
        tpath = tpath if tpath.is_absolute() else mpath.parent / tpath
        fc = ForecastSet.load(fpath)
        truth = load_panel(tpath)
        start = int(row["train_weeks"])
        H = cfg["H"] or fc.H
        if H > fc.H:
            raise ConfigError(f"H = {H} exceeds the forecast horizon {fc.H} in {fpath}")
        future = truth.counts[start:start + H]
        if future.shape[0] < H:
            raise ConfigError(f"truth {tpath} covers {future.shape[0]} week(s) after week "
                              f"{start}; horizon {H} requested")
        sub = ForecastSet(fc.counts[:, :H], fc.mean[:, :H], fc.dispersion, fc.kind,
                          None if fc.size is None else fc.size[:, :H])
        ls = log_scores(sub, future)
        key = (row["scenario"], row["model"])
        if row["dataset"] in scores.setdefault(key, {}):
            raise ConfigError(f"duplicate manifest entry {key + (row['dataset'],)}")
        scores[key][row["dataset"]] = ls
        tidy += [(row["scenario"], row["dataset"], row["model"], h + 1, repr(float(v)))
                 for h, v in enumerate(ls)]
    write_csv(out / "scores.csv", ("scenario", "dataset", "model", "h", "LS"), tidy)

    diffs = []
    for scenario in dict.fromkeys(s for s, _ in scores):
        models = [m for s, m in scores if s == scenario]
        if cfg["pairs"]:
            pairs = []
            for token in cfg["pairs"].split():
                a, sep, b = token.partition(":")
                if not sep or not a or not b:
                    raise ConfigError(f"pairs entry {token!r} must look like a:b")
                pairs.append((a, b))
        else:
            pairs = [(a, b) for j, a in enumerate(models) for b in models[j + 1:]]
        for a, b in pairs:
            if a not in models or b not in models:
                raise ConfigError(f"scenario {scenario} has no scores for pair {a}:{b}")
            table = paired_scores(scores[(scenario, a)], scores[(scenario, b)], a, b)
            diffs += [(scenario, ma, mb, h, repr(float(m)), repr(float(s)), repr(float(lo)),
                       repr(float(hi)), len(table.datasets))
                      for ma, mb, h, m, s, lo, hi in table.rows()]
    write_csv(out / "pair_differences.csv",
              ("scenario", "model_a", "model_b", "h", "mean_diff", "se", "lower", "upper",
               "n_datasets"), diffs)
    return EXIT_OK


def _quantile_rows(names, x):
    q = np.quantile(x, [0.05, 0.5, 0.95], axis=0)
    return [(n, repr(float(x[:, j].mean())), repr(float(q[0, j])), repr(float(q[1, j])),
             repr(float(q[2, j]))) for j, n in enumerate(names)]


def cmd_prior_check(cfg, out: Path, jobs: int) -> int:
    from . import dgp, mixing, posterior
    from .panel import write_csv

    I = cfg["I"]  # noqa: E741
    if I < 2:
        raise ConfigError("I must be at least 2")
    scale = cfg["scale"] or 1.0 / (2 * I)
    try:
        hyper = mixing.ContactPriorHyper(cfg["alpha_diag"], cfg["alpha_offdiag"], scale)
    except mixing.MixingError as exc:
        raise ConfigError(str(exc)) from None
    rng = dgp.make_rng(cfg["seed"])
    C = mixing.sample_contact_prior(hyper, I, rng, size=cfg["n_draws"])
    W = C / C.sum(axis=1, keepdims=True)  # column-normalized: W[:, i, j] = C_ij / sum_k C_kj
    names = [f"w[{i + 1},{j + 1}]" for i in range(I) for j in range(I)]
    header = ("quantity", "mean", "q05", "q50", "q95")
    write_csv(out / "contact_prior.csv", header,
              _quantile_rows(names, W.reshape(len(W), -1)))

    model = posterior.RareModel(cfg["variant"], cfg["G"], I, cfg["T"],
                                posterior.prior_preset(cfg["variant"], cfg["preset"], I))
    u = posterior.sample_prior(model, rng, cfg["n_predictive"])
    scalars = [b.name for b in model.layout.blocks if b.shape == ()]
    vals = np.array([[float(np.asarray(posterior.constrain(v, model)[n])) for n in scalars]
                     for v in u])
    write_csv(out / "prior_parameters.csv", header, _quantile_rows(scalars, vals))

    E = dgp.default_populations(cfg["G"], I)
    totals, failed = [], 0
    for v in u:
        params = model.to_params(v, C_known=dgp.default_contact(I))
        try:
            panel, _ = dgp.simulate_rare(params, E, cfg["T"], cfg["variant"], rng)
        except (dgp.DivergenceError, ValueError):
            failed += 1
            continue
        totals.append(panel.counts.sum(axis=(1, 2)))
    rows = []
    if totals:
        tot = np.array(totals, dtype=float)
        rows = [(t + 1, repr(float(tot[:, t].mean())), repr(float(q05)), repr(float(q50)),
                 repr(float(q95)))
                for t, (q05, q50, q95) in enumerate(np.quantile(tot, [0.05, 0.5, 0.95], axis=0).T)]
    write_csv(out / "prior_predictive.csv", ("t", "mean_total", "q05", "q50", "q95"), rows)
    write_csv(out / "prior_predictive_status.csv", ("simulated", "diverged"),
              [(len(totals), failed)])
    return EXIT_OK


def cmd_diagnose(cfg, out: Path, jobs: int) -> int:
    from .panel import write_csv
    from .sampler import DrawSet, write_diagnostics

    if cfg["mode"] == "moments":
        return _diagnose_moments(cfg, out)
    _require(cfg, "fit")
    draws = DrawSet.load(_path(cfg, "fit"))
    write_diagnostics(draws, out / "diagnostics.csv")
    max_rhat = draws.max_rhat()
    n_div = draws.n_divergent if "divergent" in draws.stats else 0
    write_csv(out / "diagnose_summary.csv", ("chains", "draws", "max_rhat", "divergent"),
              [(draws.chains, draws.iters, repr(max_rhat), n_div)])
    if not np.isfinite(max_rhat) or max_rhat > cfg["rhat_threshold"]:
        print(f"warning: max R-hat {max_rhat:.4f} exceeds {cfg['rhat_threshold']}",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _diagnose_moments(cfg, out):
    from . import dgp, mixing, oracle

    if cfg["n_draws"] < 10_000:
        raise ConfigError("mode = moments needs n_draws >= 10000")
    rng = dgp.make_rng(cfg["seed"])
    G, I = cfg["G"], cfg["I"]  # noqa: E741
    delta = rng.uniform(0.5, 3.0, (G, I))
    phi = rng.uniform(0.2, 0.8, (G, I))
    wG = mixing.column_normalize(rng.uniform(0.1, 1.0, (G, G)))
    wI = mixing.column_normalize(rng.uniform(0.1, 1.0, (I, I)))
    Y_prev = rng.integers(0, 15, (G, I))
    report = oracle.check_one_step(delta, phi, wG, wI, Y_prev, cfg["theta"], cfg["psi"],
                                   cfg["n_draws"], rng, z=cfg["z"])
    report.write(out / "moment_report.csv")
    if not report.passed:
        print("moment check failed; see moment_report.csv", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "prior-check": cmd_prior_check,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentee", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel chains")
        p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = Path(args.out_dir)
    try:
        raw, config_dir = {}, Path(".")
        if args.config:
            path = Path(args.config)
            try:
                raw = parse_config_text(path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            config_dir = path.parent
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = resolve_config(args.command, raw, args.seed)
        cfg["_config_dir"] = str(config_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.txt").write_text(
            format_config(args.command, {k: v for k, v in cfg.items() if not k.startswith("_")},
                          {"jobs": args.jobs, "out_dir": str(out)}), encoding="utf-8")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
