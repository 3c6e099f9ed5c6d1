import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from latentee import dgp, posterior
from latentee.panel import PanelData
from latentee.posterior import Block, Layout, LayoutError, PriorSpec

from helpers import fd_check, rare_dict


def small_panel(G=2, I=2, T=6, seed=1, theta=5.0):  # noqa: E741
    p = dgp.default_rare_params(G, I, theta=theta)
    E = dgp.default_populations(G, I)
    panel, _ = dgp.simulate_rare(p, E, T, "full", seed, initial=np.full((G, I), 4))
    return panel, p


def outbreak_setup(G=2, I=2, T=6, seed=3):  # noqa: E741
    p = dgp.default_outbreak_params(G, I, T)
    E = np.full((G, I), 2000)
    D = dgp.default_distance(G)
    panel, _ = dgp.simulate_outbreak(p, E, T, seed, D=D, initial=np.full((G, I), 3))
    return panel, D


# -- latent layer ---------------------------------------------------------------

def test_lognormal_vanishing_dispersion():
    z = np.array([-3.0, 0.0, 2.5])
    dev = [np.max(np.abs(posterior.lognormal_latent(z, 7.0, v) / 7.0 - 1)) for v in 10.0 ** -np.arange(2, 31, 4)]
    assert np.all(np.diff(dev) < 0)
    assert dev[-1] < 1e-13


def test_lognormal_median():
    m, v = 10.0, 50.0
    assert posterior.lognormal_latent(0.0, m, v) == pytest.approx(m / math.sqrt(1 + v / m**2), rel=1e-14)


def test_lognormal_moments_mc(rng):
    m, v, n = 10.0, 50.0, 10**6
    r = posterior.lognormal_latent(rng.standard_normal(n), m, v)
    assert abs(r.mean() - m) < 3 * math.sqrt(v / n)
    se_var = math.sqrt((np.mean((r - m) ** 4) - v**2) / n)
    assert abs(r.var() - v) < 3 * se_var


@pytest.mark.parametrize("m,v", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
def test_lognormal_domain(m, v):
    with pytest.raises(ValueError):
        posterior.lognormal_latent(0.0, m, v)


def test_noncentered_marginal_matches_lognormal_mixture():
    # integrating the NegBin likelihood over z equals integrating it over the
    # lognormal density of r
    delta, phi, m, theta, psi, y = 0.7, 0.3, 4.0, 6.0, 0.4, 5
    s2 = math.log1p(theta / m)
    mu = math.log(m) - s2 / 2

    def over_z(z):
        r = math.exp(mu + math.sqrt(s2) * z)
        return math.exp(dgp.negbin_logpmf(y, delta + phi * r, psi)) * stats.norm.pdf(z)

    def over_r(r):
        return (math.exp(dgp.negbin_logpmf(y, delta + phi * r, psi))
                * stats.lognorm.pdf(r, math.sqrt(s2), scale=math.exp(mu)))

    a = integrate.quad(over_z, -12, 12, epsabs=1e-14)[0]
    b = integrate.quad(over_r, 0, np.inf, epsabs=1e-14, limit=200)[0]
    assert a == pytest.approx(b, rel=1e-7)


# -- layout and priors ----------------------------------------------------------

@pytest.mark.parametrize("variant", ["naive", "reduced", "full"])
def test_layout_names_cover_vector(variant):
    model = posterior.RareModel(variant, 3, 2, 5)
    names = model.layout.names()
    assert len(names) == len(set(names)) == model.dim
    covered = sorted(i for lo, hi in model.layout.offsets.values() for i in range(lo, hi))
    assert covered == list(range(model.dim))


def test_outbreak_layout():
    model = posterior.OutbreakModel(2, 3, 4)
    names = model.layout.names()
    assert len(names) == len(set(names)) == model.dim
    assert "C[3,1]" in names and "z[3,2,3]" in names


def test_vector_length_mismatch():
    model = posterior.RareModel("naive", 2, 2, 4)
    with pytest.raises(LayoutError):
        posterior.log_prior(np.zeros(model.dim + 1), model)
    with pytest.raises(LayoutError):
        posterior.constrain(np.zeros(model.dim - 1), model)


def test_prior_spec_mismatch():
    spec = posterior.prior_preset("naive")
    short = PriorSpec(tuple(e for e in spec.entries if e[0] != "psi"))
    with pytest.raises(LayoutError, match="psi"):
        posterior.RareModel("naive", 2, 2, 4, short)
    with pytest.raises(LayoutError):
        posterior.RareModel("naive", 2, 2, 4, spec.replace("psi", "normal", 0.0, 1.0))


def test_prior_spec_text_round_trip():
    spec = posterior.prior_preset("full", "analysis", 3).replace("beta0", "normal", 0.1, 1 / 3)
    again = PriorSpec.parse(spec.format())
    assert again == spec
    assert again.as_dict()["beta0"] == ("normal", (0.1, 1 / 3))


@pytest.mark.parametrize("text,msg", [
    ("psi wibble 1\n", "unknown prior family"),
    ("psi halfcauchy 1 2\n", "takes 1"),
    ("psi halfcauchy x\n", "non-numeric"),
    ("psi halfcauchy 1\npsi halfcauchy 2\n", "duplicate"),
    ("psi\n", "expected"),
])
def test_prior_spec_parse_errors(text, msg):
    with pytest.raises(ValueError, match=msg):
        PriorSpec.parse(text)


def test_presets_differ_only_in_dispersions():
    a = posterior.prior_preset("full", "simstudy").as_dict()
    b = posterior.prior_preset("full", "analysis").as_dict()
    assert {k for k in a if a[k] != b[k]} == {"psi", "theta"}
    assert b["psi"] == ("halfcauchy", (1.0,))


def test_standard_normal_prior_at_zero():
    layout = Layout((Block("a", (3,), "real"), Block("b", (2, 2), "latent")))
    spec = PriorSpec((("a", "normal", (0.0, 1.0)), ("b", "std_normal", ())))
    val = posterior._log_prior(layout, spec, jnp.zeros(layout.dim), 2)
    assert float(val) == pytest.approx(-layout.dim / 2 * math.log(2 * math.pi), rel=1e-14)


def test_quadratic_prior_gradient():
    layout = Layout((Block("a", (5,), "real"),))
    spec = PriorSpec((("a", "normal", (0.0, 1.0)),))
    u = jnp.array([0.3, -1.2, 2.0, 0.0, 5.5])
    g = jax.grad(lambda x: posterior._log_prior(layout, spec, x, 1))(u)
    np.testing.assert_allclose(g, -u, rtol=1e-14)


def test_halfcauchy_block_value_and_normalization():
    layout = Layout((Block("t", (), "positive"),))
    spec = PriorSpec((("t", "halfcauchy", (1.0,)),))
    f = jax.jit(lambda u: posterior._log_prior(layout, spec, jnp.atleast_1d(u), 1))
    # at theta = 1 (u = 0) the Jacobian term is zero
    assert float(f(0.0)) == pytest.approx(math.log(2 / math.pi) - math.log(2), rel=1e-14)
    total = integrate.quad(lambda u: math.exp(float(f(u))), -40, 40, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("family,params", [
    ("lognormal", (0.5, 1.0)), ("halfnormal", (2.0,)), ("gamma", (3.0, 2.0))])
def test_positive_families_integrate_to_one(family, params):
    layout = Layout((Block("t", (), "positive"),))
    spec = PriorSpec((("t", family, params),))
    f = jax.jit(lambda u: posterior._log_prior(layout, spec, jnp.atleast_1d(u), 1))
    total = integrate.quad(lambda u: math.exp(float(f(u))), -30, 30, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("model", [posterior.RareModel("naive", 2, 2, 6),
                                   posterior.RareModel("reduced", 2, 2, 6),
                                   posterior.RareModel("full", 2, 2, 6),
                                   posterior.OutbreakModel(2, 2, 6)], ids=lambda m: m.variant)
def test_prior_draws_have_finite_log_prior(model, rng):
    u = posterior.sample_prior(model, rng, 10_000)
    lp = np.asarray(jax.jit(jax.vmap(model.log_prior))(jnp.asarray(u)))
    assert np.all(np.isfinite(lp))


def test_prior_sampler_matches_log_prior(rng):
    # the sampled unconstrained theta has the density the log prior assigns
    model = posterior.RareModel("full", 2, 2, 3, posterior.prior_preset("full", "analysis", 2))
    col = model.layout.offsets["theta"][0]
    u = posterior.sample_prior(model, rng, 20_000)[:, col]
    cdf = np.vectorize(lambda x: stats.halfcauchy.cdf(math.exp(x)))
    assert stats.kstest(u, cdf).pvalue > 1e-3


# -- bijection --------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["naive", "reduced", "full"]))
def test_constrain_round_trip(seed, variant):
    model = posterior.RareModel(variant, 2, 3, 4)
    u = np.random.default_rng(seed).normal(0, 2, model.dim)
    back = posterior.unconstrain(posterior.constrain(u, model), model)
    np.testing.assert_allclose(back, u, rtol=0, atol=1e-12)


def test_positive_blocks_map_through_exp(rng):
    model = posterior.OutbreakModel(2, 2, 4)
    u = rng.normal(size=model.dim)
    c = posterior.constrain(u, model)
    for name in ("delta", "theta", "k", "tau"):
        lo, hi = model.layout.offsets[name]
        np.testing.assert_allclose(np.ravel(c[name]), np.exp(u[lo:hi]), rtol=1e-15)
    C = c["contact"]
    np.testing.assert_array_equal(C, C.T)
    rows, cols = np.tril_indices(2)
    lo, hi = model.layout.offsets["contact"]
    np.testing.assert_allclose(C[rows, cols], np.exp(u[lo:hi]), rtol=1e-15)


def test_log_jacobian_numerical(rng):
    model = posterior.RareModel("full", 2, 2, 3)
    u = rng.normal(0, 0.7, model.dim)

    def flat(v):
        c = posterior.constrain(v, model)
        rows, cols = np.tril_indices(2)
        return np.concatenate([np.ravel(c[b.name]) if b.kind != "contact"
                               else c[b.name][rows, cols] for b in model.layout.blocks])

    # every block transform acts coordinatewise, so the Jacobian is diagonal
    h = 1e-6
    diag = [(flat(u + h * e)[j] - flat(u - h * e)[j]) / (2 * h)
            for j, e in enumerate(np.eye(model.dim))]
    assert posterior.log_jacobian(u, model) == pytest.approx(np.sum(np.log(diag)), abs=1e-6)


def test_unconstrain_rejects_invalid():
    model = posterior.RareModel("full", 2, 2, 3)
    c = rare_dict(dgp.default_rare_params(2, 2), model)
    with pytest.raises(ValueError):
        posterior.unconstrain({**c, "psi": -1.0}, model)
    with pytest.raises(ValueError):
        posterior.unconstrain({**c, "contact": np.array([[1.0, 2.0], [3.0, 1.0]])}, model)
    with pytest.raises(LayoutError):
        posterior.unconstrain({k: v for k, v in c.items() if k != "theta"}, model)


# -- rare-disease likelihood -------------------------------------------------------

def test_single_cell_negbin_by_hand():
    model = posterior.RareModel("reduced", 1, 1, 2)
    panel = PanelData(np.array([[[3]], [[5]]]), np.array([[1000]]), np.array([10, 11]))
    p = dict(beta0=0.2, beta_sin=np.array([0.3]), beta_cos=np.array([-0.1]), beta_xmas=0.0,
             psi=0.5, eta0=-0.7, eta_logpop=0.4, rho=1.0, kappa=1.3)
    u = posterior.unconstrain(p, model)
    data = model.make_data(panel, C_known=np.array([[2.0]]))
    w = 2 * math.pi / 52 * 2  # week index t = 2
    delta = math.exp(0.2 + 0.3 * math.sin(w) - 0.1 * math.cos(w))
    lam = delta + math.exp(-0.7) * 3
    n = 1 / 0.5
    expected = stats.nbinom.logpmf(5, n, n / (n + lam))
    assert posterior.log_likelihood_rare(u, model, data) == pytest.approx(expected, rel=1e-12)


def test_naive_invariant_to_swapping_same_week_of_year(rng):
    T = 60
    model = posterior.RareModel("naive", 2, 2, T)
    y = rng.poisson(3, (T, 2, 2))
    weeks = (np.arange(T) % 52) + 1
    swapped = y.copy()
    swapped[[1, 53]] = y[[53, 1]]  # weeks t=2 and t=54 share week_of_year 2
    E = dgp.default_populations(2, 2)
    u = rng.normal(0, 0.5, model.dim)
    a = posterior.log_likelihood_rare(u, model, model.make_data(PanelData(y, E, weeks)))
    b = posterior.log_likelihood_rare(u, model, model.make_data(PanelData(swapped, E, weeks)))
    assert a == pytest.approx(b, rel=1e-12)


def test_full_at_small_theta_matches_reduced():
    panel, p = small_panel(3, 3, 10)
    full = posterior.RareModel("full", 3, 3, 10)
    red = posterior.RareModel("reduced", 3, 3, 10)
    u_full = posterior.unconstrain(rare_dict(p.replace(theta=1e-8), full), full)
    u_red = posterior.unconstrain(rare_dict(p.replace(kappa=1.0), red), red)
    a = posterior.log_likelihood_rare(u_full, full, full.make_data(panel))
    b = posterior.log_likelihood_rare(u_red, red, red.make_data(panel, C_known=p.C))
    assert a == pytest.approx(b, rel=1e-6)


def test_full_matches_simulator_conditional_mean():
    panel, p = small_panel(2, 3, 4)
    model = posterior.RareModel("full", 2, 3, 4)
    data = model.make_data(panel)
    z = np.random.default_rng(5).normal(size=model.layout.block("z").shape)
    c = posterior.constrain(posterior.unconstrain(rare_dict(p, model, z), model), model)
    _, lam, _ = model.rates({k: jnp.asarray(v) for k, v in c.items()}, data)
    # loop oracle over cells
    E = panel.populations
    delta = np.exp(dgp.endemic_log_rates(p, E, np.arange(2, 5), panel.week_of_year[1:]))
    phi = dgp.susceptibility(p, E)
    wG = dgp.mixing.geo_weights_power_decay(dgp.path_orders(2), p.rho)
    wI = dgp.mixing.normalize_contact(p.C)
    y = panel.counts
    for t in range(3):
        m = np.where(y[t] > 0, y[t], 1.0)
        s2 = np.log1p(p.theta / m)
        r = np.where(y[t] > 0, np.exp(np.log(m) - s2 / 2 + np.sqrt(s2) * z[t]), 0.0)
        for g in range(2):
            for i in range(3):
                want = delta[t, g, i] + phi[g, i] * sum(
                    wG[g, a] * r[a, b] * wI[i, b] for a in range(2) for b in range(3))
                assert float(lam[t, g, i]) == pytest.approx(want, rel=1e-12)


def test_region_relabeling_equivariance(rng):
    panel, p = small_panel(3, 2, 6)
    model = posterior.RareModel("full", 3, 2, 6)
    z = rng.normal(size=model.layout.block("z").shape)
    perm = np.array([0, 2, 1])  # keep the reference region in place
    orders = dgp.path_orders(3)
    u = posterior.unconstrain(rare_dict(p, model, z), model)
    a = posterior.log_likelihood_rare(u, model, model.make_data(panel, orders=orders))

    pp = p.replace(beta_geo=p.beta_geo[perm], eta_geo=p.eta_geo[perm])
    panel2 = PanelData(panel.counts[:, perm], panel.populations[perm], panel.week_of_year)
    u2 = posterior.unconstrain(rare_dict(pp, model, z[:, perm]), model)
    b = posterior.log_likelihood_rare(u2, model, model.make_data(panel2, orders=orders[perm][:, perm]))
    assert a == pytest.approx(b, rel=1e-12)


def test_latent_gradient_at_zero_prevalence_is_prior_gradient(rng):
    T, G, I = 5, 2, 2  # noqa: E741
    y = rng.poisson(2, (T, G, I))
    y[1, 0, 1] = 0
    y[3, 1, 0] = 0
    panel = PanelData(y, dgp.default_populations(G, I), np.arange(1, T + 1))
    model = posterior.RareModel("full", G, I, T)
    u = rng.normal(0, 0.5, model.dim)
    _, g = posterior.log_posterior_grad(u, model, model.make_data(panel))
    lo, hi = model.layout.offsets["z"]
    zero = (y[:-1] == 0).reshape(-1)
    assert zero.sum() >= 2
    np.testing.assert_array_equal(g[lo:hi][zero], -u[lo:hi][zero])


def test_panel_shape_mismatch():
    panel, _ = small_panel(2, 2, 6)
    with pytest.raises(posterior.DataError):
        posterior.RareModel("naive", 2, 2, 7).make_data(panel)
    with pytest.raises(posterior.DataError, match="contact"):
        posterior.RareModel("reduced", 2, 2, 6).make_data(panel)


def test_reduced_negative_deformation_gives_minus_inf():
    panel, p = small_panel(2, 3, 6)
    model = posterior.RareModel("reduced", 2, 3, 6)
    # positive definite but the square root has negative corner entries
    C = np.array([[1.0, 0.9, 0.0], [0.9, 1.0, 0.9], [0.0, 0.9, 1.0]]) + 0.3 * np.eye(3)
    data = model.make_data(panel, C_known=C)
    u = posterior.unconstrain(rare_dict(p.replace(kappa=0.5), model), model)
    assert posterior.log_likelihood_rare(u, model, data) == -np.inf


# -- outbreak likelihood -----------------------------------------------------------

def outbreak_dict(model, **kw):
    G, I, T = model.G, model.I, model.T  # noqa: E741
    c = dict(delta=np.full((G, I), 1e-3), theta=2.0, k=50.0, gamma=0.7,
             log_R=np.zeros(T - 1), contact=np.eye(I) + 0.5, tau=np.ones(G),
             mean_log_rho=0.0, sd_log_rho=0.5, rho_raw=np.zeros(G),
             z=np.zeros((T - 1, G, I)))
    c.update(kw)
    return c


def test_outbreak_single_cell_by_hand():
    model = posterior.OutbreakModel(1, 2, 2)
    panel = PanelData(np.array([[[4, 0]], [[3, 1]]]), np.array([[500, 300]]), np.array([1, 2]))
    data = model.make_data(panel, np.array([[5.0]]))
    c = outbreak_dict(model)
    u = posterior.unconstrain(c, model)
    C = c["contact"]
    alpha = C.sum(axis=0)
    m = alpha * np.array([4.0, 0.0])
    r = np.where(m > 0, posterior.lognormal_latent(0.0, np.where(m > 0, m, 1), 2.0 * np.where(m > 0, m, 1)), 0)
    wI = C / alpha
    hazard = 1e-3 + (wI @ r) / np.array([500, 300])
    prob = 1 - np.exp(-hazard)
    X = np.array([496, 300])
    expected = sum(dgp.betabinom_logpmf(y, n, q, 50.0) for y, n, q in zip([3, 1], X, prob))
    assert posterior.log_likelihood_outbreak(u, model, data) == pytest.approx(expected, rel=1e-10)


def test_outbreak_large_k_is_binomial():
    panel, D = outbreak_setup()
    model = posterior.OutbreakModel(2, 2, 6)
    data = model.make_data(panel, D)
    u = posterior.unconstrain(outbreak_dict(model, k=1e12), model)
    c = {k: jnp.asarray(v) for k, v in posterior.constrain(u, model).items()}
    prob = np.asarray(model.probabilities(c, data))
    expected = np.sum(stats.binom.logpmf(data["y"], data["X"], prob))
    assert posterior.log_likelihood_outbreak(u, model, data) == pytest.approx(expected, rel=1e-6)


def test_outbreak_probability_falls_with_gamma():
    # all prevalence sits at long lags, so faster decay lowers the last week's probability
    T = 8
    y = np.zeros((T, 1, 2), dtype=int)
    y[0] = [[6, 4]]
    panel = PanelData(y, np.array([[1000, 1000]]), np.arange(1, T + 1))
    model = posterior.OutbreakModel(1, 2, T)
    data = model.make_data(panel, np.array([[5.0]]))
    last = []
    for gam in (0.2, 0.5, 1.0, 2.0):
        c = {k: jnp.asarray(v) for k, v in outbreak_dict(model, gamma=gam).items()}
        last.append(np.log(np.asarray(model.probabilities(c, data))[-1]))
    assert np.all(np.diff(np.array(last), axis=0) < 0)


def test_outbreak_count_above_susceptibles():
    y = np.array([[[5, 1]], [[7, 0]]])
    panel = PanelData(y, np.array([[10, 10]]), np.array([1, 2]))
    with pytest.raises(posterior.DataError, match="t=2, g=1, i=1"):
        posterior.OutbreakModel(1, 2, 2).make_data(panel, np.array([[5.0]]))


# -- gradient contract ---------------------------------------------------------------

@pytest.mark.parametrize("variant", ["naive", "reduced", "full", "outbreak"])
def test_gradient_matches_finite_differences(variant, rng):
    if variant == "outbreak":
        panel, D = outbreak_setup()
        model = posterior.OutbreakModel(2, 2, 6)
        data = model.make_data(panel, D)
    else:
        panel, p = small_panel()
        model = posterior.RareModel(variant, 2, 2, 6)
        data = model.make_data(panel, C_known=p.C if variant == "reduced" else None)
    for _ in range(5):
        u = rng.normal(0, 0.5, model.dim)
        ok, worst = fd_check(model, data, u)
        assert ok, worst


def test_density_is_prior_plus_likelihood(rng):
    panel, p = small_panel()
    model = posterior.RareModel("full", 2, 2, 6)
    data = model.make_data(panel)
    u = rng.normal(0, 0.5, model.dim)
    total, _ = posterior.log_posterior_grad(u, model, data)
    parts = posterior.log_prior(u, model) + posterior.log_likelihood_rare(u, model, data)
    assert total == pytest.approx(parts, rel=1e-12)


def test_wrong_likelihood_entry_point():
    panel, _ = small_panel()
    model = posterior.RareModel("naive", 2, 2, 6)
    with pytest.raises(TypeError):
        posterior.log_likelihood_outbreak(np.zeros(model.dim), model, model.make_data(panel))
