import math

import numpy as np
import pytest
from scipy import stats

from latentee import study
from latentee.sampler import DrawSet

TINY = study.StudyConfig(G=2, I=2, T_train=20, H=2, replicates=2, chains=2, warmup_iters=80,
                         sampling_iters=40, forecast_draws=50)


def test_credible_interval_scales():
    x = np.log(np.arange(1, 1002, dtype=float)).reshape(1, -1, 1)
    d = DrawSet(x, ["psi"])
    lo, hi = study.credible_interval(d, "psi", 0.9)
    assert lo == pytest.approx(51.0) and hi == pytest.approx(951.0)
    lo2, hi2 = study.credible_interval(d, "psi", 0.9, positive=False)
    assert lo2 == pytest.approx(math.log(51.0))


def test_coverage_rows_and_rates():
    res = study.coverage_study([0.05, 15.0], 0.5, TINY)
    assert len(res.rows) == 2 * 2 * 2
    for row in res.rows:
        assert len(row) == len(res.header)
        lo, hi = row[6], row[7]
        assert 0 < lo < hi and row[8] == int(lo <= 0.5 <= hi)
    assert res.coverage(15.0, "full") in (0.0, 0.5, 1.0)
    assert math.isnan(res.coverage(3.0, "full"))


def test_coverage_reproducible():
    cfg = study.StudyConfig(G=2, I=2, T_train=20, replicates=1, chains=2, warmup_iters=40,
                            sampling_iters=20)
    a = study.coverage_study([5.0], 0.5, cfg, variants=("naive",))
    b = study.coverage_study([5.0], 0.5, cfg, variants=("naive",))
    assert a.rows == b.rows


def test_score_study_shapes():
    res = study.score_study(5.0, 0.05, TINY)
    t = res.table()
    assert t.delta.shape == (2, 2)
    assert np.all(np.isfinite(t.delta))
    assert [r[2] for r in t.rows()] == [1, 2]


def test_sbc_ranks_in_range():
    res = study.sbc(2, n_draws=19, bins=5, chains=1, warmup_iters=60, sampling_iters=40, T=8)
    for name in ("beta0", "psi", "theta"):
        assert len(res.ranks[name]) == 2
        assert all(0 <= r <= 19 for r in res.ranks[name])
    stat, p = res.chi2("beta0")
    assert 0 <= p <= 1


def test_sbc_chi2_matches_scipy():
    res = study.SBCResult({"x": list(range(100))}, 99, 10)
    stat, p = res.chi2("x")
    assert stat == 0.0 and p == pytest.approx(1.0)
    skewed = study.SBCResult({"x": [0] * 50 + list(range(50))}, 99, 10)
    counts = [55, 5, 5, 5, 5, 5, 0, 0, 0, 0]
    assert skewed.chi2("x")[1] == pytest.approx(stats.chisquare(counts)[1])


def test_sbc_bins_must_divide():
    with pytest.raises(ValueError):
        study.sbc(1, n_draws=100, bins=10)
