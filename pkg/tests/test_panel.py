import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentee import dgp
from latentee.panel import (
    PanelData, PanelParseError, PanelShapeError, PanelValidationError, SpatialStructure,
    TractTable, adjacency_orders, build_distance_matrix, haversine_km, load_adjacency,
    load_matrix_csv, load_panel, load_tracts, save_adjacency, save_matrix_csv, save_panel,
)

from helpers import THREE_PUMAS, double_sum, haversine_scalar, table


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def toy_files(tmp_path, skip=None, count=3):
    rows = ["t,region,age,count"]
    for t in (1, 2):
        for r in ("A", "B"):
            for a in ("young", "old"):
                if skip == (t, r, a):
                    continue
                rows.append(f"{t},{r},{a},{count}")
    write(tmp_path / "population.csv",
          "region,age,pop\nA,young,100\nA,old,200\nB,young,300\nB,old,400\n")
    return write(tmp_path / "panel.csv", "\n".join(rows) + "\n")


def test_toy_panel_all_threes(tmp_path):
    p = load_panel(toy_files(tmp_path))
    assert p.counts.shape == (2, 2, 2)
    assert np.all(p.counts == 3)
    assert p.regions == ("A", "B") and p.ages == ("young", "old")
    assert p.populations[1, 0] == 300
    assert list(p.week_of_year) == [1, 2]


def test_missing_cell_names_index(tmp_path):
    with pytest.raises(PanelShapeError, match=r"t=2, g=1, i=2"):
        load_panel(toy_files(tmp_path, skip=(2, "A", "old")))


def test_negative_count_rejected(tmp_path):
    with pytest.raises(PanelValidationError, match="negative"):
        load_panel(toy_files(tmp_path, count=-1))


def test_malformed_row_reports_line(tmp_path):
    path = toy_files(tmp_path)
    text = path.read_text().splitlines()
    text[3] = "1,B,young,three"
    write(path, "\n".join(text) + "\n")
    with pytest.raises(PanelParseError, match=r":4:"):
        load_panel(path)


def test_duplicate_and_short_rows(tmp_path):
    path = toy_files(tmp_path)
    write(path, path.read_text() + "1,A,young,3\n")
    with pytest.raises(PanelParseError, match="duplicate"):
        load_panel(path)
    path = toy_files(tmp_path)
    write(path, path.read_text() + "2,A\n")
    with pytest.raises(PanelParseError, match="expected 4 fields"):
        load_panel(path)


def test_round_trip_simulated(tmp_path):
    params = dgp.default_rare_params(3, 2)
    panel, _ = dgp.simulate_rare(params, dgp.default_populations(3, 2), 30, seed=4)
    save_panel(panel, tmp_path)
    back = load_panel(tmp_path / "panel.csv")
    assert np.array_equal(back.counts, panel.counts)
    assert np.array_equal(back.populations, panel.populations)
    assert np.array_equal(back.week_of_year, panel.week_of_year)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(1, 52),
       st.integers(0, 2**32 - 1))
def test_save_load_identity(T, G, I, start, seed):
    import tempfile
    from pathlib import Path
    r = np.random.default_rng(seed)
    counts = r.integers(0, 10**6, (T, G, I))
    pops = r.integers(1, 10**7, (G, I))
    weeks = (np.arange(T) + start - 1) % 52 + 1
    panel = PanelData(counts, pops, weeks)
    with tempfile.TemporaryDirectory() as d:
        save_panel(panel, d)
        back = load_panel(Path(d) / "panel.csv")
    assert np.array_equal(back.counts, counts)
    assert np.array_equal(back.populations, pops)
    assert np.array_equal(back.week_of_year, weeks)


def test_panel_invariants():
    with pytest.raises(PanelValidationError):
        PanelData(np.zeros((2, 1, 1)), np.zeros((1, 1)), [1, 2])
    with pytest.raises(PanelValidationError):
        PanelData(np.zeros((2, 1, 1)), np.ones((1, 1)), [1, 53])
    with pytest.raises(PanelShapeError):
        PanelData(np.zeros((2, 1, 1)), np.ones((2, 1)), [1, 2])
    p = PanelData(np.zeros((2, 1, 1), dtype=int), np.ones((1, 1)), [1, 2])
    with pytest.raises(ValueError):
        p.counts[0, 0, 0] = 1


def test_window():
    p = PanelData(np.arange(12).reshape(3, 2, 2), np.ones((2, 2)), [50, 51, 52])
    w = p.window(1, 3)
    assert w.T == 2 and list(w.week_of_year) == [51, 52]
    assert np.array_equal(w.counts, p.counts[1:])


# -- adjacency ----------------------------------------------------------------

def path_adj(G):
    a = np.zeros((G, G), dtype=bool)
    for g in range(G - 1):
        a[g, g + 1] = a[g + 1, g] = True
    return a


def floyd_warshall(adj):
    G = len(adj)
    d = np.where(adj, 1.0, np.inf)
    np.fill_diagonal(d, 0)
    for k in range(G):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def test_path_graph_orders():
    o = adjacency_orders(path_adj(3))
    assert o[0, 2] == 2 and o[0, 1] == 1 and o[1, 1] == 0


def test_complete_graph_orders():
    a = ~np.eye(5, dtype=bool)
    o = adjacency_orders(a)
    assert np.all(o[a] == 1)


def test_grid_matches_floyd_warshall():
    # 3 x 4 lattice with one diagonal shortcut
    G = 12
    a = np.zeros((G, G), dtype=bool)
    for r in range(3):
        for c in range(4):
            g = 4 * r + c
            if c < 3:
                a[g, g + 1] = a[g + 1, g] = True
            if r < 2:
                a[g, g + 4] = a[g + 4, g] = True
    a[0, 5] = a[5, 0] = True
    assert np.array_equal(adjacency_orders(a), floyd_warshall(a))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.floats(0.1, 0.9))
def test_random_connected_graphs_match_oracle(G, seed, p):
    r = np.random.default_rng(seed)
    a = np.triu(r.random((G, G)) < p, 1)
    a = a | a.T
    # add a random spanning path so the graph is connected
    perm = r.permutation(G)
    for x, y in zip(perm[:-1], perm[1:]):
        a[x, y] = a[y, x] = True
    o = adjacency_orders(a)
    assert np.array_equal(o, floyd_warshall(a))
    SpatialStructure(o)  # symmetric, zero diagonal, triangle-consistent


def test_disconnected_graph_names_pair():
    a = np.zeros((3, 3), dtype=bool)
    a[0, 1] = a[1, 0] = True
    with pytest.raises(PanelValidationError, match="region 1 cannot reach region 3"):
        adjacency_orders(a)


def test_adjacency_csv_round_trip(tmp_path):
    a = path_adj(4)
    regions = ("w", "x", "y", "z")
    save_adjacency(a, regions, tmp_path / "adjacency.csv")
    assert np.array_equal(load_adjacency(tmp_path / "adjacency.csv", regions), a)


def test_spatial_structure_rejects_bad_orders():
    with pytest.raises(PanelValidationError):
        SpatialStructure(np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]]))
    with pytest.raises(PanelValidationError):
        SpatialStructure(np.array([[0, 1], [1, 0]]), distance=np.array([[0, 0.0], [0.0, 0]]))


# -- distances ------------------------------------------------------------------

def test_three_puma_double_sum():
    D = build_distance_matrix(table(THREE_PUMAS))
    np.testing.assert_allclose(D, double_sum(THREE_PUMAS), rtol=1e-12, atol=1e-12)
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) > 0)


def test_two_tracts_ten_km_apart():
    # along a meridian, 10 km is 10 / R radians of latitude
    dlat = math.degrees(10.0 / 6371.0088)
    D = build_distance_matrix(table([("a", 0.0, 0.0, 5.0), ("b", dlat, 0.0, 7.0)]))
    assert D[0, 1] == pytest.approx(1.0, rel=1e-12)
    assert D[0, 0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_distance_symmetric_and_order_invariant(seed):
    r = np.random.default_rng(seed)
    n = 8
    rows = [(f"p{r.integers(0, 3)}", 40 + r.random(), -74 + r.random(), float(r.integers(1, 1000)))
            for _ in range(n)]
    rows += [(f"p{k}", 41.0, -73.5, 10.0) for k in range(3)]  # every puma populated
    D = build_distance_matrix(table(rows))
    assert np.array_equal(D, D.T)
    perm = r.permutation(len(rows))
    shuffled = [rows[k] for k in perm]
    D2 = build_distance_matrix(TractTable(
        np.array([x[0] for x in shuffled]), np.array([x[1] for x in shuffled]),
        np.array([x[2] for x in shuffled]), np.array([x[3] for x in shuffled]),
        puma_labels=table(rows).puma_labels))
    np.testing.assert_allclose(D2, D, rtol=1e-12, atol=1e-13)


def test_zero_population_puma():
    with pytest.raises(PanelValidationError, match="zero total population"):
        build_distance_matrix(table([("a", 0, 0, 1.0), ("b", 1, 1, 0.0)]))


def test_haversine_vectorized_matches_scalar(rng):
    lat1, lon1, lat2, lon2 = rng.uniform(-60, 60, (4, 20))
    got = haversine_km(lat1, lon1, lat2, lon2)
    want = [haversine_scalar(*x) for x in zip(lat1, lon1, lat2, lon2)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_tracts_and_matrix_csv(tmp_path):
    write(tmp_path / "tracts.csv", "puma,lat,lon,pop\n" + "".join(
        f"{p},{a},{b},{c}\n" for p, a, b, c in THREE_PUMAS))
    t = load_tracts(tmp_path / "tracts.csv")
    D = build_distance_matrix(t)
    save_matrix_csv(D, t.puma_labels, tmp_path / "d.csv")
    back, labels = load_matrix_csv(tmp_path / "d.csv")
    assert labels == ("p1", "p2", "p3")
    assert np.array_equal(back, D)
