import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvtraffic.basemap import (BasemapError, Intersection, Link, LinkGraph, build_fixed_adjacency, link_bearing,
                               load_basemap, save_basemap)

from helpers import offset_lonlat, straight_link


def _two_link_doc():
    return {
        "intersections": [{"id": "NA", "lon": -81.38, "lat": 28.54}, {"id": "NB", "lon": -81.376, "lat": 28.54}],
        "links": [
            {"id": "Li", "upstream": "NA", "downstream": "NB", "geometry": [[-81.38, 28.54], [-81.376, 28.54]]},
            {"id": "Lj", "upstream": "NB", "downstream": "NA", "geometry": [[-81.376, 28.54], [-81.38, 28.54]]},
        ],
    }


def test_load_two_links(tmp_path):
    p = tmp_path / "map.json"
    p.write_text(json.dumps(_two_link_doc()))
    g = load_basemap(p)
    assert len(g.links) == 2 and len(g.intersections) == 2
    assert g.links["Li"].length_m == pytest.approx(g.links["Lj"].length_m)


def test_empty_links_rejected(tmp_path):
    doc = _two_link_doc()
    doc["links"] = []
    p = tmp_path / "map.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(BasemapError, match="empty graph"):
        load_basemap(p)


def test_unknown_intersection_named(tmp_path):
    doc = _two_link_doc()
    doc["links"][0]["downstream"] = "NZ"
    p = tmp_path / "map.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(BasemapError, match="NZ"):
        load_basemap(p)


def test_malformed_json(tmp_path):
    p = tmp_path / "map.json"
    p.write_text("{not json")
    with pytest.raises(BasemapError):
        load_basemap(p)


def test_duplicate_ids_and_bad_movement():
    doc = _two_link_doc()
    doc["links"].append(dict(doc["links"][0]))
    with pytest.raises(BasemapError, match="duplicate"):
        LinkGraph.from_json(doc)
    doc = _two_link_doc()
    doc["movements"] = [["Li", "Li"]]
    with pytest.raises(BasemapError, match="shared intersection"):
        LinkGraph.from_json(doc)


def test_round_trip(tmp_path):
    g = LinkGraph.from_json({**_two_link_doc(), "movements": [["Li", "Lj"]]})
    save_basemap(g, tmp_path / "m.json")
    assert load_basemap(tmp_path / "m.json").to_json() == g.to_json()


def _star_graph():
    # A->B is link a; its twin b runs B->A; c is disconnected; d leaves B
    nodes = {n: Intersection(n, -81.38 + 0.004 * i, 28.54) for i, n in enumerate("ABCDE")}
    nodes["E"] = Intersection("E", -81.376, 28.544)

    def link(lid, u, v):
        return Link(lid, u, v, ((nodes[u].lon, nodes[u].lat), (nodes[v].lon, nodes[v].lat)))

    links = {"a": link("a", "A", "B"), "b": link("b", "B", "A"), "c": link("c", "C", "D"), "d": link("d", "B", "E")}
    return nodes, links


def test_adjacency_examples():
    nodes, links = _star_graph()
    g = LinkGraph(nodes, links, frozenset({("a", "d")}))
    adj = build_fixed_adjacency(g)
    i = {k: n for n, k in enumerate(adj.order)}
    assert adj.raw[i["a"], i["d"]] == 2  # declared movement
    assert adj.raw[i["a"], i["b"]] == 1  # twins, no movement
    assert adj.raw[i["a"], i["c"]] == 0
    g2 = LinkGraph(nodes, links)
    adj2 = build_fixed_adjacency(g2)
    assert list(adj2.raw[0]) == [2, 1, 0, 1]
    np.testing.assert_allclose(adj2.normalized[0], [0.5, 0.25, 0.0, 0.25])


def test_isolated_row_stays_zero():
    nodes, links = _star_graph()
    adj = build_fixed_adjacency(LinkGraph(nodes, links), self_loop=0)
    assert adj.raw[2].sum() == 0
    assert np.all(adj.normalized[2] == 0)


def test_link_bearing_axis_aligned():
    east = straight_link(bearing_deg=90.0)
    north = straight_link(bearing_deg=0.0)
    for c in (0.0, 123.4, east.length_m):
        assert link_bearing(east, c) == pytest.approx(90.0, abs=1e-6)
        assert link_bearing(north, c) == pytest.approx(0.0, abs=1e-6)


def test_link_bearing_l_shape():
    lon0, lat0 = -81.38, 28.54
    corner = offset_lonlat(lon0, lat0, 300.0, 0.0)
    # second vertex pair shares a longitude exactly, so the true bearing is 0
    end = (corner[0], corner[1] + 0.002)
    link = Link("L", "A", "B", ((lon0, lat0), corner, end))
    assert link_bearing(link, 350.0) == pytest.approx(0.0, abs=1e-6)
    assert link_bearing(link, 100.0) == pytest.approx(90.0, abs=1e-6)
    with pytest.raises(BasemapError):
        link_bearing(link, link.length_m + 1.0)


# -- properties ----------------------------------------------------------


@st.composite
def random_graphs(draw):
    n_nodes = draw(st.integers(2, 7))
    nodes = {f"N{i}": Intersection(f"N{i}", -81.38 + 0.003 * (i % 3), 28.54 + 0.003 * (i // 3)) for i in range(n_nodes)}
    pairs = [(a, b) for a in nodes for b in nodes if a != b]
    chosen = draw(st.lists(st.sampled_from(pairs), min_size=1, max_size=20, unique=True))
    links = {}
    for k, (u, v) in enumerate(chosen):
        links[f"L{k}"] = Link(f"L{k}", u, v, ((nodes[u].lon, nodes[u].lat), (nodes[v].lon, nodes[v].lat)))
    possible = [(a, b) for a in links for b in links if a != b and links[a].downstream == links[b].upstream]
    moves = draw(st.lists(st.sampled_from(possible), unique=True)) if possible else []
    return LinkGraph(nodes, links, frozenset(moves))


def _brute_raw(g: LinkGraph, order):
    n = len(order)
    out = np.zeros((n, n), dtype=int)
    for i, a in enumerate(order):
        for j, b in enumerate(order):
            la, lb = g.links[a], g.links[b]
            if i == j:
                out[i, j] = 2
            elif {la.upstream, la.downstream} & {lb.upstream, lb.downstream}:
                out[i, j] = 2 if (a, b) in g.movements or (b, a) in g.movements else 1
    return out


@settings(max_examples=150, deadline=None)
@given(random_graphs(), st.randoms(use_true_random=False))
def test_adjacency_properties(g, rnd):
    order = list(g.links)
    adj = build_fixed_adjacency(g)
    np.testing.assert_array_equal(adj.raw, _brute_raw(g, order))
    sums = adj.normalized.sum(axis=1)
    nz = adj.raw.sum(axis=1) > 0
    assert np.all(np.abs(sums[nz] - 1.0) <= 1e-9)
    perm = order[:]
    rnd.shuffle(perm)
    adj_p = build_fixed_adjacency(g, perm)
    idx = [order.index(x) for x in perm]
    np.testing.assert_array_equal(adj_p.raw, adj.raw[np.ix_(idx, idx)])
    np.testing.assert_allclose(adj_p.normalized, adj.normalized[np.ix_(idx, idx)], atol=0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 359.9), st.floats(50, 2000), st.floats(-60, 60))
def test_straight_link_length_and_bearing(bearing, length, lat):
    link = straight_link(length_m=length, bearing_deg=bearing, lat0=lat)
    assert link.length_m == pytest.approx(length, rel=1e-9)
    d = abs(link_bearing(link, length / 2) - bearing) % 360
    assert min(d, 360 - d) < 1e-6
    assert math.isclose(link.cumulative[-1], link.length_m)
