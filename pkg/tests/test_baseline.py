import numpy as np
import pytest

from routecloud.baseline import cell_density_map, load_nets, rudy_map, save_nets
from routecloud.circuit_io import NodeSet, gen_nets, gen_synthetic
from routecloud.errors import ParseError, ValidationError

RES = (4, 4)
EXTENT = (0.0, 0.0, 4.0, 4.0)


def nodes_of(rows, ids=None):
    return NodeSet.from_array(np.array(rows, dtype=float), extent=EXTENT, ids=ids)


def analytic_density(nodes, resolution):
    """Per-cell loop over nodes with explicit rectangle intersection."""
    W, H = resolution
    x0, y0, x1, y1 = nodes.extent
    sx, sy = W / (x1 - x0), H / (y1 - y0)
    out = np.zeros((H, W))
    for i in range(nodes.n):
        xl, xh = (nodes.x[i] - nodes.w[i] / 2 - x0) * sx, (nodes.x[i] + nodes.w[i] / 2 - x0) * sx
        yl, yh = (nodes.y[i] - nodes.h[i] / 2 - y0) * sy, (nodes.y[i] + nodes.h[i] / 2 - y0) * sy
        for gy in range(H):
            for gx in range(W):
                ox = max(0.0, min(gx + 1, xh) - max(gx, xl))
                oy = max(0.0, min(gy + 1, yh) - max(gy, yl))
                out[gy, gx] += ox * oy
    return out


class TestCellDensity:
    def test_unit_node_in_one_cell(self):
        g = cell_density_map(nodes_of([[1.5, 2.5, 1.0, 1.0]]), RES)
        assert g[2, 1] == 1.0 and g.sum() == 1.0

    def test_straddle(self):
        g = cell_density_map(nodes_of([[2.0, 0.5, 1.0, 1.0]]), RES)
        assert g[0, 1] == g[0, 2] == 0.5 and g.sum() == 1.0

    def test_matches_analytic_loop(self):
        nodes, _ = gen_synthetic(3, 150, 2, base_resolution=(16, 16))
        raw = cell_density_map(nodes, (16, 16), normalize=False)
        np.testing.assert_allclose(raw, analytic_density(nodes, (16, 16)), rtol=0, atol=1e-9)

    def test_normalized_into_unit_interval(self):
        nodes, _ = gen_synthetic(4, 500, 2, base_resolution=(16, 16))
        g = cell_density_map(nodes, (16, 16))
        assert g.min() >= 0 and g.max() == 1.0

    def test_mass_equals_node_area(self):
        nodes = nodes_of([[1.0, 1.0, 0.7, 1.3], [2.6, 3.0, 1.1, 0.4]])
        raw = cell_density_map(nodes, RES, normalize=False)
        assert raw.sum() == pytest.approx(0.7 * 1.3 + 1.1 * 0.4, rel=1e-9)

    def test_additive_over_subsets(self):
        nodes, _ = gen_synthetic(5, 80, 2, base_resolution=(8, 8))
        idx = np.arange(nodes.n)
        whole = cell_density_map(nodes, (8, 8), normalize=False)
        parts = (cell_density_map(nodes.subset(idx[:30]), (8, 8), normalize=False)
                 + cell_density_map(nodes.subset(idx[30:]), (8, 8), normalize=False))
        np.testing.assert_allclose(whole, parts, atol=1e-12)


class TestRudy:
    @pytest.fixture
    def pins(self):
        return nodes_of([[1.0, 1.5, 0.1, 0.1], [3.0, 1.5, 0.1, 0.1], [1.5, 3.5, 0.1, 0.1],
                         [1.5, 3.5, 0.1, 0.1], [3.5, 0.5, 0.1, 0.1]], ids=["a", "b", "c", "d", "e"])

    def test_two_by_one_box(self, pins):
        g = rudy_map([{"net": "n", "nodes": ["a", "b"]}], pins, RES, normalize=False)
        assert g[1, 1] == g[1, 2] == 1.5 and g.sum() == 3.0

    def test_coincident_pins(self, pins):
        g = rudy_map([{"net": "n", "nodes": ["c", "d"]}], pins, RES, normalize=False)
        assert g[3, 1] == 2.0 and g.sum() == 2.0

    def test_additive(self, pins):
        n1 = {"net": "1", "nodes": ["a", "b"]}
        n2 = {"net": "2", "nodes": ["c", "e"]}
        both = rudy_map([n1, n2], pins, RES, normalize=False)
        np.testing.assert_allclose(
            both, rudy_map([n1], pins, RES, normalize=False) + rudy_map([n2], pins, RES, normalize=False))

    def test_normalized_max_one(self, pins):
        g = rudy_map([{"net": "1", "nodes": ["a", "b"]}, {"net": "2", "nodes": ["c", "d"]}], pins, RES)
        assert g.max() == 1.0

    def test_unknown_node(self, pins):
        with pytest.raises(ValidationError, match="zz"):
            rudy_map([{"net": "n", "nodes": ["a", "zz"]}], pins, RES)

    def test_single_node_net(self, pins):
        with pytest.raises(ValidationError):
            rudy_map([{"net": "n", "nodes": ["a"]}], pins, RES)


class TestNetsFile:
    def test_round_trip(self, tmp_path):
        nodes, _ = gen_synthetic(1, 100, 2, base_resolution=(8, 8))
        nets = gen_nets(2, nodes, 10)
        save_nets(tmp_path / "n.jsonl", nets)
        assert load_nets(tmp_path / "n.jsonl") == nets
        assert all(len(n["nodes"]) >= 2 for n in nets)

    def test_bad_line(self, tmp_path):
        p = tmp_path / "n.jsonl"
        p.write_text('{"net": "a", "nodes": ["x", "y"]}\n{"net": "b"}\n')
        with pytest.raises(ParseError, match="line 2"):
            load_nets(p)
