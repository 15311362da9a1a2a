"""Hand-crafted feature rasters: cell density and RUDY.

Both work in base-cell units (a cell has area 1) and accumulate one
rectangle at a time in input order, so results are deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .circuit_io import _check_extent, add_rectangle, rasterize_area, to_cell_units
from .errors import ParseError, ValidationError


def cell_density_map(nodes, resolution, normalize=True):
    """Fraction of each cell covered by node rectangles.

    Overlapping nodes stack, so raw values can exceed 1; when they do the
    map is divided by its maximum. ``normalize=False`` returns the raw
    covered area, whose total equals the total node area (in cell units).
    """
    grid = rasterize_area(nodes, resolution)
    if normalize:
        peak = grid.max() if grid.size else 0.0
        if peak > 1.0:
            grid = grid / peak
    return grid


def load_nets(path):
    """JSONL nets: one ``{"net": id, "nodes": [ids]}`` object per line."""
    nets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                nets.append({"net": str(obj["net"]), "nodes": [str(i) for i in obj["nodes"]]})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad net record: {exc}", lineno) from None
    return nets


def save_nets(path, nets):
    Path(path).write_text("".join(json.dumps(n) + "\n" for n in nets))


def rudy_map(nets, nodes, resolution, normalize=True):
    """Rectangular uniform wire density.

    Each net spreads ``(w + h) / (w * h)`` over the bounding box of its
    member centers (in cells), weighted by each cell's overlap fraction. Box
    sides shorter than one cell are widened to one cell about their center.
    """
    _check_extent(nodes.extent)
    W, H = resolution
    x0, y0, x1, y1 = nodes.extent
    cx = to_cell_units(nodes.x, x0, x1, W)
    cy = to_cell_units(nodes.y, y0, y1, H)
    index = {nid: i for i, nid in enumerate(nodes.ids)}
    grid = np.zeros((H, W))
    for net in nets:
        members = net["nodes"] if isinstance(net, dict) else net
        unknown = [m for m in members if m not in index]
        if unknown:
            raise ValidationError(f"net {net.get('net', '?') if isinstance(net, dict) else '?'} "
                                  f"references unknown nodes: {', '.join(map(str, unknown))}")
        if len(members) < 2:
            raise ValidationError("every net needs at least two nodes")
        idx = [index[m] for m in members]
        xl, xh = float(cx[idx].min()), float(cx[idx].max())
        yl, yh = float(cy[idx].min()), float(cy[idx].max())
        if xh - xl < 1.0:
            mid = 0.5 * (xl + xh)
            xl, xh = mid - 0.5, mid + 0.5
        if yh - yl < 1.0:
            mid = 0.5 * (yl + yh)
            yl, yh = mid - 0.5, mid + 0.5
        wb, hb = xh - xl, yh - yl
        add_rectangle(grid, xl, xh, yl, yh, (wb + hb) / (wb * hb))
    if normalize:
        peak = grid.max() if grid.size else 0.0
        if peak > 0:
            grid = grid / peak
    return grid
