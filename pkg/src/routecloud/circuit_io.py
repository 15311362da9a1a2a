"""Placement ingestion, grid assignment, raster file formats and synthetic circuits.

Node files
----------
CSV: optional ``#extent x0 y0 x1 y1`` line, then header ``id,x,y,w,h`` and
one node per row. JSONL: optional ``#extent`` line, then one JSON object per
line with keys ``id, x, y, w, h``. ``x, y`` are rectangle centers.

Grid files
----------
Rasters are stored as ``H x W`` arrays (row index = y cell).

* text (``.txt``): ``W H`` on the first line, then ``H`` lines of ``W`` decimals
* binary (``.cfg1``): magic ``CFG1``, ``uint32 W``, ``uint32 H`` (little endian),
  then ``W*H`` little-endian float32 values, row-major
* PGM (``.pgm``): 8-bit binary grayscale (``P5``) export for viewing
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, ValidationError

GRID_MAGIC = b"CFG1"
FIELDS = ("id", "x", "y", "w", "h")


@dataclass
class NodeSet:
    """Circuit components as rectangles: centers ``x, y`` and sizes ``w, h``."""

    ids: list
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    h: np.ndarray
    extent: tuple  # (x_min, y_min, x_max, y_max)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        for name in ("x", "y", "w", "h"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        n = len(self.ids)
        if not all(len(getattr(self, k)) == n for k in ("x", "y", "w", "h")):
            raise ValidationError("node field arrays have different lengths")
        bad = [self.ids[i] for i in np.flatnonzero(~((self.w > 0) & (self.h > 0)))]
        if bad:
            raise ValidationError(f"non-positive width/height for nodes: {', '.join(bad)}")
        self.extent = tuple(float(v) for v in self.extent)
        x0, y0, x1, y1 = self.extent
        outside = (self.x < x0) | (self.x > x1) | (self.y < y0) | (self.y > y1)
        if outside.any():
            names = ", ".join(self.ids[i] for i in np.flatnonzero(outside)[:10])
            raise ValidationError(f"node centers outside extent {self.extent}: {names}")

    @property
    def n(self):
        return len(self.ids)

    def as_array(self):
        """Raw ``n x 4`` matrix of ``(x, y, w, h)``."""
        return np.stack([self.x, self.y, self.w, self.h], axis=1) if self.n else np.zeros((0, 4))

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return NodeSet(
            [self.ids[i] for i in index], self.x[index], self.y[index], self.w[index], self.h[index], self.extent
        )

    @classmethod
    def from_array(cls, arr, extent=None, ids=None):
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
        if ids is None:
            ids = [f"n{i}" for i in range(len(arr))]
        if extent is None:
            extent = bounding_extent(arr)
        return cls(list(ids), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], extent)


def bounding_extent(arr):
    if len(arr) == 0:
        return (0.0, 0.0, 1.0, 1.0)
    x, y, w, h = arr.T
    return (
        float((x - w / 2).min()),
        float((y - h / 2).min()),
        float((x + w / 2).max()),
        float((y + h / 2).max()),
    )


def _parse_extent(line, lineno):
    parts = line[len("#extent"):].split()
    if len(parts) != 4:
        raise ParseError("#extent needs four numbers", lineno)
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ParseError(f"bad #extent value: {exc}", lineno) from None


def _record(values, lineno):
    try:
        return str(values["id"]), *(float(values[k]) for k in FIELDS[1:])
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad numeric value: {exc}", lineno) from None


def parse_nodes(path, format=None):
    """Read a node file (``csv`` or ``jsonl``; inferred from the suffix if omitted)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("csv", "jsonl"):
        raise ParseError(f"unknown node file format {fmt!r}")
    extent, rows = None, []
    with open(path, newline="") as fh:
        lines = list(enumerate(fh, start=1))
    body = []
    for lineno, line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#extent"):
            extent = _parse_extent(stripped, lineno)
        elif stripped.startswith("#"):
            continue
        else:
            body.append((lineno, stripped))

    if fmt == "csv":
        if not body:
            raise ParseError("missing header row id,x,y,w,h", 1)
        header_no, header = body[0]
        cols = [c.strip() for c in next(csv.reader([header]))]
        missing = [k for k in FIELDS if k not in cols]
        if missing:
            raise ParseError(f"header lacks {', '.join(missing)}", header_no)
        for lineno, line in body[1:]:
            cells = next(csv.reader([line]))
            if len(cells) < len(cols):
                raise ParseError(f"expected {len(cols)} fields, got {len(cells)}", lineno)
            rows.append(_record(dict(zip(cols, cells)), lineno))
    else:
        for lineno, line in body:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            rows.append(_record(obj, lineno))

    ids = [r[0] for r in rows]
    arr = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 4)
    bad = [ids[i] for i in np.flatnonzero(~((arr[:, 2] > 0) & (arr[:, 3] > 0)))]
    if bad:
        raise ValidationError(f"non-positive width/height for nodes: {', '.join(bad)}")
    return NodeSet.from_array(arr, extent=extent, ids=ids)


def write_nodes(path, nodes, format=None):
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    with open(path, "w", newline="") as fh:
        fh.write("#extent " + " ".join(repr(v) for v in nodes.extent) + "\n")
        if fmt == "csv":
            fh.write(",".join(FIELDS) + "\n")
            for i in range(nodes.n):
                vals = (nodes.x[i], nodes.y[i], nodes.w[i], nodes.h[i])
                fh.write(nodes.ids[i] + "," + ",".join(repr(float(v)) for v in vals) + "\n")
        elif fmt == "jsonl":
            for i in range(nodes.n):
                rec = {"id": nodes.ids[i], "x": float(nodes.x[i]), "y": float(nodes.y[i]),
                       "w": float(nodes.w[i]), "h": float(nodes.h[i])}
                fh.write(json.dumps(rec) + "\n")
        else:
            raise ParseError(f"unknown node file format {fmt!r}")


# ---------------------------------------------------------------------------
# normalization and grid assignment
# ---------------------------------------------------------------------------

@dataclass
class NormalizedCoords:
    """Node centers in base-grid cell units, ``0 <= x < W``, ``0 <= y < H``."""

    xy: np.ndarray  # n x 2
    resolution: tuple  # (W, H)

    @property
    def n(self):
        return self.xy.shape[0]


def _check_extent(extent):
    x0, y0, x1, y1 = extent
    if not (x1 > x0 and y1 > y0):
        raise ValidationError(f"extent {extent} has zero area")


def to_cell_units(values, lo, hi, cells):
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * cells


def normalize(nodes, base_resolution):
    """Map node centers linearly from the die extent onto ``W x H`` cells.

    A center exactly on the upper edge is clamped to the last cell.
    """
    _check_extent(nodes.extent)
    W, H = (int(v) for v in base_resolution)
    x0, y0, x1, y1 = nodes.extent
    xs = to_cell_units(nodes.x, x0, x1, W)
    ys = to_cell_units(nodes.y, y0, y1, H)
    xs = np.clip(xs, 0.0, np.nextafter(float(W), 0.0))
    ys = np.clip(ys, 0.0, np.nextafter(float(H), 0.0))
    return NormalizedCoords(np.stack([xs, ys], axis=1).reshape(-1, 2), (W, H))


def denormalize(coords, extent):
    x0, y0, x1, y1 = extent
    W, H = coords.resolution
    return np.stack(
        [coords.xy[:, 0] / W * (x1 - x0) + x0, coords.xy[:, 1] / H * (y1 - y0) + y0], axis=1
    )


@dataclass(frozen=True)
class GridSpec:
    """Grid cell size in base cells along x and y."""

    dx: int = 1
    dy: int = 1

    def __post_init__(self):
        if int(self.dx) != self.dx or int(self.dy) != self.dy or self.dx < 1 or self.dy < 1:
            raise ValidationError(f"grid size must be a positive integer, got ({self.dx}, {self.dy})")

    def shape(self, base_resolution):
        """Grid counts ``(w, h)`` covering a ``W x H`` base raster."""
        W, H = base_resolution
        return math.ceil(W / self.dx), math.ceil(H / self.dy)


@dataclass
class GridAssignment:
    """Which occupied grid each point falls in.

    ``cells`` lists the ``(gx, gy)`` coordinates of the ``m`` occupied grids in
    row-major scan order (y-major); ``segment_of[i]`` indexes into it.
    """

    segment_of: np.ndarray
    cells: np.ndarray  # m x 2 of (gx, gy)
    grid_shape: tuple  # (w, h)
    _segments: object = field(default=None, repr=False)

    @property
    def m(self):
        return self.cells.shape[0]

    @property
    def flat_cells(self):
        """Row-major flat index ``gy * w + gx`` of every occupied grid."""
        return self.cells[:, 1] * self.grid_shape[0] + self.cells[:, 0]

    @property
    def segments(self):
        if self._segments is None:
            from .ops import Segments

            self._segments = Segments(self.segment_of, self.m)
        return self._segments


def assign_grid(coords, spec):
    """Floor-divide normalized coords by the grid size; enumerate occupied grids."""
    w, h = spec.shape(coords.resolution)
    gx = np.floor(coords.xy[:, 0] / spec.dx).astype(np.int64)
    gy = np.floor(coords.xy[:, 1] / spec.dy).astype(np.int64)
    keys = gy * w + gx
    uniq, inverse = np.unique(keys, return_inverse=True)
    cells = np.stack([uniq % w, uniq // w], axis=1).astype(np.int64).reshape(-1, 2)
    return GridAssignment(inverse.reshape(-1).astype(np.int64), cells, (w, h))


# ---------------------------------------------------------------------------
# label / prediction rasters
# ---------------------------------------------------------------------------

@dataclass
class LabelGrid:
    """A ``H x W`` raster with values in ``[0, 1]``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError(f"grid must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("grid contains non-finite values")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("grid values outside [0, 1]")

    @property
    def W(self):
        return self.values.shape[1]

    @property
    def H(self):
        return self.values.shape[0]


def _grid_format(path, format):
    fmt = (format or Path(path).suffix.lstrip(".")).lower()
    if fmt not in ("txt", "cfg1", "pgm"):
        raise FormatError(f"unknown grid format {fmt!r}")
    return fmt


def save_grid(path, grid, format=None, prediction=False):
    """Write a raster as text, CFG1 binary or PGM.

    Out-of-range values are clamped (with a warning) for labels and
    rejected for predictions.
    """
    values = grid.values if isinstance(grid, LabelGrid) else np.asarray(grid, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError(f"grid must be 2-D, got shape {values.shape}")
    if values.size and (not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1):
        if prediction:
            raise ValidationError("prediction values outside [0, 1]")
        warnings.warn("label values outside [0, 1] clamped", stacklevel=2)
        values = np.clip(np.nan_to_num(values), 0.0, 1.0)
    fmt = _grid_format(path, format)
    H, W = values.shape
    if fmt == "txt":
        with open(path, "w") as fh:
            fh.write(f"{W} {H}\n")
            for row in values:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    elif fmt == "cfg1":
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC + struct.pack("<II", W, H))
            fh.write(values.astype("<f4").tobytes())
    else:
        pixels = np.round(values * 255.0).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())


def load_grid(path, format=None):
    """Read a text or CFG1 raster. Values outside [0, 1] are clamped with a warning."""
    fmt = _grid_format(path, format)
    if fmt == "cfg1":
        raw = Path(path).read_bytes()
        if raw[:4] != GRID_MAGIC or len(raw) < 12:
            raise FormatError(f"{path}: bad magic, expected CFG1")
        W, H = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 4 * W * H:
            raise FormatError(f"{path}: payload size does not match {W}x{H}")
        values = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64).reshape(H, W)
    elif fmt == "txt":
        with open(path) as fh:
            head = fh.readline().split()
            if len(head) != 2:
                raise FormatError(f"{path}: first line must be 'W H'")
            W, H = int(head[0]), int(head[1])
            rows = [line.split() for line in fh if line.strip()]
        if len(rows) != H or any(len(r) != W for r in rows):
            raise FormatError(f"{path}: body does not match {W}x{H}")
        values = np.array(rows, dtype=np.float64).reshape(H, W)
    else:
        raise FormatError("PGM is export-only")
    if values.size and (values.min() < 0 or values.max() > 1 or not np.all(np.isfinite(values))):
        warnings.warn(f"{path}: label values outside [0, 1] clamped", stacklevel=2)
        values = np.clip(np.nan_to_num(values), 0.0, 1.0)
    return LabelGrid(values)


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][:W * H], dtype=np.uint8).reshape(H, W), maxval


# ---------------------------------------------------------------------------
# rasterization and synthetic data
# ---------------------------------------------------------------------------

def rect_cells(nodes, resolution):
    """Node rectangles in base-cell units: arrays ``x_lo, x_hi, y_lo, y_hi``."""
    _check_extent(nodes.extent)
    W, H = resolution
    x0, y0, x1, y1 = nodes.extent
    xl = to_cell_units(nodes.x - nodes.w / 2, x0, x1, W)
    xh = to_cell_units(nodes.x + nodes.w / 2, x0, x1, W)
    yl = to_cell_units(nodes.y - nodes.h / 2, y0, y1, H)
    yh = to_cell_units(nodes.y + nodes.h / 2, y0, y1, H)
    return xl, xh, yl, yh


def add_rectangle(grid, xl, xh, yl, yh, value=1.0):
    """Add ``value * overlap_area`` to every cell a rectangle covers (cell area 1).

    Portions outside the raster are dropped.
    """
    H, W = grid.shape
    cx0, cx1 = max(int(math.floor(xl)), 0), min(int(math.ceil(xh)), W)
    cy0, cy1 = max(int(math.floor(yl)), 0), min(int(math.ceil(yh)), H)
    if cx0 >= cx1 or cy0 >= cy1:
        return
    xs = np.arange(cx0, cx1, dtype=np.float64)
    ys = np.arange(cy0, cy1, dtype=np.float64)
    ox = np.clip(np.minimum(xs + 1.0, xh) - np.maximum(xs, xl), 0.0, None)
    oy = np.clip(np.minimum(ys + 1.0, yh) - np.maximum(ys, yl), 0.0, None)
    grid[cy0:cy1, cx0:cx1] += value * np.outer(oy, ox)


def rasterize_area(nodes, resolution):
    """Covered area per cell, in cell-area units (unnormalized)."""
    W, H = resolution
    grid = np.zeros((H, W))
    if nodes.n == 0:
        return grid
    for rect in zip(*rect_cells(nodes, resolution)):
        add_rectangle(grid, *rect)
    return grid


def gaussian_kernel2d(size=5, sigma=1.0):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def blur(grid, size=5, sigma=1.0):
    """'Same'-size correlation with a normalized Gaussian, zero padding."""
    k = gaussian_kernel2d(size, sigma)
    p = size // 2
    H, W = grid.shape
    padded = np.pad(grid, p)
    out = np.zeros_like(grid)
    for a in range(size):
        for b in range(size):
            out += k[a, b] * padded[a:a + H, b:b + W]
    return out


def density_label(nodes, resolution):
    """Congestion proxy: blurred covered-area map scaled so its max is 1."""
    g = blur(rasterize_area(nodes, resolution))
    peak = g.max() if g.size else 0.0
    return LabelGrid(g / peak if peak > 0 else g)


def gen_synthetic(seed, n_nodes, n_clusters, base_resolution=(64, 64), cell_size=10.0,
                  cluster_sigma=None):
    """Seeded Gaussian-mixture placement and its blurred-density label.

    Node sizes are log-uniform in ``[0.5, 4]`` cells. ``cluster_sigma`` (in
    cells) fixes every cluster's spread; otherwise each cluster draws one
    from ``[2, W / 6]``.
    """
    if not n_nodes >= n_clusters >= 1:
        raise ValidationError("need n_nodes >= n_clusters >= 1")
    rng = np.random.default_rng(seed)
    W, H = base_resolution
    x1, y1 = W * cell_size, H * cell_size
    centers = rng.uniform(0.15, 0.85, size=(n_clusters, 2)) * (x1, y1)
    if cluster_sigma is None:
        sigmas = rng.uniform(2.0, max(W / 6.0, 2.5), size=n_clusters)
    else:
        sigmas = np.full(n_clusters, float(cluster_sigma))
    weights = rng.dirichlet(np.full(n_clusters, 2.0))
    which = rng.choice(n_clusters, size=n_nodes, p=weights)
    xy = centers[which] + rng.normal(size=(n_nodes, 2)) * (sigmas[which] * cell_size)[:, None]
    xy[:, 0] = np.clip(xy[:, 0], 0.0, x1)
    xy[:, 1] = np.clip(xy[:, 1], 0.0, y1)
    wh = np.exp(rng.uniform(np.log(0.5), np.log(4.0), size=(n_nodes, 2))) * cell_size
    nodes = NodeSet.from_array(np.column_stack([xy, wh]), extent=(0.0, 0.0, x1, y1))
    return nodes, density_label(nodes, base_resolution)


def gen_nets(seed, nodes, n_nets, max_degree=5, radius=None):
    """Random local nets over a node set (for the RUDY baseline demos)."""
    rng = np.random.default_rng(seed)
    if nodes.n < 2:
        return []
    x0, y0, x1, y1 = nodes.extent
    radius = radius if radius is not None else 0.05 * max(x1 - x0, y1 - y0)
    nets = []
    for k in range(n_nets):
        root = int(rng.integers(nodes.n))
        d = np.hypot(nodes.x - nodes.x[root], nodes.y - nodes.y[root])
        near = np.flatnonzero((d <= radius) & (np.arange(nodes.n) != root))
        if near.size == 0:
            near = np.argsort(d)[1:2]
        deg = int(rng.integers(1, max_degree))
        members = [root] + list(rng.choice(near, size=min(deg, near.size), replace=False))
        nets.append({"net": f"net{k}", "nodes": [nodes.ids[i] for i in members]})
    return nets
