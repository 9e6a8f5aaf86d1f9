"""Uniform planar grid and mapping of vector layers onto grid cells.

Polygon layers are intersected with each axis-aligned cell by
Sutherland-Hodgman clipping and measured with the shoelace formula.
Point layers are binned with half-open cell intervals.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

DEFAULT_CELL_SIZE = 1500.0
CLIP_TOL = 1e-9  # m^2
NONE_CLASS = "none"

EXTENSIVE = "extensive"
INTENSIVE = "intensive"
CATEGORICAL = "categorical"


class GeometryError(ValueError):
    """Raised for malformed layers or grids."""


@dataclass(frozen=True)
class GridCell:
    id: int
    row: int
    col: int
    centroid: tuple[float, float]


@dataclass(frozen=True)
class GridIndex:
    """Axis-aligned lattice of square cells.

    Cell ``(r, c)`` has id ``r * n_cols + c`` and spans
    ``[x0 + c*s, x0 + (c+1)*s) x [y0 + r*s, y0 + (r+1)*s)``.
    """

    n_rows: int
    n_cols: int
    cell_size: float = DEFAULT_CELL_SIZE
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise GeometryError("grid needs positive n_rows and n_cols")
        if not self.cell_size > 0:
            raise GeometryError("cell_size must be positive")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    @cached_property
    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), self.n_cols)

    @cached_property
    def cols(self) -> np.ndarray:
        return np.tile(np.arange(self.n_cols), self.n_rows)

    @cached_property
    def centroids(self) -> np.ndarray:
        x0, y0 = self.origin
        s = self.cell_size
        return np.column_stack([x0 + (self.cols + 0.5) * s, y0 + (self.rows + 0.5) * s])

    @property
    def cells(self) -> list[GridCell]:
        return [
            GridCell(i, int(r), int(c), (float(x), float(y)))
            for i, (r, c, (x, y)) in enumerate(zip(self.rows, self.cols, self.centroids))
        ]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.n_cols * self.cell_size, y0 + self.n_rows * self.cell_size

    def cell_box(self, cell_id: int) -> tuple[float, float, float, float]:
        r, c = divmod(int(cell_id), self.n_cols)
        x0, y0 = self.origin
        s = self.cell_size
        return x0 + c * s, y0 + r * s, x0 + (c + 1) * s, y0 + (r + 1) * s

    def cell_polygon(self, cell_id: int) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.cell_box(cell_id)
        return np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])

    def locate(self, xy: np.ndarray) -> np.ndarray:
        """Cell id of each point, ``-1`` outside the grid (half-open intervals)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x0, y0 = self.origin
        c = np.floor((xy[:, 0] - x0) / self.cell_size).astype(np.int64)
        r = np.floor((xy[:, 1] - y0) / self.cell_size).astype(np.int64)
        inside = (c >= 0) & (c < self.n_cols) & (r >= 0) & (r < self.n_rows)
        return np.where(inside, r * self.n_cols + c, -1)


# -- geometry primitives -----------------------------------------------------


def shoelace_area(polygon) -> float:
    """Signed area, positive for counter-clockwise vertices."""
    p = np.asarray(polygon, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_to_box(polygon, box: tuple[float, float, float, float]) -> list[tuple[float, float]]:
    """Clip a simple polygon to an axis-aligned rectangle (Sutherland-Hodgman).

    The subject may be concave; the result can then contain zero-width
    bridges, which do not affect its area.
    """
    xmin, ymin, xmax, ymax = box
    out = [tuple(map(float, v)) for v in polygon]
    # (axis, bound, keep_greater)
    for axis, bound, keep_ge in ((0, xmin, True), (0, xmax, False), (1, ymin, True), (1, ymax, False)):
        if not out:
            break
        inp, out = out, []

        def inside(p):
            return p[axis] >= bound if keep_ge else p[axis] <= bound

        def cross(a, b):
            t = (bound - a[axis]) / (b[axis] - a[axis])
            other = 1 - axis
            q = [0.0, 0.0]
            q[axis] = bound
            q[other] = a[other] + t * (b[other] - a[other])
            return tuple(q)

        s = inp[-1]
        for e in inp:
            if inside(e):
                if not inside(s):
                    out.append(cross(s, e))
                out.append(e)
            elif inside(s):
                out.append(cross(s, e))
            s = e
    return out


def _overlaps(grid: GridIndex, polygon: np.ndarray):
    """Yield ``(cell_id, intersected_area)`` for cells the polygon touches."""
    x0, y0 = grid.origin
    s = grid.cell_size
    c0 = max(int(math.floor((polygon[:, 0].min() - x0) / s)), 0)
    c1 = min(int(math.floor((polygon[:, 0].max() - x0) / s)), grid.n_cols - 1)
    r0 = max(int(math.floor((polygon[:, 1].min() - y0) / s)), 0)
    r1 = min(int(math.floor((polygon[:, 1].max() - y0) / s)), grid.n_rows - 1)
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            cid = r * grid.n_cols + c
            a = abs(shoelace_area(clip_to_box(polygon, grid.cell_box(cid))))
            if a > CLIP_TOL:
                yield cid, a


# -- layers ------------------------------------------------------------------


@dataclass
class PolygonLayer:
    polygons: list[np.ndarray]
    values: np.ndarray | None = None
    classes: list[str] | None = None
    name: str = "layer"

    def __post_init__(self):
        self.polygons = [np.asarray(p, dtype=float).reshape(-1, 2) for p in self.polygons]
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)
            if len(self.values) != len(self.polygons):
                raise GeometryError("one value per polygon required")
        if self.classes is not None and len(self.classes) != len(self.polygons):
            raise GeometryError("one class label per polygon required")


@dataclass
class PointLayer:
    points: np.ndarray
    weights: np.ndarray | None = None
    name: str = "points"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if len(self.weights) != len(self.points):
                raise GeometryError("one weight per point required")


@dataclass
class MappedColumn:
    """A single numeric per-cell column produced by one of the mappers."""

    name: str
    kind: str
    values: np.ndarray
    flagged: np.ndarray | None = None
    n_skipped: int = 0


@dataclass
class MappedCategorical:
    name: str
    labels: np.ndarray
    classes: list[str]

    @property
    def column_names(self) -> list[str]:
        return [f"{self.name}={c}" for c in self.classes]

    def one_hot(self) -> np.ndarray:
        return (self.labels[:, None] == np.asarray(self.classes, dtype=object)[None, :]).astype(float)


def map_areal_layer(grid: GridIndex, layer: PolygonLayer, mode: str = EXTENSIVE) -> MappedColumn:
    """Allocate polygon values to cells by intersected area.

    ``extensive`` splits each value in proportion to ``area(p & cell) / area(p)``;
    ``intensive`` takes the overlap-weighted mean of values per cell. Cells with
    no overlap in intensive mode get 0 and are flagged.
    """
    if layer.values is None:
        raise GeometryError("areal mapping needs numeric polygon values")
    if mode not in (EXTENSIVE, INTENSIVE):
        raise ValueError(f"unknown mode {mode!r}")
    acc = np.zeros(grid.n_cells)
    cover = np.zeros(grid.n_cells)
    skipped = 0
    for poly, v in zip(layer.polygons, layer.values):
        total = abs(shoelace_area(poly))
        if total <= CLIP_TOL:
            skipped += 1
            continue
        for cid, a in _overlaps(grid, poly):
            if mode == EXTENSIVE:
                acc[cid] += v * a / total
            else:
                acc[cid] += v * a
                cover[cid] += a
    if skipped:
        warnings.warn(f"{layer.name}: skipped {skipped} degenerate polygon(s)", stacklevel=2)
    flagged = None
    if mode == INTENSIVE:
        flagged = cover <= 0
        acc = np.divide(acc, cover, out=np.zeros_like(acc), where=~flagged)
    return MappedColumn(layer.name, mode, acc, flagged, skipped)


def map_categorical_layer(
    grid: GridIndex, layer: PolygonLayer, classes: Sequence[str] | None = None
) -> MappedCategorical:
    """Label each cell with its dominant class by intersected area.

    Ties go to the class with the smaller index, where the index is the order in
    ``classes`` (default: first appearance in the layer). Cells with no
    overlap are labelled ``"none"``.
    """
    if layer.classes is None:
        raise GeometryError("categorical mapping needs class labels")
    order = list(classes) if classes is not None else list(dict.fromkeys(layer.classes))
    missing = set(layer.classes) - set(order)
    if missing:
        raise GeometryError(f"labels not in class list: {sorted(missing)}")
    pos = {c: i for i, c in enumerate(order)}
    area = np.zeros((grid.n_cells, len(order)))
    for poly, label in zip(layer.polygons, layer.classes):
        if abs(shoelace_area(poly)) <= CLIP_TOL:
            continue
        for cid, a in _overlaps(grid, poly):
            area[cid, pos[label]] += a
    covered = area.sum(axis=1) > 0
    # argmax returns the first maximal index, which is the tie rule
    labels = np.array([order[i] for i in area.argmax(axis=1)], dtype=object)
    labels[~covered] = NONE_CLASS
    out_classes = order + ([NONE_CLASS] if not covered.all() and NONE_CLASS not in order else [])
    return MappedCategorical(layer.name, labels, out_classes)


def map_point_layer(grid: GridIndex, layer: PointLayer, normalize_by_area: bool = False) -> MappedColumn:
    cid = grid.locate(layer.points) if len(layer.points) else np.empty(0, dtype=np.int64)
    keep = cid >= 0
    w = np.ones(len(cid)) if layer.weights is None else layer.weights
    counts = np.bincount(cid[keep], weights=w[keep], minlength=grid.n_cells).astype(float)
    if normalize_by_area:
        counts /= grid.cell_area / 1e6
    return MappedColumn(layer.name, EXTENSIVE, counts, None, int((~keep).sum()))


# -- feature matrix ----------------------------------------------------------


@dataclass
class FeatureColumn:
    name: str
    kind: str
    sigma: float = float("nan")

    @property
    def in_dissimilarity(self) -> bool:
        return bool(self.sigma > 0)


@dataclass
class FeatureSchema:
    columns: list[FeatureColumn] = field(default_factory=list)

    def __post_init__(self):
        names = self.names
        if len(set(names)) != len(names):
            raise GeometryError("feature names must be unique")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def sigma(self) -> np.ndarray:
        return np.array([c.sigma for c in self.columns], dtype=float)

    def __len__(self):
        return len(self.columns)


@dataclass
class FeatureMatrix:
    schema: FeatureSchema
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema):
            raise GeometryError("values must be n_cells x n_features matching the schema")
        if not np.isfinite(self.values).all():
            raise GeometryError("feature matrix contains non-finite values")

    @property
    def names(self) -> list[str]:
        return self.schema.names

    def columns(self, names_or_prefix: Sequence[str] | str) -> np.ndarray:
        """Indices of columns selected by exact names or by a name prefix."""
        if isinstance(names_or_prefix, str):
            return np.array([i for i, n in enumerate(self.names) if n.startswith(names_or_prefix)], dtype=int)
        idx = {n: i for i, n in enumerate(self.names)}
        return np.array([idx[n] for n in names_or_prefix], dtype=int)


def column_sigma(values: np.ndarray) -> np.ndarray:
    """Population standard deviation per column; near-constant columns get 0."""
    values = np.asarray(values, dtype=float)
    sd = values.std(axis=0)
    scale = np.maximum(np.abs(values).max(axis=0), 1.0)
    return np.where(sd <= 1e-12 * scale, 0.0, sd)


def assemble_features(grid: GridIndex, layers: Sequence[MappedColumn | MappedCategorical]) -> FeatureMatrix:
    """Concatenate mapped layers in the given order and record per-column sigma."""
    cols, blocks = [], []
    for layer in layers:
        if isinstance(layer, MappedCategorical):
            block = layer.one_hot()
            cols += [FeatureColumn(n, CATEGORICAL) for n in layer.column_names]
        else:
            block = np.asarray(layer.values, dtype=float)[:, None]
            cols.append(FeatureColumn(layer.name, layer.kind))
        if block.shape[0] != grid.n_cells:
            raise GeometryError(f"layer {layer.name!r} has {block.shape[0]} rows, grid has {grid.n_cells}")
        blocks.append(block)
    values = np.hstack(blocks) if blocks else np.empty((grid.n_cells, 0))
    for col, s in zip(cols, column_sigma(values)):
        col.sigma = float(s)
    return FeatureMatrix(FeatureSchema(cols), values)


# -- I/O ---------------------------------------------------------------------


def read_layer_json(path_or_doc) -> PolygonLayer | PointLayer:
    """Parse the minimal layer document ``{"type": ..., "features": [...]}``."""
    if isinstance(path_or_doc, (str, Path)):
        doc = json.loads(Path(path_or_doc).read_text())
        name = Path(path_or_doc).stem
    else:
        doc, name = path_or_doc, "layer"
    name = doc.get("name", name)
    kind = doc.get("type")
    feats = doc.get("features")
    if kind not in ("polygon", "point") or not isinstance(feats, list):
        raise GeometryError("layer document needs type polygon|point and a features list")
    if kind == "point":
        pts = [f["geometry"] for f in feats]
        w = [f.get("weight", 1.0) for f in feats]
        has_w = any("weight" in f for f in feats)
        return PointLayer(np.array(pts, dtype=float).reshape(-1, 2), np.array(w) if has_w else None, name)
    polys = [f["geometry"] for f in feats]
    if feats and all("class" in f for f in feats):
        return PolygonLayer(polys, classes=[str(f["class"]) for f in feats], name=name)
    try:
        values = [float(f["value"]) for f in feats]
    except KeyError as exc:
        raise GeometryError("polygon features need a value or a class") from exc
    return PolygonLayer(polys, values=np.array(values), name=name)


def write_layer_json(path, layer: PolygonLayer | PointLayer) -> None:
    if isinstance(layer, PointLayer):
        feats = [{"geometry": list(map(float, p))} for p in layer.points]
        if layer.weights is not None:
            for f, w in zip(feats, layer.weights):
                f["weight"] = float(w)
        doc = {"type": "point", "name": layer.name, "features": feats}
    else:
        feats = []
        for i, poly in enumerate(layer.polygons):
            f = {"geometry": poly.tolist()}
            if layer.classes is not None:
                f["class"] = layer.classes[i]
            else:
                f["value"] = float(layer.values[i])
            feats.append(f)
        doc = {"type": "polygon", "name": layer.name, "features": feats}
    Path(path).write_text(json.dumps(doc))


def grid_frame(grid: GridIndex, features: FeatureMatrix | None = None, y=None) -> pd.DataFrame:
    df = pd.DataFrame(
        {
            "cell_id": np.arange(grid.n_cells),
            "row": grid.rows,
            "col": grid.cols,
            "cx": grid.centroids[:, 0],
            "cy": grid.centroids[:, 1],
        }
    )
    if features is not None:
        df = pd.concat([df, pd.DataFrame(features.values, columns=features.names)], axis=1)
    if y is not None:
        df["y"] = np.asarray(y, dtype=float)
    return df


def write_features_csv(path, grid: GridIndex, features: FeatureMatrix | None = None, y=None, comment=None) -> None:
    df = grid_frame(grid, features, y)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        df.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")


def grid_from_frame(df: pd.DataFrame) -> GridIndex:
    """Recover the lattice from cell_id,row,col,cx,cy columns."""
    for col in ("cell_id", "row", "col", "cx", "cy"):
        if col not in df.columns:
            raise GeometryError(f"missing column {col!r}")
    n_rows = int(df["row"].max()) + 1
    n_cols = int(df["col"].max()) + 1
    if len(df) != n_rows * n_cols or not np.array_equal(df["cell_id"].to_numpy(), np.arange(len(df))):
        raise GeometryError("grid CSV must list every cell once, ordered by cell_id")
    if n_cols > 1:
        size = float(np.median(np.diff(df["cx"].to_numpy()[:n_cols])))
    elif n_rows > 1:
        size = float(df["cy"].iloc[n_cols] - df["cy"].iloc[0])
    else:
        size = DEFAULT_CELL_SIZE
    x0 = float(df["cx"].iloc[0] - 0.5 * size)
    y0 = float(df["cy"].iloc[0] - 0.5 * size)
    return GridIndex(n_rows, n_cols, size, (x0, y0))


def read_features_csv(path) -> tuple[GridIndex, FeatureMatrix, np.ndarray | None]:
    df = pd.read_csv(path, comment="#")
    grid = grid_from_frame(df)
    feat_cols = [c for c in df.columns if c not in ("cell_id", "row", "col", "cx", "cy", "y")]
    values = df[feat_cols].to_numpy(dtype=float)
    cols = [FeatureColumn(c, CATEGORICAL if "=" in c else INTENSIVE, float(s)) for c, s in zip(feat_cols, column_sigma(values))]
    y = df["y"].to_numpy(dtype=float) if "y" in df.columns else None
    return grid, FeatureMatrix(FeatureSchema(cols), values), y
