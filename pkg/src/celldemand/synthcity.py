"""Synthetic cities with spatially autocorrelated, heavy-tailed demand.

Generative equations (per cell, all fields on the grid):

    L1, L2, L3 = standardised disk-smoothed white noise (radius rho)
    driver     = standardise(a * L1 + b * L2)          # L2 is hidden from features
    demand     = exp(mu + sigma * driver + g * L3 * 1[class == 1]) * m[class] * (1 + hotspots)
    pop        = 1000 * exp(0.6 * L1 + nu * e1)
    business   = m[class] * exp(0.5 * L1 + nu * e2)
    roads      = 5 + 2 * L3 + 0.5 * L1 + nu * e3
    poi        = Poisson(3 * m[class] * exp(0.4 * L1))
    infra      = 1[L1 + nu * e4 > 0.5]
    landuse    = one-hot context class

with ``e*`` i.i.d. standard normal, ``nu`` the feature noise level and
``g`` the context-specific response: only class 1 (commercial) demand follows
the road axis, so the feature-demand relation differs across contexts.
"""
from __future__ import annotations

from copy import deepcopy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geogrid import (
    INTENSIVE,
    FeatureMatrix,
    GridIndex,
    MappedCategorical,
    MappedColumn,
    PointLayer,
    PolygonLayer,
    assemble_features,
    column_sigma,
)

DEFAULT_CLASSES = ("residential", "commercial", "park")
DEFAULT_MULTIPLIERS = (1.0, 2.5, 0.4)
LAYOUTS = ("blocks", "radial", "voronoi")


class SchemaMismatch(ValueError):
    pass


@dataclass
class CityRecipe:
    name: str = "city"
    n_rows: int = 40
    n_cols: int = 40
    cell_size: float = 1500.0
    seed: int = 0
    smoothing_radius: float = 3.0
    log_mu: float = float(np.log(2000.0))
    log_sigma: float = 0.7
    hidden_share: float = 0.6
    n_context_classes: int = 3
    context_layout: str = "voronoi"
    context_regions: int = 0
    context_response: float = 0.8
    context_multipliers: tuple = DEFAULT_MULTIPLIERS
    feature_noise: float = 0.3
    hotspot_count: int = 3
    hotspot_amplitude: float = 1.0
    hotspot_radius: float = 2.0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one row and column")
        if not self.log_sigma > 0:
            raise ValueError("log_sigma must be positive")
        if self.smoothing_radius < 0:
            raise ValueError("smoothing_radius must be >= 0")
        if self.context_layout not in LAYOUTS:
            raise ValueError(f"context_layout must be one of {LAYOUTS}")
        if self.n_context_classes < 1:
            raise ValueError("need at least one context class")
        vals = [self.cell_size, self.log_mu, self.log_sigma, self.hidden_share, self.feature_noise,
                self.hotspot_amplitude, self.hotspot_radius]
        if not np.all(np.isfinite(vals)):
            raise ValueError("recipe parameters must be finite")
        self.context_multipliers = tuple(float(m) for m in self.context_multipliers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_multipliers"] = list(self.context_multipliers)
        return d

    @property
    def class_names(self) -> list[str]:
        k = self.n_context_classes
        if k <= len(DEFAULT_CLASSES):
            return list(DEFAULT_CLASSES[:k])
        return list(DEFAULT_CLASSES) + [f"class{i}" for i in range(len(DEFAULT_CLASSES), k)]

    def multiplier(self, i: int) -> float:
        return self.context_multipliers[i] if i < len(self.context_multipliers) else 1.0


@dataclass
class SyntheticCity:
    name: str
    grid: GridIndex
    demand: np.ndarray
    features: FeatureMatrix
    context: np.ndarray
    latent: np.ndarray
    recipe: CityRecipe = field(repr=False, default=None)

    def to_layers(self, seed: int = 0) -> dict:
        """Vector layers whose grid mapping reproduces landuse, pop and poi columns."""
        rng = np.random.default_rng(seed)
        g = self.grid
        squares = [g.cell_polygon(i) for i in range(g.n_cells)]
        pois = []
        counts = self.features.values[:, self.features.names.index("poi_count")].astype(int)
        for cid, c in enumerate(counts):
            xmin, ymin, xmax, ymax = g.cell_box(cid)
            u = rng.random((c, 2))
            pois.append(np.column_stack([xmin + u[:, 0] * (xmax - xmin), ymin + u[:, 1] * (ymax - ymin)]))
        return {
            "landuse": PolygonLayer(squares, classes=list(self.context), name="landuse"),
            "pop_density": PolygonLayer(
                squares, values=self.features.values[:, self.features.names.index("pop_density")], name="pop_density"
            ),
            "poi_count": PointLayer(np.vstack(pois) if pois else np.empty((0, 2)), name="poi_count"),
        }


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (xx**2 + yy**2 <= radius**2 + 1e-9).astype(float)
    return k / k.sum()


def smoothed_field(rng: np.random.Generator, shape: tuple[int, int], radius: float) -> np.ndarray:
    """Standardised white noise convolved with a disk of ``radius`` cells."""
    z = rng.standard_normal(shape)
    if radius > 0:
        z = ndimage.convolve(z, disk_kernel(radius), mode="reflect")
    return (z - z.mean()) / z.std()


def _context_layout(recipe: CityRecipe, rng: np.random.Generator) -> np.ndarray:
    nr, nc, k = recipe.n_rows, recipe.n_cols, recipe.n_context_classes
    rr, cc = np.mgrid[0:nr, 0:nc]
    if recipe.context_layout == "voronoi":
        n_seeds = recipe.context_regions or max(2 * k, (nr * nc) // 200)
        n_seeds = max(n_seeds, k)
        seeds = rng.random((n_seeds, 2)) * [nr, nc]
        seed_class = rng.permutation(np.arange(n_seeds) % k)
        _, nearest = cKDTree(seeds).query(np.column_stack([rr.ravel() + 0.5, cc.ravel() + 0.5]))
        return seed_class[nearest].reshape(nr, nc)
    if recipe.context_layout == "blocks":
        per_side = max(2, int(round(np.sqrt(recipe.context_regions)))) if recipe.context_regions else 5
        tile = max(2, min(nr, nc) // per_side)
        tr, tc = -(-nr // tile), -(-nc // tile)
        tiles = rng.permutation(np.arange(tr * tc) % k).reshape(tr, tc)
        return tiles[rr // tile, cc // tile]
    # radial: class 1 in the core, 0 around it, 2 at the edge, further classes in between
    d = np.hypot(rr + 0.5 - nr / 2, cc + 0.5 - nc / 2)
    ring = np.minimum((d / (d.max() + 1e-12) * k).astype(int), k - 1)
    order = [1, 0, 2] + list(range(3, k)) if k >= 3 else list(range(k))[::-1]
    return np.array(order)[ring]


def generate(recipe: CityRecipe) -> SyntheticCity:
    rng = np.random.default_rng(recipe.seed)
    shape = (recipe.n_rows, recipe.n_cols)
    rho = recipe.smoothing_radius
    L1 = smoothed_field(rng, shape, rho)
    L2 = smoothed_field(rng, shape, rho)
    L3 = smoothed_field(rng, shape, rho)
    ctx = _context_layout(recipe, rng)
    mult = np.array([recipe.multiplier(i) for i in range(recipe.n_context_classes)])[ctx]

    b = recipe.hidden_share
    driver = np.sqrt(1 - b**2) * L1 + b * L2 if b < 1 else L2
    driver = (driver - driver.mean()) / driver.std()

    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    bumps = np.zeros(shape)
    for _ in range(recipe.hotspot_count):
        r0, c0 = rng.random(2) * shape
        bumps += np.exp(-((rr + 0.5 - r0) ** 2 + (cc + 0.5 - c0) ** 2) / (2 * recipe.hotspot_radius**2))
    response = recipe.context_response * L3 * (ctx == 1) if recipe.n_context_classes > 1 else 0.0
    demand = np.exp(recipe.log_mu + recipe.log_sigma * driver + response) * mult * (1 + recipe.hotspot_amplitude * bumps)

    nu = recipe.feature_noise
    e = rng.standard_normal((4,) + shape)
    pop = 1000.0 * np.exp(0.6 * L1 + nu * e[0])
    business = mult * np.exp(0.5 * L1 + nu * e[1])
    roads = 5.0 + 2.0 * L3 + 0.5 * L1 + nu * e[2]
    poi = rng.poisson(3.0 * mult * np.exp(0.4 * L1)).astype(float)
    infra = (L1 + nu * e[3] > 0.5).astype(float)

    grid = GridIndex(recipe.n_rows, recipe.n_cols, recipe.cell_size)
    names = recipe.class_names
    labels = np.array([names[i] for i in ctx.ravel()], dtype=object)
    layers = [
        MappedColumn("pop_density", INTENSIVE, pop.ravel()),
        MappedColumn("business_density", INTENSIVE, business.ravel()),
        MappedColumn("road_density", INTENSIVE, roads.ravel()),
        MappedColumn("poi_count", "extensive", poi.ravel()),
        MappedColumn("cell_infra", INTENSIVE, infra.ravel()),
        MappedCategorical("landuse", labels, names),
    ]
    features = assemble_features(grid, layers)
    return SyntheticCity(recipe.name, grid, demand.ravel(), features, labels, driver.ravel(), recipe)


def multi_city(recipes) -> list[SyntheticCity]:
    cities = [generate(r) for r in recipes]
    if cities:
        schema = cities[0].features.names
        for c in cities[1:]:
            if c.features.names != schema:
                raise SchemaMismatch(f"city {c.name!r} has a different feature schema")
    return cities


@dataclass
class PointSet:
    """Cell centroids of several cities laid side by side (gap between grids)."""

    centroids: np.ndarray
    cell_size: float
    city: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.centroids)


@dataclass
class PooledCities:
    points: PointSet
    features: FeatureMatrix
    demand: np.ndarray
    names: list


def pool(cities, gap_cells: int = 10) -> PooledCities:
    """Stack cities into one dataset; grids are shifted along x so none overlap."""
    if not cities:
        raise ValueError("nothing to pool")
    schema = cities[0].features.names
    pts, offset = [], 0.0
    for c in cities:
        if c.features.names != schema:
            raise SchemaMismatch(f"city {c.name!r} has a different feature schema")
        p = c.grid.centroids.copy()
        p[:, 0] += offset - c.grid.origin[0]
        pts.append(p)
        offset += (c.grid.n_cols + gap_cells) * c.grid.cell_size
    values = np.vstack([c.features.values for c in cities])
    fm = assemble_features_like(cities[0].features, values)
    city = np.concatenate([np.full(c.grid.n_cells, i) for i, c in enumerate(cities)])
    return PooledCities(
        PointSet(np.vstack(pts), cities[0].grid.cell_size, city),
        fm,
        np.concatenate([c.demand for c in cities]),
        [c.name for c in cities],
    )


def assemble_features_like(template: FeatureMatrix, values: np.ndarray) -> FeatureMatrix:
    schema = deepcopy(template.schema)
    for col, s in zip(schema.columns, column_sigma(values)):
        col.sigma = float(s)
    return FeatureMatrix(schema, values)


# -- oracles -----------------------------------------------------------------
# Written against dense matrices with plain loops so they share no code path
# with the sparse implementations they check.


def _dense(weights) -> np.ndarray:
    m = getattr(weights, "matrix", weights)
    return m.toarray() if hasattr(m, "toarray") else np.asarray(m, dtype=float)


def oracle_moran_dense(y, weights) -> float:
    y = [float(v) for v in np.asarray(y).ravel()]
    n = len(y)
    if n > 2500:
        raise ValueError("dense oracle limited to n <= 2500")
    W = _dense(weights)
    ybar = sum(y) / n
    dev = [v - ybar for v in y]
    den = sum(d * d for d in dev)
    if den == 0 or max(y) == min(y):
        raise ValueError("Moran undefined: zero variance")
    num = 0.0
    total = 0.0
    for i in range(n):
        row = W[i]
        for j in np.flatnonzero(row):
            num += row[j] * dev[i] * dev[j]
            total += row[j]
        # zero entries contribute nothing to either sum
    return n / total * num / den


def oracle_local_moran_dense(y, weights) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    W = _dense(weights)
    dev = y - y.sum() / len(y)
    out = np.zeros(len(y))
    for i in range(len(y)):
        s = 0.0
        for j in range(len(y)):
            if W[i, j] != 0:
                s += W[i, j] * dev[j]
        out[i] = dev[i] * s
    return out


def oracle_sem_forward(lam: float, weights, noise_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(eps, u)`` with ``eps = (I - lam W)^-1 u`` by dense solve."""
    W = _dense(weights)
    n = len(W)
    if n > 2500:
        raise ValueError("dense oracle limited to n <= 2500")
    if not abs(lam) < 1:
        raise ValueError("|lambda| must be < 1")
    u = np.random.default_rng(noise_seed).standard_normal(n)
    A = np.eye(n) - lam * W
    try:
        eps = np.linalg.solve(A, u)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular SEM system") from exc
    return eps, u
