"""BEV rasterization of 2D Gaussians by weighted summation.

Each Gaussian contributes ``w(c) = opacity * exp(-0.5 * d^T Q d)`` at a cell
center ``c``, with ``d = c - mean_xy`` and ``Q = inv(cov2)``. Contributions
are plain sums over Gaussians per channel; there is no depth ordering and no
alpha compositing. A Gaussian touches only the cells of its footprint (the
axis-aligned bounding box of its ``k_sigma`` ellipse, via the marginal
standard deviations) and only where ``w >= w_min``.

The production path bins footprints into fixed 16x16-cell tiles and
evaluates each tile densely over its binned Gaussians, which keeps the work
vectorized without making output depend on tile alignment (the footprint
rectangle is re-applied inside the tile). `splat_reference` is the slow
oracle: every Gaussian against every cell, only the ``w_min`` cutoff. The
two agree to float64 summation error whenever ``k_sigma`` is large enough
that the ellipse cutoff is subsumed by ``w_min`` (``k_sigma >= 4.3`` for the
default ``w_min = 1e-4``).

Accumulation runs in float64. Before accumulation, Gaussians are sorted by
their content (means, covariances, opacity, features), so any permutation
of the input produces a bitwise-identical map.

Grid layout: ``data[channel, iy, ix]`` with ``x = x_min + (ix + 0.5) * cell``
and ``y = y_min + (iy + 0.5) * cell``.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import FeatureLengthMismatch, FormatError, ShapeMismatch

TILE = 16

FMAP_MAGIC = b"RAYBEV.FEATMAP\x00\x00"
FMAP_VERSION = 1


@dataclass(frozen=True)
class BevGridSpec:
    """Axis-aligned BEV grid with square cells.

    Extents must be positive integer multiples of ``cell``.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float
    channels: int

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell
            if hi <= lo or abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{name} extent [{lo}, {hi}] is not a positive multiple of cell {self.cell}")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.width, dtype=np.float64) + 0.5) * self.cell

    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.height, dtype=np.float64) + 0.5) * self.cell


@dataclass
class FeatureMap:
    """Dense BEV feature raster, ``data[channel, iy, ix]`` in float64."""

    data: np.ndarray
    grid: BevGridSpec

    def __post_init__(self):
        expected = (self.grid.channels, self.grid.height, self.grid.width)
        if self.data.shape != expected:
            raise ShapeMismatch(f"feature map data {self.data.shape} does not match grid {expected}")

    @staticmethod
    def zeros(grid: BevGridSpec) -> "FeatureMap":
        return FeatureMap(np.zeros((grid.channels, grid.height, grid.width)), grid)

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.data.copy(), self.grid)


@dataclass(frozen=True)
class Footprint:
    """Inclusive cell-index rectangle touched by one Gaussian."""

    ix_lo: int
    ix_hi: int
    iy_lo: int
    iy_hi: int


def footprint(mean_xy, cov2, grid: BevGridSpec, k_sigma: float = 3.0) -> Footprint | None:
    """Cell rectangle covered by the k-sigma ellipse bounding box.

    Half extents are ``k_sigma * sqrt(diag(cov2))``; a cell belongs to the
    footprint when its center falls inside the box. Returns None when no
    cell center does (entirely off-grid or sub-cell box between centers).
    """
    m = np.asarray(mean_xy, dtype=np.float64)
    c = np.asarray(cov2, dtype=np.float64)
    if m.shape != (2,) or c.shape != (2, 2):
        raise ShapeMismatch(f"expected (2,) mean and (2, 2) cov, got {m.shape} and {c.shape}")
    if c[0, 0] <= 0 or c[1, 1] <= 0:
        raise ValueError("cov2 must have positive diagonal")
    rect = _footprint_arrays(m[None, :], c[None, :, :], grid, k_sigma)
    if rect is None or not rect[4][0]:
        return None
    return Footprint(int(rect[0][0]), int(rect[1][0]), int(rect[2][0]), int(rect[3][0]))


def _footprint_arrays(mean_xy, cov2, grid, k_sigma):
    """Vectorized footprint rectangles; returns (ix_lo, ix_hi, iy_lo, iy_hi, keep)."""
    n = mean_xy.shape[0]
    if n == 0:
        return None
    hx = k_sigma * np.sqrt(cov2[:, 0, 0])
    hy = k_sigma * np.sqrt(cov2[:, 1, 1])
    ix_lo = np.ceil((mean_xy[:, 0] - hx - grid.x_min) / grid.cell - 0.5).astype(np.int64)
    ix_hi = np.floor((mean_xy[:, 0] + hx - grid.x_min) / grid.cell - 0.5).astype(np.int64)
    iy_lo = np.ceil((mean_xy[:, 1] - hy - grid.y_min) / grid.cell - 0.5).astype(np.int64)
    iy_hi = np.floor((mean_xy[:, 1] + hy - grid.y_min) / grid.cell - 0.5).astype(np.int64)
    keep = (
        (ix_lo <= ix_hi)
        & (iy_lo <= iy_hi)
        & (ix_hi >= 0)
        & (iy_hi >= 0)
        & (ix_lo <= grid.width - 1)
        & (iy_lo <= grid.height - 1)
    )
    np.clip(ix_lo, 0, grid.width - 1, out=ix_lo)
    np.clip(ix_hi, 0, grid.width - 1, out=ix_hi)
    np.clip(iy_lo, 0, grid.height - 1, out=iy_lo)
    np.clip(iy_hi, 0, grid.height - 1, out=iy_hi)
    return ix_lo, ix_hi, iy_lo, iy_hi, keep


def _exponent(qa, qb, qd, dx, dy):
    """Negative half Mahalanobis form; broadcasts dx against dy."""
    return -0.5 * (qa * dx * dx + 2.0 * qb * dx * dy + qd * dy * dy)


def _inverse_cov2(cov2):
    """Closed-form inverses of (n, 2, 2) SPD matrices as (qa, qb, qd)."""
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    d = cov2[:, 1, 1]
    det = a * d - b * b
    if np.any(det <= 0) or np.any(a <= 0) or np.any(d <= 0):
        raise ValueError("cov2 entries must be symmetric positive definite")
    return d / det, -b / det, a / det


def _canonical_order(mean_xy, cov2, opacity, feature):
    keys = [feature[:, j] for j in range(feature.shape[1] - 1, -1, -1)]
    keys += [opacity, cov2[:, 1, 1], cov2[:, 0, 1], cov2[:, 0, 0], mean_xy[:, 1], mean_xy[:, 0]]
    return np.lexsort(keys)


def _check_splat_inputs(mean_xy, cov2, opacity, feature, grid):
    mean_xy = np.asarray(mean_xy, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    feature = np.asarray(feature, dtype=np.float64)
    n = mean_xy.shape[0]
    if mean_xy.shape != (n, 2) or cov2.shape != (n, 2, 2) or opacity.shape != (n,):
        raise ShapeMismatch(
            f"inconsistent batch shapes: mean {mean_xy.shape}, cov {cov2.shape}, opacity {opacity.shape}"
        )
    if feature.ndim != 2 or feature.shape[0] != n:
        raise ShapeMismatch(f"feature batch must be (n, c), got {feature.shape}")
    if feature.shape[1] != grid.channels:
        raise FeatureLengthMismatch(
            f"feature length {feature.shape[1]} does not match grid channels {grid.channels}"
        )
    return mean_xy, cov2, opacity, feature


def splat_arrays(
    mean_xy,
    cov2,
    opacity,
    feature,
    grid: BevGridSpec,
    *,
    k_sigma: float = 3.0,
    w_min: float = 1e-4,
    threads: int = 1,
) -> FeatureMap:
    """Rasterize a batch of 2D Gaussians given as arrays.

    Args:
        mean_xy: (n, 2) means in BEV coordinates.
        cov2: (n, 2, 2) SPD covariances.
        opacity: (n,) opacities in [0, 1].
        feature: (n, channels) per-Gaussian features.
        grid: output raster.
        k_sigma: footprint ellipse multiplier.
        w_min: weight cutoff below which contributions are dropped.
        threads: worker threads for per-tile accumulation (tiles own
            disjoint output slices, so the result is thread-count invariant).

    Returns:
        FeatureMap with float64 per-cell feature sums.
    """
    mean_xy, cov2, opacity, feature = _check_splat_inputs(mean_xy, cov2, opacity, feature, grid)
    out = FeatureMap.zeros(grid)
    n = mean_xy.shape[0]
    if n == 0:
        return out

    order = _canonical_order(mean_xy, cov2, opacity, feature)
    mean_xy, cov2, opacity, feature = mean_xy[order], cov2[order], opacity[order], feature[order]

    qa, qb, qd = _inverse_cov2(cov2)
    rect = _footprint_arrays(mean_xy, cov2, grid, k_sigma)
    ix_lo, ix_hi, iy_lo, iy_hi, keep = rect

    tiles: dict[tuple[int, int], list[int]] = {}
    for g in np.flatnonzero(keep):
        for ty in range(iy_lo[g] // TILE, iy_hi[g] // TILE + 1):
            for tx in range(ix_lo[g] // TILE, ix_hi[g] // TILE + 1):
                tiles.setdefault((ty, tx), []).append(g)

    xs = grid.x_centers()
    ys = grid.y_centers()

    def run_tile(key):
        ty, tx = key
        gs = np.asarray(tiles[key], dtype=np.int64)
        y0, y1 = ty * TILE, min((ty + 1) * TILE, grid.height)
        x0, x1 = tx * TILE, min((tx + 1) * TILE, grid.width)
        cy = ys[y0:y1]
        cx = xs[x0:x1]
        dx = cx[None, None, :] - mean_xy[gs, 0][:, None, None]
        dy = cy[None, :, None] - mean_xy[gs, 1][:, None, None]
        e = _exponent(qa[gs][:, None, None], qb[gs][:, None, None], qd[gs][:, None, None], dx, dy)
        w = opacity[gs][:, None, None] * np.exp(e)
        iy = np.arange(y0, y1)
        ix = np.arange(x0, x1)
        in_rect = (
            (iy[None, :, None] >= iy_lo[gs][:, None, None])
            & (iy[None, :, None] <= iy_hi[gs][:, None, None])
            & (ix[None, None, :] >= ix_lo[gs][:, None, None])
            & (ix[None, None, :] <= ix_hi[gs][:, None, None])
        )
        w *= (w >= w_min) & in_rect
        # Accumulate one Gaussian at a time, in canonical index order: blocked
        # reductions (tensordot/BLAS) regroup terms by list length, which would
        # make the sums depend on tile membership. Fixed-order summation keeps
        # maps bit-reproducible and integer-cell translations exact.
        patch = np.zeros((feature.shape[1], y1 - y0, x1 - x0))
        for j in range(len(gs)):
            wj = w[j]
            if wj.any():
                patch += feature[gs[j]][:, None, None] * wj
        out.data[:, y0:y1, x0:x1] += patch

    keys = sorted(tiles)
    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, keys))
    else:
        for key in keys:
            run_tile(key)
    return out


def splat(gaussians, grid: BevGridSpec, *, k_sigma: float = 3.0, w_min: float = 1e-4, threads: int = 1) -> FeatureMap:
    """Rasterize a sequence of `Bev2DGaussian` primitives. See `splat_arrays`."""
    n = len(gaussians)
    if n == 0:
        return FeatureMap.zeros(grid)
    mean_xy = np.stack([np.asarray(g.mean_xy, dtype=np.float64) for g in gaussians])
    cov2 = np.stack([np.asarray(g.cov2, dtype=np.float64) for g in gaussians])
    opacity = np.array([g.opacity for g in gaussians], dtype=np.float64)
    feature = np.stack([np.asarray(g.feature, dtype=np.float64) for g in gaussians])
    return splat_arrays(mean_xy, cov2, opacity, feature, grid, k_sigma=k_sigma, w_min=w_min, threads=threads)


def splat_reference(mean_xy, cov2, opacity, feature, grid: BevGridSpec, *, w_min: float = 1e-4) -> FeatureMap:
    """Dense oracle: every Gaussian against every cell, only the w_min cutoff."""
    mean_xy, cov2, opacity, feature = _check_splat_inputs(mean_xy, cov2, opacity, feature, grid)
    out = FeatureMap.zeros(grid)
    n = mean_xy.shape[0]
    if n == 0:
        return out
    order = _canonical_order(mean_xy, cov2, opacity, feature)
    qa, qb, qd = _inverse_cov2(cov2)
    xs = grid.x_centers()
    ys = grid.y_centers()
    for g in order:
        dx = xs[None, :] - mean_xy[g, 0]
        dy = ys[:, None] - mean_xy[g, 1]
        w = opacity[g] * np.exp(_exponent(qa[g], qb[g], qd[g], dx, dy))
        w *= w >= w_min
        out.data += feature[g][:, None, None] * w[None, :, :]
    return out


@dataclass
class GaussianPatch:
    """One Gaussian's masked weights over its footprint, for gradient work."""

    fp: Footprint
    w: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    qa: float
    qb: float
    qd: float


def gaussian_patch(mean_xy, cov2, opacity, grid: BevGridSpec, *, k_sigma: float = 3.0, w_min: float = 1e-4) -> GaussianPatch | None:
    """Masked weight patch of a single Gaussian over its footprint cells.

    Matches the weights `splat_arrays` produces for the same primitive
    (same centers, same exponent expression, same cutoffs).
    """
    m = np.asarray(mean_xy, dtype=np.float64)
    c = np.asarray(cov2, dtype=np.float64)
    fp = footprint(m, c, grid, k_sigma)
    if fp is None:
        return None
    qa, qb, qd = _inverse_cov2(c[None, :, :])
    xs = grid.x_centers()[fp.ix_lo : fp.ix_hi + 1]
    ys = grid.y_centers()[fp.iy_lo : fp.iy_hi + 1]
    dx = xs - m[0]
    dy = ys - m[1]
    w = float(opacity) * np.exp(_exponent(qa[0], qb[0], qd[0], dx[None, :], dy[:, None]))
    w *= w >= w_min
    return GaussianPatch(fp=fp, w=w, dx=dx, dy=dy, qa=float(qa[0]), qb=float(qb[0]), qd=float(qd[0]))


def pillar_scatter(points_xy, feature, grid: BevGridSpec) -> FeatureMap:
    """Baseline scatter: max-pool point features into their containing cells.

    Each point lands in exactly one cell (the one containing its x/y);
    points outside the grid bounds are dropped and untouched cells stay 0.
    Accepts (n, 2) positions or (n, 3) points whose z is ignored.
    """
    pts = np.asarray(points_xy, dtype=np.float64)
    feat = np.asarray(feature, dtype=np.float64)
    n = pts.shape[0]
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ShapeMismatch(f"points must be (n, 2) or (n, 3), got {pts.shape}")
    if feat.shape != (n, grid.channels):
        raise FeatureLengthMismatch(
            f"feature shape {feat.shape} does not match ({n}, {grid.channels})"
        )
    out = FeatureMap.zeros(grid)
    if n == 0:
        return out
    ix = np.floor((pts[:, 0] - grid.x_min) / grid.cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_min) / grid.cell).astype(np.int64)
    ok = (ix >= 0) & (ix < grid.width) & (iy >= 0) & (iy < grid.height)
    flat = iy[ok] * grid.width + ix[ok]
    pooled = np.full((grid.channels, grid.height * grid.width), -np.inf)
    for ch in range(grid.channels):
        np.maximum.at(pooled[ch], flat, feat[ok, ch])
    occupied = np.zeros(grid.height * grid.width, dtype=bool)
    occupied[flat] = True
    pooled[:, ~occupied] = 0.0
    out.data[:] = pooled.reshape(grid.channels, grid.height, grid.width)
    return out


def save_feature_map(path, fmap: FeatureMap) -> None:
    """Write a feature map: 16-byte magic, u32 version/C/H/W, f64 grid, f32 data.

    All integers and floats are little-endian; the payload is channel-major
    (C, H, W) float32.
    """
    g = fmap.grid
    header = FMAP_MAGIC + struct.pack(
        "<4I5d", FMAP_VERSION, g.channels, g.height, g.width, g.x_min, g.x_max, g.y_min, g.y_max, g.cell
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_feature_map(path) -> FeatureMap:
    """Read a feature map written by `save_feature_map`; validates layout."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head_len = len(FMAP_MAGIC) + struct.calcsize("<4I5d")
    if len(raw) < head_len or raw[: len(FMAP_MAGIC)] != FMAP_MAGIC:
        raise FormatError(f"{path}: not a feature map file")
    version, c, h, w, x_min, x_max, y_min, y_max, cell = struct.unpack(
        "<4I5d", raw[len(FMAP_MAGIC) : head_len]
    )
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported feature map version {version}")
    expected = head_len + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw) - head_len} does not match header shape")
    try:
        grid = BevGridSpec(x_min=x_min, x_max=x_max, y_min=y_min, y_max=y_max, cell=cell, channels=c)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from exc
    if grid.height != h or grid.width != w:
        raise FormatError(f"{path}: header shape ({h}, {w}) does not match grid bounds")
    data = np.frombuffer(raw[head_len:], dtype="<f4").astype(np.float64).reshape(c, h, w)
    return FeatureMap(data, grid)
