"""Raster data model, tree-density rasterization, synthetic scenes, patches.

All geometry lives in a planar working frame measured in meters. Grids are
north-up: row 0 is the northern edge and ``y`` decreases with the row index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# Defaults taken from the reference-data description: 0.625 m hi-res grid,
# 20 m square kernel, 10 m output pixels.
HI_RES_GSD = 0.625
KERNEL_SIDE = 20.0
OUT_GSD = 10.0

TRAIN_MAX_CLOUD = 0.5
INFER_MAX_CLOUD = 0.1


class RasterError(ValueError):
    """Invalid raster input or parameterization."""


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel -> planar mapping; (origin_x, origin_y) is the NW corner."""

    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if not (self.pixel_size > 0 and math.isfinite(self.pixel_size)):
            raise RasterError(f"pixel_size must be positive, got {self.pixel_size}")

    def pixel_center(self, row, col):
        """Planar coordinates of pixel centers (works on scalars and arrays)."""
        x = self.origin_x + (np.asarray(col) + 0.5) * self.pixel_size
        y = self.origin_y - (np.asarray(row) + 0.5) * self.pixel_size
        return x, y

    def shifted(self, row: int, col: int) -> "GeoTransform":
        """Transform of a sub-window whose NW pixel is (row, col)."""
        return GeoTransform(
            self.origin_x + col * self.pixel_size,
            self.origin_y - row * self.pixel_size,
            self.pixel_size,
        )

    def to_tuple(self) -> tuple[float, float, float]:
        return (self.origin_x, self.origin_y, self.pixel_size)


@dataclass
class RasterGrid:
    """Multi-band grid, values shaped (bands, height, width)."""

    values: np.ndarray
    geotransform: GeoTransform
    nodata_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise RasterError(f"values must be (bands, h, w), got {self.values.shape}")
        if self.nodata_mask is None:
            self.nodata_mask = np.zeros(self.values.shape[1:], dtype=bool)
        self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
        if self.nodata_mask.shape != self.values.shape[1:]:
            raise RasterError("nodata_mask shape does not match raster")
        valid = ~self.nodata_mask
        if not np.all(np.isfinite(self.values[:, valid])):
            raise RasterError("non-finite values outside nodata mask")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def window(self, row: int, col: int, size: int) -> "RasterGrid":
        sl = np.s_[row:row + size, col:col + size]
        return RasterGrid(
            self.values[:, sl[0], sl[1]].copy(),
            self.geotransform.shifted(row, col),
            self.nodata_mask[sl].copy(),
        )

    def band(self, k: int) -> np.ndarray:
        return self.values[k]


@dataclass
class TreeAnnotationSet:
    """Tree centre points of one labelled block.

    ``bounds`` is (xmin, ymin, xmax, ymax) in meters and defines the extent of
    the rasterized density map.
    """

    points: np.ndarray
    bounds: tuple[float, float, float, float]
    block_id: str = "block"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise RasterError(f"degenerate bounds {self.bounds}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityResult:
    """Output of :func:`rasterize_density` with clipping accounting."""

    grid: RasterGrid
    dropped_mass: float
    n_trees: int

    @property
    def dropped_fraction(self) -> float:
        return self.dropped_mass / self.n_trees if self.n_trees else 0.0


def _integral_ratio(out_gsd: float, hi_res_gsd: float) -> int:
    ratio = out_gsd / hi_res_gsd
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9 * max(1.0, ratio):
        raise RasterError(
            f"hi_res_gsd={hi_res_gsd} does not divide out_gsd={out_gsd}"
        )
    return r


def _axis_weights(centers, lo_edge, n_hi, hi_gsd, ratio, kernel_side, n_out):
    """Per-tree kernel mass along one axis, binned to output pixels.

    Returns (first output index, weights shaped (n_trees, M), clipped
    fraction per tree). Mass landing outside the grid is zeroed.
    """
    half = kernel_side / 2.0
    lo = centers - half - lo_edge
    hi = centers + half - lo_edge
    span = int(math.ceil(kernel_side / hi_gsd)) + 1
    first = np.floor(lo / hi_gsd).astype(np.int64)
    cells = first[:, None] + np.arange(span)[None, :]
    left = cells * hi_gsd
    cover = np.minimum(hi[:, None], left + hi_gsd) - np.maximum(lo[:, None], left)
    cover = np.clip(cover, 0.0, None) / kernel_side
    outside = (cells < 0) | (cells >= n_hi)
    clipped = np.where(outside, cover, 0.0).sum(axis=1)
    cover[outside] = 0.0

    out = np.floor_divide(cells, ratio)
    out0 = out[:, :1]
    n_bins = int(math.ceil(span / ratio)) + 1
    binned = np.zeros((len(centers), n_bins))
    rows = np.repeat(np.arange(len(centers)), span)
    np.add.at(binned, (rows, (out - out0).ravel()), cover.ravel())
    idx = out0 + np.arange(n_bins)[None, :]
    binned[(idx < 0) | (idx >= n_out)] = 0.0
    return out0[:, 0], binned, clipped


def rasterize_density(
    trees: TreeAnnotationSet,
    hi_res_gsd: float = HI_RES_GSD,
    kernel_side: float = KERNEL_SIDE,
    out_gsd: float = OUT_GSD,
) -> DensityResult:
    """Spread each tree over a square kernel and sum hi-res cells per pixel.

    Every tree carries unit mass spread uniformly over a ``kernel_side`` square
    centred on it. Coverage of each hi-res cell is the exact overlap area, and
    hi-res cells are summed under each output pixel. The kernel is separable so
    the work is done one axis at a time. Mass falling outside the block bounds
    is dropped and reported in ``dropped_mass``.
    """
    if not kernel_side > 0:
        raise RasterError(f"kernel_side must be positive, got {kernel_side}")
    ratio = _integral_ratio(out_gsd, hi_res_gsd)
    xmin, ymin, xmax, ymax = trees.bounds
    width = int(round((xmax - xmin) / out_gsd))
    height = int(round((ymax - ymin) / out_gsd))
    if width < 1 or height < 1:
        raise RasterError(f"bounds {trees.bounds} smaller than one pixel")

    pts = trees.points
    outside = (
        (pts[:, 0] < xmin) | (pts[:, 0] > xmax) | (pts[:, 1] < ymin) | (pts[:, 1] > ymax)
    )
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise RasterError(f"tree {i} at {tuple(pts[i])} outside raster extent")

    gt = GeoTransform(xmin, ymax, out_gsd)
    dens = np.zeros((height, width))
    n = len(pts)
    if n == 0:
        return DensityResult(RasterGrid(dens, gt), 0.0, 0)

    c0, wx, clip_x = _axis_weights(pts[:, 0], xmin, width * ratio, hi_res_gsd, ratio, kernel_side, width)
    # rows run southwards, so measure y as distance below the northern edge
    r0, wy, clip_y = _axis_weights(ymax - pts[:, 1], 0.0, height * ratio, hi_res_gsd, ratio, kernel_side, height)

    mass = wy[:, :, None] * wx[:, None, :]
    rr = r0[:, None, None] + np.arange(wy.shape[1])[None, :, None]
    cc = c0[:, None, None] + np.arange(wx.shape[1])[None, None, :]
    rr, cc = np.broadcast_to(rr, mass.shape), np.broadcast_to(cc, mass.shape)
    keep = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width) & (mass > 0)
    np.add.at(dens, (rr[keep], cc[keep]), mass[keep])

    # a tree keeps (1 - clip_x)(1 - clip_y) of its mass
    dropped = math.fsum(clip_x + clip_y - clip_x * clip_y)
    if dropped > 0:
        log.info("rasterize_density %s: %.6g of %d tree masses clipped", trees.block_id, dropped, n)
    return DensityResult(RasterGrid(dens, gt), dropped, n)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class PlantingBlock:
    """Rectangular planting in meters relative to the scene NW corner."""

    x0: float
    y0: float
    x1: float
    y1: float
    spacing: float = 9.0
    pattern: str = "triangular"


@dataclass
class SpectralModel:
    """band_k = gain[c, k] * density + offset[c, k] + noise.

    ``c`` indexes the background class (soil/vegetation regime) of the scene.
    """

    gain: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.30, -0.20, 0.45, 0.10],
                [-0.25, 0.35, 0.15, 0.40],
                [0.10, 0.40, -0.30, 0.25],
                [0.45, 0.05, 0.20, -0.35],
                [-0.10, -0.30, 0.40, 0.30],
                [0.25, 0.30, 0.30, 0.05],
            ]
        )
    )
    offset: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.20, 0.30, 0.25, 0.40],
                [0.50, 0.20, 0.35, 0.15],
                [0.30, 0.55, 0.20, 0.30],
                [0.15, 0.25, 0.55, 0.45],
                [0.45, 0.45, 0.10, 0.20],
                [0.35, 0.10, 0.40, 0.55],
            ]
        )
    )
    cloud_brightness: float = 0.8

    @property
    def n_bands(self) -> int:
        return self.gain.shape[1]

    @property
    def n_classes(self) -> int:
        return self.gain.shape[0]


@dataclass
class SceneParams:
    width: int = 64
    height: int = 64
    origin_x: float = 0.0
    origin_y: float = 0.0
    gsd: float = OUT_GSD
    blocks: list[PlantingBlock] = field(default_factory=list)
    background_class: int = 0
    noise: float = 0.02
    texture: float = 0.03
    cloud_fraction: float = 0.0
    spectral: SpectralModel = field(default_factory=SpectralModel)


@dataclass
class Scene:
    image: RasterGrid
    density: RasterGrid
    cloud: RasterGrid
    trees: TreeAnnotationSet


def lattice_points(block: PlantingBlock) -> np.ndarray:
    """Lattice tree positions inside ``block`` (relative meters, y down)."""
    s = block.spacing
    if block.pattern == "square":
        xs = np.arange(block.x0 + s / 2, block.x1, s)
        ys = np.arange(block.y0 + s / 2, block.y1, s)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])
    if block.pattern == "triangular":
        row_step = s * math.sqrt(3) / 2
        pts = []
        for i, y in enumerate(np.arange(block.y0 + row_step / 2, block.y1, row_step)):
            shift = s / 2 if i % 2 else 0.0
            xs = np.arange(block.x0 + s / 4 + shift, block.x1, s)
            pts.append(np.column_stack([xs, np.full(len(xs), y)]))
        return np.concatenate(pts) if pts else np.zeros((0, 2))
    raise RasterError(f"unknown planting pattern {block.pattern!r}")


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def generate_synthetic_scene(seed: int, params: SceneParams) -> Scene:
    """Deterministic stand-in for one multispectral acquisition with labels."""
    if params.width < 32 or params.height < 32:
        raise RasterError(f"scene must be at least 32x32 pixels, got {params.width}x{params.height}")
    sp = params.spectral
    if not 0 <= params.background_class < sp.n_classes:
        raise RasterError(f"background_class {params.background_class} not in spectral model")
    if not 0.0 <= params.cloud_fraction <= 1.0:
        raise RasterError("cloud_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    ext_x, ext_y = params.width * params.gsd, params.height * params.gsd

    pts = [lattice_points(b) for b in params.blocks]
    rel = np.concatenate(pts) if pts else np.zeros((0, 2))
    rel = rel[(rel[:, 0] >= 0) & (rel[:, 0] <= ext_x) & (rel[:, 1] >= 0) & (rel[:, 1] <= ext_y)]
    world = np.column_stack([params.origin_x + rel[:, 0], params.origin_y - rel[:, 1]])
    trees = TreeAnnotationSet(
        world,
        (params.origin_x, params.origin_y - ext_y, params.origin_x + ext_x, params.origin_y),
    )
    density = rasterize_density(trees, out_gsd=params.gsd).grid

    c = params.background_class
    texture = params.texture * _smooth_field(rng, (params.height, params.width), 4.0)
    dens = density.values[0]
    image = (
        sp.gain[c][:, None, None] * dens[None]
        + sp.offset[c][:, None, None]
        + texture[None]
        + params.noise * rng.standard_normal((sp.n_bands, params.height, params.width))
    )

    if params.cloud_fraction > 0:
        u = _smooth_field(rng, (params.height, params.width), 6.0)
        ranks = u.ravel().argsort().argsort().reshape(u.shape) / (u.size - 1)
        cloud = np.clip((ranks - (1.0 - params.cloud_fraction)) / 0.05 + 0.5, 0.0, 1.0)
    else:
        cloud = np.zeros((params.height, params.width))
    image = image + sp.cloud_brightness * cloud[None]

    return Scene(
        RasterGrid(image, density.geotransform),
        density,
        RasterGrid(cloud, density.geotransform),
        trees,
    )


# ---------------------------------------------------------------------------
# Patches and fusion


@dataclass
class Patch:
    row: int
    col: int
    size: int
    grid: RasterGrid

    @property
    def center(self) -> tuple[float, float]:
        gt = self.grid.geotransform
        half = self.size * gt.pixel_size / 2
        return (gt.origin_x + half, gt.origin_y - half)

    def take(self, other: RasterGrid) -> RasterGrid:
        """Same window cut from an aligned raster (e.g. labels)."""
        return other.window(self.row, self.col, self.size)


def tiling_count(height: int, width: int, patch_size: int, stride: int) -> int:
    return ((height - patch_size) // stride + 1) * ((width - patch_size) // stride + 1)


def extract_patches(
    grid: RasterGrid,
    patch_size: int,
    stride: int,
    cloud: RasterGrid | None = None,
    max_cloud_prob: float = TRAIN_MAX_CLOUD,
) -> list[Patch]:
    """Tile ``grid`` into square patches, dropping cloudy or nodata ones."""
    if patch_size < 1 or stride < 1:
        raise RasterError("patch_size and stride must be >= 1")
    if patch_size > min(grid.height, grid.width):
        raise RasterError(f"patch_size {patch_size} exceeds grid {grid.height}x{grid.width}")
    cprob = None
    if cloud is not None:
        if cloud.values.shape[1:] != grid.values.shape[1:]:
            raise RasterError("cloud raster not aligned with grid")
        cprob = cloud.values[0]

    patches = []
    for r in range(0, grid.height - patch_size + 1, stride):
        for c in range(0, grid.width - patch_size + 1, stride):
            if grid.nodata_mask[r:r + patch_size, c:c + patch_size].any():
                continue
            if cprob is not None and cprob[r:r + patch_size, c:c + patch_size].max() > max_cloud_prob:
                continue
            patches.append(Patch(r, c, patch_size, grid.window(r, c, patch_size)))
    if not patches:
        log.warning("extract_patches: no patch passed the cloud/nodata filter")
    return patches


def late_fuse(predictions: list[RasterGrid]) -> RasterGrid:
    """Per-pixel mean over unmasked inputs; masked only where all inputs are."""
    if not predictions:
        raise RasterError("late_fuse needs at least one prediction")
    gt = predictions[0].geotransform
    shape = predictions[0].values.shape
    for p in predictions[1:]:
        if p.geotransform != gt or p.values.shape != shape:
            raise RasterError("late_fuse inputs do not share one geotransform/shape")
    vals = np.stack([p.values for p in predictions])
    valid = np.stack([~p.nodata_mask for p in predictions])[:, None]
    count = valid.sum(axis=0)
    # sorted summation keeps the result bit-identical under input permutation
    total = np.sort(np.where(valid, vals, 0.0), axis=0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return RasterGrid(mean, gt, count[0] == 0)
