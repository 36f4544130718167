"""
System matrices and phantoms.

Parallel-beam geometry on a square grid centred at the origin. Row ``v * n_cells + c`` of the
Radon matrix is the ray at angle ``pi * v / n_views`` through detector cell ``c``; its entries are
the exact ray/pixel intersection lengths found by Siddon traversal. Pixel ``(ix, iy)`` has flat
index ``iy * grid_side + ix``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray
from scipy.sparse.linalg import norm as sparse_norm

from .errors import DimensionMismatchError
from .model import FloatArray, Image, Spectrum
from .rng import make_rng

logger = logging.getLogger(__name__)

_PARALLEL_EPS = 1e-15


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """n x d ray-weight matrix. Radon matrices are CSR; Gaussian ones are dense arrays."""

    matrix: sp.csr_matrix | FloatArray
    dense: bool = False
    _row_norms_sq: list[FloatArray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.dense:
            arr = np.ascontiguousarray(self.matrix, dtype=np.float64)
            if arr.ndim != 2:
                raise DimensionMismatchError(f"system matrix must be 2-D, got shape {arr.shape}")
            object.__setattr__(self, "matrix", arr)
        else:
            object.__setattr__(self, "matrix", sp.csr_matrix(self.matrix, dtype=np.float64))

    @classmethod
    def from_dense(cls, values: ArrayLike, *, sparse: bool = False) -> SystemMatrix:
        arr = np.asarray(values, dtype=np.float64)
        if sparse:
            return cls(sp.csr_matrix(arr), dense=False)
        return cls(arr, dense=True)

    @property
    def shape(self) -> tuple[int, int]:
        n, d = self.matrix.shape
        return int(n), int(d)

    @property
    def n_rows(self) -> int:
        return self.shape[0]

    @property
    def n_cols(self) -> int:
        return self.shape[1]

    def dot(self, x: FloatArray) -> FloatArray:
        """A x."""
        if x.shape[-1] != self.n_cols:
            raise DimensionMismatchError(f"vector has {x.shape[-1]} entries, matrix has {self.n_cols} columns")
        return np.asarray(self.matrix @ x, dtype=np.float64)

    def rdot(self, y: FloatArray) -> FloatArray:
        """A^T y."""
        if y.shape[0] != self.n_rows:
            raise DimensionMismatchError(f"vector has {y.shape[0]} entries, matrix has {self.n_rows} rows")
        return np.asarray(self.matrix.T @ y, dtype=np.float64)

    def row_norms_sq(self) -> FloatArray:
        """||a_i||^2 per row (cached)."""
        if not self._row_norms_sq:
            if self.dense:
                vals = np.einsum("ij,ij->i", self.matrix, self.matrix)
            else:
                vals = np.asarray(self.matrix.multiply(self.matrix).sum(axis=1)).ravel()
            self._row_norms_sq.append(vals)
        return self._row_norms_sq[0]

    def gram_frobenius(self) -> float:
        """||A A^T||_F without forming A A^T: ||A A^T||_F^2 = ||A^T A||_F^2 = trace((A^T A)^2)."""
        if self.dense:
            small = self.matrix.T @ self.matrix if self.n_cols <= self.n_rows else self.matrix @ self.matrix.T
            return float(np.linalg.norm(small))
        gram = (self.matrix.T @ self.matrix) if self.n_cols <= self.n_rows else (self.matrix @ self.matrix.T)
        return float(sparse_norm(gram))

    def to_dense(self) -> FloatArray:
        if self.dense:
            return np.array(self.matrix, copy=True)
        return np.asarray(self.matrix.toarray())


@dataclass(frozen=True)
class ParallelBeamGeometry:
    n_views: int
    n_cells: int
    grid_side: int
    pixel_size: float = 1.0

    def __post_init__(self) -> None:
        for name in ("n_views", "n_cells", "grid_side"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if not self.pixel_size > 0.0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size!r}")

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_cells

    @property
    def n_pixels(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def half_width(self) -> float:
        return 0.5 * self.grid_side * self.pixel_size

    @property
    def diagonal(self) -> float:
        return math.sqrt(2.0) * self.grid_side * self.pixel_size

    def angles(self) -> FloatArray:
        return np.pi * np.arange(self.n_views) / self.n_views

    def cell_offsets(self) -> FloatArray:
        pitch = self.diagonal / self.n_cells
        return (np.arange(self.n_cells) + 0.5 - self.n_cells / 2.0) * pitch

    def ray(self, view: int, cell: int) -> tuple[FloatArray, FloatArray]:
        """(point on the ray, unit direction) for one (view, cell) pair."""
        theta = float(self.angles()[view])
        s = float(self.cell_offsets()[cell])
        point = np.array([s * math.cos(theta), s * math.sin(theta)])
        direction = np.array([-math.sin(theta), math.cos(theta)])
        return point, direction


def _axis_alphas(p: float, u: float, lo: float, planes: FloatArray) -> tuple[float, float, FloatArray] | None:
    """Entry/exit parameters of the slab lo <= p + alpha u <= hi and the plane crossings."""
    hi = float(planes[-1])
    if abs(u) < _PARALLEL_EPS:
        if lo < p < hi:
            return -math.inf, math.inf, np.empty(0)
        return None
    alphas = (planes - p) / u
    return float(min(alphas[0], alphas[-1])), float(max(alphas[0], alphas[-1])), alphas


def siddon_trace(
    point: FloatArray, direction: FloatArray, grid_side: int, pixel_size: float
) -> tuple[NDArray[np.intp], FloatArray]:
    """Pixels crossed by the line ``point + alpha * direction`` and the chord length in each."""
    half = 0.5 * grid_side * pixel_size
    planes = -half + pixel_size * np.arange(grid_side + 1)
    ax = _axis_alphas(float(point[0]), float(direction[0]), -half, planes)
    ay = _axis_alphas(float(point[1]), float(direction[1]), -half, planes)
    if ax is None or ay is None:
        return np.empty(0, dtype=np.intp), np.empty(0)
    a_min = max(ax[0], ay[0])
    a_max = min(ax[1], ay[1])
    if not a_max > a_min:
        return np.empty(0, dtype=np.intp), np.empty(0)
    crossings = np.concatenate([ax[2], ay[2]])
    crossings = crossings[(crossings > a_min) & (crossings < a_max)]
    alphas = np.unique(np.concatenate([[a_min], crossings, [a_max]]))
    lengths = np.diff(alphas)
    mids = 0.5 * (alphas[:-1] + alphas[1:])
    mx = point[0] + mids * direction[0]
    my = point[1] + mids * direction[1]
    ix = np.clip(np.floor((mx + half) / pixel_size).astype(np.intp), 0, grid_side - 1)
    iy = np.clip(np.floor((my + half) / pixel_size).astype(np.intp), 0, grid_side - 1)
    keep = lengths > 1e-12 * pixel_size
    return (iy * grid_side + ix)[keep], lengths[keep]


def build_radon_matrix(geom: ParallelBeamGeometry) -> SystemMatrix:
    rows: list[NDArray[np.intp]] = []
    cols: list[NDArray[np.intp]] = []
    vals: list[FloatArray] = []
    row = 0
    for view in range(geom.n_views):
        for cell in range(geom.n_cells):
            point, direction = geom.ray(view, cell)
            pix, lengths = siddon_trace(point, direction, geom.grid_side, geom.pixel_size)
            rows.append(np.full(pix.size, row, dtype=np.intp))
            cols.append(pix)
            vals.append(lengths)
            row += 1
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_rays, geom.n_pixels),
    )
    matrix.sum_duplicates()
    logger.debug(
        "Built Radon matrix: %d views x %d cells on %d^2 grid (%d nonzeros)",
        geom.n_views,
        geom.n_cells,
        geom.grid_side,
        matrix.nnz,
    )
    return SystemMatrix(matrix)


def build_gaussian_matrix(n: int, d: int, seed: int) -> SystemMatrix:
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    rng = make_rng(seed, "gaussian_matrix")
    return SystemMatrix(rng.standard_normal((n, d)), dense=True)


@dataclass(frozen=True)
class CircularRegion:
    """Disc in pixel units relative to the grid centre."""

    cx: float
    cy: float
    radius: float
    value: float

    def mask(self, grid_side: int) -> NDArray[np.bool_]:
        xx, yy = pixel_centres(grid_side)
        return np.asarray((xx - self.cx) ** 2 + (yy - self.cy) ** 2 <= self.radius**2)


def pixel_centres(grid_side: int) -> tuple[FloatArray, FloatArray]:
    """Flat x and y coordinates of pixel centres in pixel units, origin at the grid centre."""
    c = np.arange(grid_side) + 0.5 - grid_side / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx.ravel(), yy.ravel()


PMMA_ROI_DENSITIES = (0.5, 0.8, 1.2, 1.5)
IODINE_CONCENTRATIONS = (0.2, 0.5, 1.0)


def pmma_regions(grid_side: int) -> list[CircularRegion]:
    """The four ROIs, at the half-radius points on the quadrant diagonals."""
    disc_r = 0.45 * grid_side
    offset = 0.5 * disc_r / math.sqrt(2.0)
    corners = ((offset, offset), (-offset, offset), (-offset, -offset), (offset, -offset))
    return [
        CircularRegion(cx, cy, 0.1 * grid_side, density)
        for (cx, cy), density in zip(corners, PMMA_ROI_DENSITIES, strict=True)
    ]


def make_pmma_phantom(grid_side: int) -> Image:
    if grid_side < 8:
        raise ValueError(f"grid_side must be >= 8 to place the ROIs, got {grid_side}")
    xx, yy = pixel_centres(grid_side)
    image = np.where(xx**2 + yy**2 <= (0.45 * grid_side) ** 2, 1.0, 0.0)
    for region in pmma_regions(grid_side):
        image[region.mask(grid_side)] = region.value
    return image


def iodine_regions(grid_side: int) -> list[CircularRegion]:
    out = []
    for k, conc in enumerate(IODINE_CONCENTRATIONS):
        angle = math.pi / 2.0 + 2.0 * math.pi * k / len(IODINE_CONCENTRATIONS)
        r = 0.2 * grid_side
        out.append(CircularRegion(r * math.cos(angle), r * math.sin(angle), 0.08 * grid_side, conc))
    return out


@dataclass(frozen=True, eq=False)
class ContrastScenario:
    """Known water/bone background pushed through A, plus the iodine-only unknown image."""

    exponents: FloatArray
    unknown: Image
    water: Image
    bone: Image
    regions: tuple[CircularRegion, ...]


def water_attenuations(spectrum: Spectrum) -> FloatArray:
    return 0.2 * spectrum.attenuations


def bone_attenuations(spectrum: Spectrum) -> FloatArray:
    mu = spectrum.attenuations
    return 0.5 * mu * np.sqrt(mu / mu.mean())


def make_contrast_scenario(
    grid_side: int,
    A: SystemMatrix,
    spectrum: Spectrum,
    *,
    background_scale: float = 1.0,
) -> ContrastScenario:
    """
    Water disc with a bone ring at its rim and three iodine circles inside.

    ``spectrum`` carries the iodine attenuations; water and bone use fixed multiples of them.
    ``exponents[i, j]`` is mu_water_j <a_i, x_water> + mu_bone_j <a_i, x_bone>.
    """
    if grid_side < 16:
        raise ValueError(f"grid_side must be >= 16 for the contrast scenario, got {grid_side}")
    if A.n_cols != grid_side * grid_side:
        raise DimensionMismatchError(f"system matrix has {A.n_cols} columns, grid has {grid_side * grid_side} pixels")
    if background_scale < 0.0:
        raise ValueError("background_scale must be >= 0")
    xx, yy = pixel_centres(grid_side)
    r2 = xx**2 + yy**2
    inner = (0.38 * grid_side) ** 2
    outer = (0.45 * grid_side) ** 2
    water = background_scale * np.where(r2 < inner, 1.0, 0.0)
    bone = background_scale * np.where((r2 >= inner) & (r2 <= outer), 1.0, 0.0)
    regions = tuple(iodine_regions(grid_side))
    unknown = np.zeros(grid_side * grid_side)
    for region in regions:
        unknown[region.mask(grid_side)] = region.value
    exponents = np.multiply.outer(A.dot(water), water_attenuations(spectrum)) + np.multiply.outer(
        A.dot(bone), bone_attenuations(spectrum)
    )
    return ContrastScenario(np.maximum(exponents, 0.0), unknown, water, bone, regions)


def region_means(
    image: Image, regions: list[CircularRegion] | tuple[CircularRegion, ...], grid_side: int
) -> list[float]:
    return [float(np.mean(image[r.mask(grid_side)])) for r in regions]
