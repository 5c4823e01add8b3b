"""Point-cloud containers, neighbor search, plane fitting, normal estimation.

Frames hold raw per-point data; a uniform-grid index answers exact k-NN and
radius queries with deterministic tie-breaking (distance, then point id).
Plane fits are total least squares: the smallest-eigenvector of the 3x3
scatter matrix of the centered points.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, EmptyFrame

# Two (near-)zero scatter eigenvalues relative to the largest mean the points
# are collinear or coincident and no unique plane exists.
_DEGENERATE_REL_TOL = 1e-12


@dataclass
class PointFrame:
    """One frame of a point-cloud video: N positions plus optional extras."""

    positions: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None
    frame_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.positions.shape:
                raise ValueError("normals must match positions shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length (within 1e-6)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.positions),):
                raise ValueError("labels length must equal point count")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class PointSequence:
    """An ordered list of frames with frame_index running 0..L-1."""

    frames: list[PointFrame] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a sequence needs at least one frame")
        for t, fr in enumerate(self.frames):
            if fr.frame_index != t:
                raise ValueError(
                    f"frame_index must increase from 0; frame {t} has {fr.frame_index}"
                )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class PlaneParams:
    """Plane a*x + b*y + c*z + d = 0 with unit normal and canonical sign."""

    normal: np.ndarray
    offset: float
    rms_residual: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Orthogonal distances of points (m x 3) to the plane."""
        return np.abs(points @ self.normal + self.offset)


def canonical_sign(normal: np.ndarray, offset: float = 0.0):
    """Flip (normal, offset) so the first nonzero normal component is positive."""
    for c in normal:
        if c != 0.0:
            if c < 0.0:
                return -normal, -offset
            break
    return normal, offset


class NeighborIndex:
    """Uniform-grid spatial index over one frame's positions.

    Queries are exact: candidates are collected cell ring by cell ring and
    sorted by (squared distance, point id), so results match an exhaustive
    scan including the tie rule.
    """

    def __init__(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=np.float64)
        if len(positions) == 0:
            raise EmptyFrame("cannot index an empty frame")
        self.positions = positions
        self.n = len(positions)
        lo = positions.min(axis=0)
        hi = positions.max(axis=0)
        extent = float(np.max(hi - lo))
        # Aim for O(1) points per cell; degenerate (single point / coincident
        # cloud) falls back to one cell.
        ncells = max(1, int(round(self.n ** (1.0 / 3.0))))
        self.cell = extent / ncells if extent > 0 else 1.0
        self.origin = lo
        coords = np.floor((positions - lo) / self.cell).astype(np.int64)
        self._grid: dict[tuple[int, int, int], list[int]] = {}
        for i, (cx, cy, cz) in enumerate(coords):
            self._grid.setdefault((int(cx), int(cy), int(cz)), []).append(i)
        self._cmin = coords.min(axis=0)
        self._cmax = coords.max(axis=0)

    def _cell_of(self, query: np.ndarray) -> tuple[int, int, int]:
        c = np.floor((query - self.origin) / self.cell).astype(np.int64)
        return int(c[0]), int(c[1]), int(c[2])

    def _cover_ring(self, center: tuple[int, int, int]) -> int:
        """Ring radius at which every occupied cell has been visited."""
        return int(
            max(
                max(abs(center[a] - self._cmin[a]), abs(center[a] - self._cmax[a]))
                for a in range(3)
            )
        )

    def _ring_cells(self, center: tuple[int, int, int], r: int):
        cx, cy, cz = center
        if r == 0:
            yield (cx, cy, cz)
            return
        for dx in (-r, r):  # two x-faces
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    yield (cx + dx, cy + dy, cz + dz)
        for dy in (-r, r):  # two y-faces minus x-face overlap
            for dx in range(-r + 1, r):
                for dz in range(-r, r + 1):
                    yield (cx + dx, cy + dy, cz + dz)
        for dz in (-r, r):  # two z-faces minus both overlaps
            for dx in range(-r + 1, r):
                for dy in range(-r + 1, r):
                    yield (cx + dx, cy + dy, cz + dz)

    def k_nearest(self, query: np.ndarray, k: int) -> list[int]:
        """Ids of the min(k, N) nearest points, sorted by (distance, id)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, dtype=np.float64)
        center = self._cell_of(query)
        cover = self._cover_ring(center)
        cand: list[int] = []
        r = 0
        while True:
            for cell in self._ring_cells(center, r):
                ids = self._grid.get(cell)
                if ids:
                    cand.extend(ids)
            if len(cand) >= min(k, self.n):
                d2 = np.sum((self.positions[cand] - query) ** 2, axis=1)
                kth = np.partition(d2, min(k, len(cand)) - 1)[min(k, len(cand)) - 1]
                # Points in unvisited rings are at distance >= r * cell from
                # the query; the extra one-cell margin rules out missed ties.
                if r * self.cell >= np.sqrt(kth) + self.cell:
                    break
            if r >= cover:
                break
            r += 1
        d2 = np.sum((self.positions[cand] - query) ** 2, axis=1)
        order = sorted(range(len(cand)), key=lambda i: (d2[i], cand[i]))
        return [cand[i] for i in order[: min(k, self.n)]]

    def radius_query(self, query: np.ndarray, radius: float) -> list[int]:
        """Ids of all points within `radius` (inclusive), sorted by (distance, id)."""
        query = np.asarray(query, dtype=np.float64)
        center = self._cell_of(query)
        rmax = min(int(np.floor(radius / self.cell)) + 1, self._cover_ring(center))
        cand: list[int] = []
        for r in range(rmax + 1):
            for cell in self._ring_cells(center, r):
                ids = self._grid.get(cell)
                if ids:
                    cand.extend(ids)
        if not cand:
            return []
        d2 = np.sum((self.positions[cand] - query) ** 2, axis=1)
        keep = [(d2[i], cand[i]) for i in range(len(cand)) if d2[i] <= radius * radius]
        keep.sort()
        return [i for _, i in keep]


def build_neighbor_index(frame: PointFrame) -> NeighborIndex:
    if len(frame) == 0:
        raise EmptyFrame("cannot index an empty frame")
    return NeighborIndex(frame.positions)


def k_nearest(index: NeighborIndex, query: np.ndarray, k: int) -> list[int]:
    return index.k_nearest(query, k)


def _scatter_eigh(points: np.ndarray):
    """Eigendecomposition of the 3x3 scatter matrix of centered points."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)
    return centroid, evals, evecs


def fit_plane_lsq(points: np.ndarray) -> PlaneParams:
    """Total-least-squares plane through m >= 3 points.

    Raises DegenerateGeometry when the points are (near-)collinear or
    coincident, i.e. the two smallest scatter eigenvalues both vanish
    relative to the largest.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected m x 3 points, got {points.shape}")
    m = len(points)
    if m < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {m}")
    centroid, evals, evecs = _scatter_eigh(points)
    if evals[2] <= 0.0 or evals[1] <= _DEGENERATE_REL_TOL * evals[2]:
        raise DegenerateGeometry("points are collinear or coincident")
    normal = evecs[:, 0]
    offset = -float(normal @ centroid)
    normal, offset = canonical_sign(normal, offset)
    rms = float(np.sqrt(max(evals[0], 0.0) / m))
    return PlaneParams(normal=normal, offset=offset, rms_residual=rms)


def estimate_normals(frame: PointFrame, k: int) -> tuple[PointFrame, list[int]]:
    """Per-point normals from a plane fit over each point's k nearest neighbors.

    The query point is part of its own neighborhood. Degenerate neighborhoods
    fall back to the +z axis and are reported in the returned id list.

    Returns:
        (frame with normals filled, list of degenerate point ids)
    """
    n = len(frame)
    if k < 3:
        raise ValueError("k must be >= 3")
    if n < k:
        raise ValueError(f"frame has {n} points, need at least k={k}")
    index = build_neighbor_index(frame)
    neighbor_ids = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        neighbor_ids[i] = index.k_nearest(frame.positions[i], k)
    hoods = frame.positions[neighbor_ids]  # (n, k, 3)
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered)
    evals, evecs = np.linalg.eigh(scatter)
    normals = evecs[:, :, 0].copy()
    degenerate: list[int] = []
    for i in range(n):
        if evals[i, 2] <= 0.0 or evals[i, 1] <= _DEGENERATE_REL_TOL * evals[i, 2]:
            normals[i] = (0.0, 0.0, 1.0)
            degenerate.append(i)
        else:
            normals[i], _ = canonical_sign(normals[i])
    out = PointFrame(
        positions=frame.positions,
        normals=normals,
        labels=frame.labels,
        frame_index=frame.frame_index,
    )
    return out, degenerate


def neighborhood_fit_residuals(frame: PointFrame, k: int) -> np.ndarray:
    """RMS plane-fit residual of each point's k-NN neighborhood.

    Degenerate neighborhoods get +inf so they sort last as region seeds.
    """
    n = len(frame)
    index = build_neighbor_index(frame)
    res = np.empty(n, dtype=np.float64)
    for i in range(n):
        ids = index.k_nearest(frame.positions[i], k)
        try:
            res[i] = fit_plane_lsq(frame.positions[ids]).rms_residual
        except DegenerateGeometry:
            res[i] = np.inf
    return res
