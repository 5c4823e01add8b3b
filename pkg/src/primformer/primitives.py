"""Partition frames into plane primitives.

Three fitters (sequential RANSAC, normal-driven region growing, k-means as
the ablation baseline) all emit the same PrimitiveAssignment: id 0 is the
reserved clutter bucket, ids 1..m_actual are real primitives. normalize_to_m
enforces a fixed primitive budget by size ranking, and majority_vote_labels
is the label-smoothing baseline (vote the modal class inside each primitive).
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyFrame, InvalidConfig, LengthMismatch, MissingNormals
from .geometry import (
    DegenerateGeometry,
    PlaneParams,
    PointFrame,
    build_neighbor_index,
    canonical_sign,
    fit_plane_lsq,
)


@dataclass
class PrimitiveAssignment:
    """Per-point primitive ids plus the fitted plane of each primitive."""

    labels: np.ndarray  # N ids in {0..m_actual}; 0 = clutter
    planes: list[PlaneParams]
    m_actual: int
    m_target: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.m_actual > self.m_target:
            raise ValueError("m_actual exceeds m_target")
        if len(self.planes) != self.m_actual:
            raise ValueError("planes length must equal m_actual")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.m_actual:
            raise ValueError("labels must lie in 0..m_actual")
        counts = np.bincount(self.labels, minlength=self.m_actual + 1)
        if self.m_actual > 0 and np.any(counts[1:] == 0):
            raise ValueError("every real primitive id needs at least one member")

    def members(self, pid: int) -> np.ndarray:
        return np.flatnonzero(self.labels == pid)


@dataclass
class FitConfig:
    method: str = "ransac"  # ransac | region_grow | kmeans
    m_target: int = 4
    ransac_threshold: float = 0.02
    ransac_iters: int = 100
    min_inliers: int = 30
    rg_angle_threshold: float = 5.0  # degrees
    rg_distance_threshold: float = 0.02
    knn_k: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.m_target < 1:
            raise InvalidConfig("m_target must be >= 1")
        if self.ransac_threshold <= 0 or self.rg_distance_threshold <= 0:
            raise InvalidConfig("distance thresholds must be positive")
        if self.rg_angle_threshold < 0:
            raise InvalidConfig("rg_angle_threshold must be >= 0")


def fit_primitives(frame: PointFrame, cfg: FitConfig) -> PrimitiveAssignment:
    """Dispatch on cfg.method and normalize to cfg.m_target."""
    if cfg.method == "ransac":
        a = ransac_planes(frame, cfg)
    elif cfg.method == "region_grow":
        a = region_grow(frame, cfg)
    elif cfg.method == "kmeans":
        a = kmeans_partition(frame, min(cfg.m_target, len(frame)), cfg.seed)
    else:
        raise InvalidConfig(f"unknown fitting method {cfg.method!r}")
    return normalize_to_m(a, cfg.m_target)


def ransac_planes(frame: PointFrame, cfg: FitConfig) -> PrimitiveAssignment:
    """Sequential RANSAC: extract up to m_target planes, removing inliers.

    Each round runs cfg.ransac_iters seeded 3-point trials on the remaining
    points, keeps the best inlier set, and accepts it only when it reaches
    cfg.min_inliers; accepted planes are refit by least squares.
    """
    n = len(frame)
    if n == 0:
        raise EmptyFrame("cannot fit primitives on an empty frame")
    if n < 3:
        raise EmptyFrame(f"need at least 3 points, got {n}")
    rng = np.random.default_rng(cfg.seed)
    labels = np.zeros(n, dtype=np.int64)
    planes: list[PlaneParams] = []
    remaining = np.arange(n)
    for _ in range(cfg.m_target):
        if len(remaining) < max(3, cfg.min_inliers):
            break
        pts = frame.positions[remaining]
        best_count = -1
        best_mask = None
        for _ in range(cfg.ransac_iters):
            pick = rng.choice(len(remaining), size=3, replace=False)
            try:
                cand = fit_plane_lsq(pts[pick])
            except DegenerateGeometry:
                continue
            mask = cand.distance(pts) <= cfg.ransac_threshold
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
        if best_mask is None or best_count < cfg.min_inliers:
            break
        try:
            refit = fit_plane_lsq(pts[best_mask])
        except DegenerateGeometry:
            break
        planes.append(refit)
        labels[remaining[best_mask]] = len(planes)
        remaining = remaining[~best_mask]
    return PrimitiveAssignment(
        labels=labels, planes=planes, m_actual=len(planes), m_target=cfg.m_target
    )


def region_grow(frame: PointFrame, cfg: FitConfig) -> PrimitiveAssignment:
    """Grow planar regions over the k-NN graph from flattest seeds.

    A neighbor q joins the frontier point p's region when the angle between
    their normals is within cfg.rg_angle_threshold and q lies within
    cfg.rg_distance_threshold of the region's running plane. The running
    plane is refit whenever the region size doubles. Regions smaller than
    cfg.min_inliers dissolve to clutter.
    """
    if frame.normals is None:
        raise MissingNormals("region_grow needs normals; run estimate_normals first")
    n = len(frame)
    if n == 0:
        raise EmptyFrame("cannot fit primitives on an empty frame")
    k = min(cfg.knn_k, n)
    index = build_neighbor_index(frame)
    knn = [index.k_nearest(frame.positions[i], k) for i in range(n)]

    # Seed order: flattest neighborhood first (ties by id).
    residuals = np.empty(n)
    for i in range(n):
        try:
            residuals[i] = fit_plane_lsq(frame.positions[knn[i]]).rms_residual
        except DegenerateGeometry:
            residuals[i] = np.inf
    seed_order = sorted(range(n), key=lambda i: (residuals[i], i))

    cos_thresh = np.cos(np.radians(cfg.rg_angle_threshold))
    visited = np.zeros(n, dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    planes: list[PlaneParams] = []

    for seed in seed_order:
        if visited[seed]:
            continue
        try:
            plane = fit_plane_lsq(frame.positions[knn[seed]])
        except DegenerateGeometry:
            # No running plane to grow from; leave the point claimable.
            continue
        region = [seed]
        visited[seed] = True
        next_refit = 2
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            np_ = frame.normals[p]
            for q in knn[p]:
                if visited[q]:
                    continue
                # Orientation-free angle: canonical signs may flip near the
                # sign boundary even on one plane.
                if abs(float(np_ @ frame.normals[q])) < cos_thresh - 1e-12:
                    continue
                dist = abs(float(frame.positions[q] @ plane.normal + plane.offset))
                if dist > cfg.rg_distance_threshold:
                    continue
                visited[q] = True
                region.append(q)
                queue.append(q)
                if len(region) >= next_refit:
                    try:
                        plane = fit_plane_lsq(frame.positions[region])
                    except DegenerateGeometry:
                        pass
                    next_refit = 2 * len(region)
        if len(region) >= cfg.min_inliers:
            try:
                final = fit_plane_lsq(frame.positions[region])
            except DegenerateGeometry:
                continue
            planes.append(final)
            labels[region] = len(planes)
    return PrimitiveAssignment(
        labels=labels, planes=planes, m_actual=len(planes), m_target=cfg.m_target
    )


def _plane_of_cluster(points: np.ndarray) -> PlaneParams:
    """Plane for an arbitrary cluster; degenerate clusters get canonical +z."""
    try:
        return fit_plane_lsq(points)
    except DegenerateGeometry:
        centroid = points.mean(axis=0)
        normal = np.array([0.0, 0.0, 1.0])
        offset = -float(normal @ centroid)
        normal, offset = canonical_sign(normal, offset)
        rms = float(np.sqrt(np.mean((points @ normal + offset) ** 2)))
        return PlaneParams(normal=normal, offset=offset, rms_residual=rms)


def kmeans_partition(frame: PointFrame, m: int, seed: int) -> PrimitiveAssignment:
    """Lloyd's algorithm on xyz with k-means++ seeding; no clutter bucket."""
    n = len(frame)
    if n == 0:
        raise EmptyFrame("cannot partition an empty frame")
    if m < 1 or m > n:
        raise InvalidConfig(f"need 1 <= m <= N, got m={m}, N={n}")
    pts = frame.positions
    rng = np.random.default_rng(seed)

    centers = np.empty((m, 3))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[j] = pts[rng.integers(n)]
        else:
            centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dists, axis=1)
        new_centers = centers.copy()
        for j in range(m):
            members = pts[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < 1e-8:
            break

    labels = np.zeros(n, dtype=np.int64)
    planes: list[PlaneParams] = []
    for j in range(m):
        members = np.flatnonzero(assign == j)
        if len(members) == 0:
            continue
        planes.append(_plane_of_cluster(pts[members]))
        labels[members] = len(planes)
    return PrimitiveAssignment(
        labels=labels, planes=planes, m_actual=len(planes), m_target=m
    )


def normalize_to_m(a: PrimitiveAssignment, m_target: int) -> PrimitiveAssignment:
    """Keep the m_target largest primitives and relabel densely by size.

    Dropped primitives dissolve to clutter. Ties in size keep the smaller
    original id first. Membership of kept primitives never changes.
    """
    counts = np.bincount(a.labels, minlength=a.m_actual + 1)
    order = sorted(range(1, a.m_actual + 1), key=lambda pid: (-counts[pid], pid))
    kept = order[:m_target]
    remap = np.zeros(a.m_actual + 1, dtype=np.int64)
    planes: list[PlaneParams] = []
    for new_id, old_id in enumerate(kept, start=1):
        remap[old_id] = new_id
        planes.append(a.planes[old_id - 1])
    return PrimitiveAssignment(
        labels=remap[a.labels],
        planes=planes,
        m_actual=len(kept),
        m_target=m_target,
    )


def majority_vote_labels(a: PrimitiveAssignment, point_labels: np.ndarray) -> np.ndarray:
    """Replace every point's class by its primitive's modal class.

    Ties go to the smallest class id; clutter points keep their own label.
    """
    point_labels = np.asarray(point_labels, dtype=np.int64)
    if point_labels.shape != a.labels.shape:
        raise LengthMismatch(
            f"labels length {point_labels.shape} != assignment length {a.labels.shape}"
        )
    out = point_labels.copy()
    for pid in range(1, a.m_actual + 1):
        members = a.members(pid)
        if len(members) == 0:
            continue
        votes = np.bincount(point_labels[members])
        out[members] = int(np.argmax(votes))
    return out


@dataclass
class SequenceAssignments:
    """Per-frame assignments for one sequence, normalized to a shared M."""

    per_frame: list[PrimitiveAssignment] = field(default_factory=list)

    def __len__(self):
        return len(self.per_frame)


def fit_sequence(frames: list[PointFrame], cfg: FitConfig) -> SequenceAssignments:
    """Fit every frame independently with the same config."""
    return SequenceAssignments(per_frame=[fit_primitives(f, cfg) for f in frames])
