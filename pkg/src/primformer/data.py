"""Synthetic planted-plane sequence generator and the on-disk sequence format.

A scene is a set of planar patches moving rigidly through L frames with
per-frame Gaussian noise and optional uniform clutter. Ground truth records
each point's planted patch (primitive) and class. Sequences serialize to a
directory of text frame files plus a key=value manifest; floats are written
with 17 significant digits so f64 round-trips exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FrameCountMismatch,
    InvalidSpec,
    MalformedManifest,
    ParseError,
)
from .geometry import PlaneParams, PointFrame, PointSequence, canonical_sign
from .primitives import PrimitiveAssignment, SequenceAssignments

FORMAT_VERSION = 1

# Motion pattern id doubles as the action class for classification tasks.
MOTION_PATTERNS = ("static", "translate_x", "rotate_z", "oscillate_z")


@dataclass
class SceneSpec:
    """Recipe for one synthetic sequence."""

    num_patches: int = 4
    points_per_patch: int = 100
    noise_sigma: float = 0.0
    num_frames: int = 1
    seed: int = 0
    clutter_fraction: float = 0.0
    clutter_class: int = 0
    patch_extent: float = 1.0
    motion_pattern: str = "static"
    motion_magnitude: float = 0.1
    patch_classes: list[int] | None = None
    # Per-patch overrides; None means sampled from the seed.
    patch_sigma: list[float] | None = None
    patch_normals: np.ndarray | None = None
    patch_centers: np.ndarray | None = None
    patch_visible: list[tuple[int, int]] | None = None  # [start, end) frames

    def __post_init__(self):
        if self.num_patches < 1 or self.points_per_patch < 3:
            raise InvalidSpec("need >= 1 patch and >= 3 points per patch")
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise InvalidSpec("clutter_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.num_frames < 1:
            raise InvalidSpec("num_frames must be >= 1")
        if self.motion_pattern not in MOTION_PATTERNS:
            raise InvalidSpec(f"unknown motion pattern {self.motion_pattern!r}")
        if self.patch_sigma is not None and any(s < 0 for s in self.patch_sigma):
            raise InvalidSpec("patch_sigma entries must be >= 0")
        for name in ("patch_classes", "patch_sigma", "patch_visible"):
            val = getattr(self, name)
            if val is not None and len(val) != self.num_patches:
                raise InvalidSpec(f"{name} must have one entry per patch")

    @property
    def action_class(self) -> int:
        return MOTION_PATTERNS.index(self.motion_pattern)


@dataclass
class GeneratedScene:
    sequence: PointSequence
    assignments: SequenceAssignments
    frame_labels: list[np.ndarray]
    action_class: int


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _frame_motion(spec: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """(rotation matrix, translation) for frame t under the spec's pattern."""
    mag = spec.motion_magnitude
    if spec.motion_pattern == "static":
        return np.eye(3), np.zeros(3)
    if spec.motion_pattern == "translate_x":
        return np.eye(3), np.array([mag * t, 0.0, 0.0])
    if spec.motion_pattern == "rotate_z":
        return _rotation(np.array([0.0, 0.0, 1.0]), mag * t), np.zeros(3)
    # oscillate_z
    phase = 2.0 * np.pi * t / max(spec.num_frames, 1)
    return np.eye(3), np.array([0.0, 0.0, mag * np.sin(phase)])


def _plane_basis(normal: np.ndarray) -> np.ndarray:
    """Two orthonormal in-plane directions (2 x 3)."""
    ref = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(normal, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return np.stack([e1, e2])


def generate(spec: SceneSpec) -> GeneratedScene:
    """Sample a planted-plane sequence with ground truth.

    Point order per frame: patch 0 points, patch 1 points, ..., clutter.
    The same base point moves rigidly across frames (index correspondence
    holds between frames when all patches are visible everywhere).
    """
    rng = np.random.default_rng(spec.seed)
    P = spec.num_patches

    if spec.patch_normals is not None:
        normals = np.asarray(spec.patch_normals, dtype=np.float64).reshape(P, 3)
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    else:
        normals = rng.normal(size=(P, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if spec.patch_centers is not None:
        centers = np.asarray(spec.patch_centers, dtype=np.float64).reshape(P, 3)
    else:
        centers = rng.uniform(-2.0, 2.0, size=(P, 3))
    sigmas = (
        np.asarray(spec.patch_sigma, dtype=np.float64)
        if spec.patch_sigma is not None
        else np.full(P, spec.noise_sigma)
    )
    classes = (
        list(spec.patch_classes) if spec.patch_classes is not None else list(range(P))
    )

    base_points = []
    for p in range(P):
        uv = rng.uniform(-spec.patch_extent / 2, spec.patch_extent / 2,
                         size=(spec.points_per_patch, 2))
        base_points.append(centers[p] + uv @ _plane_basis(normals[p]))

    n_clutter = int(round(spec.clutter_fraction * P * spec.points_per_patch))
    lo = np.min([bp.min(axis=0) for bp in base_points], axis=0) - 0.5
    hi = np.max([bp.max(axis=0) for bp in base_points], axis=0) + 0.5

    frames: list[PointFrame] = []
    assignments: list[PrimitiveAssignment] = []
    frame_labels: list[np.ndarray] = []
    for t in range(spec.num_frames):
        R, T = _frame_motion(spec, t)
        pos_parts, label_parts, prim_parts = [], [], []
        planes: list[PlaneParams] = []
        next_id = 0
        for p in range(P):
            if spec.patch_visible is not None:
                start, end = spec.patch_visible[p]
                if not (start <= t < end):
                    continue
            moved = base_points[p] @ R.T + T
            if sigmas[p] > 0:
                moved = moved + rng.normal(scale=sigmas[p], size=moved.shape)
            next_id += 1
            pos_parts.append(moved)
            label_parts.append(np.full(len(moved), classes[p], dtype=np.int64))
            prim_parts.append(np.full(len(moved), next_id, dtype=np.int64))
            n_t = R @ normals[p]
            c_t = R @ centers[p] + T
            nrm, off = canonical_sign(n_t.copy(), -float(n_t @ c_t))
            rms = float(sigmas[p])  # generator-side proxy, not a fit
            planes.append(PlaneParams(normal=nrm, offset=off, rms_residual=rms))
        if n_clutter:
            clutter = rng.uniform(lo, hi, size=(n_clutter, 3)) @ R.T + T
            pos_parts.append(clutter)
            label_parts.append(np.full(n_clutter, spec.clutter_class, dtype=np.int64))
            prim_parts.append(np.zeros(n_clutter, dtype=np.int64))
        if not pos_parts:
            raise InvalidSpec(f"frame {t} has no visible patches and no clutter")
        positions = np.vstack(pos_parts)
        labels = np.concatenate(label_parts)
        prim = np.concatenate(prim_parts)
        frames.append(PointFrame(positions=positions, labels=labels, frame_index=t))
        assignments.append(
            PrimitiveAssignment(
                labels=prim, planes=planes, m_actual=next_id, m_target=max(P, next_id)
            )
        )
        frame_labels.append(labels)
    return GeneratedScene(
        sequence=PointSequence(frames=frames),
        assignments=SequenceAssignments(per_frame=assignments),
        frame_labels=frame_labels,
        action_class=spec.action_class,
    )


# --- on-disk format ---------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_kv(path: str, kv: dict):
    with open(path, "w") as fh:
        for key, val in kv.items():
            fh.write(f"{key}={val}\n")


def read_kv(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedManifest(f"expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_sequence(seq: PointSequence, path: str):
    """Write `manifest` + frame_%04d.xyz under `path` (created if missing)."""
    os.makedirs(path, exist_ok=True)
    has_normals = all(fr.normals is not None for fr in seq.frames)
    has_labels = all(fr.labels is not None for fr in seq.frames)
    write_kv(
        os.path.join(path, "manifest"),
        {
            "format_version": FORMAT_VERSION,
            "L": len(seq),
            "N": ",".join(str(len(fr)) for fr in seq.frames),
            "has_normals": int(has_normals),
            "has_labels": int(has_labels),
        },
    )
    for t, fr in enumerate(seq.frames):
        with open(os.path.join(path, f"frame_{t:04d}.xyz"), "w") as fh:
            for i in range(len(fr)):
                cols = [_fmt(v) for v in fr.positions[i]]
                if has_normals:
                    cols += [_fmt(v) for v in fr.normals[i]]
                if has_labels:
                    cols.append(str(int(fr.labels[i])))
                fh.write(" ".join(cols) + "\n")


def read_sequence(path: str) -> PointSequence:
    manifest_path = os.path.join(path, "manifest")
    if not os.path.exists(manifest_path):
        raise MalformedManifest(f"no manifest in {path}")
    kv = read_kv(manifest_path)
    try:
        version = int(kv["format_version"])
        L = int(kv["L"])
        counts = [int(x) for x in kv["N"].split(",")]
        has_normals = bool(int(kv["has_normals"]))
        has_labels = bool(int(kv["has_labels"]))
    except (KeyError, ValueError) as exc:
        raise MalformedManifest(f"bad manifest in {path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise MalformedManifest(f"unsupported format_version {version}")
    if len(counts) != L:
        raise MalformedManifest(f"manifest lists {len(counts)} counts for L={L}")
    present = sorted(
        f for f in os.listdir(path) if f.startswith("frame_") and f.endswith(".xyz")
    )
    if len(present) != L:
        raise FrameCountMismatch(f"manifest says L={L} but found {len(present)} frames")

    ncols = 3 + (3 if has_normals else 0) + (1 if has_labels else 0)
    frames = []
    for t in range(L):
        fpath = os.path.join(path, f"frame_{t:04d}.xyz")
        if not os.path.exists(fpath):
            raise FrameCountMismatch(f"missing frame file {fpath}")
        rows = []
        with open(fpath) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != ncols:
                    raise ParseError(
                        f"expected {ncols} columns, got {len(parts)}", lineno
                    )
                try:
                    rows.append([float(x) for x in parts])
                except ValueError:
                    raise ParseError(f"non-numeric token in {parts}", lineno) from None
        if len(rows) != counts[t]:
            raise FrameCountMismatch(
                f"frame {t} has {len(rows)} points, manifest says {counts[t]}"
            )
        arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), ncols)
        normals = arr[:, 3:6] if has_normals else None
        labels = arr[:, -1].astype(np.int64) if has_labels else None
        frames.append(
            PointFrame(
                positions=arr[:, :3], normals=normals, labels=labels, frame_index=t
            )
        )
    return PointSequence(frames=frames)


def write_assignments(assigns: SequenceAssignments, path: str):
    """Sidecar files next to a sequence: per-point primitive ids + planes."""
    os.makedirs(path, exist_ok=True)
    for t, a in enumerate(assigns.per_frame):
        with open(os.path.join(path, f"primitive_{t:04d}.txt"), "w") as fh:
            for pid in a.labels:
                fh.write(f"{int(pid)}\n")
        with open(os.path.join(path, f"planes_{t:04d}.txt"), "w") as fh:
            fh.write(f"m_target={a.m_target}\n")
            for plane in a.planes:
                vals = [*plane.normal, plane.offset, plane.rms_residual]
                fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def read_assignments(path: str, L: int) -> SequenceAssignments:
    per_frame = []
    for t in range(L):
        lpath = os.path.join(path, f"primitive_{t:04d}.txt")
        ppath = os.path.join(path, f"planes_{t:04d}.txt")
        if not os.path.exists(lpath) or not os.path.exists(ppath):
            raise MalformedManifest(f"missing assignment sidecars for frame {t}")
        labels = np.loadtxt(lpath, dtype=np.int64, ndmin=1)
        planes = []
        m_target = None
        with open(ppath) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("m_target="):
                    m_target = int(line.split("=", 1)[1])
                    continue
                parts = line.split()
                if len(parts) != 5:
                    raise ParseError("expected 5 plane values", lineno)
                try:
                    a, b, c, d, rms = (float(x) for x in parts)
                except ValueError:
                    raise ParseError(f"non-numeric token in {parts}", lineno) from None
                planes.append(
                    PlaneParams(normal=np.array([a, b, c]), offset=d, rms_residual=rms)
                )
        if m_target is None:
            raise MalformedManifest(f"planes file for frame {t} lacks m_target")
        per_frame.append(
            PrimitiveAssignment(
                labels=labels, planes=planes, m_actual=len(planes), m_target=m_target
            )
        )
    return SequenceAssignments(per_frame=per_frame)
