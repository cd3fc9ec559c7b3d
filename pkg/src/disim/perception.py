"""Per-object statistics over binary segmentation masks.

For each mask the pipeline collects the set of object-pixel coordinates,
their count (area), mean (centroid), the population-normalized 2x2
covariance of the centered coordinates, and the covariance eigenstructure.
The major eigenvector gives the object's principal-axis orientation theta,
reported in image coordinates (x = column, y = row) and normalized to
[0, pi) because an axis has no sign.

Mask ingestion is file based: plain-text 0/1 grids plus an index file
listing filenames and priority levels. Pixel-to-world mapping goes through
a configured 2x3 affine calibration.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# relative eigenvalue gap below which an object has no meaningful major axis
ISOTROPY_TOL = 1e-9

INDEX_FILENAME = "masks.idx"


class EmptyMaskError(ValueError):
    """Mask contains no object pixels."""


class MalformedMaskError(ValueError):
    """Grid file violates the 0/1-rows format."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class MissingIndexError(FileNotFoundError):
    """Mask directory has no index file."""


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary object mask plus its user-assigned priority level."""

    grid: np.ndarray
    pl: int

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise ValueError(f"mask grid must be 2-D and non-empty, got shape {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("mask grid entries must be 0 or 1")
        g = g.astype(np.uint8)
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)
        if not (isinstance(self.pl, (int, np.integer)) and self.pl >= 0):
            raise ValueError("priority level must be a non-negative integer")
        object.__setattr__(self, "pl", int(self.pl))


@dataclass(frozen=True, eq=False)
class ClusterAnalysis:
    """Full statistics of one mask's pixel cluster."""

    coords: np.ndarray          # (N, 2) of (row, col), row-major order
    area: int
    cm_px: np.ndarray           # (x, y) pixels
    centered: np.ndarray        # (N, 2) of (x, y) minus centroid
    covariance: np.ndarray      # 2x2, (x, y) order, population normalization
    eigenvalues: tuple[float, float]
    major_axis: np.ndarray      # unit (x, y)
    theta: float                # radians in [0, pi)
    isotropic: bool


@dataclass(frozen=True, eq=False)
class Calibration:
    """Affine pixel (x, y, 1) -> world meters map; linear part nonsingular."""

    affine: np.ndarray

    def __post_init__(self):
        a = np.array(self.affine, dtype=np.float64)
        if a.shape != (2, 3):
            raise ValueError(f"calibration affine must be 2x3, got {a.shape}")
        if abs(np.linalg.det(a[:, :2])) < 1e-12:
            raise ValueError("calibration linear part is singular")
        a.flags.writeable = False
        object.__setattr__(self, "affine", a)

    def apply_point(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return self.affine[:, :2] @ xy + self.affine[:, 2]

    def rotation(self) -> np.ndarray:
        """Rotation component of the linear part (polar decomposition)."""
        u, _, vt = np.linalg.svd(self.affine[:, :2])
        return u @ vt

    def apply_angle(self, theta: float) -> float:
        direction = self.rotation() @ np.array([math.cos(theta), math.sin(theta)])
        return math.atan2(direction[1], direction[0]) % math.pi

    @staticmethod
    def identity() -> "Calibration":
        return Calibration(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @staticmethod
    def uniform_scale(s: float, tx: float = 0.0, ty: float = 0.0) -> "Calibration":
        return Calibration(np.array([[s, 0.0, tx], [0.0, s, ty]]))

    def to_json(self) -> dict:
        return {"affine": self.affine.tolist()}

    @staticmethod
    def from_json(d: dict) -> "Calibration":
        return Calibration(np.asarray(d["affine"], dtype=np.float64))


@dataclass(frozen=True)
class ObjectDescriptor:
    """One object's handoff record for planning: where it is and how it lies."""

    cm_px: tuple[float, float]
    cm_world: tuple[float, float]
    theta: float
    area: int
    pl: int
    isotropic: bool

    def to_json(self) -> dict:
        return {
            "cm_px": list(self.cm_px),
            "cm_world": list(self.cm_world),
            "theta": self.theta,
            "area": self.area,
            "pl": self.pl,
            "isotropic": self.isotropic,
        }

    @staticmethod
    def from_json(d: dict) -> "ObjectDescriptor":
        return ObjectDescriptor(
            cm_px=tuple(float(v) for v in d["cm_px"]),
            cm_world=tuple(float(v) for v in d["cm_world"]),
            theta=float(d["theta"]),
            area=int(d["area"]),
            pl=int(d["pl"]),
            isotropic=bool(d["isotropic"]),
        )


def eigen2x2(cv) -> tuple[float, float, np.ndarray]:
    """Closed-form eigen decomposition of a symmetric 2x2 matrix.

    Returns (lambda1, lambda2, v1) with lambda1 >= lambda2 and v1 the
    unit-norm major eigenvector.
    """
    cv = np.asarray(cv, dtype=np.float64)
    if cv.shape != (2, 2):
        raise ValueError("expected a 2x2 matrix")
    scale = max(1.0, float(np.max(np.abs(cv))))
    if abs(cv[0, 1] - cv[1, 0]) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    a, c = float(cv[0, 0]), float(cv[1, 1])
    b = 0.5 * (float(cv[0, 1]) + float(cv[1, 0]))
    tr = a + c
    disc = math.sqrt(max((a - c) ** 2 + 4.0 * b * b, 0.0))
    lam1 = 0.5 * (tr + disc)
    lam2 = 0.5 * (tr - disc)
    # (cv - lam1 I) v = 0; pick the better-conditioned null-space expression
    u1 = np.array([b, lam1 - a])
    u2 = np.array([lam1 - c, b])
    v = u1 if np.linalg.norm(u1) >= np.linalg.norm(u2) else u2
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v = np.array([1.0, 0.0])  # degenerate multiple of identity
    else:
        v = v / norm
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    return lam1, lam2, v


def analyze(mask: Mask) -> ClusterAnalysis:
    """Cluster statistics of one mask: area, centroid, covariance, axis, theta."""
    coords = np.argwhere(mask.grid == 1)
    area = coords.shape[0]
    if area == 0:
        raise EmptyMaskError("mask has no object pixels")
    xy = coords[:, ::-1].astype(np.float64)  # (x, y) = (col, row)
    # exact integer moments: keeps the covariance (and so theta) bit-identical
    # under integer translation of the mask
    xs = coords[:, 1].astype(object)
    ys = coords[:, 0].astype(object)
    n = int(area)
    sx, sy = int(sum(xs)), int(sum(ys))
    sxx, syy, sxy = int(sum(xs * xs)), int(sum(ys * ys)), int(sum(xs * ys))
    cm = np.array([sx / n, sy / n])
    centered = xy - cm
    nn = float(n * n)
    cov = np.array([
        [(n * sxx - sx * sx) / nn, (n * sxy - sx * sy) / nn],
        [(n * sxy - sx * sy) / nn, (n * syy - sy * sy) / nn],
    ])
    lam1, lam2, v1 = eigen2x2(cov)
    isotropic = (lam1 - lam2) <= ISOTROPY_TOL * max(lam1, 1.0)
    if isotropic:
        theta = 0.0
        v1 = np.array([1.0, 0.0])
    else:
        theta = math.atan2(v1[1], v1[0]) % math.pi
    return ClusterAnalysis(
        coords=coords, area=int(area), cm_px=cm, centered=centered,
        covariance=cov, eigenvalues=(lam1, lam2), major_axis=v1,
        theta=theta, isotropic=bool(isotropic),
    )


def analyze_all(masks, calib: Calibration | None = None,
                px_scale: float = 1.0) -> list[ObjectDescriptor]:
    """Descriptors for every mask, input order preserved.

    World coordinates come from the calibration when given, otherwise from a
    flat pixel scale (meters per pixel).
    """
    out = []
    for i, mask in enumerate(masks):
        try:
            ca = analyze(mask)
        except EmptyMaskError as exc:
            raise EmptyMaskError(f"mask {i}: {exc}") from None
        if calib is not None:
            world = calib.apply_point(ca.cm_px)
            theta = ca.theta if ca.isotropic else calib.apply_angle(ca.theta)
        else:
            world = ca.cm_px * px_scale
            theta = ca.theta
        out.append(ObjectDescriptor(
            cm_px=(float(ca.cm_px[0]), float(ca.cm_px[1])),
            cm_world=(float(world[0]), float(world[1])),
            theta=float(theta), area=ca.area, pl=mask.pl, isotropic=ca.isotropic,
        ))
    return out


def to_world(d: ObjectDescriptor, calib: Calibration) -> ObjectDescriptor:
    """Re-map a descriptor's pixel centroid and axis through a calibration."""
    world = calib.apply_point(np.asarray(d.cm_px))
    theta = d.theta if d.isotropic else calib.apply_angle(d.theta)
    return ObjectDescriptor(
        cm_px=d.cm_px, cm_world=(float(world[0]), float(world[1])),
        theta=float(theta), area=d.area, pl=d.pl, isotropic=d.isotropic,
    )


# ---------------------------------------------------------------------------
# file I/O


def parse_grid(text: str, path="<string>") -> np.ndarray:
    rows = []
    width = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = re.sub(r"\s+", "", raw)
        if not line:
            continue
        if not set(line) <= {"0", "1"}:
            bad = next(ch for ch in line if ch not in "01")
            raise MalformedMaskError(path, line_no, f"invalid character {bad!r}")
        if width is None:
            width = len(line)
        elif len(line) != width:
            raise MalformedMaskError(
                path, line_no, f"ragged row: {len(line)} columns, expected {width}")
        rows.append([int(ch) for ch in line])
    if not rows:
        raise MalformedMaskError(path, 1, "no grid rows")
    return np.asarray(rows, dtype=np.uint8)


def load_masks(directory) -> list[Mask]:
    """Masks of a directory in index order, with their priority levels."""
    directory = Path(directory)
    index = directory / INDEX_FILENAME
    if not index.is_file():
        raise MissingIndexError(f"no {INDEX_FILENAME} in {directory}")
    masks = []
    for line_no, raw in enumerate(index.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MalformedMaskError(index, line_no,
                                     "expected '<filename> <priority>'")
        name, pl_text = parts
        try:
            pl = int(pl_text)
        except ValueError:
            raise MalformedMaskError(index, line_no,
                                     f"priority level {pl_text!r} is not an integer") from None
        if pl < 0:
            raise MalformedMaskError(index, line_no, "priority level must be >= 0")
        grid_path = directory / name
        if not grid_path.is_file():
            raise MalformedMaskError(index, line_no, f"mask file {name!r} not found")
        masks.append(Mask(parse_grid(grid_path.read_text(), grid_path), pl))
    return masks


def save_masks(directory, masks, names=None) -> list[str]:
    """Write grids plus the index file; inverse of load_masks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"mask_{i:03d}.txt" for i in range(len(masks))]
    if len(names) != len(masks):
        raise ValueError("names/masks length mismatch")
    lines = []
    for name, mask in zip(names, masks):
        body = "\n".join("".join(str(v) for v in row) for row in mask.grid)
        (directory / name).write_text(body + "\n")
        lines.append(f"{name} {mask.pl}")
    (directory / INDEX_FILENAME).write_text("\n".join(lines) + "\n")
    return list(names)
