"""Rigid transforms, poses and analytic primitive shapes."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial.transform import Rotation

Vec3 = tuple[float, float, float]


def normalize_angle(deg: float) -> float:
    """Wrap an angle in degrees to (-180, 180]."""
    a = float(np.fmod(deg, 360.0))
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a + 0.0  # drop negative zero


def rpy_to_matrix(rpy_deg) -> np.ndarray:
    roll, pitch, yaw = rpy_deg
    return Rotation.from_euler("ZYX", [yaw, pitch, roll], degrees=True).as_matrix()


def matrix_to_rpy(rot: np.ndarray) -> Vec3:
    yaw, pitch, roll = Rotation.from_matrix(rot).as_euler("ZYX", degrees=True)
    return (normalize_angle(roll), normalize_angle(pitch), normalize_angle(yaw))


@dataclass(frozen=True)
class Pose:
    """Position in meters and roll-pitch-yaw in degrees (ZYX), base frame."""

    position: Vec3 = (0.0, 0.0, 0.0)
    orientation: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(
            self, "orientation", tuple(normalize_angle(v) for v in self.orientation)
        )

    def rotation(self) -> np.ndarray:
        return rpy_to_matrix(self.orientation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.position
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        return cls(tuple(m[:3, 3]), matrix_to_rpy(m[:3, :3]))

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Map local-frame points (N, 3) into the base frame."""
        return np.asarray(pts, dtype=float) @ self.rotation().T + np.asarray(self.position)

    def inverse_transform_points(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - np.asarray(self.position)) @ self.rotation()

    def with_position(self, position) -> "Pose":
        return Pose(tuple(position), self.orientation)


_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Primitive:
    """One solid piece of an object, expressed in the object frame.

    ``size`` is (lx, ly, lz) for a box, (radius, height) for a cylinder whose
    axis is ``axis``, and (radius,) for a sphere.
    """

    kind: str
    size: tuple
    offset: Vec3 = (0.0, 0.0, 0.0)
    axis: str = "z"

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        expected = {"box": 3, "cylinder": 2, "sphere": 1}
        if self.kind not in expected:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if len(self.size) != expected[self.kind]:
            raise ValueError(f"{self.kind} needs {expected[self.kind]} dimensions")
        if any(not v > 0 for v in self.size):
            raise ValueError(f"non-positive dimension in {self.kind} {self.size}")
        if self.axis not in _AXES:
            raise ValueError(f"bad cylinder axis {self.axis!r}")

    # -- local geometry, all relative to the primitive centre ---------------

    def half_extents(self) -> np.ndarray:
        if self.kind == "box":
            return np.array(self.size) / 2
        if self.kind == "sphere":
            return np.full(3, self.size[0])
        r, h = self.size
        he = np.full(3, r)
        he[_AXES[self.axis]] = h / 2
        return he

    def volume(self) -> float:
        if self.kind == "box":
            return float(np.prod(self.size))
        if self.kind == "sphere":
            return 4.0 / 3.0 * np.pi * self.size[0] ** 3
        r, h = self.size
        return float(np.pi * r * r * h)

    def surface_area(self) -> float:
        if self.kind == "box":
            a, b, c = self.size
            return 2 * (a * b + b * c + a * c)
        if self.kind == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        r, h = self.size
        return float(2 * np.pi * r * (r + h))

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents()))

    def _to_axis_z(self, p: np.ndarray) -> np.ndarray:
        # permute so the cylinder axis becomes z
        a = _AXES[self.axis]
        order = [i for i in range(3) if i != a] + [a]
        return p[..., order]

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Euclidean distance from centred points (N, 3) to the solid; 0 inside."""
        p = np.atleast_2d(p)
        if self.kind == "box":
            d = np.maximum(np.abs(p) - self.half_extents(), 0.0)
            return np.linalg.norm(d, axis=1)
        if self.kind == "sphere":
            return np.maximum(np.linalg.norm(p, axis=1) - self.size[0], 0.0)
        r, h = self.size
        q = self._to_axis_z(p)
        dr = np.maximum(np.hypot(q[:, 0], q[:, 1]) - r, 0.0)
        dz = np.maximum(np.abs(q[:, 2]) - h / 2, 0.0)
        return np.hypot(dr, dz)

    def width_along(self, n: np.ndarray) -> float:
        """Caliper width of the solid along unit direction ``n`` (centred frame)."""
        n = np.asarray(n, dtype=float)
        if self.kind == "box":
            return float(2 * np.sum(np.abs(n) * self.half_extents()))
        if self.kind == "sphere":
            return 2 * self.size[0]
        r, h = self.size
        c = abs(n[_AXES[self.axis]])
        return float(2 * (r * np.sqrt(max(0.0, 1 - c * c)) + h / 2 * c))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per ray, ``inf`` on a miss."""
        n = origins.shape[0]
        t_out = np.full(n, np.inf)
        if self.kind == "box":
            h = self.half_extents()
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t1 = (-h - origins) * inv
                t2 = (h - origins) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmax > 0)
            t = np.where(tmin > 0, tmin, tmax)
            t_out[hit] = t[hit]
            return t_out
        if self.kind == "sphere":
            r = self.size[0]
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2 * np.einsum("ij,ij->i", origins, dirs)
            c = np.einsum("ij,ij->i", origins, origins) - r * r
            disc = b * b - 4 * a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            t = np.where(t0 > 0, t0, t1)
            hit = ok & (t > 0)
            t_out[hit] = t[hit]
            return t_out
        r, h = self.size
        o = self._to_axis_z(origins)
        d = self._to_axis_z(dirs)
        # lateral surface
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(a > 1e-15, a, 1.0)
        cands = []
        for sgn in (-1.0, 1.0):
            t = (-b + sgn * sq) / (2 * safe_a)
            z = o[:, 2] + t * d[:, 2]
            valid = ok & (t > 0) & (np.abs(z) <= h / 2)
            cands.append(np.where(valid, t, np.inf))
        # end caps
        with np.errstate(divide="ignore", invalid="ignore"):
            for zc in (-h / 2, h / 2):
                t = (zc - o[:, 2]) / d[:, 2]
                x = o[:, 0] + t * d[:, 0]
                y = o[:, 1] + t * d[:, 1]
                valid = np.isfinite(t) & (t > 0) & (x * x + y * y <= r * r)
                cands.append(np.where(valid, t, np.inf))
        return np.min(np.stack(cands), axis=0)


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by min and max corners (local frame)."""

    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box corners must satisfy lo < hi")

    def contains(self, p, margin: float = 0.0):
        """Membership of one point (bool) or of each row of an (N, 3) array."""
        p = np.asarray(p, dtype=float)
        r = np.all((p >= np.asarray(self.lo) - margin) & (p <= np.asarray(self.hi) + margin), axis=-1)
        return bool(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class Shape:
    """Union of primitives in an object frame."""

    parts: tuple = field(default_factory=tuple)

    def surface_centroid(self) -> np.ndarray:
        """Area-weighted centroid of the exposed surface that does not face down.

        Cameras above the table can in principle see all of this surface and
        none of the rest.
        """
        return _surface_centroid(self).copy()

    def volume_centroid(self) -> np.ndarray:
        vols = np.array([p.volume() for p in self.parts])
        offs = np.array([p.offset for p in self.parts])
        return (vols[:, None] * offs).sum(axis=0) / vols.sum()


def _sample_surface(p: Primitive, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples and outward normals, primitive-centred frame."""
    if p.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * p.size[0], v
    if p.kind == "box":
        h = np.array(p.size) / 2
        areas = np.array([p.size[1] * p.size[2], p.size[0] * p.size[2], p.size[0] * p.size[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-h, h, size=(n, 3))
        normals = np.zeros((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        normals[np.arange(n), axis] = sign
        return pts, normals
    r, hgt = p.size
    areas = np.array([2 * np.pi * r * hgt, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-hgt / 2, hgt / 2, n), np.where(part == 1, hgt / 2, -hgt / 2))
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    normals = np.zeros((n, 3))
    normals[part == 0, 0] = np.cos(theta[part == 0])
    normals[part == 0, 1] = np.sin(theta[part == 0])
    normals[part == 1, 2] = 1.0
    normals[part == 2, 2] = -1.0
    a = _AXES[p.axis]
    if a != 2:
        order = [0, 1, 2]
        order[a], order[2] = 2, a
        pts, normals = pts[:, order], normals[:, order]
    return pts, normals


@lru_cache(maxsize=256)
def _surface_centroid(shape: "Shape", n_per_m2: float = 4e6) -> np.ndarray:
    rng = np.random.default_rng(0)
    chunks = []
    for i, p in enumerate(shape.parts):
        n = max(2000, int(p.surface_area() * n_per_m2))
        pts, normals = _sample_surface(p, n, rng)
        pts = pts + np.asarray(p.offset)
        keep = np.ones(n, dtype=bool)
        for j, q in enumerate(shape.parts):
            if j != i:
                keep &= q.distance(pts - np.asarray(q.offset)) > 1e-9
        keep &= normals[:, 2] > -1e-9
        chunks.append(pts[keep])
    return np.concatenate(chunks).mean(axis=0)
