"""Simulated RGBD rig and the multi-view object localisation pipeline.

render -> detect -> deproject -> fuse (cluster + logit sum) -> denoise -> extract.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .world import WorldState, world_to_dict

TABLE_EXTENT_X = (0.05, 0.95)
TABLE_EXTENT_Y = (-0.5, 0.5)
BACKGROUND = -1


class PerceptionError(Exception):
    pass


class OccludedDetectionError(PerceptionError):
    """A detection mask has no valid depth."""


class ObjectNotFoundError(PerceptionError):
    pass


class DenoiseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CameraModel:
    id: Union[int, str]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: tuple  # 4x4 camera -> base, row-major nested tuples

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("intrinsics must be positive")
        m = np.asarray(self.extrinsics, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("extrinsics must be 4x4")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("extrinsic rotation must be orthonormal")
        object.__setattr__(self, "extrinsics", tuple(tuple(float(v) for v in row) for row in m))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsics)

    @property
    def position(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Base-frame points to pixel (u, v) and depth along the optical axis."""
        m = self.matrix
        pc = (np.asarray(points, dtype=float) - m[:3, 3]) @ m[:3, :3]
        z = pc[:, 2]
        return self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy, z

    def deproject(self, u, v, depth) -> np.ndarray:
        u, v, depth = (np.asarray(a, dtype=float) for a in (u, v, depth))
        pc = np.stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], axis=-1)
        m = self.matrix
        return pc @ m[:3, :3].T + m[:3, 3]

    def meters_per_pixel(self, depth: float) -> float:
        return float(depth) / self.fx


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera->base transform with +z toward ``target`` and +y pointing down the image."""
    p = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - p
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, p
    return m


def cage_cameras(center=(0.5, 0.0), radius=0.55, height=0.5, width=480, height_px=360, f=450.0) -> list:
    """Four cage cameras on the diagonals around the table centre."""
    cams = []
    for i, ang in enumerate((45.0, 135.0, 225.0, 315.0), start=1):
        a = np.radians(ang)
        pos = (center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height)
        cams.append(
            CameraModel(i, f, f, (width - 1) / 2, (height_px - 1) / 2, width, height_px,
                        look_at(pos, (center[0], center[1], 0.02)))
        )
    return cams


def wrist_camera(position, width: int = 320, height: int = 320, f: float = 300.0) -> CameraModel:
    """Straight-down camera; image u runs along base +x and v along base -y."""
    m = np.eye(4)
    m[:3, 0] = (1.0, 0.0, 0.0)
    m[:3, 1] = (0.0, -1.0, 0.0)
    m[:3, 2] = (0.0, 0.0, -1.0)
    m[:3, 3] = position
    return CameraModel("wrist", f, f, (width - 1) / 2, (height - 1) / 2, width, height, m)


def default_rig() -> list:
    """Four cage cameras plus the wrist camera parked at the home pose."""
    return cage_cameras() + [wrist_camera((0.35, 0.0, 0.40))]


@dataclass(frozen=True)
class PerceptionConfig:
    depth_noise: float = 0.0  # m, Gaussian sigma
    miss_rate: float = 0.0
    confusion_rate: float = 0.0
    confusion_table: tuple = (("scoop", "spatula"), ("spatula", "scoop"))
    theta_conf: float = 0.35
    tau_assoc: float = 0.05  # m
    base_logit: float = 0.9
    denoise_k: int = 16
    denoise_std: float = 2.0
    voxel: float = 0.003  # m, grid for density-even denoising and centroids

    def confusable(self, label: str) -> Optional[str]:
        return dict(self.confusion_table).get(label)


# -- rendering -----------------------------------------------------------------


@dataclass
class View:
    camera: CameraModel
    depth: np.ndarray  # (H, W) meters, 0 = no return
    ids: np.ndarray  # (H, W) object index or BACKGROUND
    names: tuple  # object index -> name
    labels: tuple  # object index -> detector label
    full_counts: dict = field(default_factory=dict)  # object index -> unoccluded pixel count


_RAY_CACHE: dict = {}


def _camera_rays(cam: CameraModel) -> np.ndarray:
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    if key not in _RAY_CACHE:
        v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
        _RAY_CACHE[key] = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    return _RAY_CACHE[key]


def _roi(cam: CameraModel, centre: np.ndarray, radius: float):
    u, v, z = cam.project(centre[None])
    z = z[0]
    if z <= radius * 1.05:
        return 0, cam.height, 0, cam.width
    r_px = cam.fx * radius / (z - radius) + 2
    u0, v0 = u[0], v[0]
    rows = max(0, int(np.floor(v0 - r_px))), min(cam.height, int(np.ceil(v0 + r_px)) + 1)
    cols = max(0, int(np.floor(u0 - r_px))), min(cam.width, int(np.ceil(u0 + r_px)) + 1)
    if rows[0] >= rows[1] or cols[0] >= cols[1]:
        return None
    return rows[0], rows[1], cols[0], cols[1]


def render_view(world: WorldState, cam: CameraModel, noise: float = 0.0, seed: int = 0) -> View:
    rays = _camera_rays(cam)
    m = cam.matrix
    dirs = rays @ m[:3, :3].T  # (H, W, 3) base frame, camera z component = 1
    origin = m[:3, 3]
    depth = np.full((cam.height, cam.width), np.inf)
    ids = np.full((cam.height, cam.width), BACKGROUND, dtype=np.int32)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (world.table_height - origin[2]) / dirs[..., 2]
    hit = origin[None, None, :] + t[..., None] * dirs
    on_table = (
        (t > 0)
        & (hit[..., 0] >= TABLE_EXTENT_X[0]) & (hit[..., 0] <= TABLE_EXTENT_X[1])
        & (hit[..., 1] >= TABLE_EXTENT_Y[0]) & (hit[..., 1] <= TABLE_EXTENT_Y[1])
    )
    depth[on_table] = t[on_table]
    full_counts = {}
    for k, obj in enumerate(world.objects):
        obj_t = None
        for prim, pm in obj.primitive_poses():
            roi = _roi(cam, pm[:3, 3], prim.bounding_radius())
            if roi is None:
                continue
            r0, r1, c0, c1 = roi
            d = dirs[r0:r1, c0:c1].reshape(-1, 3)
            rot = pm[:3, :3]
            o_l = np.broadcast_to((origin - pm[:3, 3]) @ rot, d.shape)
            d_l = d @ rot
            tp = prim.intersect(np.ascontiguousarray(o_l), d_l).reshape(r1 - r0, c1 - c0)
            if obj_t is None:
                obj_t = np.full((cam.height, cam.width), np.inf)
            np.minimum(obj_t[r0:r1, c0:c1], tp, out=obj_t[r0:r1, c0:c1])
        if obj_t is None:
            full_counts[k] = 0
            continue
        full_counts[k] = int(np.isfinite(obj_t).sum())
        closer = obj_t < depth
        depth[closer] = obj_t[closer]
        ids[closer] = k
    depth[~np.isfinite(depth)] = 0.0
    if noise > 0:
        rng = np.random.default_rng([seed, zlib.crc32(str(cam.id).encode())])
        valid = depth > 0
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, noise, valid.sum()), 1e-6)
    return View(
        camera=cam,
        depth=depth,
        ids=ids,
        names=tuple(o.name for o in world.objects),
        labels=tuple(o.label for o in world.objects),
        full_counts=full_counts,
    )


def render_views(world: WorldState, cameras: list, noise: float = 0.0, seed: int = 0) -> list:
    """Analytic ray-cast of every camera; nearest hit wins."""
    return [render_view(world, c, noise, seed) for c in cameras]


# -- detection -----------------------------------------------------------------


@dataclass
class Detection:
    mask: np.ndarray
    logit: float
    label: str
    camera_id: Union[int, str]
    index: int
    source: str = ""  # ground-truth object behind the mask, for diagnostics only


def _draw(seed: int, *key) -> float:
    h = zlib.crc32("|".join(str(k) for k in key).encode())
    return float(np.random.default_rng([seed, h]).random())


def detect(view: View, query: str, cfg: PerceptionConfig = PerceptionConfig(), seed: int = 0) -> list:
    """Simulated grounded detector driven by the ground-truth id image.

    Misses are drawn per object (so one capture misses an object in every
    view); label confusions are drawn per camera and object.
    """
    out = []
    present = np.unique(view.ids[view.ids >= 0])
    for k in present:
        k = int(k)
        name, label = view.names[k], view.labels[k]
        if cfg.miss_rate > 0 and _draw(seed, "miss", name) < cfg.miss_rate:
            continue
        alt = cfg.confusable(label)
        if alt is not None and cfg.confusion_rate > 0 and _draw(seed, "confuse", view.camera.id, name) < cfg.confusion_rate:
            label = alt
        if label != query:
            continue
        mask = view.ids == k
        visible = int(mask.sum())
        full = max(view.full_counts.get(k, visible), 1)
        logit = cfg.base_logit * min(1.0, visible / full)
        if logit < cfg.theta_conf:
            continue
        out.append(Detection(mask, float(logit), query, view.camera.id, k, name))
    return out


# -- clouds ----------------------------------------------------------------------


@dataclass
class PartialCloud:
    points: np.ndarray
    logit: float
    camera_id: Union[int, str]
    index: int
    label: str

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def deproject(det: Detection, depth: np.ndarray, cam: CameraModel) -> PartialCloud:
    if det.mask.shape != depth.shape or depth.shape != (cam.height, cam.width):
        raise ValueError("mask, depth and camera sizes differ")
    sel = det.mask & (depth > 0)
    if not sel.any():
        raise OccludedDetectionError(f"detection {det.label!r} in camera {cam.id} has no depth")
    v, u = np.nonzero(sel)
    pts = cam.deproject(u, v, depth[v, u])
    return PartialCloud(pts, det.logit, det.camera_id, det.index, det.label)


def denoise(points: np.ndarray, k: int = 16, std_ratio: float = 2.0, voxel: Optional[float] = None) -> np.ndarray:
    """Statistical outlier removal on mean k-nearest-neighbour distance.

    With ``voxel`` set the statistic is computed on voxel means and every raw
    point inherits its voxel's verdict. Fused clouds mix dense head-on and
    sparse grazing views; on raw points the sparse rims look like outliers.
    """
    points = np.asarray(points, dtype=float)
    inverse = None
    sample = points
    if voxel:
        sample, inverse = _voxelize(points, voxel)
    if len(sample) < k + 1:
        warnings.warn(f"denoise needs at least {k + 1} points, got {len(sample)}", DenoiseWarning, stacklevel=2)
        return points
    dist, _ = cKDTree(sample).query(sample, k=k + 1, workers=-1)
    mean_d = dist[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + std_ratio * mean_d.std()
    return points[keep[inverse]] if inverse is not None else points[keep]


def _voxelize(points: np.ndarray, voxel: float) -> tuple[np.ndarray, np.ndarray]:
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    means = np.zeros((len(counts), 3))
    np.add.at(means, inverse, points)
    return means / counts[:, None], inverse


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One averaged point per occupied voxel."""
    return _voxelize(np.asarray(points, dtype=float).reshape(-1, 3), voxel)[0]


def extract_geometry(points: np.ndarray, voxel: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and axis-aligned (L, W, H) extents.

    With ``voxel`` set, the centroid is taken over a voxel-uniform copy so that
    surfaces seen by several cameras, or seen head-on, do not dominate it.
    """
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise ValueError("empty cloud")
    points = points.reshape(-1, 3)
    sample = voxel_downsample(points, voxel) if voxel else points
    return sample.mean(axis=0), points.max(axis=0) - points.min(axis=0)


def aggregate_logits(logits) -> float:
    """Combine per-view scores of one object; summation rewards view agreement."""
    return float(sum(logits))


@dataclass
class FusedObject:
    cloud: np.ndarray  # denoised
    logit: float
    centroid: np.ndarray
    dims: np.ndarray
    label: str
    raw_cloud: np.ndarray = None
    contributors: tuple = ()  # (camera_id, index) pairs


def _contributor_key(c: PartialCloud):
    return (str(c.camera_id), c.index)


def cluster_clouds(clouds: list, tau: float) -> list[list[int]]:
    """Single-linkage components over partial-cloud centroid distance."""
    n = len(clouds)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n:
        cents = np.array([c.centroid for c in clouds])
        d = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
        for i, j in zip(*np.nonzero(np.triu(d <= tau, 1))):
            a, b = find(i), find(j)
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: dict = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def fuse(clouds: list, tau: float = 0.05, k: int = 16, std_ratio: float = 2.0, clean: bool = True,
         voxel: Optional[float] = 0.003) -> list:
    """Merge partial clouds of the same physical object across views.

    Output order (and every tie-break) depends only on the set of inputs.
    """
    clouds = sorted(clouds, key=_contributor_key)
    fused = []
    for group in cluster_clouds(clouds, tau):
        members = sorted((clouds[i] for i in group), key=_contributor_key)
        raw = np.concatenate([m.points for m in members])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DenoiseWarning)
            cloud = denoise(raw, k, std_ratio, voxel) if clean else raw
        centroid, dims = extract_geometry(cloud, voxel)
        top = max(members, key=lambda m: (m.logit, [-ord(ch) for ch in str(m.camera_id)], -m.index))
        fused.append(
            FusedObject(
                cloud=cloud,
                logit=aggregate_logits(m.logit for m in members),
                centroid=centroid,
                dims=dims,
                label=top.label,
                raw_cloud=raw,
                contributors=tuple(_contributor_key(m) for m in members),
            )
        )
    fused.sort(key=lambda f: (-f.logit, tuple(f.centroid)))
    return fused


def select_best(fused: list) -> FusedObject:
    if not fused:
        raise ObjectNotFoundError("no detections above threshold")
    return max(fused, key=lambda f: (f.logit, tuple(-f.centroid)))


# -- pipeline ------------------------------------------------------------------


class Perception:
    """Runs the pipeline for one rig, caching renders of identical worlds."""

    def __init__(self, cameras: list, cfg: PerceptionConfig = PerceptionConfig()):
        self.cameras = [c for c in cameras if c.id != "wrist"]
        self.cfg = cfg
        self._cache_key = None
        self._views = None

    def views(self, world: WorldState, seed: int = 0) -> list:
        key = (json.dumps(world_to_dict(world), sort_keys=True), seed)
        if key != self._cache_key:
            self._views = render_views(world, self.cameras, self.cfg.depth_noise, seed)
            self._cache_key = key
        return self._views

    def partial_clouds(self, world: WorldState, query: str, seed: int = 0) -> list:
        clouds = []
        for view in self.views(world, seed):
            for det in detect(view, query, self.cfg, seed):
                try:
                    clouds.append(deproject(det, view.depth, view.camera))
                except OccludedDetectionError:
                    continue
        return clouds

    def candidates(self, world: WorldState, query: str, seed: int = 0) -> list:
        cfg = self.cfg
        return fuse(self.partial_clouds(world, query, seed), cfg.tau_assoc, cfg.denoise_k, cfg.denoise_std,
                    voxel=cfg.voxel)

    def query(self, world: WorldState, query: str, seed: int = 0) -> FusedObject:
        found = self.candidates(world, query, seed)
        if not found:
            raise ObjectNotFoundError(f"{query!r} not found in any view")
        return select_best(found)


def query_object(world: WorldState, cameras: list, query: str,
                 cfg: PerceptionConfig = PerceptionConfig(), seed: int = 0) -> FusedObject:
    """Highest aggregate-logit fused object for a semantic query."""
    return Perception(cameras, cfg).query(world, query, seed)


# -- files -------------------------------------------------------------------------


def save_cloud(path, points: np.ndarray) -> None:
    """Debug dump: one ``x y z`` line per point."""
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.6f")


def load_cloud(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2).reshape(-1, 3)


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "id": cam.id, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "extrinsics": [list(r) for r in cam.extrinsics],
    }


def camera_from_dict(d: dict) -> CameraModel:
    if "extrinsics" in d:
        ext = d["extrinsics"]
    else:
        ext = look_at(d["position"], d["target"])
    return CameraModel(d["id"], float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), ext)


def save_rig(path, cameras: list, cfg: PerceptionConfig = PerceptionConfig()) -> None:
    doc = {
        "cameras": [camera_to_dict(c) for c in cameras],
        "perception": {
            "depth_noise": cfg.depth_noise, "miss_rate": cfg.miss_rate,
            "confusion_rate": cfg.confusion_rate,
            "confusion_table": [list(p) for p in cfg.confusion_table],
            "theta_conf": cfg.theta_conf, "tau_assoc": cfg.tau_assoc,
            "base_logit": cfg.base_logit, "denoise_k": cfg.denoise_k, "denoise_std": cfg.denoise_std,
            "voxel": cfg.voxel,
        },
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_rig(path) -> tuple[list, PerceptionConfig]:
    doc = yaml.safe_load(Path(path).read_text())
    cams = [camera_from_dict(c) for c in doc.get("cameras", [])]
    p = dict(doc.get("perception") or {})
    if "confusion_table" in p:
        p["confusion_table"] = tuple(tuple(x) for x in p["confusion_table"])
    return cams, replace(PerceptionConfig(), **p)
