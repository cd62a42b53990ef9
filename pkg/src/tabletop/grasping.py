"""Task-oriented grasping from a top-down wrist capture.

The pipeline: capture the tool from above, score antipodal top-down grasp
candidates, register a database tool's mask onto the capture to carry its
graspable region across, then pick the best candidate inside that region.
Registration or mapping failures fall back to the whole tool mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from .geometry import Pose
from .perception import CameraModel, PerceptionConfig, detect, render_view, wrist_camera
from .sim import MAX_JAW_OPENING
from .world import WorldState

CAPTURE_HEIGHT = 0.30  # m above the tool centroid
STRIDE = 4
ANGLES = tuple(22.5 * i for i in range(8))
DEPTH_BAND = 0.02  # m; pixels further than this in height are not between the jaws
FINGER_DEPTH = 0.01  # m below the grasped surface
MIN_IOU = 0.5
DB_TOOLS = ("scoop", "flattener", "whisk", "hammer", "spatula")
DB_SCALE = 0.001  # m/px for generated fixtures


class GraspError(Exception):
    pass


class CaptureError(GraspError):
    """The tool is not visible from the wrist camera."""


class AlignmentError(GraspError):
    pass


class NoGraspError(GraspError):
    """No feasible grasp candidate (in the requested region)."""


# -- tool database -----------------------------------------------------------


@dataclass
class ToolDBEntry:
    name: str
    full_mask: np.ndarray  # bool (H, W); u along +x, v along -y
    region_mask: np.ndarray  # bool, subset of full_mask
    meters_per_pixel: float

    def __post_init__(self):
        self.full_mask = np.asarray(self.full_mask, dtype=bool)
        self.region_mask = np.asarray(self.region_mask, dtype=bool)
        if not self.full_mask.any() or not self.region_mask.any():
            raise ValueError(f"tool {self.name!r}: empty mask")
        if (self.region_mask & ~self.full_mask).any():
            raise ValueError(f"tool {self.name!r}: graspable region leaves the tool mask")


def _write_pgm(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_tool_db(directory, entries) -> None:
    """One sub-directory per tool: ``full.pgm``, ``region.pgm`` and ``meta.yaml``."""
    root = Path(directory)
    for e in entries:
        d = root / e.name
        d.mkdir(parents=True, exist_ok=True)
        _write_pgm(d / "full.pgm", e.full_mask)
        _write_pgm(d / "region.pgm", e.region_mask)
        (d / "meta.yaml").write_text(yaml.safe_dump({"name": e.name, "meters_per_pixel": e.meters_per_pixel}))


def load_tool_db(directory=None) -> dict:
    """Load a tool database; the packaged fixtures by default."""
    root = Path(directory) if directory is not None else Path(str(resources.files("tabletop") / "data" / "tool_db"))
    db = {}
    for meta_path in sorted(root.glob("*/meta.yaml")):
        meta = yaml.safe_load(meta_path.read_text())
        d = meta_path.parent
        db[meta["name"]] = ToolDBEntry(
            meta["name"], _read_pgm(d / "full.pgm"), _read_pgm(d / "region.pgm"), float(meta["meters_per_pixel"])
        )
    if not db:
        raise FileNotFoundError(f"no tool database under {root}")
    return db


def render_tool_template(object_type: str, scale: float = DB_SCALE, pad: int = 8) -> ToolDBEntry:
    """Orthographic top-down masks of a catalogue tool lying at yaw 0."""
    from .scenes import object_doc, scene_doc
    from .world import load_scene

    obj = load_scene(scene_doc([object_doc(object_type, (0.0, 0.0))])).get(object_type)
    lo, hi = obj.aabb()
    xs = np.arange(lo[0] - pad * scale, hi[0] + pad * scale, scale)
    ys = np.arange(hi[1] + pad * scale, lo[1] - pad * scale, -scale)  # rows run toward -y
    gx, gy = np.meshgrid(xs, ys)
    n = gx.size
    top = np.full(n, -np.inf)
    origins_w = np.stack([gx.ravel(), gy.ravel(), np.full(n, hi[2] + 0.1)], axis=1)
    down = np.tile([0.0, 0.0, -1.0], (n, 1))
    for prim, m in obj.primitive_poses():
        rot = m[:3, :3]
        t = prim.intersect((origins_w - m[:3, 3]) @ rot, down @ rot)
        top = np.maximum(top, np.where(np.isfinite(t), origins_w[:, 2] - t, -np.inf))
    full = np.isfinite(top)
    local = obj.pose.inverse_transform_points(np.column_stack([origins_w[:, :2], np.where(full, top, 0.0)]))
    region = full & obj.graspable_region.contains(local)
    shape = gx.shape
    return ToolDBEntry(object_type, full.reshape(shape), region.reshape(shape), scale)


def build_tool_db(directory, tools=DB_TOOLS) -> dict:
    entries = [render_tool_template(t) for t in tools]
    save_tool_db(directory, entries)
    return {e.name: e for e in entries}


# -- capture -------------------------------------------------------------------


@dataclass
class Capture:
    depth: np.ndarray
    mask: np.ndarray
    camera: CameraModel


def overhead_capture(world: WorldState, tool_label: str, tool_centroid, height: float = CAPTURE_HEIGHT,
                     cfg: PerceptionConfig = PerceptionConfig(), seed: int = 0) -> Capture:
    """Wrist view from directly above ``tool_centroid`` plus the detector mask."""
    c = np.asarray(tool_centroid, dtype=float)
    cam = wrist_camera((c[0], c[1], c[2] + height))
    view = render_view(world, cam, cfg.depth_noise, seed)
    dets = detect(view, tool_label, cfg, seed)
    if not dets:
        raise CaptureError(f"{tool_label!r} not visible from the wrist camera")
    centre = np.array([cam.cx, cam.cy])

    def off_centre(d):
        v, u = np.nonzero(d.mask)
        return (float(np.hypot(u.mean() - centre[0], v.mean() - centre[1])), -d.logit, d.index)

    best = min(dets, key=off_centre)
    mask = best.mask & (view.depth > 0)
    if not mask.any():
        raise CaptureError(f"{tool_label!r} has no depth in the wrist view")
    return Capture(view.depth, mask, cam)


# -- candidates ----------------------------------------------------------------


@dataclass(frozen=True)
class GraspCandidate:
    u: int
    v: int
    angle: float  # degrees; the jaws close perpendicular to this image direction
    width: float  # m
    score: float

    @property
    def pixel(self) -> tuple:
        return (self.u, self.v)


def _heights(depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    return cam.position[2] - depth


def jaw_widths(mask, depth, cam: CameraModel, us, vs, angle: float, band: float = DEPTH_BAND) -> np.ndarray:
    """Masked extent (m) perpendicular to ``angle`` through each pixel.

    Only pixels within ``band`` of the centre pixel's height count, so a tall
    knob on a wide base is measured across the knob.
    """
    mask = np.asarray(mask, dtype=bool)
    h = _heights(depth, cam)
    a = math.radians(angle)
    n = np.array([math.sin(a), math.cos(a)])  # perpendicular of (cos a, -sin a) in (u, v)
    us = np.asarray(us)
    vs = np.asarray(vs)
    h0 = h[vs, us]
    H, W = mask.shape
    mpp = depth[vs, us] / cam.fx
    max_steps = int(np.ceil(MAX_JAW_OPENING / max(mpp.min(), 1e-6))) + 2
    count = np.ones(len(us))
    for sgn in (1.0, -1.0):
        alive = np.ones(len(us), dtype=bool)
        for k in range(1, max_steps + 1):
            uu = np.rint(us + sgn * k * n[0]).astype(int)
            vv = np.rint(vs + sgn * k * n[1]).astype(int)
            inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
            uc, vc = np.clip(uu, 0, W - 1), np.clip(vv, 0, H - 1)
            ok = inside & mask[vc, uc] & (np.abs(h[vc, uc] - h0) <= band)
            alive &= ok
            if not alive.any():
                break
            count += alive
    step = float(np.hypot(*n))
    return count * step * mpp


def generate_grasps(mask, depth, cam: CameraModel, stride: int = STRIDE) -> list:
    """Top-down candidates on a stride grid inside the mask, eight angles each."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    dt = ndimage.distance_transform_edt(mask)
    dt = dt / dt.max()
    rows, cols = np.nonzero(mask)
    v0, u0 = rows.min(), cols.min()
    on_grid = ((rows - v0) % stride == 0) & ((cols - u0) % stride == 0)
    vs, us = rows[on_grid], cols[on_grid]
    out = []
    for angle in ANGLES:
        w = jaw_widths(mask, depth, cam, us, vs, angle)
        for u, v, wi in zip(us, vs, w):
            if wi <= MAX_JAW_OPENING:
                out.append(GraspCandidate(int(u), int(v), angle, float(wi), float(dt[v, u])))
    return out


def select_grasp(candidates, region_mask: Optional[np.ndarray] = None) -> GraspCandidate:
    """Highest score inside ``region_mask``; ties go to the narrowest jaw, then the lowest (u, v, angle)."""
    pool = [c for c in candidates if region_mask is None or region_mask[c.v, c.u]]
    if not pool:
        raise NoGraspError("no candidate inside the region")
    return min(pool, key=lambda c: (-c.score, round(c.width, 4), c.u, c.v, c.angle))


def grasp_heatmap(candidates, shape) -> np.ndarray:
    """Best score per candidate pixel as an 8-bit image."""
    img = np.zeros(shape, dtype=np.uint8)
    for c in candidates:
        img[c.v, c.u] = max(img[c.v, c.u], int(round(255 * c.score)))
    return img


def save_heatmap(path, candidates, shape) -> None:
    Image.fromarray(grasp_heatmap(candidates, shape), mode="L").save(path, format="PPM")


# -- mask registration ---------------------------------------------------------


@dataclass(frozen=True)
class MaskAlignment:
    """Maps database pixels into the query image: q = s * R(rot) * d + t."""

    translation: tuple  # px
    rotation: float  # degrees, counter-clockwise on screen
    scale: float
    iou: float

    def matrix(self) -> np.ndarray:
        a = math.radians(self.rotation)
        # screen CCW with v pointing down
        r = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        m = np.eye(3)
        m[:2, :2] = self.scale * r
        m[:2, 2] = self.translation
        return m


def _moments(mask: np.ndarray):
    v, u = np.nonzero(mask)
    if len(u) == 0:
        raise AlignmentError("empty mask")
    cu, cv = u.mean(), v.mean()
    du, dv = u - cu, v - cv
    mu20, mu02, mu11 = (du * du).mean(), (dv * dv).mean(), (du * dv).mean()
    if mu20 + mu02 < 1e-12:
        raise AlignmentError("degenerate mask (zero second moment)")
    # screen-CCW orientation of the major axis (v grows downward)
    theta = 0.5 * math.degrees(math.atan2(-2 * mu11, mu20 - mu02))
    return np.array([cu, cv]), theta, float(len(u))


def warp_mask(mask: np.ndarray, m: np.ndarray, out_shape) -> np.ndarray:
    """Nearest-neighbour warp of a mask by the pixel transform ``m`` (u, v, 1)."""
    inv = np.linalg.inv(m)
    # affine_transform works in (row, col) = (v, u) order
    a = inv[:2, :2][::-1, ::-1]
    off = inv[:2, 2][::-1]
    out = ndimage.affine_transform(mask.astype(np.uint8), a, offset=off, output_shape=tuple(out_shape), order=0)
    return out.astype(bool)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def align_masks(db: ToolDBEntry, query_mask: np.ndarray, query_scale: Optional[float] = None) -> MaskAlignment:
    """Moment-based similarity registration of the database mask onto the query.

    ``query_scale`` (m/px) is informational; the scale comes from the mask
    areas so that a look-alike tool of a different size still registers.
    """
    query_mask = np.asarray(query_mask, dtype=bool)
    c_d, th_d, a_d = _moments(db.full_mask)
    c_q, th_q, a_q = _moments(query_mask)
    s = math.sqrt(a_q / a_d)
    best = None
    for flip in (0.0, 180.0):
        rot = ((th_q - th_d + flip + 180.0) % 360.0) - 180.0
        probe = MaskAlignment((0.0, 0.0), rot, s, 0.0)
        t = c_q - probe.matrix()[:2, :2] @ c_d
        cand = MaskAlignment((float(t[0]), float(t[1])), rot, s, 0.0)
        iou = _iou(warp_mask(db.full_mask, cand.matrix(), query_mask.shape), query_mask)
        cand = MaskAlignment(cand.translation, rot, s, iou)
        if best is None or iou > best.iou + 1e-12:
            best = cand
    if best.iou < MIN_IOU:
        raise AlignmentError(f"best IoU {best.iou:.2f} below {MIN_IOU}")
    return best


def transfer_region(db: ToolDBEntry, alignment: MaskAlignment, query_mask: np.ndarray) -> np.ndarray:
    return warp_mask(db.region_mask, alignment.matrix(), query_mask.shape) & query_mask


# -- full pipeline -------------------------------------------------------------


class ToolMapper(Protocol):
    def map_tool(self, query_tool: str, task: str, db_tool_names: list) -> Optional[str]: ...


@dataclass
class GraspResult:
    pose: Pose
    candidate: GraspCandidate
    path: str  # "region" | "fallback" | "centroid"
    mapped_tool: Optional[str]
    alignment: Optional[MaskAlignment]
    capture: Capture
    region_mask: Optional[np.ndarray]
    candidates: tuple = ()
    note: str = ""


def pixel_to_pose(capture: Capture, cand: GraspCandidate, table_height: float = 0.0) -> Pose:
    cam = capture.camera
    d = capture.depth[cand.v, cand.u]
    p = cam.deproject(np.array([cand.u]), np.array([cand.v]), np.array([d]))[0]
    z = p[2] - min(FINGER_DEPTH, max(0.0, (p[2] - table_height) / 2))
    # image direction (cos a, -sin a) maps to base-frame direction (cos a, sin a)
    return Pose((p[0], p[1], z), (0.0, 0.0, cand.angle))


def centroid_grasp(capture: Capture) -> GraspCandidate:
    """Grasp at the mask pixel nearest the mask centroid, narrowest feasible angle."""
    v, u = np.nonzero(capture.mask)
    cu, cv = u.mean(), v.mean()
    i = int(np.argmin((u - cu) ** 2 + (v - cv) ** 2 + 1e-9 * (u * capture.mask.shape[0] + v)))
    uu, vv = np.array([u[i]]), np.array([v[i]])
    options = []
    for angle in ANGLES:
        w = float(jaw_widths(capture.mask, capture.depth, capture.camera, uu, vv, angle)[0])
        if w <= MAX_JAW_OPENING:
            options.append((w, angle))
    if not options:
        raise NoGraspError("centroid pixel is wider than the jaw at every angle")
    w, angle = min(options)
    return GraspCandidate(int(u[i]), int(v[i]), angle, w, 1.0)


def task_oriented_grasp(world: WorldState, tool_name: str, task: str, db: dict,
                        agents: Optional[ToolMapper] = None, *, tool_label: Optional[str] = None,
                        centroid=None, no_affordance: bool = False,
                        cfg: PerceptionConfig = PerceptionConfig(), seed: int = 0) -> GraspResult:
    """Choose a top-down grasp for ``tool_name`` suited to ``task``.

    ``centroid`` is where the vision module located the tool; without it the
    true centroid is used. ``agents`` supplies the query-to-database tool
    mapping; without it only exact database names map.
    """
    obj = world.get(tool_name)
    if not obj.is_tool:
        raise GraspError(f"{tool_name!r} is not a tool")
    label = tool_label or obj.label
    c = obj.centroid() if centroid is None else np.asarray(centroid, dtype=float)
    cap = overhead_capture(world, label, c, cfg=cfg, seed=seed)
    if no_affordance:
        cand = centroid_grasp(cap)
        return GraspResult(pixel_to_pose(cap, cand, world.table_height), cand, "centroid", None, None, cap, None)
    cands = generate_grasps(cap.mask, cap.depth, cap.camera)
    if not cands:
        raise NoGraspError(f"no feasible grasp on {tool_name!r}")
    names = sorted(db)
    if agents is not None:
        mapped = agents.map_tool(label, task, names)
    else:
        mapped = label if label in db else None
    alignment = region = None
    note = ""
    if mapped is not None and mapped in db:
        try:
            scale = cap.camera.meters_per_pixel(float(np.median(cap.depth[cap.mask])))
            alignment = align_masks(db[mapped], cap.mask, scale)
            region = transfer_region(db[mapped], alignment, cap.mask)
        except AlignmentError as e:
            note = f"alignment failed: {e}"
            alignment = None
    else:
        note = f"no database tool for {label!r}"
    if region is not None:
        try:
            cand = select_grasp(cands, region)
            return GraspResult(pixel_to_pose(cap, cand, world.table_height), cand, "region", mapped,
                               alignment, cap, region, tuple(cands))
        except NoGraspError:
            note = "no feasible candidate in the graspable region"
    cand = select_grasp(cands)
    return GraspResult(pixel_to_pose(cap, cand, world.table_height), cand, "fallback", mapped,
                       alignment, cap, None, tuple(cands), note)
