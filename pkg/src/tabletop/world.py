"""Ground-truth table-top world state and the scene document format."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .geometry import Box3, Pose, Primitive, Shape
from .plan import TABLE_NAME, LocationExpr, LocationKind

SCHEMA_VERSION = 1

TOOL_CLASSES = ("scoop", "flattener", "whisk", "hammer", "spatula", "other")
OBJECT_KINDS = ("rigid", "granular", "dough", "container", "pointed")

DEFAULT_HOME = Pose((0.35, 0.0, 0.40), (0.0, 0.0, 0.0))


class WorldError(Exception):
    pass


class SceneError(WorldError):
    """The scene document is malformed."""


class UnknownObjectError(WorldError, KeyError):
    def __str__(self) -> str:
        return f"unknown object {self.args[0]!r}"


@dataclass
class SceneObject:
    name: str
    shape: Shape
    pose: Pose
    original_pose: Pose
    is_tool: bool = False
    tool_class: Optional[str] = None
    graspable_region: Optional[Box3] = None
    kind: str = "rigid"

    @property
    def label(self) -> str:
        """Detector label: the name without a trailing ``_<n>`` instance suffix."""
        head, sep, tail = self.name.rpartition("_")
        return head if sep and tail.isdigit() else self.name

    def primitive_poses(self) -> list[tuple[Primitive, np.ndarray]]:
        """Each primitive with its 4x4 centre transform in the base frame."""
        m = self.pose.matrix()
        out = []
        for p in self.shape.parts:
            c = np.eye(4)
            c[:3, 3] = p.offset
            out.append((p, m @ c))
        return out

    def centroid(self) -> np.ndarray:
        """Ground-truth centroid: exposed-surface centroid in the base frame.

        This is the point a surface-observing depth sensor can localise; the
        catalogue puts the object origin here.
        """
        return self.pose.transform_points(self.shape.surface_centroid()[None])[0]

    def aabb(self, parts=None) -> tuple[np.ndarray, np.ndarray]:
        los, his = [], []
        for p, m in self.primitive_poses():
            if parts is not None and p not in parts:
                continue
            if p.kind == "sphere":
                r = p.size[0]
                los.append(m[:3, 3] - r)
                his.append(m[:3, 3] + r)
                continue
            he = p.half_extents()
            ext = np.abs(m[:3, :3]) @ he
            los.append(m[:3, 3] - ext)
            his.append(m[:3, 3] + ext)
        return np.min(los, axis=0), np.max(his, axis=0)

    def distance(self, point) -> float:
        """Distance from a base-frame point to the solid."""
        return min(self.primitive_distances(point).values()) if self.shape.parts else np.inf

    def primitive_distances(self, point) -> dict:
        point = np.asarray(point, dtype=float)
        out = {}
        for i, (p, m) in enumerate(self.primitive_poses()):
            local = (point - m[:3, 3]) @ m[:3, :3]
            out[i] = float(p.distance(local[None])[0])
        return out

    def footprint_distance(self, xy) -> float:
        """Horizontal distance from ``xy`` to the object's footprint, 0 inside."""
        xy = np.asarray(xy, dtype=float)[:2]
        best = np.inf
        for p, m in self.primitive_poses():
            upright = p.kind == "sphere" or (
                p.kind == "cylinder" and abs(m[:3, :3] @ _axis_vec(p.axis))[2] > 0.999
            )
            if upright:
                r = p.size[0]
                d = max(0.0, float(np.linalg.norm(xy - m[:2, 3])) - r)
            else:
                ext = (np.abs(m[:3, :3]) @ p.half_extents())[:2]
                d = float(np.linalg.norm(np.maximum(np.abs(xy - m[:2, 3]) - ext, 0.0)))
            best = min(best, d)
        return best

    def footprint_radius(self) -> float:
        lo, hi = self.aabb()
        return float(max(hi[0] - lo[0], hi[1] - lo[1]) / 2)

    def head_parts(self) -> list[Primitive]:
        """Primitives outside the graspable region (the working end of a tool)."""
        if self.graspable_region is None:
            return list(self.shape.parts)
        head = [p for p in self.shape.parts if not self.graspable_region.contains(p.offset)]
        return head or list(self.shape.parts)


def _axis_vec(axis: str) -> np.ndarray:
    v = np.zeros(3)
    v["xyz".index(axis)] = 1.0
    return v


@dataclass
class RobotState:
    tcp_pose: Pose = DEFAULT_HOME
    gripper_open: bool = True
    held_object: Optional[str] = None
    home_pose: Pose = DEFAULT_HOME
    # object pose expressed in the tcp frame while held
    grasp_rel: Optional[Pose] = None
    # tcp position in the held object's frame at the moment of grasping
    grasp_point: Optional[tuple] = None
    handle_grasp: bool = False


@dataclass
class ObjectEffects:
    flattened: bool = False
    contains: tuple = ()
    whisked: bool = False
    holes_poked: int = 0


@dataclass
class WorldState:
    objects: list = field(default_factory=list)
    robot: RobotState = field(default_factory=RobotState)
    effects: dict = field(default_factory=dict)
    table_height: float = 0.0
    table_center: tuple = (0.5, 0.0)
    # child -> (carrier, child pose in carrier frame), e.g. candy riding in a scoop
    carried: dict = field(default_factory=dict)
    # (tool, granular object) pairs swept but not yet lifted
    pending_scoops: tuple = ()
    # container -> [reversal count, last horizontal direction or None]
    whisk_track: dict = field(default_factory=dict)

    def get(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise UnknownObjectError(name)

    def has(self, name: str) -> bool:
        return any(o.name == name for o in self.objects)

    def names(self) -> list[str]:
        return [o.name for o in self.objects]

    def effect(self, name: str) -> ObjectEffects:
        return self.effects.get(name) or ObjectEffects()

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)


def resolve_location(world: WorldState, loc: LocationExpr) -> np.ndarray:
    """Ground a location expression to a base-frame point in meters."""
    if loc.kind is LocationKind.HOME:
        return np.array(world.robot.home_pose.position)
    if loc.object == TABLE_NAME and not world.has(TABLE_NAME):
        return np.array([*world.table_center, world.table_height])
    obj = world.get(loc.object)
    pose = obj.original_pose if loc.kind is LocationKind.ORIGINAL_OF else obj.pose
    return np.array(pose.position)


# -- scene document ----------------------------------------------------------


def _vec(value, n, where):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise SceneError(f"{where}: expected a list of {n} numbers")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{where}: expected numbers") from exc


def _pose_from(doc, where) -> Pose:
    if not isinstance(doc, dict):
        raise SceneError(f"{where}: expected a mapping with position/orientation")
    return Pose(
        _vec(doc.get("position"), 3, f"{where}.position"),
        _vec(doc.get("orientation", [0, 0, 0]), 3, f"{where}.orientation"),
    )


def _pose_doc(p: Pose) -> dict:
    return {"position": list(p.position), "orientation": list(p.orientation)}


def _object_from(doc, i) -> SceneObject:
    where = f"objects[{i}]"
    if not isinstance(doc, dict):
        raise SceneError(f"{where}: expected a mapping")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise SceneError(f"{where}.name: missing or not a string")
    where = f"objects[{i}] ({name})"
    parts = []
    shape_doc = doc.get("shape")
    if not isinstance(shape_doc, list) or not shape_doc:
        raise SceneError(f"{where}.shape: expected a non-empty list of primitives")
    for j, pd in enumerate(shape_doc):
        pw = f"{where}.shape[{j}]"
        if not isinstance(pd, dict):
            raise SceneError(f"{pw}: expected a mapping")
        try:
            parts.append(
                Primitive(
                    kind=pd.get("kind"),
                    size=tuple(pd.get("size") or ()),
                    offset=_vec(pd.get("offset", [0, 0, 0]), 3, f"{pw}.offset"),
                    axis=pd.get("axis", "z"),
                )
            )
        except (TypeError, ValueError) as exc:
            raise SceneError(f"{pw}: {exc}") from exc
    is_tool = bool(doc.get("is_tool", False))
    region = None
    if doc.get("graspable_region") is not None:
        rd = doc["graspable_region"]
        try:
            region = Box3(_vec(rd.get("lo"), 3, f"{where}.graspable_region.lo"),
                          _vec(rd.get("hi"), 3, f"{where}.graspable_region.hi"))
        except (AttributeError, ValueError) as exc:
            raise SceneError(f"{where}.graspable_region: {exc}") from exc
    if is_tool != (region is not None):
        raise SceneError(f"{where}: is_tool must be true exactly when graspable_region is given")
    tool_class = doc.get("tool_class")
    if tool_class is not None and tool_class not in TOOL_CLASSES:
        raise SceneError(f"{where}.tool_class: {tool_class!r} not one of {TOOL_CLASSES}")
    kind = doc.get("kind", "rigid")
    if kind not in OBJECT_KINDS:
        raise SceneError(f"{where}.kind: {kind!r} not one of {OBJECT_KINDS}")
    pose = _pose_from(doc.get("pose"), f"{where}.pose")
    return SceneObject(
        name=name,
        shape=Shape(tuple(parts)),
        pose=pose,
        original_pose=pose,
        is_tool=is_tool,
        tool_class=tool_class,
        graspable_region=region,
        kind=kind,
    )


def scene_from_dict(doc: dict) -> WorldState:
    if not isinstance(doc, dict):
        raise SceneError("scene document must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SceneError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    objs = doc.get("objects") or []
    if not isinstance(objs, list):
        raise SceneError("objects: expected a list")
    objects = [_object_from(o, i) for i, o in enumerate(objs)]
    seen = set()
    for o in objects:
        if o.name in seen:
            raise SceneError(f"duplicate object name {o.name!r}")
        seen.add(o.name)
    table_height = float(doc.get("table_height", 0.0))
    for o in objects:
        if o.aabb()[0][2] < table_height - 1e-9:
            raise SceneError(f"object {o.name!r} extends below the table")
    home = _pose_from(doc["home_pose"], "home_pose") if "home_pose" in doc else DEFAULT_HOME
    return WorldState(
        objects=objects,
        robot=RobotState(tcp_pose=home, home_pose=home),
        effects={o.name: ObjectEffects() for o in objects},
        table_height=table_height,
        table_center=_vec(doc.get("table_center", [0.5, 0.0]), 2, "table_center"),
    )


def load_scene(source: Union[str, Path, dict]) -> WorldState:
    """Load a scene from a YAML document, a path to one, or an already-parsed dict."""
    if isinstance(source, dict):
        return scene_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith((".yaml", ".yml"))):
        source = Path(source).read_text()
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise SceneError(f"{where}{getattr(exc, 'problem', exc)}") from exc
    return scene_from_dict(doc)


def _object_doc(o: SceneObject, full: bool) -> dict:
    d = {"name": o.name, "kind": o.kind, "is_tool": o.is_tool}
    if o.tool_class is not None:
        d["tool_class"] = o.tool_class
    d["pose"] = _pose_doc(o.pose)
    if full:
        d["original_pose"] = _pose_doc(o.original_pose)
    shape = []
    for p in o.shape.parts:
        pd = {"kind": p.kind, "size": list(p.size), "offset": list(p.offset)}
        if p.kind == "cylinder":
            pd["axis"] = p.axis
        shape.append(pd)
    d["shape"] = shape
    if o.graspable_region is not None:
        d["graspable_region"] = {"lo": list(o.graspable_region.lo), "hi": list(o.graspable_region.hi)}
    return d


def scene_to_dict(world: WorldState) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "table_height": world.table_height,
        "table_center": list(world.table_center),
        "home_pose": _pose_doc(world.robot.home_pose),
        "objects": [_object_doc(o, full=False) for o in world.objects],
    }


def serialize_scene(world: WorldState) -> str:
    """Scene document for the current poses (load-time fields only)."""
    return yaml.safe_dump(scene_to_dict(world), sort_keys=False)


def world_to_dict(world: WorldState) -> dict:
    """Complete state snapshot, including robot, effects and bookkeeping."""
    r = world.robot
    doc = scene_to_dict(world)
    doc["objects"] = [_object_doc(o, full=True) for o in world.objects]
    doc["robot"] = {
        "tcp_pose": _pose_doc(r.tcp_pose),
        "gripper_open": r.gripper_open,
        "held_object": r.held_object,
        "grasp_rel": _pose_doc(r.grasp_rel) if r.grasp_rel else None,
        "grasp_point": list(r.grasp_point) if r.grasp_point is not None else None,
        "handle_grasp": r.handle_grasp,
    }
    doc["effects"] = {
        name: {
            "flattened": e.flattened,
            "contains": list(e.contains),
            "whisked": e.whisked,
            "holes_poked": e.holes_poked,
        }
        for name, e in sorted(world.effects.items())
    }
    doc["carried"] = {k: {"carrier": v[0], "rel": _pose_doc(v[1])} for k, v in sorted(world.carried.items())}
    doc["pending_scoops"] = [list(p) for p in world.pending_scoops]
    doc["whisk_track"] = {
        k: [v[0], list(v[1]) if v[1] is not None else None] for k, v in sorted(world.whisk_track.items())
    }
    return doc


def world_from_dict(doc: dict) -> WorldState:
    originals = {o["name"]: o.get("original_pose") for o in doc.get("objects", [])}
    world = scene_from_dict({**doc, "objects": [{k: v for k, v in o.items() if k != "original_pose"} for o in doc.get("objects", [])]})
    for o in world.objects:
        if originals.get(o.name):
            o.original_pose = _pose_from(originals[o.name], f"{o.name}.original_pose")
    rd = doc.get("robot")
    if rd:
        world.robot.tcp_pose = _pose_from(rd["tcp_pose"], "robot.tcp_pose")
        world.robot.gripper_open = rd["gripper_open"]
        world.robot.held_object = rd["held_object"]
        world.robot.grasp_rel = _pose_from(rd["grasp_rel"], "robot.grasp_rel") if rd["grasp_rel"] else None
        world.robot.grasp_point = tuple(rd["grasp_point"]) if rd["grasp_point"] is not None else None
        world.robot.handle_grasp = rd["handle_grasp"]
    for name, e in (doc.get("effects") or {}).items():
        world.effects[name] = ObjectEffects(e["flattened"], tuple(e["contains"]), e["whisked"], e["holes_poked"])
    world.carried = {k: (v["carrier"], _pose_from(v["rel"], f"carried.{k}")) for k, v in (doc.get("carried") or {}).items()}
    world.pending_scoops = tuple(tuple(p) for p in doc.get("pending_scoops") or ())
    world.whisk_track = {
        k: [v[0], tuple(v[1]) if v[1] is not None else None] for k, v in (doc.get("whisk_track") or {}).items()
    }
    return world


def serialize_world(world: WorldState) -> str:
    return yaml.safe_dump(world_to_dict(world), sort_keys=False)
