"""Executing gripper actions against the world and checking step outcomes.

Every threshold that decides whether a tool effect fired is a module constant
so the harness gates stay mechanically checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsl import GoTo, Grasp, LowLevelAction, Tilt
from .geometry import Pose, Primitive
from .plan import HighLevelStep
from .world import TABLE_NAME, ObjectEffects, SceneObject, WorldError, WorldState, resolve_location

GRASP_PROXIMITY = 0.02  # m, tcp to object surface
MAX_JAW_OPENING = 0.08  # m
HANDLE_MARGIN = 0.005  # m, slack on the graspable-region box
SCOOP_TILT_DEG = 30.0  # tool elevation that lifts a swept load
POUR_TILT_DEG = -30.0  # tool elevation that empties the tool
FLATTEN_CLEARANCE = 0.01  # m above the table
WHISK_REVERSALS = 3
PLACE_TOLERANCE = 0.03  # m
CONTAINER_FLOOR = 0.005  # m
TABLE_SLACK = 0.005  # m a held object may dip into the table
PATH_STEP = 0.005  # m between sampled points on a Go-to segment


class ActionError(WorldError):
    """The action cannot be executed (target below table, double grasp, ...)."""


@dataclass(frozen=True)
class Event:
    kind: str
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class VerificationResult:
    status: str  # "pass" | "fail" | "unverifiable"
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


# -- tool geometry helpers ---------------------------------------------------


def _head_state(obj: SceneObject) -> tuple[np.ndarray, float, float]:
    """Centre, bottom height and footprint radius of the working end."""
    parts = obj.head_parts()
    vols = np.array([p.volume() for p in parts])
    offs = np.array([p.offset for p in parts])
    centre = obj.pose.transform_points(((vols[:, None] * offs).sum(0) / vols.sum())[None])[0]
    lo, hi = obj.aabb(parts)
    radius = float(min(hi[0] - lo[0], hi[1] - lo[1]) / 2)
    return centre, float(lo[2]), radius


def _top(obj: SceneObject) -> float:
    return float(obj.aabb()[1][2])


def _elevation(world: WorldState, tool: SceneObject) -> Optional[float]:
    centre, _, _ = _head_state(tool)
    v = centre - np.asarray(world.robot.tcp_pose.position)
    if np.linalg.norm(v) < 0.01:
        return None
    return math.degrees(math.atan2(v[2], math.hypot(v[0], v[1])))


# -- rigid attachment --------------------------------------------------------


def _replace_pose(world: WorldState, name: str, pose: Pose) -> None:
    world.get(name).pose = pose


def _sync_attached(world: WorldState) -> None:
    r = world.robot
    if r.held_object is not None:
        m = r.tcp_pose.matrix() @ r.grasp_rel.matrix()
        _replace_pose(world, r.held_object, Pose.from_matrix(m))
    for child, (carrier, rel) in sorted(world.carried.items()):
        m = world.get(carrier).pose.matrix() @ rel.matrix()
        _replace_pose(world, child, Pose.from_matrix(m))


def _attach(world: WorldState, child: str, carrier: str) -> None:
    rel = np.linalg.inv(world.get(carrier).pose.matrix()) @ world.get(child).pose.matrix()
    world.carried[child] = (carrier, Pose.from_matrix(rel))


def _check_table(world: WorldState) -> None:
    names = []
    if world.robot.held_object:
        names.append(world.robot.held_object)
        names += [c for c, (p, _) in world.carried.items() if p == world.robot.held_object]
    for n in names:
        if world.get(n).aabb()[0][2] < world.table_height - TABLE_SLACK:
            raise ActionError(f"held object {n!r} would collide with the table")


def _support_height(world: WorldState, obj: SceneObject, xy: np.ndarray) -> float:
    held = world.robot.held_object
    ignore = {obj.name, held} | {c for c, (p, _) in world.carried.items() if p in (obj.name, held)}
    best = world.table_height
    for other in world.objects:
        if other.name in ignore or other.name in world.carried:
            continue
        if other.footprint_distance(xy) > 0:
            continue
        if other.kind == "container":
            return float(other.aabb()[0][2] + CONTAINER_FLOOR)
        best = max(best, _top(other))
    return best


def _rest_on_support(world: WorldState, name: str) -> None:
    obj = world.get(name)
    xy = obj.centroid()[:2]
    drop = _support_height(world, obj, xy) - obj.aabb()[0][2]
    p = np.asarray(obj.pose.position) + np.array([0, 0, drop])
    obj.pose = obj.pose.with_position(p)


# -- effect rules ------------------------------------------------------------


def _bump(world: WorldState, name: str, **changes) -> None:
    e = world.effects.setdefault(name, ObjectEffects())
    for k, v in changes.items():
        setattr(e, k, v)


def _scoop_sweep(world, tool, path_tcp, events):
    if tool.tool_class != "scoop" or not world.robot.handle_grasp:
        return
    for g in world.objects:
        if g.kind != "granular" or g.name in world.carried:
            continue
        top = _top(g)
        for tcp in path_tcp:
            _set_tcp(world, tcp)
            centre, bottom, radius = _head_state(tool)
            if bottom <= top and g.footprint_distance(centre[:2]) <= radius:
                pair = (tool.name, g.name)
                if pair not in world.pending_scoops:
                    world.pending_scoops = tuple(sorted(world.pending_scoops + (pair,)))
                    events.append(Event("sweep", {"tool": tool.name, "object": g.name}))
                break


def _flatten(world, tool, start_bottom, events):
    if tool.tool_class != "flattener":
        return
    centre, bottom, _ = _head_state(tool)
    if bottom > world.table_height + FLATTEN_CLEARANCE:
        return
    for d in world.objects:
        if d.kind != "dough" or world.effect(d.name).flattened:
            continue
        if start_bottom < _top(d) - 1e-9:
            continue
        if d.footprint_distance(centre[:2]) > 0:
            continue
        parts = []
        for p in d.shape.parts:
            off = (p.offset[0], p.offset[1], p.offset[2] / 2)
            if p.kind == "box":
                parts.append(Primitive("box", (p.size[0] * math.sqrt(2), p.size[1] * math.sqrt(2), p.size[2] / 2), off))
            elif p.kind == "sphere":
                parts.append(Primitive("cylinder", (p.size[0] * math.sqrt(2), p.size[0]), off))
            else:
                parts.append(Primitive("cylinder", (p.size[0] * math.sqrt(2), p.size[1] / 2), off, p.axis))
        d.shape = type(d.shape)(tuple(parts))
        _rest_on_support(world, d.name)
        _bump(world, d.name, flattened=True)
        events.append(Event("flatten", {"tool": tool.name, "object": d.name}))


def _whisk(world, tool, start_centre, events):
    if tool.tool_class != "whisk" or not world.robot.handle_grasp:
        return
    centre, bottom, _ = _head_state(tool)
    move = (centre - start_centre)[:2]
    if np.linalg.norm(move) < 1e-6:
        return
    for b in world.objects:
        if b.kind != "container":
            continue
        inside = (
            b.footprint_distance(centre[:2]) == 0
            and b.footprint_distance(start_centre[:2]) == 0
            and bottom < _top(b)
        )
        if not inside:
            continue
        count, last = world.whisk_track.get(b.name, [0, None])
        if last is not None and float(np.dot(move, last)) < 0:
            count += 1
        world.whisk_track[b.name] = [count, tuple(float(v) for v in move)]
        if count >= WHISK_REVERSALS and not world.effect(b.name).whisked:
            _bump(world, b.name, whisked=True)
            events.append(Event("whisk", {"tool": tool.name, "object": b.name}))


def _poke(world, tool, start_bottom, events):
    if tool.kind != "pointed":
        return
    centre, bottom, radius = _head_state(tool)
    if bottom >= start_bottom:
        return
    for d in world.objects:
        if d.kind != "dough" or not world.effect(d.name).flattened:
            continue
        top = _top(d)
        if start_bottom >= top and bottom <= top and d.footprint_distance(centre[:2]) <= radius:
            _bump(world, d.name, holes_poked=world.effect(d.name).holes_poked + 1)
            events.append(Event("poke", {"tool": tool.name, "object": d.name}))


def _after_tilt(world, tool, events):
    elev = _elevation(world, tool)
    if elev is None:
        return
    if elev >= SCOOP_TILT_DEG and world.robot.handle_grasp:
        for t, g in world.pending_scoops:
            if t != tool.name:
                continue
            centre, _, _ = _head_state(tool)
            load = world.get(g)
            lift = _top(tool) - load.aabb()[0][2]
            load.pose = load.pose.with_position(
                (centre[0], centre[1], load.pose.position[2] + lift)
            )
            _attach(world, g, tool.name)
            e = world.effect(tool.name)
            _bump(world, tool.name, contains=tuple(sorted(set(e.contains) | {g})))
            events.append(Event("scoop", {"tool": tool.name, "object": g}))
        world.pending_scoops = tuple(p for p in world.pending_scoops if p[0] != tool.name)
    elif elev <= POUR_TILT_DEG and world.effect(tool.name).contains:
        centre, _, _ = _head_state(tool)
        target = None
        for o in sorted(world.objects, key=lambda o: (o.kind != "container", o.name)):
            if o.name == tool.name or o.name in world.carried or o.kind not in ("container", "dough"):
                continue
            if o.footprint_distance(centre[:2]) == 0:
                target = o
                break
        items = world.effect(tool.name).contains
        _bump(world, tool.name, contains=())
        for g in items:
            world.carried.pop(g, None)
            load = world.get(g)
            xy = (target.centroid()[:2] if target is not None else centre[:2])
            load.pose = Pose((xy[0], xy[1], load.pose.position[2]), (0.0, 0.0, load.pose.orientation[2]))
            _rest_on_support(world, g)
        if target is not None:
            e = world.effect(target.name)
            _bump(world, target.name, contains=tuple(sorted(set(e.contains) | set(items))))
        events.append(Event("pour", {"tool": tool.name, "into": target.name if target else None, "items": list(items)}))


# -- actions -----------------------------------------------------------------


def _set_tcp(world: WorldState, position) -> None:
    world.robot.tcp_pose = world.robot.tcp_pose.with_position(tuple(position))
    _sync_attached(world)


def _goto(world: WorldState, a: GoTo, events: list) -> None:
    target = resolve_location(world, a.location) + np.asarray(a.delta) / 100.0
    if target[2] < world.table_height:
        raise ActionError(f"target below table: z={target[2]:.4f}")
    start = np.asarray(world.robot.tcp_pose.position)
    held = world.robot.held_object
    if held is None:
        _set_tcp(world, target)
        events.append(Event("move", {"to": [float(v) for v in target]}))
        return
    tool = world.get(held)
    start_centre, start_bottom, _ = _head_state(tool)
    n = max(2, int(math.ceil(np.linalg.norm(target - start) / PATH_STEP)) + 1)
    path = [start + (target - start) * s for s in np.linspace(0.0, 1.0, n)]
    _scoop_sweep(world, tool, path, events)
    _set_tcp(world, target)
    _check_table(world)
    _flatten(world, tool, start_bottom, events)
    _whisk(world, tool, start_centre, events)
    _poke(world, tool, start_bottom, events)
    events.append(Event("move", {"to": [float(v) for v in target]}))


def _closing_direction(world: WorldState) -> np.ndarray:
    rot = world.robot.tcp_pose.rotation()
    return rot @ np.array([0.0, 1.0, 0.0])


def _grasp_close(world: WorldState, events: list) -> None:
    r = world.robot
    if r.held_object is not None:
        raise ActionError(f"grasp commanded while already holding {r.held_object!r}")
    tcp = np.asarray(r.tcp_pose.position)
    closing = _closing_direction(world)
    best = None
    for obj in world.objects:
        if obj.name in world.carried:
            continue
        dists = obj.primitive_distances(tcp)
        i = min(dists, key=lambda k: (dists[k], k))
        if dists[i] > GRASP_PROXIMITY:
            continue
        prim, m = obj.primitive_poses()[i]
        if prim.width_along(m[:3, :3].T @ closing) > MAX_JAW_OPENING:
            continue
        key = (dists[i], obj.name)
        if best is None or key < best[0]:
            best = (key, obj)
    r.gripper_open = False
    if best is None:
        events.append(Event("grasp_empty"))
        return
    obj = best[1]
    rel = np.linalg.inv(r.tcp_pose.matrix()) @ obj.pose.matrix()
    local = obj.pose.inverse_transform_points(tcp[None])[0]
    r.held_object = obj.name
    r.grasp_rel = Pose.from_matrix(rel)
    r.grasp_point = tuple(float(v) for v in local)
    r.handle_grasp = bool(
        obj.graspable_region is not None and obj.graspable_region.contains(local, HANDLE_MARGIN)
    )
    events.append(Event("grasp", {"object": obj.name, "handle": r.handle_grasp}))


def _grasp_open(world: WorldState, events: list) -> None:
    r = world.robot
    r.gripper_open = True
    held = r.held_object
    if held is None:
        return
    r.held_object = None
    r.grasp_rel = None
    r.grasp_point = None
    r.handle_grasp = False
    world.pending_scoops = tuple(p for p in world.pending_scoops if p[0] != held)
    _rest_on_support(world, held)
    _sync_attached(world)
    events.append(Event("release", {"object": held}))


def apply_action(world: WorldState, action: LowLevelAction) -> tuple[WorldState, list]:
    """Pure state transition: returns a new world and the events raised."""
    w = world.copy()
    events: list = []
    if isinstance(action, GoTo):
        _goto(w, action, events)
    elif isinstance(action, Grasp):
        (_grasp_close if action.state == 1 else _grasp_open)(w, events)
    elif isinstance(action, Tilt):
        w.robot.tcp_pose = Pose(w.robot.tcp_pose.position, action.angles)
        _sync_attached(w)
        _check_table(w)
        if w.robot.held_object:
            _after_tilt(w, w.get(w.robot.held_object), events)
        events.append(Event("tilt", {"angles": list(action.angles)}))
    else:
        raise TypeError(f"not an action: {action!r}")
    return w, events


def apply_actions(world: WorldState, actions) -> tuple[WorldState, list]:
    events = []
    for a in actions:
        world, ev = apply_action(world, a)
        events.extend(ev)
    return world, events


# -- verification ------------------------------------------------------------


def _place_reach(world: WorldState, item: str, step: HighLevelStep) -> float:
    reach = PLACE_TOLERANCE
    ref = step.location.object
    if ref is not None and ref != item and ref != TABLE_NAME and world.has(ref):
        reach += world.get(ref).footprint_radius() + world.get(item).footprint_radius()
    return reach


def verify_step(before: WorldState, after: WorldState, step: HighLevelStep) -> VerificationResult:
    action = step.action.strip().lower()
    if action == "pickup":
        held = after.robot.held_object
        if held == step.object:
            return VerificationResult("pass")
        return VerificationResult("fail", f"holding {held!r}, expected {step.object!r}")
    if action == "place":
        item = step.tool or step.object
        if item is None or not after.has(item):
            return VerificationResult("fail", f"nothing to place ({item!r})")
        if after.robot.held_object == item:
            return VerificationResult("fail", f"{item!r} still held")
        target = resolve_location(after, step.location)
        d = float(np.linalg.norm(after.get(item).centroid()[:2] - target[:2]))
        reach = _place_reach(after, item, step)
        if d <= reach:
            return VerificationResult("pass")
        return VerificationResult("fail", f"{item!r} is {d:.3f} m from target (limit {reach:.3f})")
    if action == "scoop":
        if step.tool is None or step.object is None:
            return VerificationResult("fail", "scoop needs a tool and an object")
        if step.object in after.effect(step.tool).contains:
            return VerificationResult("pass")
        return VerificationResult("fail", "effect not achieved")
    if action == "pour":
        if step.object is None:
            return VerificationResult("fail", "pour needs a target object")
        gained = set(after.effect(step.object).contains) - set(before.effect(step.object).contains)
        return VerificationResult("pass") if gained else VerificationResult("fail", "effect not achieved")
    if action in ("flatten", "whisk", "poke"):
        if step.object is None:
            return VerificationResult("fail", f"{action} needs an object")
        e_after, e_before = after.effect(step.object), before.effect(step.object)
        done = {
            "flatten": e_after.flattened,
            "whisk": e_after.whisked,
            "poke": e_after.holes_poked > e_before.holes_poked,
        }[action]
        return VerificationResult("pass") if done else VerificationResult("fail", "effect not achieved")
    return VerificationResult("unverifiable", f"no postcondition known for action {step.action!r}")
