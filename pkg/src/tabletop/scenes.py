"""Object catalogue and randomized scene generation for the toy-kitchen tasks.

Every catalogue entry is authored in a convenient frame and then re-centred
so that the object origin is the centroid of its exposed, non-downward
surface. That is the point a depth camera above the table can localise, so the resolver and the vision pipeline talk about the same point.
Produce is modelled as upright cylinders: a ball's lower half is invisible
to cameras above the table, which would bias its measured height.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional

import numpy as np

from .geometry import Primitive, Shape
from .world import SCHEMA_VERSION, WorldState, load_scene


def _cyl_x(r, length, cx, cz):
    return {"kind": "cylinder", "size": [r, length], "offset": [cx, 0.0, cz], "axis": "x"}


def _cyl_z(r, h, cz, cx=0.0):
    return {"kind": "cylinder", "size": [r, h], "offset": [cx, 0.0, cz], "axis": "z"}


def _box(lx, ly, lz, cx, cz, cy=0.0):
    return {"kind": "box", "size": [lx, ly, lz], "offset": [cx, cy, cz]}


def _handle_region(length, r, x_end=0.0):
    return {"lo": [x_end - length, -(r + 0.002), 0.0], "hi": [x_end - 0.002, r + 0.002, 2 * r + 0.001]}


# name -> (shape parts, kind, tool_class, graspable region or None)
CATALOG: dict = {
    "tomato": ([_cyl_z(0.022, 0.035, 0.0175)], "rigid", None, None),
    "apple": ([_cyl_z(0.024, 0.045, 0.0225)], "rigid", None, None),
    "lemon": ([_cyl_z(0.02, 0.04, 0.02)], "rigid", None, None),
    "block": ([_box(0.04, 0.04, 0.04, 0.0, 0.02)], "rigid", None, None),
    "cup": ([_cyl_z(0.035, 0.06, 0.03)], "rigid", None, None),
    "can": ([_cyl_z(0.032, 0.07, 0.035)], "rigid", None, None),
    "bowl": ([_cyl_z(0.065, 0.045, 0.0225)], "container", None, None),
    "pot": ([_cyl_z(0.06, 0.05, 0.025)], "container", None, None),
    "plate": ([_cyl_z(0.07, 0.02, 0.01)], "rigid", None, None),
    "candy": ([_cyl_z(0.03, 0.015, 0.0075)], "granular", None, None),
    "dough": ([_cyl_z(0.035, 0.03, 0.015)], "dough", None, None),
    "scoop": (
        [_cyl_x(0.01, 0.10, -0.05, 0.01), _box(0.08, 0.06, 0.015, 0.04, 0.0075)],
        "rigid", "scoop", _handle_region(0.10, 0.01),
    ),
    "ladle": (
        [_cyl_x(0.01, 0.12, -0.06, 0.01), _box(0.07, 0.07, 0.018, 0.035, 0.009)],
        "rigid", "scoop", _handle_region(0.12, 0.01),
    ),
    "flattener": (
        [_cyl_z(0.05, 0.01, 0.005), _cyl_z(0.012, 0.06, 0.04)],
        "rigid", "flattener", {"lo": [-0.015, -0.015, 0.0101], "hi": [0.015, 0.015, 0.071]},
    ),
    "whisk": (
        [_cyl_x(0.01, 0.10, -0.05, 0.01), _cyl_z(0.028, 0.055, 0.0275, cx=0.03)],
        "rigid", "whisk", _handle_region(0.10, 0.01),
    ),
    "hammer": (
        [_cyl_x(0.012, 0.14, -0.07, 0.012), _box(0.03, 0.09, 0.03, 0.015, 0.015)],
        "rigid", "hammer", _handle_region(0.14, 0.012),
    ),
    "spatula": (
        [_cyl_x(0.01, 0.10, -0.05, 0.01), _box(0.09, 0.07, 0.006, 0.045, 0.003)],
        "rigid", "spatula", _handle_region(0.10, 0.01),
    ),
    "fork": (
        [_cyl_x(0.01, 0.10, -0.05, 0.01), _box(0.045, 0.025, 0.008, 0.0225, 0.004)],
        "pointed", "other", _handle_region(0.10, 0.01),
    ),
    "knife": (
        [_cyl_x(0.01, 0.09, -0.045, 0.01), _box(0.10, 0.02, 0.004, 0.05, 0.002)],
        "rigid", "other", _handle_region(0.09, 0.01),
    ),
}

TOOL_TYPES = tuple(k for k, v in CATALOG.items() if v[3] is not None)


@lru_cache(maxsize=None)
def _reference_point(object_type: str) -> tuple:
    parts = CATALOG[object_type][0]
    shape = Shape(tuple(Primitive(p["kind"], tuple(p["size"]), tuple(p["offset"]), p.get("axis", "z"))
                        for p in parts))
    return tuple(float(v) for v in shape.surface_centroid())


def _recentred(object_type: str):
    parts, kind, tool_class, region = CATALOG[object_type]
    offs = np.array([p["offset"] for p in parts], dtype=float)
    c = np.array(_reference_point(object_type))
    new_parts = []
    for p, off in zip(parts, offs - c):
        q = dict(p)
        q["offset"] = [float(v) for v in off]
        new_parts.append(q)
    new_region = None
    if region is not None:
        new_region = {
            "lo": [float(a - b) for a, b in zip(region["lo"], c)],
            "hi": [float(a - b) for a, b in zip(region["hi"], c)],
        }
    return new_parts, kind, tool_class, new_region, c


def object_doc(object_type: str, xy, yaw: float = 0.0, name: Optional[str] = None, table_height: float = 0.0) -> dict:
    """Scene-document entry for a catalogue object resting on the table."""
    parts, kind, tool_class, region, c = _recentred(object_type)
    d = {
        "name": name or object_type,
        "kind": kind,
        "is_tool": region is not None,
    }
    if tool_class is not None:
        d["tool_class"] = tool_class
    d["pose"] = {
        "position": [float(xy[0]), float(xy[1]), float(table_height + c[2])],
        "orientation": [0.0, 0.0, float(yaw)],
    }
    d["shape"] = parts
    if region is not None:
        d["graspable_region"] = region
    return d


def footprint_radius(object_type: str) -> float:
    parts, *_ = _recentred(object_type)
    r = 0.0
    for p in parts:
        ox, oy = p["offset"][0], p["offset"][1]
        if p["kind"] == "box":
            ext = math.hypot(abs(ox) + p["size"][0] / 2, abs(oy) + p["size"][1] / 2)
        elif p["kind"] == "cylinder" and p.get("axis", "z") == "x":
            ext = math.hypot(abs(ox) + p["size"][1] / 2, abs(oy) + p["size"][0])
        else:
            ext = math.hypot(ox, oy) + p["size"][0]
        r = max(r, ext)
    return r


def scene_doc(objects: list, table_height: float = 0.0) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "table_height": table_height,
        "table_center": [0.5, 0.0],
        "home_pose": {"position": [0.35, 0.0, 0.40], "orientation": [0.0, 0.0, 0.0]},
        "objects": objects,
    }


WORKSPACE_X = (0.36, 0.64)
WORKSPACE_Y = (-0.22, 0.22)


def random_layout(object_types: list, rng: np.random.Generator, names: Optional[list] = None,
                  clearance: float = 0.03, max_tries: int = 200, restarts: int = 50) -> dict:
    """Place catalogue objects at random non-overlapping table positions.

    Tools keep yaw 0 (handle toward -x); positions are what varies. A layout
    that paints itself into a corner is restarted from scratch.
    """
    names = names or list(object_types)
    radii = [footprint_radius(t) for t in object_types]
    for _ in range(restarts):
        placed = []
        for r in radii:
            for _ in range(max_tries):
                xy = np.array([rng.uniform(*WORKSPACE_X), rng.uniform(*WORKSPACE_Y)])
                if all(np.linalg.norm(xy - q) >= r + rq + clearance for q, rq in placed):
                    placed.append((xy, r))
                    break
            else:
                break
        if len(placed) == len(radii):
            objs = [object_doc(t, xy, name=n) for (xy, _), t, n in zip(placed, object_types, names)]
            return scene_doc(objs)
    raise RuntimeError(f"could not lay out {list(names)} without overlap")


def random_scene(object_types: list, seed: int, names: Optional[list] = None) -> WorldState:
    return load_scene(random_layout(object_types, np.random.default_rng(seed), names))
