"""Rule-based responders behind the scripted backend.

They read the structured context an agent call carries and answer in the same
text formats a language model is asked for, so the strict parsers downstream
are exercised exactly as in a live run. The step-planner recipes work only
from camera geometry and the gripper's own bookkeeping, never from the
simulator's ground truth.
"""

from __future__ import annotations

import json
import math
import re
from typing import Optional

import numpy as np

from ..dsl import GoTo, Grasp, Tilt, serialize_action
from ..plan import TABLE_NAME, HighLevelStep, LocationExpr, LocationKind, parse_step, serialize_step

# verb -> acceptable tool labels, in order of preference
TOOL_FOR_VERB = {
    "scoop": ("scoop", "ladle"),
    "pour": ("scoop", "ladle"),
    "flatten": ("flattener",),
    "whisk": ("whisk",),
    "poke": ("fork", "knife"),
}
PRODUCE = ("tomato", "apple", "lemon")
# grasp-alike pairs for tools missing from the database
SIMILAR_TOOLS = {
    "ladle": "scoop",
    "spoon": "scoop",
    "fork": "spatula",
    "knife": "spatula",
    "turner": "spatula",
    "mallet": "hammer",
    "masher": "flattener",
    "press": "flattener",
}

_VERBS = ("pickup", "pick", "grab", "place", "put", "scoop", "pour", "flatten", "whisk", "poke", "make")


def _label(name: str) -> str:
    return re.sub(r"_\d+$", "", name)


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def _mentions(clause: str, names: list[str]) -> list[str]:
    """Object names mentioned in a clause, in order of appearance."""
    text = " " + " ".join(_words(clause)) + " "
    hits = []
    for n in names:
        for form in {n.lower(), _label(n).lower()}:
            phrase = " ".join(_words(form))
            for plural in ("", "s", "es"):
                i = text.find(f" {phrase}{plural} ")
                if i >= 0:
                    hits.append((i, n))
                    break
            else:
                continue
            break
    return [n for _, n in sorted(hits)]


def _pick_tool(verb: str, objects: list[dict]) -> Optional[str]:
    prefs = TOOL_FOR_VERB.get(verb, ())
    tools = [o["name"] for o in objects if o["tool"]]
    for label in prefs:
        for n in sorted(tools):
            if _label(n) == label:
                return n
    return None


def _clauses(query: str) -> list[str]:
    parts = re.split(r",\s*(?:and\s+)?|\s+and\s+|\s+then\s+|;", query.strip().rstrip("."), flags=re.I)
    return [p for p in (s.strip() for s in parts) if p]


def _verb(clause: str) -> Optional[str]:
    for w in _words(clause):
        if w in _VERBS:
            return {"pick": "pickup", "grab": "pickup", "put": "place"}.get(w, w)
    return None


# -- scene comprehension -------------------------------------------------------


def comprehend(ctx: dict) -> str:
    query = ctx["user_query"]
    scene = ctx["scene"]
    names = [o["name"] for o in scene]
    wanted = set(_mentions(query, names))
    words = set(_words(query))
    if "salad" in words:
        wanted |= {n for n in names if _label(n) in PRODUCE + ("bowl",)}
        wanted |= {n for n in names if _label(n) == "knife"}
    for clause in _clauses(query):
        verb = _verb(clause)
        if verb in TOOL_FOR_VERB:
            tool = _pick_tool(verb, scene)
            if tool:
                wanted.add(tool)
    out = [{"name": o["name"], "tool": bool(o["tool"])} for o in scene if o["name"] in wanted]
    return json.dumps(out)


# -- overall planner ---------------------------------------------------------------


def _step(action, location, obj=None, tool=None) -> str:
    return serialize_step(HighLevelStep(action, location, obj, tool))


def plan(ctx: dict) -> str:
    query = ctx["user_query"]
    objects = ctx["objects"]
    names = [o["name"] for o in objects]
    is_tool = {o["name"]: o["tool"] for o in objects}
    lines: list[str] = []
    held: list[Optional[str]] = [None]
    topic: list[Optional[str]] = [None]  # what "it" refers to
    loaded: list[Optional[str]] = [None]  # tool currently carrying material

    def put_back():
        if held[0] is not None:
            h = held[0]
            if is_tool.get(h):
                lines.append(_step("place", LocationExpr.original(h), None, h))
            held[0] = None
            loaded[0] = None

    def hold(tool):
        if held[0] == tool:
            return
        put_back()
        lines.append(_step("pickup", LocationExpr.original(tool), tool, None))
        held[0] = tool

    for clause in _clauses(query):
        verb = _verb(clause)
        ment = [m for m in _mentions(clause, names) if not is_tool.get(m)]
        refs_it = bool(re.search(r"\b(it|them)\b", clause, re.I))
        if verb == "make" and "salad" in _words(clause):
            produce = [n for n in names if _label(n) in PRODUCE]
            bowls = [n for n in names if _label(n) == "bowl"]
            for p in produce:
                lines.append(_step("pickup", LocationExpr.original(p), p, None))
                if bowls:
                    lines.append(_step("place", LocationExpr.current(bowls[0]), p, None))
            continue
        if verb in ("scoop", "flatten", "whisk", "poke"):
            target = ment[0] if ment else topic[0]
            tool = _pick_tool(verb, objects)
            if target is None or tool is None:
                continue
            hold(tool)
            lines.append(_step(verb, LocationExpr.current(target), target, tool))
            if verb == "scoop":
                loaded[0] = tool
                dest = ment[1] if len(ment) > 1 else (topic[0] if refs_it and topic[0] != target else None)
                if dest is not None and re.search(r"\b(onto|into|in|on|inside)\b", clause, re.I):
                    lines.append(_step("pour", LocationExpr.current(dest), dest, tool))
                    loaded[0] = None
            topic[0] = target
            continue
        if verb in ("place", "pour"):
            if refs_it or not ment:
                item, dests = topic[0], ment
            else:
                item, dests = ment[0], ment[1:]
            if item is None or not dests:
                continue
            dest = dests[0]
            if loaded[0] is not None:
                lines.append(_step("pour", LocationExpr.current(dest), dest, loaded[0]))
                loaded[0] = None
            else:
                if held[0] != item:
                    put_back()
                    lines.append(_step("pickup", LocationExpr.original(item), item, None))
                    held[0] = item
                lines.append(_step("place", LocationExpr.current(dest), item, None))
                held[0] = None
            topic[0] = item
            continue
        if verb == "pickup" and ment:
            put_back()
            lines.append(_step("pickup", LocationExpr.original(ment[0]), ment[0], None))
            held[0] = ment[0]
            topic[0] = ment[0]
    put_back()
    return "\n".join(lines)


# -- step planner ------------------------------------------------------------------

LIFT = 0.10  # m
APPROACH = 0.10  # m above a grasp or release point
DROP = 0.01  # m between an object's bottom and its support at release
SCOOP_TILT = 35.0
POUR_TILT = 40.0
TOUCH = 0.003  # m above the table for sweeping and pressing
NEXT_TO_GAP = 0.01  # m between footprints


class _Recipe:
    """Emits Go-to commands anchored on a location whose position the planner believes."""

    def __init__(self, ctx: dict):
        self.ctx = ctx
        self.geo = {k: (np.array(v["centroid"], float), np.array(v["dims"], float)) for k, v in ctx["geometry"].items()}
        g = ctx["gripper"]
        self.tcp = np.array(g["position"], float)
        self.orientation = tuple(g["orientation"])
        self.holding = g.get("holding")
        grip = g.get("grip") or {}
        self.tab = float(grip.get("tcp_above_bottom", 0.0))
        self.c2c = np.array(grip.get("tcp_to_centroid", (0.0, 0.0, 0.0)), float)
        self.on_handle = bool(grip.get("on_handle", False))
        self.table_h = float(ctx["table"]["height"])
        self.table_c = np.array([*ctx["table"]["center"], self.table_h], float)
        self.home = np.array(ctx["home"], float)
        self.original = {k: np.array(v, float) for k, v in ctx.get("original", {}).items()}
        self.out: list = []

    def anchor(self, loc: LocationExpr) -> np.ndarray:
        if loc.object is None:
            return self.home
        if loc.object == TABLE_NAME and loc.object not in self.geo:
            return self.table_c
        if loc.kind is LocationKind.ORIGINAL_OF and loc.object in self.original:
            return self.original[loc.object]
        return self.geo[loc.object][0]

    def goto(self, loc: LocationExpr, target) -> None:
        d = (np.asarray(target, float) - self.anchor(loc)) * 100.0
        self.out.append(GoTo(loc, tuple(round(float(v), 2) + 0.0 for v in d)))
        self.tcp = np.asarray(target, float)

    def level(self) -> None:
        r, p, y = self.orientation
        if abs(r) > 1e-6 or abs(p) > 1e-6:
            self.tilt((0.0, 0.0, y))

    def tilt(self, angles) -> None:
        angles = tuple(round(float(a), 2) + 0.0 for a in angles)
        self.out.append(Tilt(angles))
        self.orientation = angles

    def grasp(self, state: int) -> None:
        self.out.append(Grasp(state))

    @property
    def yaw(self) -> float:
        return float(self.orientation[2])

    def working_offset(self) -> np.ndarray:
        """Horizontal tcp -> working-end vector; a handle grasp puts the end past the centroid."""
        if self.on_handle:
            return np.array([self.c2c[0], self.c2c[1], 0.0])
        return np.zeros(3)

    def raise_end_angles(self, degrees: float) -> tuple:
        """Tilt that raises the working end by ``degrees`` (negative lowers it)."""
        w = self.working_offset()
        a = math.radians(self.yaw)
        lx = math.cos(a) * w[0] + math.sin(a) * w[1]
        ly = -math.sin(a) * w[0] + math.cos(a) * w[1]
        if abs(lx) < 1e-6 and abs(ly) < 1e-6:
            lx = 1.0
        if abs(lx) >= abs(ly):
            return (0.0, -degrees * math.copysign(1.0, lx), self.yaw)
        return (degrees * math.copysign(1.0, ly), 0.0, self.yaw)

    def tcp_for_bottom(self, xy, bottom_z) -> np.ndarray:
        return np.array([xy[0], xy[1], bottom_z + self.tab])

    def lines(self) -> str:
        return "\n".join(serialize_action(a) for a in self.out)


def _radius(dims) -> float:
    return float(max(dims[0], dims[1]) / 2)


def _next_to_direction(r: _Recipe, ref: str, item: Optional[str], dist: float) -> np.ndarray:
    """Side of ``ref`` with the most room; ties prefer toward the table centre."""
    c = r.geo[ref][0]
    best = None
    for k, d in enumerate((np.array([0, -1.0]), np.array([0, 1.0]), np.array([-1.0, 0]), np.array([1.0, 0]))):
        p = c[:2] + d * dist
        clear = min(
            [np.linalg.norm(p - oc[:2]) - _radius(od) for n, (oc, od) in r.geo.items() if n not in (ref, item)],
            default=1.0,
        )
        centre = -np.linalg.norm(p - r.table_c[:2])
        key = (round(min(clear, 0.2), 3), round(centre, 3), -k)
        if best is None or key > best[0]:
            best = (key, d)
    return best[1]


def _relation(query: str) -> str:
    if re.search(r"next to|beside|near", query, re.I):
        return "next_to"
    if re.search(r"\b(in|inside|into|within|onto|on)\b", query, re.I):
        return "in"
    return "at"


def _pickup(r: _Recipe, step: HighLevelStep) -> None:
    c, _ = r.geo[step.object]
    loc = step.location if step.location.object == step.object else LocationExpr.current(step.object)
    if any(abs(v) > 1e-6 for v in r.orientation):
        r.tilt((0.0, 0.0, 0.0))
    r.goto(loc, c + [0, 0, APPROACH])
    r.goto(loc, c)
    r.grasp(1)
    r.goto(loc, c + [0, 0, LIFT])


def _place(r: _Recipe, step: HighLevelStep) -> None:
    item = step.tool or step.object
    loc = step.location
    r.level()
    if loc.object == TABLE_NAME and TABLE_NAME not in r.geo:
        dz = max(0.02, round(r.tab + 0.005, 2))
        r.goto(loc, r.table_c + [0, 0, dz])
        r.grasp(0)
        r.goto(loc, r.table_c + [0, 0, LIFT])
        return
    if loc.object is None or loc.object == item:
        # back where it came from: undo the grasp offset
        base = r.anchor(loc) - r.c2c
        release = base + [0, 0, DROP]
    else:
        ref_c, ref_d = r.geo[loc.object]
        rel = _relation(r.ctx.get("user_query", ""))
        if rel == "next_to":
            dist = _radius(ref_d) + _radius(r.geo[item][1]) + NEXT_TO_GAP
            xy = ref_c[:2] + _next_to_direction(r, loc.object, item, dist) * dist
            release = r.tcp_for_bottom(xy - r.c2c[:2], r.table_h + DROP)
        else:
            release = r.tcp_for_bottom(ref_c[:2] - r.c2c[:2], r.table_h + ref_d[2] + DROP)
    r.goto(loc, release + [0, 0, APPROACH])
    r.goto(loc, release)
    r.grasp(0)
    r.goto(loc, release + [0, 0, LIFT])


def _scoop(r: _Recipe, step: HighLevelStep) -> None:
    loc = step.location
    c, d = r.geo[step.object]
    w = r.working_offset()
    u = w[:2] / np.linalg.norm(w[:2]) if np.linalg.norm(w[:2]) > 0.01 else np.array(
        [math.cos(math.radians(r.yaw)), math.sin(math.radians(r.yaw))])
    r.level()
    start = c[:2] - u * (_radius(d) + 0.08)
    r.goto(loc, r.tcp_for_bottom(start - w[:2], r.table_h + d[2] + 0.03))
    r.goto(loc, r.tcp_for_bottom(start - w[:2], r.table_h + TOUCH))
    r.goto(loc, r.tcp_for_bottom(c[:2] - w[:2], r.table_h + TOUCH))
    r.goto(loc, r.tcp + [0, 0, 0.03])
    r.tilt(r.raise_end_angles(SCOOP_TILT))
    r.goto(loc, r.tcp + [0, 0, LIFT])


def _pour(r: _Recipe, step: HighLevelStep) -> None:
    loc = step.location
    c, d = r.geo[step.object]
    w = r.working_offset()
    reach = np.linalg.norm(w[:2])
    a = math.radians(POUR_TILT)
    r.level()
    xy = c[:2] - w[:2] * math.cos(a)
    z = r.table_h + d[2] + reach * math.sin(a) + 0.06 + r.tab
    r.goto(loc, np.array([xy[0], xy[1], z]))
    r.tilt(r.raise_end_angles(-POUR_TILT))
    r.tilt((0.0, 0.0, r.yaw))
    r.goto(loc, r.tcp + [0, 0, 0.05])


def _flatten(r: _Recipe, step: HighLevelStep) -> None:
    loc = step.location
    c, d = r.geo[step.object]
    xy = c[:2] - r.working_offset()[:2]
    r.level()
    r.goto(loc, r.tcp_for_bottom(xy, r.table_h + d[2] + 0.03))
    r.goto(loc, r.tcp_for_bottom(xy, r.table_h + TOUCH))
    r.goto(loc, r.tcp + [0, 0, LIFT])


def _whisk(r: _Recipe, step: HighLevelStep) -> None:
    loc = step.location
    c, d = r.geo[step.object]
    xy = c[:2] - r.working_offset()[:2]
    r.level()
    r.goto(loc, r.tcp_for_bottom(xy, r.table_h + d[2] + 0.03))
    low = r.tcp_for_bottom(xy, max(r.table_h + 0.005, r.table_h + d[2] - 0.02))
    r.goto(loc, low)
    for dx in (0.02, -0.02, 0.02, -0.02, 0.0):
        r.goto(loc, low + [dx, 0, 0])
    r.goto(loc, r.tcp_for_bottom(xy, r.table_h + d[2] + 0.05))


def _poke(r: _Recipe, step: HighLevelStep) -> None:
    loc = step.location
    c, d = r.geo[step.object]
    base = c[:2] - r.working_offset()[:2]
    top = r.table_h + d[2]
    r.level()
    for dx in (-0.015, 0.015):
        xy = base + [dx, 0]
        r.goto(loc, r.tcp_for_bottom(xy, top + 0.02))
        r.goto(loc, r.tcp_for_bottom(xy, top - 0.005))
        r.goto(loc, r.tcp_for_bottom(xy, top + 0.02))
    r.goto(loc, r.tcp + [0, 0, LIFT])


_RECIPES = {
    "pickup": _pickup,
    "place": _place,
    "scoop": _scoop,
    "pour": _pour,
    "flatten": _flatten,
    "whisk": _whisk,
    "poke": _poke,
}


def step_actions(ctx: dict) -> str:
    step = parse_step(ctx["step"])
    recipe = _RECIPES.get(step.action.lower())
    if recipe is None:
        return ""
    r = _Recipe(ctx)
    recipe(r, step)
    return r.lines()


# -- tool mapper ---------------------------------------------------------------------


def map_tool(ctx: dict) -> str:
    query = ctx["query_tool"]
    db = list(ctx["db_tools"])
    if query in db:
        return query
    guess = SIMILAR_TOOLS.get(_label(query))
    return guess if guess in db else "NONE"


RESPONDERS = {
    "scene_comprehension": comprehend,
    "overall_planner": plan,
    "step_planner": step_actions,
    "tool_mapper": map_tool,
}


