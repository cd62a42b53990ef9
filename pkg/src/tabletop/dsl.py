"""Gripper action language: ``Go-to``, ``Grasp`` and ``Tilt`` commands.

Grammar (one command per line, whitespace tolerant)::

    Go-to: <location> + (dx, dy, dz) cm
    Grasp: <0|1>
    Tilt:(roll, pitch, yaw)

Deltas are centimetres; tilt angles are absolute base-frame degrees.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Union

from .plan import Diagnostic, LocationExpr, PlanParseError, ValidationReport, format_location, parse_location


class ActionParseError(ValueError):
    pass


@dataclass(frozen=True)
class GoTo:
    location: LocationExpr
    delta: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = tuple(float(v) for v in self.delta)
        if len(d) != 3 or not all(math.isfinite(v) for v in d):
            raise ValueError("delta must be three finite numbers")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class Grasp:
    state: int

    def __post_init__(self):
        if self.state not in (0, 1):
            raise ValueError("grasp state must be 0 or 1")


@dataclass(frozen=True)
class Tilt:
    angles: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = tuple(float(v) for v in self.angles)
        if len(a) != 3 or not all(math.isfinite(v) for v in a):
            raise ValueError("tilt angles must be three finite numbers")
        object.__setattr__(self, "angles", a)


LowLevelAction = Union[GoTo, Grasp, Tilt]

_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_TRIPLE = rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\)"
_GOTO_RE = re.compile(rf"^\s*Go-to\s*:\s*(?P<loc>.+?)\s*\+\s*{_TRIPLE}\s*cm\s*$")
_GRASP_RE = re.compile(r"^\s*Grasp\s*:\s*(?P<v>\S+)\s*$")
_TILT_RE = re.compile(rf"^\s*Tilt\s*:\s*{_TRIPLE}\s*$")
_HEAD_RE = re.compile(r"^\s*(Go-to|Grasp|Tilt)\s*:")


def parse_action(text: str) -> LowLevelAction:
    head = _HEAD_RE.match(text)
    if not head:
        raise ActionParseError(f"unknown command head: {text!r}")
    kind = head.group(1)
    if kind == "Go-to":
        m = _GOTO_RE.match(text)
        if not m:
            raise ActionParseError(f"malformed Go-to command: {text!r}")
        try:
            loc = parse_location(m.group("loc"))
        except PlanParseError as exc:
            raise ActionParseError(str(exc)) from exc
        return GoTo(loc, tuple(float(m.group(i)) for i in (2, 3, 4)))
    if kind == "Grasp":
        m = _GRASP_RE.match(text)
        if not m or m.group("v") not in ("0", "1"):
            raise ActionParseError(f"grasp value must be 0 or 1: {text!r}")
        return Grasp(int(m.group("v")))
    m = _TILT_RE.match(text)
    if not m:
        raise ActionParseError(f"malformed Tilt command: {text!r}")
    return Tilt(tuple(float(m.group(i)) for i in (1, 2, 3)))


def _fmt(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _triple(v) -> str:
    return "(" + ", ".join(_fmt(x) for x in v) + ")"


def serialize_action(action: LowLevelAction) -> str:
    if isinstance(action, GoTo):
        return f"Go-to: {format_location(action.location)} + {_triple(action.delta)} cm"
    if isinstance(action, Grasp):
        return f"Grasp: {action.state}"
    if isinstance(action, Tilt):
        return f"Tilt:{_triple(action.angles)}"
    raise TypeError(f"not an action: {action!r}")


def parse_actions(text: str) -> list[LowLevelAction]:
    """Parse one action per non-blank line, tolerating ``1.`` style enumerators."""
    out = []
    for line in text.splitlines():
        line = re.sub(r"^\s*\d+[.)]\s*", "", line).strip().strip("'\"`")
        if line:
            out.append(parse_action(line))
    return out


WORKSPACE_BOUND_CM = 50.0


def validate_sequence(
    actions: Iterable[LowLevelAction],
    held_object: bool = False,
    gripper_open: Optional[bool] = None,
    bound_cm: float = WORKSPACE_BOUND_CM,
) -> ValidationReport:
    """Purely syntactic redundancy and workspace checks.

    ``held_object`` says whether something is in the gripper before the first
    action; the gripper is assumed closed exactly when something is held
    unless ``gripper_open`` says otherwise.
    """
    closed = held_object if gripper_open is None else not gripper_open
    seen_goto = False
    report = ValidationReport()
    for i, a in enumerate(actions, start=1):
        if isinstance(a, GoTo):
            seen_goto = True
            if any(abs(v) > bound_cm for v in a.delta):
                report.diagnostics.append(
                    Diagnostic(i, "workspace_bound", f"delta {a.delta} exceeds ±{bound_cm:g} cm")
                )
        elif isinstance(a, Grasp):
            if a.state == 1 and closed:
                report.diagnostics.append(Diagnostic(i, "redundant_grasp", "close while already closed"))
            elif a.state == 0 and not closed:
                report.diagnostics.append(Diagnostic(i, "redundant_release", "open while already open"))
            if a.state == 1 and not seen_goto:
                report.diagnostics.append(Diagnostic(i, "grasp_without_goto", "Grasp 1 with no preceding Go-to"))
            closed = a.state == 1
    return report
