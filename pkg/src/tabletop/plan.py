"""High-level plan steps: the four-tuple of action, location, object and tool."""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional


TABLE_NAME = "table"  # reserved: always a valid non-tool reference


class PlanParseError(ValueError):
    pass


class LocationKind(str, Enum):
    ORIGINAL_OF = "original_of"
    CURRENT_OF = "current_of"
    HOME = "home"


@dataclass(frozen=True)
class LocationExpr:
    kind: LocationKind
    object: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LocationKind(self.kind))
        if (self.object is None) != (self.kind is LocationKind.HOME):
            raise ValueError("an object is required unless the location is the home pose")

    @classmethod
    def home(cls) -> "LocationExpr":
        return cls(LocationKind.HOME)

    @classmethod
    def original(cls, name: str) -> "LocationExpr":
        return cls(LocationKind.ORIGINAL_OF, name)

    @classmethod
    def current(cls, name: str) -> "LocationExpr":
        return cls(LocationKind.CURRENT_OF, name)

    def __str__(self) -> str:
        return format_location(self)


_NAME = r"[A-Za-z0-9_][A-Za-z0-9_ \-]*?"
_LOCATION_RE = re.compile(
    rf"^\s*(?:(?P<home>robot home pose)|(?P<which>original|current) position of (?P<name>{_NAME}))\s*$"
)


def parse_location(text: str) -> LocationExpr:
    """Parse one of the three location templates; anything else is an error."""
    m = _LOCATION_RE.match(text)
    if not m:
        raise PlanParseError(f"unparseable location phrase: {text!r}")
    if m.group("home"):
        return LocationExpr.home()
    kind = LocationKind.ORIGINAL_OF if m.group("which") == "original" else LocationKind.CURRENT_OF
    return LocationExpr(kind, m.group("name").strip())


def format_location(loc: LocationExpr) -> str:
    if loc.kind is LocationKind.HOME:
        return "robot home pose"
    which = "original" if loc.kind is LocationKind.ORIGINAL_OF else "current"
    return f"{which} position of {loc.object}"


@dataclass(frozen=True)
class HighLevelStep:
    action: str
    location: LocationExpr
    object: Optional[str] = None
    tool: Optional[str] = None
    index: int = 0

    def __post_init__(self):
        if not self.action or not self.action.strip():
            raise ValueError("action must be non-empty")


@dataclass(frozen=True)
class ObjectEntry:
    name: str
    is_tool: bool


def _none_or(value: str) -> Optional[str]:
    v = value.strip()
    return None if v.lower() == "none" else v


def parse_step(text: str, index: int = 0) -> HighLevelStep:
    """Parse ``['pickup', 'original position of tomato', 'tomato', 'none']``."""
    try:
        value = ast.literal_eval(text.strip())
    except (ValueError, SyntaxError) as exc:
        raise PlanParseError(f"step is not a bracketed list of quoted phrases: {text!r}") from exc
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise PlanParseError(f"step is not a bracketed list of quoted phrases: {text!r}")
    if len(value) != 4:
        raise PlanParseError(f"step needs 4 phrases, got {len(value)}: {text!r}")
    action, location, obj, tool = value
    if not action.strip():
        raise PlanParseError("empty action phrase")
    return HighLevelStep(
        action=action.strip(),
        location=parse_location(location),
        object=_none_or(obj),
        tool=_none_or(tool),
        index=index,
    )


def serialize_step(step: HighLevelStep) -> str:
    parts = [step.action, format_location(step.location), step.object or "none", step.tool or "none"]
    return "[" + ", ".join(repr(p) for p in parts) + "]"


def parse_plan(text: str) -> list[HighLevelStep]:
    """One step per non-blank line; a leading ``1.`` style enumerator is tolerated."""
    steps = []
    for line in text.splitlines():
        line = re.sub(r"^\s*\d+[.)]\s*", "", line).strip()
        if line:
            steps.append(parse_step(line, index=len(steps) + 1))
    return steps


def serialize_plan(steps: Iterable[HighLevelStep]) -> str:
    return "\n".join(serialize_step(s) for s in steps)


@dataclass(frozen=True)
class Diagnostic:
    index: int
    code: str
    message: str


@dataclass
class ValidationReport:
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diagnostics

    def codes(self) -> list[str]:
        return [d.code for d in self.diagnostics]

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"step {d.index}: {d.code}: {d.message}" for d in self.diagnostics)


def _step_diagnostics(step: HighLevelStep, index: int, known: dict) -> list[Diagnostic]:
    out = []
    if step.object is not None and step.object not in known:
        out.append(Diagnostic(index, "unknown_object", f"object {step.object!r} not in the scene list"))
    if step.tool is not None:
        if step.tool not in known:
            out.append(Diagnostic(index, "unknown_tool", f"tool {step.tool!r} not in the scene list"))
        elif not known[step.tool]:
            out.append(Diagnostic(index, "non_tool_in_tool_slot", f"non-tool in tool slot: {step.tool!r}"))
    loc = step.location
    if loc.object is not None and loc.object not in known:
        out.append(
            Diagnostic(index, "unknown_location_object", f"location refers to unknown object {loc.object!r}")
        )
    return out


def validate_plan(steps: Iterable[HighLevelStep], objects: Iterable[ObjectEntry]) -> ValidationReport:
    """Check every step against the scene object list and report all violations."""
    known = {TABLE_NAME: False}
    known.update((o.name, o.is_tool) for o in objects)
    report = ValidationReport()
    for i, step in enumerate(steps, start=1):
        report.diagnostics.extend(_step_diagnostics(step, i, known))
    return report


def requires_tool_pickup(step: HighLevelStep, objects: Iterable[ObjectEntry]) -> bool:
    if step.action.strip().lower() != "pickup" or step.object is None:
        return False
    return any(o.name == step.object and o.is_tool for o in objects)
