"""The four agent roles over a completion backend, with strict output parsing."""

from __future__ import annotations

import json
import re
import threading
from pathlib import Path
from typing import Optional

from ..dsl import ActionParseError, parse_actions, validate_sequence
from ..plan import (
    Diagnostic,
    HighLevelStep,
    ObjectEntry,
    PlanParseError,
    parse_plan,
    serialize_step,
    validate_plan,
)
from .backends import CompletionBackend, ScriptedBackend
from .templates import load_templates

MAPPING_FAILURE = "NONE"


class AgentError(Exception):
    pass


class AgentParseError(AgentError):
    """The backend kept answering in a format the strict parser rejects."""


class PlanValidationError(AgentError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class EmptyOutputError(AgentError):
    pass


_FENCE_RE = re.compile(r"^\s*```[A-Za-z0-9_-]*\s*\n(.*?)\n\s*```\s*$", re.S)


def strip_fence(text: str) -> str:
    """Remove a single surrounding Markdown code fence, if any."""
    m = _FENCE_RE.match(text)
    return m.group(1) if m else text.strip()


def parse_object_list(text: str) -> list[ObjectEntry]:
    """``[{"name": str, "tool": bool}, ...]`` with unique names."""
    try:
        doc = json.loads(strip_fence(text))
    except json.JSONDecodeError as exc:
        raise AgentParseError(f"not JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise AgentParseError("expected a JSON array")
    out, seen = [], set()
    for item in doc:
        if not isinstance(item, dict) or set(item) != {"name", "tool"}:
            raise AgentParseError(f"entry must have exactly 'name' and 'tool': {item!r}")
        name, tool = item["name"], item["tool"]
        if not isinstance(name, str) or not name.strip() or not isinstance(tool, bool):
            raise AgentParseError(f"bad entry {item!r}")
        if name in seen:
            raise AgentParseError(f"duplicate object {name!r}")
        seen.add(name)
        out.append(ObjectEntry(name.strip(), tool))
    return out


def parse_tool_choice(text: str, db_tools: list) -> Optional[str]:
    """One database name, or None for the failure token or anything outside the list."""
    answer = strip_fence(text).strip().strip("'\"`.").strip()
    return answer if answer in db_tools else None


def _object_lines(objects) -> str:
    return "\n".join(f"- {o['name']} ({'tool' if o['tool'] else 'not tool'})" for o in objects) or "(none)"


class Agents:
    """Scene comprehension, overall planner, step planner and tool mapper.

    Every prompt and raw response is appended to ``log_dir/agents.jsonl``
    when a log directory is given. Nothing unparsed leaves this class.
    """

    def __init__(self, backend: Optional[CompletionBackend] = None, templates: Optional[dict] = None,
                 max_retries: int = 2, log_dir=None):
        self.backend = backend if backend is not None else ScriptedBackend.default()
        self.templates = templates or load_templates()
        self.max_retries = max_retries
        self.log_path = Path(log_dir) / "agents.jsonl" if log_dir is not None else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _call(self, role: str, context: dict, fields: dict, extra: str = "") -> str:
        prompt = self.templates[role].render(**fields)
        if extra:
            prompt = f"{prompt}\n\n{extra}"
        out = self.backend.complete(role, prompt, context)
        if self.log_path is not None:
            rec = {"role": role, "prompt": prompt, "context": context, "response": out}
            with self._lock, self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return out

    def _parsed(self, role, context, fields, parse):
        err = None
        for attempt in range(self.max_retries + 1):
            ctx = context if attempt == 0 else {**context, "attempt": attempt}
            try:
                return parse(self._call(role, ctx, fields))
            except (AgentParseError, PlanParseError, ActionParseError) as exc:
                err = exc
        raise AgentParseError(f"{role}: unparseable after {self.max_retries + 1} attempts: {err}") from err

    # -- roles ------------------------------------------------------------------

    def scene_comprehension(self, query: str, scene: list) -> list[ObjectEntry]:
        """``scene`` is the observation digest: dicts with ``name`` and ``tool``."""
        scene = [{"name": o["name"], "tool": bool(o["tool"])} for o in scene]
        context = {"user_query": query, "scene": scene}
        fields = {"user_query": query, "scene": _object_lines(scene)}
        return self._parsed("scene_comprehension", context, fields, parse_object_list)

    def overall_plan(self, query: str, objects: list) -> list[HighLevelStep]:
        listed = [{"name": o.name, "tool": o.is_tool} for o in objects]
        context = {"user_query": query, "objects": listed}
        fields = {"user_query": query, "object_list": _object_lines(listed)}
        steps = self._parsed("overall_planner", context, fields, parse_plan)
        report = self._plan_report(steps, objects)
        if report.ok:
            return steps
        diag = str(report)
        context = {**context, "diagnostics": diag}
        text = self._call("overall_planner", context, fields,
                          f"Your previous plan was rejected:\n{diag}\nWrite a corrected plan.")
        try:
            steps = parse_plan(text)
        except PlanParseError as exc:
            raise PlanValidationError(f"re-prompted plan does not parse: {exc}") from exc
        report = self._plan_report(steps, objects)
        if not report.ok:
            raise PlanValidationError(f"plan invalid after re-prompt:\n{report}", report)
        return steps

    @staticmethod
    def _plan_report(steps, objects):
        report = validate_plan(steps, objects)
        if not steps:
            report.diagnostics.append(Diagnostic(0, "empty_plan", "the plan has no steps"))
        return report

    def step_plan(self, step: HighLevelStep, prev: Optional[HighLevelStep], geometry: dict,
                  state: Optional[dict] = None, query: str = "") -> list:
        """Low-level actions for one step.

        ``geometry`` maps names to ``{"centroid": [...], "dims": [...]}``;
        ``state`` adds the gripper, table and home entries of the context.
        """
        state = dict(state or {})
        gripper = state.get("gripper", {})
        context = {
            "user_query": query,
            "step": serialize_step(step),
            "prev_step": serialize_step(prev) if prev is not None else "none",
            "geometry": geometry,
            **state,
        }
        fields = {
            "user_query": query,
            "step": context["step"],
            "prev_step": context["prev_step"],
            "geometry": json.dumps(geometry, sort_keys=True),
            "gripper": json.dumps(gripper, sort_keys=True),
        }
        held = gripper.get("holding") is not None
        extra, problem = "", ""
        for attempt in range(2):
            ctx = context if attempt == 0 else {**context, "diagnostics": problem}
            text = self._call("step_planner", ctx, fields, extra)
            try:
                actions = parse_actions(strip_fence(text))
            except ActionParseError as exc:
                problem = f"parse error: {exc}"
            else:
                if not actions:
                    raise EmptyOutputError(f"no actions for step {context['step']}")
                report = validate_sequence(actions, held_object=held)
                if report.ok:
                    return actions
                problem = str(report)
            extra = f"Your previous answer was rejected:\n{problem}\nAnswer again."
        raise AgentParseError(f"step planner failed after retry: {problem}")

    def map_tool(self, query_tool: str, task: str, db_tool_names: list) -> Optional[str]:
        names = sorted(db_tool_names)
        if not names:
            raise ValueError("the tool database is empty")
        context = {"query_tool": query_tool, "task": task, "db_tools": names}
        fields = {"query_tool": query_tool, "task": task, "db_tools": ", ".join(names)}
        return parse_tool_choice(self._call("tool_mapper", context, fields), names)
