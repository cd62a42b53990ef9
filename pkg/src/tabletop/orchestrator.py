"""End-to-end pipeline: comprehension, localisation, planning, grasping, execution and verification."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import Agents, AgentError, BackendError, RemoteBackend, ScriptedBackend
from .dsl import GoTo, Grasp, LowLevelAction, Tilt, parse_action, serialize_action
from .grasping import CAPTURE_HEIGHT, GraspError, GraspResult, load_tool_db, task_oriented_grasp
from .perception import Perception, PerceptionConfig, PerceptionError, default_rig
from .plan import (
    HighLevelStep,
    LocationExpr,
    ObjectEntry,
    parse_step,
    requires_tool_pickup,
    serialize_step,
)
from .sim import ActionError, VerificationResult, apply_action, verify_step
from .world import WorldError, WorldState, world_from_dict, world_to_dict

APPROACH_CM = 10.0
LIFT_CM = 10.0

# pipeline stages, in order; a trace stops at the first one that fails
STAGES = ("comprehension", "vision", "plan", "execution")


@dataclass(frozen=True)
class RunConfig:
    backend: str = "scripted"  # scripted | table | remote
    backend_options: dict = field(default_factory=dict)
    depth_noise: float = 0.0
    miss_rate: float = 0.0
    confusion_rate: float = 0.0
    no_affordance: bool = False
    seed: int = 0
    output_dir: Optional[str] = None

    def perception_config(self) -> PerceptionConfig:
        return PerceptionConfig(depth_noise=self.depth_noise, miss_rate=self.miss_rate,
                                confusion_rate=self.confusion_rate)

    def make_backend(self):
        opts = dict(self.backend_options)
        if self.backend == "scripted":
            return ScriptedBackend.default()
        if self.backend == "table":
            from .agents.scripted import RESPONDERS

            return ScriptedBackend.load(opts["table"], RESPONDERS if opts.get("fallback") else None)
        if self.backend == "remote":
            return RemoteBackend(**opts)
        raise ValueError(f"unknown backend {self.backend!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    index: int
    step: HighLevelStep
    route: str  # grasping | step_planner
    actions: list = field(default_factory=list)  # executed actions, in order
    grasp: Optional[dict] = None
    before: Optional[WorldState] = None
    after: Optional[WorldState] = None
    verification: Optional[VerificationResult] = None
    events: list = field(default_factory=list)
    seconds: float = 0.0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "type": "step",
            "index": self.index,
            "step": serialize_step(self.step),
            "route": self.route,
            "actions": [serialize_action(a) for a in self.actions],
            "grasp": self.grasp,
            "before": world_to_dict(self.before) if self.before is not None else None,
            "after": world_to_dict(self.after) if self.after is not None else None,
            "verification": asdict(self.verification) if self.verification is not None else None,
            "events": self.events,
            "seconds": round(self.seconds, 4),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        v = d.get("verification")
        return cls(
            index=d["index"],
            step=parse_step(d["step"], d["index"]),
            route=d["route"],
            actions=[parse_action(a) for a in d["actions"]],
            grasp=d.get("grasp"),
            before=world_from_dict(d["before"]) if d.get("before") else None,
            after=world_from_dict(d["after"]) if d.get("after") else None,
            verification=VerificationResult(**v) if v else None,
            events=d.get("events", []),
            seconds=d.get("seconds", 0.0),
            error=d.get("error"),
        )


@dataclass
class ExecutionTrace:
    query: str
    config: dict
    initial_world: WorldState
    comprehension: Optional[list] = None  # ObjectEntry list
    vision: dict = field(default_factory=dict)  # up-front estimates: name -> {centroid, dims, logit}
    plan: Optional[list] = None  # HighLevelStep list
    steps: list = field(default_factory=list)
    stopped_at: Optional[str] = None  # failed stage, None when every step verified
    error: Optional[str] = None
    final_world: Optional[WorldState] = None
    seconds: float = 0.0

    @property
    def completed(self) -> bool:
        return self.stopped_at is None

    def to_records(self) -> list[dict]:
        head = {
            "type": "header",
            "query": self.query,
            "config": self.config,
            "initial_world": world_to_dict(self.initial_world),
            "comprehension": None if self.comprehension is None
            else [{"name": o.name, "tool": o.is_tool} for o in self.comprehension],
            "vision": self.vision,
            "plan": None if self.plan is None else [serialize_step(s) for s in self.plan],
        }
        end = {
            "type": "end",
            "stopped_at": self.stopped_at,
            "error": self.error,
            "final_world": world_to_dict(self.final_world) if self.final_world is not None else None,
            "seconds": round(self.seconds, 4),
        }
        return [head, *(s.to_dict() for s in self.steps), end]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "ExecutionTrace":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        head, body, end = records[0], records[1:-1], records[-1]
        if head.get("type") != "header" or end.get("type") != "end":
            raise ValueError("trace must start with a header record and finish with an end record")
        return cls(
            query=head["query"],
            config=head["config"],
            initial_world=world_from_dict(head["initial_world"]),
            comprehension=None if head["comprehension"] is None
            else [ObjectEntry(o["name"], o["tool"]) for o in head["comprehension"]],
            vision=head["vision"],
            plan=None if head["plan"] is None else [parse_step(s, i + 1) for i, s in enumerate(head["plan"])],
            steps=[StepRecord.from_dict(r) for r in body],
            stopped_at=end["stopped_at"],
            error=end["error"],
            final_world=world_from_dict(end["final_world"]) if end["final_world"] else None,
            seconds=end.get("seconds", 0.0),
        )

    @classmethod
    def load(cls, path) -> "ExecutionTrace":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def replay(trace: ExecutionTrace) -> WorldState:
    """Re-apply every executed action to the initial world."""
    world = trace.initial_world.copy()
    for rec in trace.steps:
        for a in rec.actions:
            world, _ = apply_action(world, a)
    return world


def observation_digest(world: WorldState) -> list[dict]:
    """What comprehension is shown: object names and tool flags, in scene order."""
    return [{"name": o.name, "tool": o.is_tool} for o in world.objects]


def _r(v, nd=4) -> list:
    return [round(float(x), nd) + 0.0 for x in v]


class _Estimates:
    """Where the robot believes objects are.

    Objects are re-localised only when a step touched them since their last
    fix; held objects are never queried.
    """

    def __init__(self, perception: Perception, world_ref, seed: int):
        self.perception = perception
        self.world_ref = world_ref
        self.seed = seed
        self.current: dict = {}
        self.original: dict = {}
        self.dirty: set = set()

    def locate(self, name: str) -> dict:
        world = self.world_ref()
        fused = self.perception.query(world, world.get(name).label, self.seed)
        est = {"centroid": _r(fused.centroid), "dims": _r(fused.dims), "logit": round(float(fused.logit), 6)}
        self.current[name] = est
        self.original.setdefault(name, est)
        self.dirty.discard(name)
        return est

    def refresh(self, names) -> None:
        held = self.world_ref().robot.held_object
        for n in names:
            if n is None or n == held or not self.world_ref().has(n):
                continue
            if n not in self.current or n in self.dirty:
                self.locate(n)

    def geometry(self) -> dict:
        return {n: {"centroid": e["centroid"], "dims": e["dims"]} for n, e in sorted(self.current.items())}


def _step_names(step: HighLevelStep) -> list:
    return [step.object, step.tool, step.location.object]


def _grasp_actions(world: WorldState, res: GraspResult, centroid) -> list[LowLevelAction]:
    """Capture, align, approach, close and lift, relative to the home pose."""
    home = np.asarray(world.robot.home_pose.position)
    home_loc = LocationExpr.home()

    def at(p) -> GoTo:
        return GoTo(home_loc, tuple(round(float(v), 2) + 0.0 for v in (np.asarray(p) - home) * 100.0))

    grasp = np.asarray(res.pose.position)
    capture = np.asarray(centroid, dtype=float) + [0.0, 0.0, CAPTURE_HEIGHT]
    out: list = []
    if any(abs(v) > 1e-9 for v in world.robot.tcp_pose.orientation):
        out.append(Tilt((0.0, 0.0, 0.0)))
    out.append(at(capture))
    out.append(Tilt((0.0, 0.0, round(float(res.pose.orientation[2]), 2))))
    out.append(at(grasp + [0.0, 0.0, APPROACH_CM / 100.0]))
    out.append(at(grasp))
    out.append(Grasp(1))
    out.append(at(grasp + [0.0, 0.0, LIFT_CM / 100.0]))
    return out


def _grasp_summary(res: GraspResult) -> dict:
    c = res.candidate
    return {
        "path": res.path,
        "mapped_tool": res.mapped_tool,
        "iou": None if res.alignment is None else round(float(res.alignment.iou), 6),
        "pixel": [int(c.u), int(c.v)],
        "angle": float(c.angle),
        "width": round(float(c.width), 6),
        "in_region": bool(res.region_mask[c.v, c.u]) if res.region_mask is not None else False,
        "pose": {"position": _r(res.pose.position, 5), "orientation": _r(res.pose.orientation, 3)},
        "note": res.note,
    }


class Pipeline:
    """Reusable pipeline components; one instance can run many tasks in sequence."""

    def __init__(self, cfg: RunConfig = RunConfig(), agents: Optional[Agents] = None, cameras=None,
                 tool_db: Optional[dict] = None, log_dir=None):
        self.cfg = cfg
        self.agents = agents or Agents(cfg.make_backend(), log_dir=log_dir)
        self.pcfg = cfg.perception_config()
        self.perception = Perception(cameras or default_rig(), self.pcfg)
        self.tool_db = tool_db if tool_db is not None else load_tool_db()

    def run(self, query: str, world: WorldState) -> ExecutionTrace:
        t0 = time.perf_counter()
        trace = ExecutionTrace(query, self.cfg.to_dict(), world.copy())
        state = {"world": world.copy()}
        try:
            self._run(query, state, trace)
        except (AgentError, BackendError) as exc:
            trace.error = f"{type(exc).__name__}: {exc}"
        trace.final_world = state["world"]
        trace.seconds = time.perf_counter() - t0
        return trace

    def _run(self, query: str, state: dict, trace: ExecutionTrace) -> None:
        cfg = self.cfg
        trace.stopped_at = "comprehension"
        objects = self.agents.scene_comprehension(query, observation_digest(state["world"]))
        trace.comprehension = objects
        names = {o.name for o in objects}
        if not names <= set(state["world"].names()):
            trace.error = f"comprehension named objects not in the scene: {sorted(names - set(state['world'].names()))}"
            return

        trace.stopped_at = "vision"
        est = _Estimates(self.perception, lambda: state["world"], cfg.seed)
        for o in objects:
            try:
                trace.vision[o.name] = est.locate(o.name)
            except PerceptionError as exc:
                trace.error = f"{o.name}: {type(exc).__name__}: {exc}"
                return

        trace.stopped_at = "plan"
        plan = self.agents.overall_plan(query, objects)
        trace.plan = plan

        trace.stopped_at = "execution"
        grip: dict = {}
        prev: Optional[HighLevelStep] = None
        for i, step in enumerate(plan):
            rec = self._execute_step(i, step, prev, plan, objects, query, state, est, grip)
            trace.steps.append(rec)
            if rec.error is not None or rec.verification is None or not rec.verification.passed:
                trace.error = rec.error or f"step {i + 1} verification: {rec.verification.reason}"
                return
            est.dirty.update(n for n in _step_names(step) if n is not None)
            prev = step
        trace.stopped_at = None

    def _execute_step(self, i, step, prev, plan, objects, query, state, est, grip) -> StepRecord:
        t0 = time.perf_counter()
        before = state["world"]
        tool_pickup = requires_tool_pickup(step, objects)
        rec = StepRecord(i + 1, step, "grasping" if tool_pickup else "step_planner", before=before)
        try:
            est.refresh(_step_names(step))
            if tool_pickup:
                task = plan[i + 1].action if i + 1 < len(plan) else step.action
                centroid = est.current[step.object]["centroid"]
                res = task_oriented_grasp(before, step.object, task, self.tool_db, self.agents,
                                          tool_label=before.get(step.object).label, centroid=centroid,
                                          no_affordance=self.cfg.no_affordance, cfg=self.pcfg, seed=self.cfg.seed)
                rec.grasp = _grasp_summary(res)
                actions = _grasp_actions(before, res, centroid)
                on_handle = res.path == "region"
            else:
                actions = self.agents.step_plan(step, prev, est.geometry(), self._planner_state(before, est, grip),
                                                query)
                on_handle = False
        except (PerceptionError, GraspError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            rec.after = before
            rec.seconds = time.perf_counter() - t0
            return rec

        world = before
        for a in actions:
            try:
                nxt, events = apply_action(world, a)
            except (ActionError, WorldError) as exc:
                rec.error = f"{type(exc).__name__} at '{serialize_action(a)}': {exc}"
                break
            rec.actions.append(a)
            rec.events.extend({"kind": e.kind, **e.detail} for e in events)
            if isinstance(a, Grasp) and a.state == 1 and nxt.robot.held_object is not None:
                self._record_grip(grip, nxt, est, on_handle)
            if isinstance(a, Grasp) and a.state == 0:
                grip.clear()
            world = nxt
        state["world"] = world
        rec.after = world
        if rec.error is None:
            rec.verification = verify_step(before, world, step)
        rec.seconds = time.perf_counter() - t0
        return rec

    @staticmethod
    def _record_grip(grip: dict, world: WorldState, est: _Estimates, on_handle: bool) -> None:
        """What the robot knows about its grip: from its own tcp and the last visual fix."""
        name = world.robot.held_object
        tcp = np.asarray(world.robot.tcp_pose.position)
        seen = est.current.get(name)
        centroid = np.asarray(seen["centroid"]) if seen else tcp
        grip.clear()
        grip.update({
            "tcp_above_bottom": round(float(tcp[2] - world.table_height), 4),
            "tcp_to_centroid": _r(centroid - tcp),
            "on_handle": bool(on_handle),
        })

    @staticmethod
    def _planner_state(world: WorldState, est: _Estimates, grip: dict) -> dict:
        r = world.robot
        return {
            "gripper": {
                "position": _r(r.tcp_pose.position),
                "orientation": _r(r.tcp_pose.orientation, 2),
                "open": r.gripper_open,
                "holding": r.held_object,
                "grip": dict(grip) if r.held_object else None,
            },
            "original": {n: e["centroid"] for n, e in sorted(est.original.items())},
            "table": {"center": _r(world.table_center), "height": round(float(world.table_height), 4)},
            "home": _r(r.home_pose.position),
        }


def run_task(query: str, world: WorldState, cfg: RunConfig = RunConfig(), **components) -> ExecutionTrace:
    """Run one task; the trace is written to ``cfg.output_dir`` when set."""
    out = Path(cfg.output_dir) if cfg.output_dir else None
    trace = Pipeline(cfg, log_dir=out, **components).run(query, world)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace.save(out / "trace.jsonl")
    return trace
