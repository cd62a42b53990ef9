"""Experiment battery: randomized trials, partial-success gates and report tables."""

from __future__ import annotations

import csv
import io
import json
import traceback
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .orchestrator import ExecutionTrace, Pipeline, RunConfig
from .scenes import random_layout
from .world import WorldState, load_scene

CATEGORIES = ("STG", "STT", "MTT")
GATES = (25, 50, 75, 100)
VISION_TOLERANCE = 0.01  # m
NEXT_TO_RANGE = (0.03, 0.10)  # m between centroids on the table plane


@dataclass(frozen=True)
class Effect:
    """A world predicate: ``flattened``, ``whisked``, ``poked`` or ``contains`` (``item`` in ``object``)."""

    kind: str
    object: str
    item: Optional[str] = None

    def holds(self, world: WorldState) -> bool:
        e = world.effect(self.object)
        if self.kind == "contains":
            return self.item in e.contains
        if self.kind == "flattened":
            return e.flattened
        if self.kind == "whisked":
            return e.whisked
        if self.kind == "poked":
            return e.holes_poked > 0
        raise ValueError(f"unknown effect kind {self.kind!r}")


@dataclass(frozen=True)
class Placement:
    item: str
    relation: str  # next_to | within
    reference: str

    def holds(self, world: WorldState) -> bool:
        if world.robot.held_object == self.item:
            return False
        item, ref = world.get(self.item), world.get(self.reference)
        c, r = item.centroid(), ref.centroid()
        if self.relation == "next_to":
            d = float(np.linalg.norm(c[:2] - r[:2]))
            return NEXT_TO_RANGE[0] <= d <= NEXT_TO_RANGE[1]
        if self.relation == "within":
            return ref.footprint_distance(c[:2]) == 0.0 and c[2] > ref.aabb()[0][2]
        raise ValueError(f"unknown relation {self.relation!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    category: str
    name: str
    query: str
    objects: tuple  # catalogue types laid out on the table
    relevant: tuple  # what comprehension must list
    trials: int = 10
    seed: int = 0
    tool: Optional[str] = None  # STT: the tool whose grasp is gated
    placement: Optional[Placement] = None  # STG
    effects: tuple = ()  # STT: one effect; MTT: first and second interaction

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}")
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        if self.category == "STG" and self.placement is None:
            raise ValueError("STG specs need a placement")
        if self.category == "STT" and (self.tool is None or len(self.effects) != 1):
            raise ValueError("STT specs need a tool and one effect")
        if self.category == "MTT" and len(self.effects) != 2:
            raise ValueError("MTT specs need two effects")

    def trial_seed(self, base: int, trial: int) -> int:
        key = zlib.crc32(self.name.encode())
        return int(np.random.SeedSequence([base, self.seed, key, trial]).generate_state(1)[0])

    def scene(self, seed: int) -> WorldState:
        return load_scene(random_layout(list(self.objects), np.random.default_rng(seed)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["objects"] = tuple(d["objects"])
        d["relevant"] = tuple(d["relevant"])
        d["placement"] = Placement(**d["placement"]) if d.get("placement") else None
        d["effects"] = tuple(Effect(**e) for e in d.get("effects", ()))
        return cls(**d)


def default_specs(trials: int = 10, seed: int = 0) -> list[ExperimentSpec]:
    """The eight tasks: two grasping, three single-tool and three multi-tool."""
    return [
        ExperimentSpec("STG", "tomato next to bowl", "Place tomato next to bowl",
                       ("tomato", "bowl", "cup", "scoop"), ("tomato", "bowl"), trials, seed,
                       placement=Placement("tomato", "next_to", "bowl")),
        ExperimentSpec("STG", "lemon in bowl", "Place the lemon in the bowl",
                       ("lemon", "bowl", "apple", "whisk"), ("lemon", "bowl"), trials, seed,
                       placement=Placement("lemon", "within", "bowl")),
        ExperimentSpec("STT", "scoop candy", "Scoop up candy",
                       ("scoop", "candy", "bowl"), ("scoop", "candy"), trials, seed,
                       tool="scoop", effects=(Effect("contains", "scoop", "candy"),)),
        ExperimentSpec("STT", "flatten dough", "Flatten the ball of dough",
                       ("flattener", "dough", "tomato"), ("flattener", "dough"), trials, seed,
                       tool="flattener", effects=(Effect("flattened", "dough"),)),
        ExperimentSpec("STT", "whisk bowl", "Whisk the empty bowl",
                       ("whisk", "bowl", "lemon"), ("whisk", "bowl"), trials, seed,
                       tool="whisk", effects=(Effect("whisked", "bowl"),)),
        ExperimentSpec("MTT", "scoop candy into bowl", "Scoop the candy and place it inside a bowl",
                       ("scoop", "candy", "bowl", "apple"), ("scoop", "candy", "bowl"), trials, seed,
                       effects=(Effect("contains", "scoop", "candy"), Effect("contains", "bowl", "candy"))),
        ExperimentSpec("MTT", "flatten and poke dough", "Flatten the dough and poke holes in it",
                       ("flattener", "dough", "fork"), ("flattener", "dough", "fork"), trials, seed,
                       effects=(Effect("flattened", "dough"), Effect("poked", "dough"))),
        ExperimentSpec("MTT", "scoop candy onto flattened dough", "Flatten the dough, and scoop candy onto it",
                       ("flattener", "dough", "scoop", "spatula", "candy"),
                       ("flattener", "dough", "scoop", "candy"), trials, seed,
                       effects=(Effect("flattened", "dough"), Effect("contains", "dough", "candy"))),
    ]


# -- scoring -------------------------------------------------------------------


def _snapshots(trace: ExecutionTrace) -> list[WorldState]:
    worlds = [r.after for r in trace.steps if r.after is not None]
    if trace.final_world is not None:
        worlds.append(trace.final_world)
    return worlds


def gate_checks(trace: ExecutionTrace, spec: ExperimentSpec) -> list[bool]:
    """The four gate predicates, each judged independently."""
    init = trace.initial_world
    listed = None if trace.comprehension is None else {o.name for o in trace.comprehension}
    g25 = listed == set(spec.relevant)

    def seen_ok(name):
        est = trace.vision.get(name)
        return est is not None and float(np.linalg.norm(np.asarray(est["centroid"]) - init.get(name).centroid())) <= VISION_TOLERANCE

    g50 = all(seen_ok(n) for n in spec.relevant)
    worlds = _snapshots(trace)
    if spec.category == "STG":
        p = spec.placement
        g75 = any(w.robot.held_object == p.item for w in worlds)
        final = trace.final_world
        g100 = final is not None and p.holds(final)
    elif spec.category == "STT":
        picked = [r.after for r in trace.steps
                  if r.route == "grasping" and r.step.object == spec.tool and r.after is not None]
        g75 = any(w.robot.held_object == spec.tool and w.robot.handle_grasp for w in picked)
        g100 = any(spec.effects[0].holds(w) for w in worlds)
    else:
        g75 = any(spec.effects[0].holds(w) for w in worlds)
        g100 = any(spec.effects[1].holds(w) for w in worlds)
    return [g25, g50, g75, g100]


def score_trace(trace: Optional[ExecutionTrace], spec: ExperimentSpec) -> int:
    """Highest gate reached with every lower gate passed; 0 for a missing trace."""
    if trace is None:
        return 0
    level = 0
    for gate, ok in zip(GATES, gate_checks(trace, spec)):
        if not ok:
            break
        level = gate
    return level


# -- suite ---------------------------------------------------------------------


@dataclass
class TrialResult:
    task: str
    trial: int
    seed: int
    gate: int
    stopped_at: Optional[str]
    error: Optional[str]
    trace: Optional[ExecutionTrace] = field(default=None, repr=False)


@dataclass(frozen=True)
class ReportRow:
    category: str
    task: str
    trials: int
    passed: tuple  # counts at the 25, 50, 75 and 100 gates

    def __post_init__(self):
        if any(a < b for a, b in zip(self.passed, self.passed[1:])):
            raise ValueError(f"gate counts must be non-increasing: {self.passed}")

    @classmethod
    def from_gates(cls, spec: ExperimentSpec, gates: list) -> "ReportRow":
        return cls(spec.category, spec.name, len(gates), tuple(sum(g >= t for g in gates) for t in GATES))


@dataclass
class SuiteResult:
    specs: list
    rows: list
    trials: list
    config: dict

    def csv(self) -> str:
        return rows_csv(self.rows)

    def markdown(self) -> str:
        return gate_table(self.rows)


def run_trial(spec: ExperimentSpec, trial: int, cfg: RunConfig, pipeline: Pipeline) -> TrialResult:
    seed = spec.trial_seed(cfg.seed, trial)
    try:
        world = spec.scene(seed)
        pipeline.cfg = replace(cfg, seed=seed)
        trace = pipeline.run(spec.query, world)
    except Exception as exc:  # a trial never aborts the suite
        detail = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return TrialResult(spec.name, trial, seed, 0, "harness", detail)
    return TrialResult(spec.name, trial, seed, score_trace(trace, spec), trace.stopped_at, trace.error, trace)


def run_suite(specs: list, cfg: RunConfig = RunConfig(), out_dir=None, pipeline: Optional[Pipeline] = None,
              save_traces: bool = True) -> SuiteResult:
    """Run every spec's trials in (category, task, trial) order and tabulate the gates."""
    pipeline = pipeline or Pipeline(cfg)
    out = Path(out_dir) if out_dir is not None else None
    rows, trials = [], []
    for spec in specs:
        results = [run_trial(spec, i, cfg, pipeline) for i in range(spec.trials)]
        trials.extend(results)
        rows.append(ReportRow.from_gates(spec, [r.gate for r in results]))
        if out is not None and save_traces:
            tdir = out / "traces" / _slug(spec.name)
            tdir.mkdir(parents=True, exist_ok=True)
            for r in results:
                if r.trace is not None:
                    r.trace.save(tdir / f"trial_{r.trial:02d}.jsonl")
    result = SuiteResult(list(specs), rows, trials, cfg.to_dict())
    if out is not None:
        write_suite(result, out)
    return result


def _slug(name: str) -> str:
    return "_".join(name.lower().split())


# -- tables --------------------------------------------------------------------


ROW_FIELDS = ("category", "task", "trials", "gate_25", "gate_50", "gate_75", "gate_100")
TRIAL_FIELDS = ("task", "trial", "seed", "gate", "stopped_at", "error")


def rows_csv(rows: list, variant: Optional[str] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS + (("variant",) if variant else ()))
    for r in rows:
        w.writerow((r.category, r.task, r.trials, *r.passed) + ((variant,) if variant else ()))
    return buf.getvalue()


def trials_csv(trials: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_FIELDS)
    for t in trials:
        w.writerow((t.task, t.trial, t.seed, t.gate, t.stopped_at or "", t.error or ""))
    return buf.getvalue()


def _frac(k: int, n: int) -> str:
    return f"{k}/{n}" if n else "-"


def gate_table(rows: list) -> str:
    """Markdown table: one row per task, one column per gate."""
    lines = ["| Category | Task | 25% | 50% | 75% | 100% |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r.category} | {r.task} | " + " | ".join(_frac(k, r.trials) for k in r.passed) + " |")
    return "\n".join(lines) + "\n"


def ablation_table(baseline: list, ablated: list) -> str:
    """Markdown comparison of the affordance and centroid grasp paths at each gate."""
    lines = [
        "| Category | Task | Grasping | 25% | 50% | 75% | 100% |",
        "|---|---|---|---|---|---|---|",
    ]
    for b, a in zip(baseline, ablated):
        for label, r in (("affordance", b), ("centroid", a)):
            lines.append(f"| {r.category} | {r.task} | {label} | "
                         + " | ".join(_frac(k, r.trials) for k in r.passed) + " |")
    return "\n".join(lines) + "\n"


def write_suite(result: SuiteResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.csv())
    (out / "trials.csv").write_text(trials_csv(result.trials))
    (out / "table.md").write_text(result.markdown())
    manifest = {"config": result.config, "specs": [s.to_dict() for s in result.specs]}
    (out / "suite.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


@dataclass
class AblationResult:
    baseline: SuiteResult
    ablated: SuiteResult

    def csv(self) -> str:
        head = rows_csv(self.baseline.rows, "affordance")
        tail = rows_csv(self.ablated.rows, "centroid").split("\n", 1)[1]
        return head + tail

    def markdown(self) -> str:
        return ablation_table(self.baseline.rows, self.ablated.rows)


def ablation(specs: list, cfg: RunConfig = RunConfig(), out_dir=None) -> AblationResult:
    """The same trials with the affordance pipeline and with centroid grasps."""
    tool_specs = [s for s in specs if s.category != "STG"]
    out = Path(out_dir) if out_dir is not None else None
    base = run_suite(tool_specs, replace(cfg, no_affordance=False), out / "affordance" if out else None)
    abl = run_suite(tool_specs, replace(cfg, no_affordance=True), out / "centroid" if out else None)
    result = AblationResult(base, abl)
    if out is not None:
        (out / "ablation.csv").write_text(result.csv())
        (out / "ablation.md").write_text(result.markdown())
    return result


def load_suite(out_dir) -> SuiteResult:
    """Re-score a stored suite from its manifest and traces."""
    out = Path(out_dir)
    manifest = json.loads((out / "suite.json").read_text())
    specs = [ExperimentSpec.from_dict(d) for d in manifest["specs"]]
    stored = {}
    if (out / "trials.csv").is_file():
        with (out / "trials.csv").open() as fh:
            stored = {(r["task"], int(r["trial"])): r for r in csv.DictReader(fh)}
    rows, trials = [], []
    for spec in specs:
        gates = []
        for i in range(spec.trials):
            path = out / "traces" / _slug(spec.name) / f"trial_{i:02d}.jsonl"
            row = stored.get((spec.name, i), {})
            seed = int(row.get("seed") or 0)
            if path.is_file():
                trace = ExecutionTrace.load(path)
                g = score_trace(trace, spec)
                trials.append(TrialResult(spec.name, i, seed, g, trace.stopped_at, trace.error, trace))
            else:
                g = 0
                trials.append(TrialResult(spec.name, i, seed, 0, row.get("stopped_at") or "harness",
                                          row.get("error") or "trace missing"))
            gates.append(g)
        rows.append(ReportRow.from_gates(spec, gates))
    return SuiteResult(specs, rows, trials, manifest["config"])
