import json

import httpx
import pytest

from tabletop.agents import (
    AgentParseError,
    Agents,
    BackendResponseError,
    BackendTimeoutError,
    EmptyOutputError,
    PlanValidationError,
    PromptTemplate,
    RemoteBackend,
    ScriptedBackend,
    TemplateError,
    context_digest,
    load_templates,
)
from tabletop.agents.backends import ROLES
from tabletop.agents.core import parse_object_list, parse_tool_choice, strip_fence
from tabletop.dsl import GoTo, Grasp, parse_actions
from tabletop.plan import HighLevelStep, LocationExpr, ObjectEntry, parse_step


class Canned:
    """Answers each role from a queue; the last answer repeats."""

    def __init__(self, **answers):
        self.answers = {k: list(v) for k, v in answers.items()}
        self.calls = []

    def complete(self, role, prompt, context):
        self.calls.append((role, prompt, context))
        q = self.answers[role]
        return q.pop(0) if len(q) > 1 else q[0]


def _scene(*items):
    return [{"name": n, "tool": t} for n, t in items]


def _state(holding=None, grip=None):
    return {
        "gripper": {"position": [0.3, 0.0, 0.4], "orientation": [0.0, 0.0, 0.0], "open": holding is None,
                    "holding": holding, "grip": grip},
        "original": {},
        "table": {"center": [0.5, 0.0], "height": 0.0},
        "home": [0.3, 0.0, 0.4],
    }


def test_templates_cover_every_role():
    t = load_templates()
    assert set(t) == set(ROLES)
    assert "user_query" in t["scene_comprehension"].placeholders


def test_template_render_is_strict():
    t = PromptTemplate("tool_mapper", "Do {task} with {tool}.")
    assert t.render(task="a", tool="b") == "Do a with b."
    with pytest.raises(TemplateError):
        t.render(task="a")


def test_strip_fence():
    assert strip_fence("```json\n[1]\n```") == "[1]"
    assert strip_fence("  plain ") == "plain"


@pytest.mark.parametrize("bad", ["nope", "{}", '[{"name": "a"}]', '[{"name": "a", "tool": "yes"}]',
                                 '[{"name": "a", "tool": true}, {"name": "a", "tool": false}]'])
def test_object_list_rejects(bad):
    with pytest.raises(AgentParseError):
        parse_object_list(bad)


def test_tool_choice_parsing():
    assert parse_tool_choice("`scoop`.", ["scoop"]) == "scoop"
    assert parse_tool_choice("NONE", ["scoop"]) is None
    assert parse_tool_choice("ladle", ["scoop"]) is None


def test_salad_comprehension():
    objs = Agents().scene_comprehension("Make a salad", _scene(("tomato", False), ("knife", True), ("bowl", False),
                                                               ("candy", False)))
    assert [(o.name, o.is_tool) for o in objs] == [("tomato", False), ("knife", True), ("bowl", False)]


def test_empty_scene():
    assert Agents().scene_comprehension("Scoop up candy", []) == []


def test_gibberish_exhausts_retries():
    be = Canned(scene_comprehension=["lorem ipsum"])
    with pytest.raises(AgentParseError):
        Agents(be, max_retries=2).scene_comprehension("x", _scene(("a", False)))
    assert len(be.calls) == 3


def test_retry_recovers():
    be = Canned(scene_comprehension=["oops", '[{"name": "a", "tool": false}]'])
    assert Agents(be).scene_comprehension("x", _scene(("a", False))) == [ObjectEntry("a", False)]


def test_scoop_plan():
    a = Agents()
    objs = a.scene_comprehension("Scoop up candy", _scene(("scoop", True), ("candy", False), ("bowl", False)))
    steps = a.overall_plan("Scoop up candy", objs)
    assert [s.action for s in steps] == ["pickup", "scoop", "place"]
    assert steps[0].object == "scoop" and steps[1].tool == "scoop"
    assert steps[2].location == LocationExpr.original("scoop")


def test_invalid_plan_is_reprompted_once():
    bad = "['scoop', 'current position of tomato', 'tomato', 'tomato']"
    good = "['pickup', 'original position of tomato', 'none', 'scoop']"
    be = Canned(overall_planner=[bad, good])
    objs = [ObjectEntry("tomato", False), ObjectEntry("scoop", True)]
    steps = Agents(be).overall_plan("q", objs)
    assert steps[0].tool == "scoop"
    assert "diagnostics" in be.calls[1][2]
    assert "rejected" in be.calls[1][1]


def test_plan_still_invalid_raises():
    be = Canned(overall_planner=["['scoop', 'current position of tomato', 'tomato', 'tomato']"])
    with pytest.raises(PlanValidationError) as exc:
        Agents(be).overall_plan("q", [ObjectEntry("tomato", False)])
    assert exc.value.report is not None and not exc.value.report.ok


def test_empty_plan_is_rejected():
    with pytest.raises(PlanValidationError):
        Agents(Canned(overall_planner=[""])).overall_plan("q", [])


PLACE_ACTIONS = """Go-to: current position of bowl + (0, 0, 10) cm
Grasp: 0
Go-to: robot home pose + (0, 0, 0) cm"""


def test_step_plan_uses_backend_text():
    be = Canned(step_planner=[PLACE_ACTIONS])
    step = parse_step("['place', 'current position of bowl', 'tomato', 'none']")
    acts = Agents(be).step_plan(step, None, {"bowl": {"centroid": [0.5, 0, 0.03], "dims": [0.1, 0.1, 0.06]}},
                                _state("tomato"), "Place tomato next to bowl")
    assert acts == parse_actions(PLACE_ACTIONS)
    ctx = be.calls[0][2]
    assert ctx["prev_step"] == "none" and ctx["gripper"]["holding"] == "tomato"


def test_step_plan_rejects_redundant_grasp_then_fails():
    be = Canned(step_planner=["Go-to: current position of bowl + (0, 0, 1) cm\nGrasp: 1"])
    step = parse_step("['place', 'current position of bowl', 'tomato', 'none']")
    with pytest.raises(AgentParseError):
        Agents(be).step_plan(step, None, {}, _state("tomato"))
    assert len(be.calls) == 2 and "redundant_grasp" in be.calls[1][2]["diagnostics"]


def test_step_plan_empty_output():
    step = parse_step("['pickup', 'current position of tomato', 'tomato', 'none']")
    with pytest.raises(EmptyOutputError):
        Agents(Canned(step_planner=[""])).step_plan(step, None, {}, _state())


def test_scripted_pickup_has_four_actions():
    step = parse_step("['pickup', 'current position of tomato', 'tomato', 'none']")
    geo = {"tomato": {"centroid": [0.5, 0.1, 0.05], "dims": [0.07, 0.07, 0.06]}}
    acts = Agents().step_plan(step, None, geo, _state())
    assert [type(a) for a in acts] == [GoTo, GoTo, Grasp, GoTo]
    assert acts[2].state == 1
    assert acts[1].delta == (0.0, 0.0, 0.0)


def test_scripted_place_has_no_grasp_close():
    step = parse_step("['place', 'current position of bowl', 'tomato', 'none']")
    geo = {"bowl": {"centroid": [0.5, 0.1, 0.03], "dims": [0.16, 0.16, 0.06]},
           "tomato": {"centroid": [0.3, 0.0, 0.3], "dims": [0.07, 0.07, 0.06]}}
    grip = {"tcp_above_bottom": 0.03, "tcp_to_centroid": [0, 0, 0], "on_handle": False}
    acts = Agents().step_plan(step, HighLevelStep("pickup", LocationExpr.current("tomato"), "tomato"), geo,
                              _state("tomato", grip), "Place tomato in the bowl")
    grasps = [a.state for a in acts if isinstance(a, Grasp)]
    assert grasps == [0]


@pytest.mark.parametrize("query,expected", [("ladle", "scoop"), ("whisk", "whisk"), ("pot", None)])
def test_map_tool(query, expected):
    assert Agents().map_tool(query, "use", ["whisk", "scoop", "spatula"]) == expected


def test_map_tool_needs_database():
    with pytest.raises(ValueError):
        Agents().map_tool("scoop", "use", [])


def test_jsonl_log(tmp_path):
    a = Agents(log_dir=tmp_path)
    a.map_tool("ladle", "scoop", ["scoop"])
    a.scene_comprehension("Scoop up candy", _scene(("scoop", True), ("candy", False)))
    recs = [json.loads(line) for line in (tmp_path / "agents.jsonl").read_text().splitlines()]
    assert [r["role"] for r in recs] == ["tool_mapper", "scene_comprehension"]
    assert recs[0]["response"] == "scoop" and "ladle" in recs[0]["prompt"]


def test_scripted_is_deterministic():
    q, scene = "Flatten the dough", _scene(("flattener", True), ("dough", False))
    assert Agents().scene_comprehension(q, scene) == Agents().scene_comprehension(q, scene)


def test_scripted_table_round_trip(tmp_path):
    rec = ScriptedBackend.default(record=True)
    a = Agents(rec)
    objs = a.scene_comprehension("Scoop up candy", _scene(("scoop", True), ("candy", False)))
    steps = a.overall_plan("Scoop up candy", objs)
    rec.save(tmp_path / "t.json")
    replayed = Agents(ScriptedBackend.load(tmp_path / "t.json"))
    assert replayed.overall_plan("Scoop up candy", objs) == steps
    with pytest.raises(KeyError):
        replayed.map_tool("ladle", "scoop", ["scoop"])


def test_table_lookup_ignores_prompt_text():
    ctx = {"query_tool": "x", "task": "t", "db_tools": ["scoop"]}
    be = ScriptedBackend({("tool_mapper", context_digest(ctx)): "scoop"})
    assert be.complete("tool_mapper", "any prompt", ctx) == "scoop"


def _completion(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_remote_backend_success(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _completion("scoop")

    monkeypatch.setenv("TEST_TOKEN", "s3cret")
    be = RemoteBackend("http://llm/v1", "m", token_env="TEST_TOKEN", transport=httpx.MockTransport(handler))
    assert Agents(be).map_tool("ladle", "scoop", ["scoop"]) == "scoop"
    assert seen["auth"] == "Bearer s3cret"
    assert seen["body"]["model"] == "m" and seen["body"]["temperature"] == 0.0
    assert "s3cret" not in repr(vars(be))


def test_remote_backend_retries_then_succeeds():
    answers = [httpx.Response(500), httpx.Response(200, text="not json"), _completion("ok")]
    be = RemoteBackend("http://llm", "m", transport=httpx.MockTransport(lambda r: answers.pop(0)))
    assert be.complete("tool_mapper", "p", {}) == "ok"


def test_remote_backend_malformed_exhausts():
    be = RemoteBackend("http://llm", "m", max_retries=1,
                       transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(BackendResponseError):
        be.complete("tool_mapper", "p", {})


def test_remote_backend_timeout():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    be = RemoteBackend("http://llm", "m", timeout=0.5, max_retries=2, transport=httpx.MockTransport(handler))
    with pytest.raises(BackendTimeoutError):
        be.complete("tool_mapper", "p", {})


def test_remote_backend_validates_arguments():
    with pytest.raises(ValueError):
        RemoteBackend("http://llm", "m", timeout=0)
