import copy

import numpy as np
import pytest

from tabletop.plan import LocationExpr
from tabletop.scenes import CATALOG, TOOL_TYPES, object_doc, random_layout, random_scene, scene_doc
from tabletop.world import (
    SceneError,
    UnknownObjectError,
    load_scene,
    resolve_location,
    serialize_scene,
    serialize_world,
    world_from_dict,
    world_to_dict,
)


def _doc():
    return scene_doc([object_doc("tomato", (0.5, 0.1)), object_doc("scoop", (0.45, -0.1))])


def test_load_scene_from_dict_yaml_and_path(tmp_path):
    w = load_scene(_doc())
    assert w.names() == ["tomato", "scoop"]
    text = serialize_scene(w)
    assert load_scene(text).names() == w.names()
    path = tmp_path / "scene.yaml"
    path.write_text(text)
    assert load_scene(path).names() == w.names()


def test_original_pose_recorded_at_load():
    w = load_scene(_doc())
    o = w.get("tomato")
    assert o.original_pose == o.pose


def test_tool_flag_requires_region():
    doc = _doc()
    doc["objects"][0]["is_tool"] = True
    with pytest.raises(SceneError, match="graspable_region"):
        load_scene(doc)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda d: d.update(schema_version=2), "schema_version"),
        (lambda d: d["objects"].append(copy.deepcopy(d["objects"][0])), "duplicate"),
        (lambda d: d["objects"][0]["pose"]["position"].__setitem__(2, -0.5), "below the table"),
        (lambda d: d["objects"][0]["shape"][0].update(size=[0.0, 0.01]), "non-positive"),
        (lambda d: d["objects"][0].update(kind="liquid"), "kind"),
        (lambda d: d["objects"][1].update(tool_class="laser"), "tool_class"),
        (lambda d: d["objects"][0]["pose"].update(position=[0, 0]), "position"),
    ],
)
def test_scene_validation_errors(mutate, match):
    doc = _doc()
    mutate(doc)
    with pytest.raises(SceneError, match=match):
        load_scene(doc)


def test_yaml_syntax_error_has_location():
    with pytest.raises(SceneError, match="line"):
        load_scene("objects: [\n  - {name: a\n")


def test_world_dict_round_trip_is_exact():
    w = random_scene(["scoop", "candy", "bowl"], seed=1)
    w.robot.held_object = None
    doc = world_to_dict(w)
    assert world_to_dict(world_from_dict(doc)) == doc
    assert serialize_world(world_from_dict(doc)) == serialize_world(w)


def test_resolve_location_kinds():
    w = load_scene(_doc())
    assert np.allclose(resolve_location(w, LocationExpr.home()), w.robot.home_pose.position)
    assert np.allclose(resolve_location(w, LocationExpr.current("tomato")), w.get("tomato").pose.position)
    table = resolve_location(w, LocationExpr.current("table"))
    assert np.allclose(table, [0.5, 0.0, 0.0])
    with pytest.raises(UnknownObjectError):
        resolve_location(w, LocationExpr.current("ghost"))


def test_catalogue_tools_have_regions_and_origin_at_reference_centroid():
    for t in TOOL_TYPES:
        assert CATALOG[t][3] is not None
    w = load_scene(scene_doc([object_doc(t, (0.5, 0.0)) for t in ["scoop"]]))
    o = w.get("scoop")
    assert np.allclose(o.centroid(), o.pose.position, atol=1e-9)


def test_random_layout_is_seeded_and_non_overlapping():
    a = random_layout(["flattener", "dough", "scoop", "spatula", "candy"], np.random.default_rng(5))
    b = random_layout(["flattener", "dough", "scoop", "spatula", "candy"], np.random.default_rng(5))
    assert a == b
    w = load_scene(a)
    for i, o in enumerate(w.objects):
        for p in w.objects[i + 1:]:
            d = np.linalg.norm(np.subtract(o.pose.position[:2], p.pose.position[:2]))
            assert d > 0.03


def test_label_strips_instance_suffix():
    w = load_scene(scene_doc([object_doc("bowl", (0.5, 0.1), name="bowl_2")]))
    assert w.get("bowl_2").label == "bowl"
