import math

import numpy as np
import pytest

from tabletop.geometry import Pose
from tabletop.grasping import (
    DB_TOOLS,
    AlignmentError,
    GraspCandidate,
    GraspError,
    MIN_IOU,
    MaskAlignment,
    NoGraspError,
    ToolDBEntry,
    align_masks,
    centroid_grasp,
    generate_grasps,
    grasp_heatmap,
    jaw_widths,
    load_tool_db,
    overhead_capture,
    pixel_to_pose,
    render_tool_template,
    save_tool_db,
    select_grasp,
    task_oriented_grasp,
    transfer_region,
    warp_mask,
)
from tabletop.perception import wrist_camera
from tabletop.scenes import object_doc, random_scene, scene_doc
from tabletop.sim import MAX_JAW_OPENING
from tabletop.world import load_scene


def _tool_world(tool, yaw=0.0):
    return load_scene(scene_doc([object_doc(tool, (0.5, 0.0), yaw=yaw)]))


def _in_region(world, tool, pose):
    obj = world.get(tool)
    local = obj.pose.inverse_transform_points(np.array([pose.position]))
    return bool(obj.graspable_region.contains(local)[0])


def test_packaged_db_has_every_tool(tool_db):
    assert sorted(tool_db) == sorted(DB_TOOLS)
    for e in tool_db.values():
        assert e.region_mask.sum() < e.full_mask.sum()


def test_db_round_trip(tmp_path, tool_db):
    save_tool_db(tmp_path, tool_db.values())
    again = load_tool_db(tmp_path)
    for name, e in tool_db.items():
        assert np.array_equal(again[name].full_mask, e.full_mask)
        assert np.array_equal(again[name].region_mask, e.region_mask)
        assert again[name].meters_per_pixel == e.meters_per_pixel


def test_db_matches_fresh_render(tool_db):
    fresh = render_tool_template("scoop")
    assert np.array_equal(fresh.full_mask, tool_db["scoop"].full_mask)


def test_db_entry_validation():
    full = np.zeros((4, 4), bool)
    full[1:3, 1:3] = True
    region = np.zeros((4, 4), bool)
    region[0, 0] = True
    with pytest.raises(ValueError):
        ToolDBEntry("x", full, region, 0.001)
    with pytest.raises(ValueError):
        ToolDBEntry("x", np.zeros((4, 4)), np.zeros((4, 4)), 0.001)


def test_missing_db_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tool_db(tmp_path)


def test_jaw_width_of_a_bar():
    cam = wrist_camera((0.0, 0.0, 0.3))
    mask = np.zeros((cam.height, cam.width), bool)
    mask[150:160, 40:280] = True  # horizontal bar, 10 px tall
    depth = np.full(mask.shape, 0.3)
    u, v = np.array([160]), np.array([155])
    mpp = 0.3 / cam.fx
    across = jaw_widths(mask, depth, cam, u, v, 0.0)[0]
    assert across == pytest.approx(10 * mpp)
    along = jaw_widths(mask, depth, cam, u, v, 90.0)[0]
    assert along > MAX_JAW_OPENING


def test_depth_band_limits_width():
    cam = wrist_camera((0.0, 0.0, 0.3))
    mask = np.zeros((cam.height, cam.width), bool)
    mask[100:200, 100:200] = True
    depth = np.full(mask.shape, 0.3)
    depth[145:155, :] = 0.25  # a raised ridge
    w = jaw_widths(mask, depth, cam, np.array([150]), np.array([150]), 0.0)[0]
    assert w == pytest.approx(10 * 0.25 / cam.fx)


def test_select_grasp_prefers_score_then_narrow_jaw():
    a = GraspCandidate(5, 5, 0.0, 0.03, 0.9)
    b = GraspCandidate(6, 5, 45.0, 0.02, 0.9)
    c = GraspCandidate(7, 5, 0.0, 0.01, 0.5)
    assert select_grasp([a, b, c]) == b
    region = np.zeros((10, 10), bool)
    region[5, 7] = True
    assert select_grasp([a, b, c], region) == c
    with pytest.raises(NoGraspError):
        select_grasp([a, b], region)


def test_heatmap_keeps_best_score():
    img = grasp_heatmap([GraspCandidate(1, 2, 0.0, 0.01, 0.2), GraspCandidate(1, 2, 45.0, 0.01, 1.0)], (4, 4))
    assert img[2, 1] == 255 and img.sum() == 255


def test_candidates_respect_jaw_limit(tool_db):
    w = _tool_world("scoop")
    cap = overhead_capture(w, "scoop", w.get("scoop").centroid())
    cands = generate_grasps(cap.mask, cap.depth, cap.camera)
    assert cands
    assert all(c.width <= MAX_JAW_OPENING for c in cands)
    assert all(cap.mask[c.v, c.u] for c in cands)


@pytest.mark.parametrize("rot,scale", [(30.0, 1.0), (-75.0, 1.1), (140.0, 0.9)])
def test_alignment_recovers_similarity(tool_db, rot, scale):
    db = tool_db["spatula"]
    h, w = db.full_mask.shape
    size = int(2 * max(h, w))
    true = MaskAlignment((0.0, 0.0), rot, scale, 0.0)
    lin = true.matrix()[:2, :2]
    centre_d = np.array([w / 2, h / 2])
    t = np.array([size / 2, size / 2]) - lin @ centre_d + np.array([3.0, -2.0])
    true = MaskAlignment(tuple(t), rot, scale, 0.0)
    query = warp_mask(db.full_mask, true.matrix(), (size, size))
    found = align_masks(db, query)
    drot = ((found.rotation - rot + 180) % 360) - 180
    assert abs(drot) <= 3.0
    assert abs(found.scale / scale - 1) <= 0.03
    assert np.hypot(*(np.array(found.translation) - t)) <= 2.0 * scale + 2.0
    region = transfer_region(db, found, query)
    expected = warp_mask(db.region_mask, true.matrix(), query.shape)
    assert (region & expected).sum() / max(expected.sum(), 1) > 0.8


def test_alignment_rejects_dissimilar_masks(tool_db):
    ring = np.zeros((200, 200), bool)
    yy, xx = np.mgrid[:200, :200]
    r = np.hypot(xx - 100, yy - 100)
    ring[(r > 60) & (r < 70)] = True
    with pytest.raises(AlignmentError):
        align_masks(tool_db["scoop"], ring)


@pytest.mark.parametrize("tool", ["scoop", "flattener", "whisk", "spatula"])
@pytest.mark.parametrize("yaw", [0.0, 35.0, -120.0])
def test_region_grasp_lands_on_handle(tool_db, tool, yaw):
    w = _tool_world(tool, yaw)
    res = task_oriented_grasp(w, tool, "use", tool_db)
    assert res.path == "region"
    assert res.alignment.iou >= MIN_IOU
    assert _in_region(w, tool, res.pose)


def test_no_affordance_grasps_at_centroid(tool_db):
    w = _tool_world("scoop")
    res = task_oriented_grasp(w, "scoop", "scoop", tool_db, no_affordance=True)
    assert res.path == "centroid"
    c = w.get("scoop").centroid()
    assert np.hypot(*(np.array(res.pose.position[:2]) - c[:2])) < 0.01
    assert not _in_region(w, "scoop", res.pose)


class _Mapper:
    def __init__(self, answer):
        self.answer = answer
        self.calls = []

    def map_tool(self, query_tool, task, names):
        self.calls.append((query_tool, task, tuple(names)))
        return self.answer


def test_mapper_is_consulted(tool_db):
    w = _tool_world("scoop")
    m = _Mapper("scoop")
    res = task_oriented_grasp(w, "scoop", "scoop candy", tool_db, m)
    assert res.mapped_tool == "scoop" and m.calls[0][0] == "scoop"


def test_unmapped_tool_falls_back(tool_db):
    w = _tool_world("scoop")
    res = task_oriented_grasp(w, "scoop", "scoop", tool_db, _Mapper(None))
    assert res.path == "fallback" and res.region_mask is None and res.note


def test_grasp_requires_tool(tool_db):
    w = random_scene(["tomato"], seed=0)
    with pytest.raises(GraspError):
        task_oriented_grasp(w, "tomato", "use", tool_db)


def test_pixel_to_pose_inverts_projection():
    w = _tool_world("flattener")
    cap = overhead_capture(w, "flattener", w.get("flattener").centroid())
    cand = centroid_grasp(cap)
    pose = pixel_to_pose(cap, cand, w.table_height)
    u, v, _ = cap.camera.project(np.array([pose.position]))
    assert abs(u[0] - cand.u) < 1 and abs(v[0] - cand.v) < 1
    assert pose.position[2] > w.table_height
    assert pose.orientation[2] == cand.angle
    assert isinstance(pose, Pose)
    assert math.isclose(cand.score, 1.0)
