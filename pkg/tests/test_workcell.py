import numpy as np
import pytest

from disim.dynamics import ArmModel, ee_position
from disim.planning import order_objects, solve_ik
from disim.workcell import (
    GRASPED,
    PENDING,
    SORTED,
    GripperState,
    OperatorPolicy,
    Rect,
    ScenarioError,
    SceneObject,
    ScriptedOperator,
    TaskStatus,
    contact_torque,
    default_scenario,
    load_scenario,
    release,
    scripted_operator,
    try_grasp,
)


@pytest.fixture(scope="module")
def scene():
    return default_scenario()


@pytest.fixture()
def board(scene):
    return TaskStatus.initial(scene)


# ---------------------------------------------------------------------------
# grasping


def test_grasp_at_centroid_with_enough_force(scene, board):
    oid = "bolt0"
    pos = board.positions[oid]
    res = try_grasp(pos, GripperState(force_setpoint=8.0), scene, board, t=1.0)
    assert res.grasped
    assert res.gripper.holding == oid
    assert res.status.state[oid] == GRASPED
    assert res.status.stamps[-1] == (1.0, oid, GRASPED)


def test_grasp_insufficient_force(scene, board):
    pos = board.positions["cover"]
    res = try_grasp(pos, GripperState(force_setpoint=10.0), scene, board)
    assert not res.grasped
    assert "insufficient force" in res.diagnostic
    assert res.status.state["cover"] == PENDING


def test_grasp_nothing_in_range(scene, board):
    res = try_grasp(np.array([0.0, -0.5]), GripperState(force_setpoint=20.0), scene, board)
    assert not res.grasped
    assert "no pending object" in res.diagnostic


def test_grasp_nearest_wins_and_ties_break_by_id(scene, board):
    a, b = board.positions["bolt0"], board.positions["bolt1"]
    closer_to_b = b + 0.6 * (a - b)  # 0.04 from b, 0.06 from a
    board2 = board.moved("bolt0", closer_to_b + np.array([0.02, 0.0]))
    board2 = board2.moved("bolt1", closer_to_b + np.array([-0.01, 0.0]))
    res = try_grasp(closer_to_b, GripperState(force_setpoint=8.0), scene, board2)
    assert res.gripper.holding == "bolt1"
    # exact tie
    board3 = board.moved("bolt3", board.positions["bolt2"])
    res = try_grasp(board.positions["bolt2"], GripperState(force_setpoint=8.0),
                    scene, board3)
    assert res.gripper.holding == "bolt2"


def test_grasp_requires_free_gripper(scene, board):
    with pytest.raises(ValueError):
        try_grasp(board.positions["bolt0"], GripperState(8.0, holding="bolt1"),
                  scene, board)


# ---------------------------------------------------------------------------
# release


def test_release_inside_disposal_sorts(scene, board):
    g = GripperState(8.0, holding="bolt0")
    res = release(scene.disposal.center, g, scene, board, t=2.5)
    assert res.sorted
    assert res.status.state["bolt0"] == SORTED
    assert res.gripper.holding is None
    assert np.allclose(res.status.positions["bolt0"], scene.disposal.center)


def test_release_outside_relocates_to_pending(scene, board):
    g = GripperState(8.0, holding="bolt0")
    drop = np.array([0.55, 0.50])
    res = release(drop, g, scene, board, t=2.5)
    assert not res.sorted
    assert res.status.state["bolt0"] == PENDING
    assert np.allclose(res.status.positions["bolt0"], drop)


def test_release_requires_holding(scene, board):
    with pytest.raises(ValueError):
        release(scene.disposal.center, GripperState(8.0), scene, board)


def test_sorted_count_monotone_under_grasp_release_cycles(scene, board):
    rng = np.random.default_rng(4)
    gripper = GripperState(force_setpoint=30.0)
    status = board
    t = 0.0
    sorted_counts = [0]
    for _ in range(60):
        t += 1.0
        if gripper.holding is None:
            pending = [o for o in scene.objects if status.state[o.id] == PENDING]
            if not pending:
                break
            target = pending[int(rng.integers(len(pending)))]
            res = try_grasp(status.positions[target.id], gripper, scene, status, t)
            gripper, status = res.gripper, res.status
        else:
            drop = (scene.disposal.center if rng.random() < 0.5
                    else np.array([0.5, 0.3]) + rng.uniform(-0.05, 0.05, 2))
            rel = release(drop, gripper, scene, status, t)
            gripper, status = rel.gripper, rel.status
        sorted_counts.append(status.count(SORTED))
        assert len(status.state) == len(scene.objects)  # objects conserved
    assert all(b >= a for a, b in zip(sorted_counts, sorted_counts[1:]))
    assert all(t1 <= t2 for (t1, *_), (t2, *_) in zip(status.stamps, status.stamps[1:]))


# ---------------------------------------------------------------------------
# contact torque


def test_contact_zero_when_empty():
    model = ArmModel.with_default_limits([1.0, 1.0], [1.0, 1.0])
    assert np.array_equal(contact_torque(model, [0.3, 0.4], None), np.zeros(2))


def test_contact_full_extension_shoulder_torque(scene):
    model = ArmModel.with_default_limits([1.0, 1.0], [1.0, 1.0], gravity=9.81)
    held = SceneObject(id="x", kind="module", mask=scene.objects[0].mask,
                       pl=0, mass=1.0, grasp_radius=0.05, min_grip_force=1.0)
    tau = contact_torque(model, [0.0, 0.0], held)
    assert tau[0] == pytest.approx(-19.62, abs=1e-12)  # weight pulls joints down
    assert tau[1] == pytest.approx(-9.81, abs=1e-12)


def test_contact_linear_in_mass(scene):
    model = ArmModel.with_default_limits([1.0, 1.0], [1.0, 1.0], gravity=9.81)

    def held(m):
        return SceneObject(id="x", kind="module", mask=scene.objects[0].mask,
                           pl=0, mass=m, grasp_radius=0.05, min_grip_force=1.0)

    q = [0.3, -0.8]
    t1 = contact_torque(model, q, held(0.7))
    t3 = contact_torque(model, q, held(2.1))
    assert t3 == pytest.approx(3.0 * t1, rel=1e-12)


# ---------------------------------------------------------------------------
# scripted operator


def test_operator_zero_at_target():
    op = ScriptedOperator(OperatorPolicy(gain=3.0, noise_std=0.0, seed=1), 3)
    cmd = op.command([0.5, -0.2, 0.1], [0.5, -0.2, 0.1], np.full(3, 2.0), 1.0)
    assert np.array_equal(cmd, np.zeros(3))


def test_operator_deterministic_stream():
    def stream(seed):
        op = ScriptedOperator(OperatorPolicy(gain=3.0, noise_std=0.4, seed=seed), 2)
        return [op.command([0.0, 0.0], [1.0, -1.0], np.full(2, 2.0), 1.0) for _ in range(20)]

    a, b = stream(7), stream(7)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = stream(8)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_operator_clamps_to_scaled_speed():
    op = ScriptedOperator(OperatorPolicy(gain=50.0, noise_std=0.0, seed=0), 2)
    cmd = op.command([0.0, 0.0], [2.0, -2.0], np.full(2, 2.0), 0.5)
    assert np.array_equal(cmd, np.array([1.0, -1.0]))


def test_scripted_operator_function_form():
    cmd = scripted_operator(OperatorPolicy(gain=2.0, noise_std=0.0, seed=0),
                            {"q_l": [0.0], "q_target": [0.3], "qd_max": [2.0],
                             "speed_scale": 1.0})
    assert cmd == pytest.approx([0.6])


# ---------------------------------------------------------------------------
# default scenario


def test_default_scenario_inventory(scene):
    assert len(scene.objects) == 14
    kinds = [o.kind for o in scene.objects]
    assert kinds.count("bolt") == 8
    assert kinds.count("cover") == 1
    assert kinds.count("busbar") == 1
    assert kinds.count("module") == 4


def test_default_scenario_order_bolts_cover_busbar_modules(scene):
    ds = scene.descriptors()
    plan = order_objects(ds)
    by_world = {tuple(np.round(np.asarray(d.cm_world), 9)): None for d in plan.ordered}
    assert len(by_world) == 14  # distinct world positions
    kinds_in_order = []
    for d in plan.ordered:
        idx = next(i for i, dd in enumerate(ds) if dd is d)
        kinds_in_order.append(scene.objects[idx].kind)
    assert kinds_in_order == ["bolt"] * 8 + ["cover", "busbar"] + ["module"] * 4


def test_default_scenario_objects_reachable(scene):
    status = TaskStatus.initial(scene)
    for o in scene.objects:
        q = solve_ik(scene.arm, status.positions[o.id], seed_q=scene.arm.q_home,
                     limit_margin=0.15)
        assert np.linalg.norm(ee_position(scene.arm, q) - status.positions[o.id]) < 1e-4
    q = solve_ik(scene.arm, scene.disposal.center, seed_q=scene.arm.q_home,
                 limit_margin=0.15)
    assert np.linalg.norm(ee_position(scene.arm, q) - scene.disposal.center) < 1e-4


def test_default_scenario_priorities(scene):
    for o in scene.objects:
        expected = {"bolt": 0, "cover": 1, "busbar": 2, "module": 3}[o.kind]
        assert o.pl == expected
        assert o.mask.pl == o.pl


# ---------------------------------------------------------------------------
# scenario file round trip


SCENARIO_TOML = """
[arm]
link_lengths = [0.35, 0.30, 0.25]
link_masses = [2.0, 1.2, 0.8]
gravity = 9.81
q_min = [-2.8, -2.8, -2.8]
q_max = [2.8, 2.8, 2.8]
qd_max = [2.0, 2.0, 2.0]
tau_max = [50.0, 50.0, 50.0]

[disposal]
x_min = -0.52
y_min = 0.10
x_max = -0.24
y_max = 0.38

[calibration]
affine = [[0.005, 0.0, 0.18], [0.0, -0.005, 0.62]]

[rates]
control_rate = 500.0
telemetry_rate = 30.0

[limits]
max_grip_force = 25.0
speed_scale = 0.8

[[object]]
id = "bolt0"
kind = "bolt"
mask = "bolt0.txt"
pl = 0
mass = 0.05
grasp_radius = 0.04
min_grip_force = 5.0
"""


def test_load_scenario_round_trip(tmp_path):
    (tmp_path / "scene.toml").write_text(SCENARIO_TOML)
    (tmp_path / "bolt0.txt").write_text("111\n111\n111\n")
    sc = load_scenario(tmp_path / "scene.toml")
    assert sc.control_rate == 500.0
    assert sc.motion_limits.speed_scale == 0.8
    assert len(sc.objects) == 1
    assert sc.objects[0].mask.grid.shape == (3, 3)
    assert sc.master_arm is sc.arm


def test_load_scenario_unknown_key(tmp_path):
    (tmp_path / "scene.toml").write_text(SCENARIO_TOML + "\n[nonsense]\nx = 1\n")
    (tmp_path / "bolt0.txt").write_text("1\n")
    with pytest.raises(ScenarioError, match="nonsense"):
        load_scenario(tmp_path / "scene.toml")


def test_load_scenario_bad_object_key(tmp_path):
    bad = SCENARIO_TOML.replace('min_grip_force = 5.0', 'min_grip_force = 5.0\nbogus = 1')
    (tmp_path / "scene.toml").write_text(bad)
    (tmp_path / "bolt0.txt").write_text("1\n")
    with pytest.raises(ScenarioError, match="bogus"):
        load_scenario(tmp_path / "scene.toml")


def test_load_scenario_missing_arm(tmp_path):
    (tmp_path / "scene.toml").write_text("[disposal]\nx_min=0.0\ny_min=0.0\nx_max=1.0\ny_max=1.0\n")
    with pytest.raises(ScenarioError, match="arm"):
        load_scenario(tmp_path / "scene.toml")


def test_rect_validation():
    with pytest.raises(ScenarioError):
        Rect(0.0, 0.0, 0.0, 1.0)
    r = Rect(-1.0, -1.0, 1.0, 1.0)
    assert r.contains((0.0, 0.0))
    assert not r.contains((2.0, 0.0))
