import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disim.control import MotionLimits
from disim.dynamics import ArmModel, ee_position
from disim.perception import ObjectDescriptor
from disim.planning import (
    ApproachSpec,
    DisassemblyPlan,
    LimitsViolatedError,
    NoConvergenceError,
    PreviewReport,
    Trajectory,
    UnreachableError,
    approach_target,
    order_objects,
    plan_trajectory,
    preview,
    solve_ik,
    two_link_ik,
)


def desc(pl=0, area=10, cm=(0.0, 0.0), theta=0.0):
    return ObjectDescriptor(cm_px=cm, cm_world=cm, theta=theta,
                            area=area, pl=pl, isotropic=False)


def wide_two_link():
    base = ArmModel.with_default_limits([1.0, 1.0], [1.0, 1.0], gravity=0.0)
    return ArmModel(link_lengths=base.link_lengths, link_masses=base.link_masses,
                    gravity=0.0, q_min=np.full(2, -3.3), q_max=np.full(2, 3.3),
                    qd_max=base.qd_max, tau_max=base.tau_max)


# ---------------------------------------------------------------------------
# ordering


def test_order_by_priority_then_area():
    plan = order_objects([desc(pl=1, area=50), desc(pl=0, area=10), desc(pl=0, area=30)])
    assert [(d.pl, d.area) for d in plan.ordered] == [(0, 30), (0, 10), (1, 50)]


def test_order_tie_break_lexicographic_cm():
    items = [desc(cm=(0.4, 0.2)), desc(cm=(0.1, 0.9)), desc(cm=(0.1, 0.3))]
    plan = order_objects(items)
    assert [d.cm_world for d in plan.ordered] == [(0.1, 0.3), (0.1, 0.9), (0.4, 0.2)]


def test_order_empty():
    plan = order_objects([])
    assert plan.ordered == ()
    assert plan.remaining == 0


def test_order_permutation_invariant():
    items = [desc(pl=p, area=a, cm=(x, 0.0))
             for p, a, x in [(0, 5, 0.1), (0, 5, 0.2), (1, 9, 0.0), (0, 7, 0.5)]]
    reference = order_objects(items).ordered
    for perm in itertools.permutations(items):
        assert order_objects(perm).ordered == reference


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(6))))
def test_order_permutation_invariant_random(perm):
    items = [desc(pl=i % 2, area=10 + i, cm=(i * 0.1, -i * 0.05)) for i in range(6)]
    shuffled = [items[i] for i in perm]
    assert order_objects(shuffled).ordered == order_objects(items).ordered


# ---------------------------------------------------------------------------
# inverse kinematics


def test_ik_fully_extended():
    # boundary target: position tolerance 1e-4 pins q only to ~sqrt(2e-4)
    model = wide_two_link()
    q = solve_ik(model, (2.0, 0.0), seed_q=[0.05, -0.05])
    assert q == pytest.approx([0.0, 0.0], abs=0.05)
    assert ee_position(model, q) == pytest.approx([2.0, 0.0], abs=1e-4)


def test_ik_origin_elbow_folded_matches_closed_form():
    model = wide_two_link()
    q = solve_ik(model, (0.0, 0.0), seed_q=[0.1, 0.2], tol=1e-7)
    assert abs(q[1]) == pytest.approx(math.pi, abs=1e-6)  # closed form gives q2 = pi
    assert np.linalg.norm(ee_position(model, q)) < 1e-4


def test_ik_unreachable_outside():
    model = wide_two_link()
    with pytest.raises(UnreachableError):
        solve_ik(model, (2.5, 0.0), seed_q=[0.0, 0.0])


def test_ik_unreachable_inner_annulus():
    model = ArmModel.with_default_limits([1.0, 0.2], [1.0, 1.0])
    with pytest.raises(UnreachableError):
        solve_ik(model, (0.1, 0.0), seed_q=[0.0, 0.0])


def test_ik_round_trip_500_random_targets():
    model = wide_two_link()
    rng = np.random.default_rng(12)
    for _ in range(500):
        r = rng.uniform(0.2, 1.95)
        ang = rng.uniform(-math.pi, math.pi)
        target = np.array([r * math.cos(ang), r * math.sin(ang)])
        q = solve_ik(model, target, seed_q=rng.uniform(-0.5, 0.5, 2))
        assert np.linalg.norm(ee_position(model, q) - target) < 1e-4


def test_ik_matches_two_link_closed_form():
    model = wide_two_link()
    rng = np.random.default_rng(8)
    for _ in range(100):
        r = rng.uniform(0.3, 1.9)
        ang = rng.uniform(-1.2, 1.2)
        target = np.array([r * math.cos(ang), r * math.sin(ang)])
        q = solve_ik(model, target, seed_q=[0.0, 0.5])
        exact_down = two_link_ik(model, target, elbow_up=False)
        exact_up = two_link_ik(model, target, elbow_up=True)
        best = min(np.max(np.abs(q - exact_down)), np.max(np.abs(q - exact_up)))
        assert best < 1e-3
        assert ee_position(model, exact_down) == pytest.approx(target, abs=1e-9)


def test_ik_limits_violated():
    base = wide_two_link()
    tight = ArmModel(link_lengths=base.link_lengths, link_masses=base.link_masses,
                     gravity=0.0, q_min=np.array([-0.2, -0.2]), q_max=np.array([0.2, 0.2]),
                     qd_max=base.qd_max, tau_max=base.tau_max)
    with pytest.raises(LimitsViolatedError):
        solve_ik(tight, (0.0, 2.0), seed_q=[0.0, 0.0])


def test_ik_respects_limits_and_margin():
    model = wide_two_link()
    q = solve_ik(model, (0.3, 0.4), seed_q=[0.0, 0.0], limit_margin=0.1)
    assert np.all(q >= model.q_min + 0.1) and np.all(q <= model.q_max - 0.1)


# ---------------------------------------------------------------------------
# trajectories


def lim(speed=1.0):
    return MotionLimits(max_grip_force=30.0, speed_scale=speed)


def test_trajectory_zero_move():
    model = wide_two_link()
    traj = plan_trajectory(model, [0.3, 0.1], [0.3, 0.1], lim())
    assert traj.duration == 0.0
    assert len(traj.waypoints) == 1


def test_trajectory_duration_formula():
    model = ArmModel.with_default_limits([1.0], [1.0])
    traj = plan_trajectory(model, [0.0], [1.0], lim(speed=0.5), dt=1e-3)
    # ramp fraction 0.2: T = dq / (0.8 * v_peak), v_peak = 0.5 * 2.0 = 1
    assert traj.duration == pytest.approx(1.25, rel=1e-12)


def test_trajectory_halving_speed_doubles_duration():
    model = wide_two_link()
    t_full = plan_trajectory(model, [0.0, 0.0], [1.2, -0.8], lim(1.0), dt=1e-3)
    t_half = plan_trajectory(model, [0.0, 0.0], [1.2, -0.8], lim(0.5), dt=1e-3)
    assert t_half.duration == pytest.approx(2.0 * t_full.duration, rel=0.01)


def test_trajectory_endpoints_exact():
    model = wide_two_link()
    rng = np.random.default_rng(6)
    for _ in range(50):
        q0 = rng.uniform(-2.0, 2.0, 2)
        q1 = rng.uniform(-2.0, 2.0, 2)
        traj = plan_trajectory(model, q0, q1, lim(), dt=0.01)
        assert np.array_equal(traj.waypoints[0][1], q0)
        assert np.array_equal(traj.waypoints[-1][1], q1)
        assert traj.waypoints[-1][0] == traj.duration


def test_trajectory_joints_synchronized():
    model = ArmModel.with_default_limits([0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
    traj = plan_trajectory(model, [0.0, 0.0, 0.0], [2.0, 0.5, -0.1], lim(), dt=0.01)
    slowest = 2.0 / (0.8 * 2.0)
    assert traj.duration == pytest.approx(slowest, rel=1e-12)


def test_trajectory_velocity_cap_respected():
    model = wide_two_link()
    traj = plan_trajectory(model, [-1.5, 1.0], [1.5, -1.2], lim(0.7), dt=0.005)
    cap = 0.7 * model.qd_max
    for (t0, q0), (t1, q1) in zip(traj.waypoints, traj.waypoints[1:]):
        qd = np.abs(q1 - q0) / (t1 - t0)
        assert np.all(qd <= cap + 1e-9)


def test_trajectory_rejects_out_of_limit_endpoints():
    model = wide_two_link()
    with pytest.raises(ValueError):
        plan_trajectory(model, [0.0, 0.0], [4.0, 0.0], lim())


# ---------------------------------------------------------------------------
# preview


def test_preview_planner_output_always_clean():
    model = wide_two_link()
    rng = np.random.default_rng(77)
    for _ in range(100):
        q0 = rng.uniform(-2.5, 2.5, 2)
        q1 = rng.uniform(-2.5, 2.5, 2)
        traj = plan_trajectory(model, q0, q1, lim(rng.uniform(0.2, 1.0)), dt=0.01)
        assert preview(model, traj).empty


def test_preview_flags_position_violation_with_waypoint_index():
    model = wide_two_link()
    traj = Trajectory(((0.0, np.array([0.0, 0.0])),
                       (0.5, np.array([3.4, 0.0])),
                       (1.0, np.array([0.2, 0.0]))), 1.0)
    rep = preview(model, traj)
    assert not rep.empty
    [(idx, lr)] = [(i, r) for i, r in rep.waypoint_reports if r.position_violations]
    assert idx == 1
    assert lr.position_violations == ((0, "upper"),)


def test_preview_flags_velocity_violation():
    model = wide_two_link()
    traj = Trajectory(((0.0, np.array([0.0, 0.0])),
                       (0.1, np.array([0.5, 0.0]))), 0.1)  # 5 rad/s > 2 rad/s
    rep = preview(model, traj)
    assert not rep.empty
    assert rep.waypoint_reports[0][0] == 1
    assert rep.waypoint_reports[0][1].velocity_violations == (0,)


# ---------------------------------------------------------------------------
# approach targets


def test_approach_zero_offset():
    d = desc(cm=(0.4, 0.2))
    assert approach_target(d, ApproachSpec()) == pytest.approx([0.4, 0.2])


def test_approach_offset_addition():
    d = desc(cm=(0.4, 0.2))
    out = approach_target(d, ApproachSpec(offset=(0.0, 0.05)))
    assert out == pytest.approx([0.4, 0.25])


def test_approach_translation_equivariant():
    spec = ApproachSpec(offset=(0.03, -0.02))
    a = approach_target(desc(cm=(0.4, 0.2)), spec)
    b = approach_target(desc(cm=(0.5, 0.1)), spec)
    assert b - a == pytest.approx([0.1, -0.1])


# ---------------------------------------------------------------------------
# serialization


def test_trajectory_json_round_trip():
    model = wide_two_link()
    traj = plan_trajectory(model, [0.0, 0.0], [0.5, -0.4], lim(), dt=0.01)
    back = Trajectory.from_json(traj.to_json())
    assert back.duration == traj.duration
    assert len(back.waypoints) == len(traj.waypoints)
    for (t0, q0), (t1, q1) in zip(traj.waypoints, back.waypoints):
        assert t0 == t1 and np.array_equal(q0, q1)


def test_plan_json_round_trip():
    plan = order_objects([desc(pl=1, area=5, cm=(0.2, 0.1)), desc(pl=0, area=9)])
    back = DisassemblyPlan.from_json(plan.to_json())
    assert back == plan


def test_trajectory_sample_interpolates():
    traj = Trajectory(((0.0, np.array([0.0])), (1.0, np.array([2.0]))), 1.0)
    assert traj.sample(0.5) == pytest.approx([1.0])
    assert traj.sample(-1.0) == pytest.approx([0.0])
    assert traj.sample(9.0) == pytest.approx([2.0])
