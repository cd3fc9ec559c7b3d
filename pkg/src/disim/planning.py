"""Disassembly ordering, inverse kinematics and joint trajectories.

Targets are sorted by priority level first (lower level = removed first)
and by descending area within a level, echoing the rule that bigger parts
rank higher in the hierarchy. Inverse kinematics is damped least squares on
the planar chain, cross-checkable against the closed-form two-link
solution. Trajectories are per-joint trapezoidal velocity profiles with a
fixed ramp fraction, time-synchronized to the slowest joint and sampled at
the control period; the final waypoint is assigned the goal exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import MotionLimits
from .dynamics import ArmModel, JointState, LimitReport, check_limits, ee_position, jacobian
from .perception import ObjectDescriptor

IK_TOL = 1e-4
IK_MAX_ITERS = 500


class UnreachableError(ValueError):
    """Target lies outside the chain's workspace annulus."""


class NoConvergenceError(RuntimeError):
    """Damped least squares did not reach the tolerance within the cap."""


class LimitsViolatedError(RuntimeError):
    """Reachable target, but only outside the joint limits."""


@dataclass(frozen=True)
class ApproachSpec:
    """World-frame offset applied to an object centroid before approaching."""

    offset: tuple[float, float] = (0.0, 0.0)
    hover_epsilon: float = 0.0

    def __post_init__(self):
        if self.hover_epsilon < 0:
            raise ValueError("hover epsilon must be >= 0")
        object.__setattr__(self, "offset", (float(self.offset[0]), float(self.offset[1])))


@dataclass(frozen=True)
class DisassemblyPlan:
    ordered: tuple[ObjectDescriptor, ...]
    cursor: int = 0

    def __post_init__(self):
        if not (0 <= self.cursor <= len(self.ordered)):
            raise ValueError("cursor out of range")
        object.__setattr__(self, "ordered", tuple(self.ordered))

    @property
    def remaining(self) -> int:
        return len(self.ordered) - self.cursor

    def advanced(self) -> "DisassemblyPlan":
        return DisassemblyPlan(self.ordered, min(self.cursor + 1, len(self.ordered)))

    def to_json(self) -> dict:
        return {"ordered": [d.to_json() for d in self.ordered], "cursor": self.cursor}

    @staticmethod
    def from_json(d: dict) -> "DisassemblyPlan":
        return DisassemblyPlan(
            tuple(ObjectDescriptor.from_json(x) for x in d["ordered"]), int(d["cursor"]))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped joint waypoints; t strictly increasing from 0."""

    waypoints: tuple[tuple[float, np.ndarray], ...]
    duration: float

    def __post_init__(self):
        wps = tuple((float(t), np.asarray(q, dtype=np.float64)) for t, q in self.waypoints)
        if not wps:
            raise ValueError("trajectory needs at least one waypoint")
        if wps[0][0] != 0.0:
            raise ValueError("trajectory must start at t = 0")
        for (t0, _), (t1, _) in zip(wps, wps[1:]):
            if t1 <= t0:
                raise ValueError("waypoint times must be strictly increasing")
        if wps[-1][0] != self.duration:
            raise ValueError("duration must equal the last waypoint time")
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "duration", float(self.duration))

    def sample(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation clamped to the ends."""
        wps = self.waypoints
        if t <= 0.0:
            return wps[0][1]
        if t >= self.duration:
            return wps[-1][1]
        times = [w[0] for w in wps]
        k = max(0, np.searchsorted(times, t, side="right") - 1)
        t0, q0 = wps[k]
        t1, q1 = wps[k + 1]
        a = (t - t0) / (t1 - t0)
        return q0 + a * (q1 - q0)

    def sample_pair(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and segment velocity at t, zero velocity at the ends."""
        wps = self.waypoints
        if t <= 0.0 or t >= self.duration or len(wps) < 2:
            q = wps[0][1] if t <= 0.0 else wps[-1][1]
            return q, np.zeros_like(q)
        times = [w[0] for w in wps]
        k = max(0, int(np.searchsorted(times, t, side="right")) - 1)
        t0, q0 = wps[k]
        t1, q1 = wps[k + 1]
        qd = (q1 - q0) / (t1 - t0)
        return q0 + (t - t0) * qd, qd

    def to_json(self) -> dict:
        return {"duration": self.duration,
                "waypoints": [[t, q.tolist()] for t, q in self.waypoints]}

    @staticmethod
    def from_json(d: dict) -> "Trajectory":
        return Trajectory(tuple((float(t), np.asarray(q)) for t, q in d["waypoints"]),
                          float(d["duration"]))


@dataclass(frozen=True)
class PreviewReport:
    """Dry-run verdict: limit reports keyed by offending waypoint index."""

    waypoint_reports: tuple[tuple[int, LimitReport], ...] = ()

    @property
    def empty(self) -> bool:
        return not self.waypoint_reports


def order_objects(descriptors) -> DisassemblyPlan:
    """Deterministic total disassembly order.

    Priority level ascending, then area descending, then world centroid
    lexicographic as the final tie-break.
    """
    ordered = sorted(descriptors,
                     key=lambda d: (d.pl, -d.area, d.cm_world[0], d.cm_world[1]))
    return DisassemblyPlan(tuple(ordered), 0)


def approach_target(d: ObjectDescriptor, spec: ApproachSpec) -> np.ndarray:
    return np.array([d.cm_world[0] + spec.offset[0], d.cm_world[1] + spec.offset[1]])


def reach_bounds(model: ArmModel) -> tuple[float, float]:
    """Inner/outer workspace radii of the chain with unrestricted joints."""
    l = model.link_lengths
    outer = float(np.sum(l))
    inner = max(0.0, 2.0 * float(np.max(l)) - outer)
    return inner, outer


def two_link_ik(model: ArmModel, target, elbow_up: bool = False) -> np.ndarray:
    """Closed-form two-link solution, used as the n=2 cross-check oracle."""
    if model.n != 2:
        raise ValueError("closed form applies to two-link chains only")
    l1, l2 = model.link_lengths
    x, y = float(target[0]), float(target[1])
    d2 = x * x + y * y
    c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if c2 < -1.0 - 1e-9 or c2 > 1.0 + 1e-9:
        raise UnreachableError(f"target {(x, y)} outside two-link workspace")
    c2 = min(1.0, max(-1.0, c2))
    q2 = math.acos(c2) * (-1.0 if elbow_up else 1.0)
    q1 = math.atan2(y, x) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    return np.array([q1, q2])


def solve_ik(model: ArmModel, target, seed_q, tol: float = IK_TOL,
             max_iters: int = IK_MAX_ITERS, limit_margin: float = 0.0) -> np.ndarray:
    """Damped least squares to a planar position target, clamped to limits.

    limit_margin shrinks the admissible joint box, leaving headroom for
    tracking error during execution.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (2,):
        raise ValueError("target must be a planar point")
    inner, outer = reach_bounds(model)
    r = float(np.linalg.norm(target))
    if r > outer + tol or r < inner - tol:
        raise UnreachableError(
            f"target radius {r:.4f} outside workspace [{inner:.4f}, {outer:.4f}]")
    lo = model.q_min + limit_margin
    hi = model.q_max - limit_margin
    if np.any(lo >= hi):
        raise ValueError("limit_margin leaves no admissible joint range")

    def run(seed, clamped: bool):
        q = np.asarray(seed, dtype=np.float64).copy()
        lam2 = 1e-3  # damping^2, in squared meters
        for _ in range(max_iters):
            err = target - ee_position(model, q)
            if float(np.linalg.norm(err)) < tol:
                return q
            J = jacobian(model, q)
            JJt = J @ J.T + lam2 * np.eye(2)
            dq = J.T @ np.linalg.solve(JJt, err)
            norm = float(np.linalg.norm(dq))
            if norm > 0.5:
                dq *= 0.5 / norm
            q = q + dq
            if clamped:
                q = np.clip(q, lo, hi)
        return None

    # deterministic multi-start: caller seed, home, then bearing-plus-fold
    # guesses that cover close-in targets needing a deeply bent elbow
    bearing = math.atan2(target[1], target[0])
    fold = math.pi * (1.0 - r / outer)
    seeds = [np.asarray(seed_q, dtype=np.float64), model.q_home]
    for sign in (1.0, -1.0):
        guess = np.full(model.n, sign * fold)
        guess[0] = bearing
        seeds.append(guess)
    seeds += [model.q_home + 0.4, model.q_home - 0.4]
    for s in seeds:
        q = run(np.clip(s, lo, hi), clamped=True)
        if q is not None:
            return q
    # diagnose: reachable without the joint box?
    for s in seeds:
        if run(s, clamped=False) is not None:
            raise LimitsViolatedError(
                f"target {tuple(target)} reachable only outside joint limits")
    raise NoConvergenceError(f"no solution for target {tuple(target)} "
                             f"within {max_iters} iterations")


def plan_trajectory(model: ArmModel, q_start, q_goal, limits: MotionLimits,
                    dt: float = 0.01, ramp_fraction: float = 0.2) -> Trajectory:
    """Synchronized trapezoidal profile sampled at the control period.

    Each joint accelerates for ramp_fraction of the move, cruises, then
    decelerates symmetrically; every joint stretches to the slowest joint's
    duration. Peak speed never exceeds speed_scale * qd_max.
    """
    q_start = np.asarray(q_start, dtype=np.float64)
    q_goal = np.asarray(q_goal, dtype=np.float64)
    if q_start.shape != (model.n,) or q_goal.shape != (model.n,):
        raise ValueError("configuration dimension mismatch")
    for name, q in (("start", q_start), ("goal", q_goal)):
        rep = check_limits(model, JointState.rest(q))
        if not rep.empty:
            raise ValueError(f"{name} configuration outside joint limits: {rep}")
    if not 0.0 < ramp_fraction < 0.5:
        raise ValueError("ramp_fraction must lie in (0, 0.5)")
    if dt <= 0:
        raise ValueError("dt must be positive")

    delta = q_goal - q_start
    if np.all(delta == 0.0):
        return Trajectory(((0.0, q_start.copy()),), 0.0)

    v_cap = limits.speed_scale * model.qd_max
    durations = np.abs(delta) / ((1.0 - ramp_fraction) * v_cap)
    T = float(np.max(durations))
    v_peak = delta / ((1.0 - ramp_fraction) * T)  # signed, |.| <= v_cap

    def q_at(t: float) -> np.ndarray:
        tr = ramp_fraction * T
        if t <= tr:
            return q_start + 0.5 * (v_peak / tr) * t * t
        if t <= T - tr:
            return q_start + v_peak * (t - 0.5 * tr)
        s = T - t
        return q_goal - 0.5 * (v_peak / tr) * s * s

    ts = np.arange(0.0, T, dt)
    waypoints = [(float(t), q_at(float(t))) for t in ts]
    if not waypoints or waypoints[-1][0] < T:
        waypoints.append((T, q_goal.copy()))
    else:
        waypoints[-1] = (T, q_goal.copy())
    return Trajectory(tuple(waypoints), T)


def preview(model: ArmModel, traj: Trajectory) -> PreviewReport:
    """Validate a trajectory against limits without touching live state.

    Checks joint positions at every waypoint and finite-difference
    velocities across segments; an empty report certifies execution.
    """
    reports: list[tuple[int, LimitReport]] = []
    prev_t, prev_q = None, None
    for idx, (t, q) in enumerate(traj.waypoints):
        pos = []
        for j in range(model.n):
            if q[j] < model.q_min[j]:
                pos.append((j, "lower"))
            elif q[j] > model.q_max[j]:
                pos.append((j, "upper"))
        vel: tuple[int, ...] = ()
        if prev_q is not None:
            qd = np.abs(q - prev_q) / (t - prev_t)
            vel = tuple(int(j) for j in np.nonzero(qd > model.qd_max)[0])
        rep = LimitReport(tuple(pos), vel)
        if not rep.empty:
            reports.append((idx, rep))
        prev_t, prev_q = t, q
    return PreviewReport(tuple(reports))
