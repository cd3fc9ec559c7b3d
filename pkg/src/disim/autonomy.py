"""Variable-autonomy state machine with joint-limit fault latching.

Two operating modes share one machine: manual mirrored teleoperation, and a
semi-autonomous cycle of plan -> autonomous approach -> manual handover.
Any motion state drops into Fault on a joint-limit violation; leaving Fault
always goes through Recovering and Idle before motion is possible again.

transition() is a pure function, so replaying a recorded event log
reproduces the exact state sequence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .control import ImpedanceGains, clamp_torque
from .dynamics import ArmModel, JointState, LimitReport, check_limits, gravity_torque
from .planning import DisassemblyPlan, Trajectory

SETTLE_SPEED = 1e-3  # rad/s, below this the arm counts as stationary
BRAKE_DAMPING_SCALE = 5.0


class Mode(enum.Enum):
    MANUAL = "manual"
    SEMI_AUTO = "semi"


class FsmState(enum.Enum):
    IDLE = "idle"
    MANUAL_TELEOP = "manual_teleop"
    PLANNING = "planning"
    AUTO_APPROACH = "auto_approach"
    HANDOVER = "handover"
    FAULT = "fault"
    RECOVERING = "recovering"


MOTION_STATES = frozenset({FsmState.MANUAL_TELEOP, FsmState.AUTO_APPROACH, FsmState.HANDOVER})


class ActuationPolicy(enum.Enum):
    PASS_THROUGH = "pass_through"
    HOLD_BRAKE = "hold_brake"


# --- events ----------------------------------------------------------------


@dataclass(frozen=True)
class FsmEvent:
    def to_json(self) -> dict:
        return {"type": type(self).__name__}


@dataclass(frozen=True)
class SetMode(FsmEvent):
    mode: Mode

    def to_json(self) -> dict:
        return {"type": "SetMode", "mode": self.mode.value}


@dataclass(frozen=True)
class ExecutePlan(FsmEvent):
    plan: DisassemblyPlan | None = None

    def to_json(self) -> dict:
        return {"type": "ExecutePlan",
                "plan": self.plan.to_json() if self.plan is not None else None}


@dataclass(frozen=True)
class PlanReady(FsmEvent):
    trajectory: Trajectory

    def to_json(self) -> dict:
        return {"type": "PlanReady", "trajectory": self.trajectory.to_json()}


@dataclass(frozen=True)
class PlanFailed(FsmEvent):
    reason: str = ""

    def to_json(self) -> dict:
        return {"type": "PlanFailed", "reason": self.reason}


@dataclass(frozen=True)
class ApproachDone(FsmEvent):
    pass


@dataclass(frozen=True)
class LimitViolation(FsmEvent):
    report: LimitReport = field(default_factory=LimitReport)

    def to_json(self) -> dict:
        return {"type": "LimitViolation", "report": self.report.to_json()}


@dataclass(frozen=True)
class Recover(FsmEvent):
    pass


@dataclass(frozen=True)
class Settled(FsmEvent):
    pass


@dataclass(frozen=True)
class TaskDone(FsmEvent):
    pass


_EVENT_TYPES = {"SetMode": SetMode, "ExecutePlan": ExecutePlan, "PlanReady": PlanReady,
                "PlanFailed": PlanFailed, "ApproachDone": ApproachDone,
                "LimitViolation": LimitViolation, "Recover": Recover,
                "Settled": Settled, "TaskDone": TaskDone}


def event_from_json(d: dict) -> FsmEvent:
    kind = d.get("type")
    if kind not in _EVENT_TYPES:
        raise ValueError(f"unknown event type {kind!r}")
    if kind == "SetMode":
        return SetMode(Mode(d["mode"]))
    if kind == "ExecutePlan":
        plan = d.get("plan")
        return ExecutePlan(DisassemblyPlan.from_json(plan) if plan is not None else None)
    if kind == "PlanReady":
        return PlanReady(Trajectory.from_json(d["trajectory"]))
    if kind == "PlanFailed":
        return PlanFailed(d.get("reason", ""))
    if kind == "LimitViolation":
        return LimitViolation(LimitReport.from_json(d.get("report", {})))
    return _EVENT_TYPES[kind]()


# --- snapshot and transition -----------------------------------------------


@dataclass(frozen=True)
class AutonomySnapshot:
    mode: Mode = Mode.MANUAL
    state: FsmState = FsmState.IDLE
    active_plan: DisassemblyPlan | None = None
    violation_count: int = 0


@dataclass(frozen=True)
class TransitionResult:
    """Outcome of applying one event: the (possibly unchanged) snapshot plus
    whether the machine accepted it."""

    snapshot: AutonomySnapshot
    accepted: bool
    reason: str | None = None


def _rejected(snap: AutonomySnapshot, event: FsmEvent, why: str = "") -> TransitionResult:
    detail = f" ({why})" if why else ""
    return TransitionResult(
        snap, False,
        f"rejected: event {type(event).__name__} in state {snap.state.value}{detail}")


def transition(snap: AutonomySnapshot, event: FsmEvent) -> TransitionResult:
    """Apply one event to a snapshot. Unlisted state/event pairs are rejected."""
    s = snap.state

    if isinstance(event, LimitViolation):
        if s in MOTION_STATES:
            return TransitionResult(replace(
                snap, state=FsmState.FAULT,
                violation_count=snap.violation_count + 1), True)
        if s is FsmState.FAULT:
            # debounce: a continuing violation while already faulted is
            # absorbed, never re-counted
            return _rejected(snap, event, "absorbed while faulted")
        return _rejected(snap, event)

    if s is FsmState.IDLE:
        if isinstance(event, SetMode):
            if event.mode is Mode.MANUAL:
                return TransitionResult(
                    replace(snap, mode=Mode.MANUAL, state=FsmState.MANUAL_TELEOP), True)
            return TransitionResult(replace(snap, mode=Mode.SEMI_AUTO), True)  # armed
        if isinstance(event, ExecutePlan):
            if snap.mode is not Mode.SEMI_AUTO:
                return _rejected(snap, event, "semi-autonomous mode not armed")
            plan = event.plan if event.plan is not None else snap.active_plan
            if plan is None or plan.remaining == 0:
                return _rejected(snap, event, "no remaining objects to plan")
            return TransitionResult(
                replace(snap, state=FsmState.PLANNING, active_plan=plan), True)
        return _rejected(snap, event)

    if s is FsmState.MANUAL_TELEOP:
        if isinstance(event, SetMode) and event.mode is Mode.SEMI_AUTO:
            return TransitionResult(
                replace(snap, mode=Mode.SEMI_AUTO, state=FsmState.IDLE), True)
        return _rejected(snap, event)

    if s is FsmState.PLANNING:
        if isinstance(event, PlanReady):
            return TransitionResult(replace(snap, state=FsmState.AUTO_APPROACH), True)
        if isinstance(event, PlanFailed):
            return TransitionResult(replace(snap, state=FsmState.IDLE), True)
        return _rejected(snap, event)

    if s is FsmState.AUTO_APPROACH:
        if isinstance(event, ApproachDone):
            return TransitionResult(replace(snap, state=FsmState.HANDOVER), True)
        return _rejected(snap, event)

    if s is FsmState.HANDOVER:
        if isinstance(event, TaskDone):
            plan = snap.active_plan.advanced() if snap.active_plan is not None else None
            nxt = FsmState.PLANNING if plan is not None and plan.remaining > 0 else FsmState.IDLE
            return TransitionResult(replace(snap, state=nxt, active_plan=plan), True)
        return _rejected(snap, event)

    if s is FsmState.FAULT:
        if isinstance(event, Recover):
            return TransitionResult(replace(snap, state=FsmState.RECOVERING), True)
        return _rejected(snap, event)

    if s is FsmState.RECOVERING:
        if isinstance(event, Settled):
            return TransitionResult(replace(snap, state=FsmState.IDLE), True)
        return _rejected(snap, event)

    return _rejected(snap, event)  # pragma: no cover - states are exhaustive


def safety_action(state: FsmState) -> ActuationPolicy:
    """Fault holds position under braking; every other state passes the
    mode's controller through."""
    return ActuationPolicy.HOLD_BRAKE if state is FsmState.FAULT else ActuationPolicy.PASS_THROUGH


def brake_torque(gains: ImpedanceGains, model: ArmModel, state: JointState) -> np.ndarray:
    """Hold-position braking: heavy joint damping plus gravity hold."""
    tau = -BRAKE_DAMPING_SCALE * gains.kd * state.qd + gravity_torque(model, state.q)
    return clamp_torque(model, tau)


def recovery_settled(model: ArmModel, state: JointState) -> bool:
    """True once the arm is stationary and back inside its position limits."""
    if float(np.max(np.abs(state.qd))) >= SETTLE_SPEED:
        return False
    return not check_limits(model, JointState.rest(state.q)).position_violations
