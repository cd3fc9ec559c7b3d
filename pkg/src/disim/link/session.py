"""Master and slave node loops on one logical clock.

Each tick, every node consumes the latest frame delivered from its peer
(zero-order hold when the link is stale), computes its control torque,
integrates its arm, and sends its own state frame into the impaired
channel. The master is driven by the operator (scripted policy or console
commands) except during autonomous approach, when it tracks the planned
trajectory; the slave always mirrors the master under joint impedance
control with force feedback flowing back. A state machine gates the whole
thing and latches faults on joint-limit violations.

Determinism: all randomness (operator tremor, channel jitter/drops) is
seeded from the run seed, and simulated time is integer microseconds, so
identically configured runs write byte-identical artifacts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import autonomy as fsm
from ..control import MotionLimits, clamp_torque, default_gains, master_torque, slave_torque
from ..dynamics import (
    JointState,
    LimitReport,
    check_limits,
    ee_position,
    gravity_torque,
    jacobian,
    joint_points,
    mass_matrix,
    step,
)
from ..metrics import TASK_KEYS, SessionRecord
from ..perception import ObjectDescriptor
from ..planning import (
    ApproachSpec,
    DisassemblyPlan,
    LimitsViolatedError,
    NoConvergenceError,
    Trajectory,
    UnreachableError,
    plan_trajectory,
    preview,
    solve_ik,
)
from ..workcell import (
    GRASPED,
    PENDING,
    SORTED,
    GripperState,
    OperatorPolicy,
    Scenario,
    ScriptedOperator,
    TaskStatus,
    contact_torque,
    release,
    try_grasp,
)
from .channel import Channel, ChannelModel
from .protocol import KIND_HEARTBEAT, KIND_JOINT_STATE, Frame, decode, encode

STALE_AFTER_TICKS = 10
JOG_TTL_S = 0.25           # deadman on the last jog command
HAND_STIFFNESS_SCALE = 1.0   # operator grip relative to the impedance gains
HAND_REF_WINDUP_RAD = 0.3    # hand reference never leads the arm further than this
AUTO_SPEED_FACTOR = 0.6    # autonomous approach speed relative to speed_scale
IK_LIMIT_MARGIN = 0.18     # rad of headroom between IK solutions and limits
CATEGORY_ORDER = ("bolts", "cover", "busbar", "modules")
KIND_TO_CATEGORY = {"bolt": "bolts", "cover": "cover", "busbar": "busbar",
                    "module": "modules"}


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    mode: fsm.Mode = fsm.Mode.MANUAL
    operator: str = "scripted"          # "scripted" | "console"
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0
    duration_s: float | None = None     # hard stop; None = run to completion cap
    until_complete: bool = True
    max_duration_s: float = 600.0
    im_label: str = "sim"
    out_dir: str | None = None
    frames_log: bool = False
    strict: bool = False
    realtime: bool = False
    operator_gain: float = 4.0
    operator_noise_std: float = 0.25
    operator_lapse_prob: float = 0.25
    approach: ApproachSpec = field(default_factory=lambda: ApproachSpec((0.0, 0.05), 0.01))

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value, "operator": self.operator,
            "latency_ms": self.latency_ms, "jitter_ms": self.jitter_ms,
            "drop_prob": self.drop_prob, "seed": self.seed,
            "duration_s": self.duration_s, "until_complete": self.until_complete,
            "max_duration_s": self.max_duration_s, "im_label": self.im_label,
            "operator_gain": self.operator_gain,
            "operator_noise_std": self.operator_noise_std,
            "operator_lapse_prob": self.operator_lapse_prob,
            "approach_offset": list(self.approach.offset),
            "hover_epsilon": self.approach.hover_epsilon,
        }


class _Node:
    """One arm endpoint: local state plus the zero-order-held peer view."""

    def __init__(self, name, model, q0):
        self.name = name
        self.model = model
        self.state = JointState.rest(q0)
        self.seq = 0
        self.peer: JointState | None = None
        self.peer_seq = -1
        self.ticks_since_rx = 0

    def next_seq(self) -> int:
        s = self.seq
        self.seq = (self.seq + 1) % 2**32
        return s

    @property
    def stale(self) -> bool:
        return self.ticks_since_rx > STALE_AFTER_TICKS

    def take_frame(self, frame: Frame):
        if frame.kind == KIND_JOINT_STATE:
            self.peer = JointState(frame.q, frame.qd, frame.tau_ext)
            self.peer_seq = frame.seq
        self.ticks_since_rx = 0


@dataclass
class SessionResult:
    record: SessionRecord
    snapshot: fsm.AutonomySnapshot
    status: TaskStatus
    event_log: list
    ticks: int
    sim_duration_s: float
    completed: bool
    faulted_at_end: bool
    previews_clean: bool
    violations_by_prior_state: dict
    artifacts: dict


class ScriptDriver:
    """Deterministic task script standing in for the human operator.

    Emits exactly the console's command vocabulary: set_mode / execute /
    jog / set_force / recover. Approaches each pending object in plan
    order, grasps once close, carries it to the disposal region, releases,
    and recovers whenever the machine faults.
    """

    def __init__(self, session: "Session"):
        self.s = session
        n = session.master.model.n
        self.operator = ScriptedOperator(
            OperatorPolicy(gain=session.config.operator_gain,
                           noise_std=session.config.operator_noise_std,
                           seed=session.config.seed), n, dt=session.dt)
        self._ik_cache: dict = {}
        # attention lapses: per manual leg, the operator sometimes briefly
        # aims past the target before correcting - the mechanism behind
        # losing track of joint travel near the limits
        self._lapse_rng = np.random.Generator(
            np.random.PCG64([session.config.seed, 0x1A95E]))
        self._leg_key = None
        self._leg_start_q: np.ndarray | None = None
        self._lapse: tuple[float, float] | None = None
        self._lapse_until: float | None = None
        # visual servo while hauling: the operator trims the aim until the
        # held object actually sits over the drop zone (the loaded slave
        # sags below the master's nominal pose)
        self._servo_key = None
        self._servo_corr = np.zeros(2)
        self._servo_jpinv: np.ndarray | None = None

    def _ik(self, key, point):
        if key not in self._ik_cache:
            m = self.s.master.model
            try:
                q = solve_ik(m, point, seed_q=self.s.master.state.q,
                             limit_margin=IK_LIMIT_MARGIN)
            except (UnreachableError, NoConvergenceError, LimitsViolatedError):
                q = None
            self._ik_cache[key] = q
        return self._ik_cache[key]

    def _jog_command(self, q_target, care: float) -> dict:
        m = self.s.master.model
        qd_cmd = self.operator.command(self.s.master.state.q, q_target, m.qd_max,
                                       self.s.speed_scale, care=care)
        cap = m.qd_max * self.s.speed_scale
        v = np.clip(qd_cmd / cap, -1.0, 1.0)
        return {"type": "jog", "v": [float(x) for x in v]}

    def _care(self, q_target) -> float:
        err = float(np.max(np.abs(q_target - self.s.master.state.q)))
        return float(np.clip(err / 0.8, 0.08, 1.0))

    def _leg_target(self, key, q_target: np.ndarray) -> np.ndarray:
        """Per-leg lapse bookkeeping: on some legs the operator fails to stop
        on arrival and briefly pushes past the target along the leg
        direction before correcting."""
        if key != self._leg_key:
            self._leg_key = key
            self._leg_start_q = np.array(self.s.master.state.q)
            self._lapse = None
            self._lapse_until = None
            if self.s.config.operator_lapse_prob > 0.0:
                hit = self._lapse_rng.random() < self.s.config.operator_lapse_prob
                lam = float(self._lapse_rng.uniform(0.2, 0.6))
                dur = float(self._lapse_rng.uniform(0.4, 0.9))
                if hit:
                    self._lapse = (lam, dur)
        if self._lapse is not None:
            lam, dur = self._lapse
            err = float(np.max(np.abs(q_target - self.s.master.state.q)))
            if self._lapse_until is None and err < 0.35:  # arrival: overshoot starts
                self._lapse_until = self.s.now_s + dur
            if self._lapse_until is not None:
                if self.s.now_s < self._lapse_until:
                    return q_target + lam * (q_target - self._leg_start_q)
                self._lapse = None  # corrected; aim true for the rest of the leg
        return q_target

    def commands(self) -> list:
        s = self.s
        state = s.snapshot.state
        out: list = []

        if state is fsm.FsmState.FAULT:
            self._ik_cache.clear()  # pose will change; recompute afterwards
            self._leg_key = None
            return [{"type": "recover"}]

        if state is fsm.FsmState.RECOVERING:
            safe = np.clip(s.master.state.q, s.master.model.q_min + 0.3,
                           s.master.model.q_max - 0.3)
            if float(np.max(np.abs(safe - s.master.state.q))) < 0.05:
                return []  # back inside: hands steady so the arm can settle
            return [self._jog_command(safe, care=0.1)]

        if state is fsm.FsmState.IDLE:
            if s.pending_ids():
                if s.config.mode is fsm.Mode.MANUAL:
                    return [{"type": "set_mode", "mode": "manual"}]
                if s.snapshot.mode is not fsm.Mode.SEMI_AUTO:
                    return [{"type": "set_mode", "mode": "semi"}]
                return [{"type": "execute"}]
            return []

        if state in (fsm.FsmState.PLANNING, fsm.FsmState.AUTO_APPROACH):
            return []

        # MANUAL_TELEOP or HANDOVER: work the current object
        oid = s.gripper.holding or s.current_target_id()
        if oid is None:
            return []
        obj = s.scenario.object_by_id(oid)
        ee = s.slave_ee()

        if s.gripper.holding is None:
            target_pt = s.status.positions[oid]
            q_target = self._ik(("obj", oid), target_pt)
            if q_target is None:
                s.script_skipped.add(oid)
                return []
            aim = self._leg_target(("obj", oid), q_target)
            lapsing = aim is not q_target  # mid-overshoot: attention elsewhere
            dist = float(np.linalg.norm(ee - target_pt))
            if dist <= obj.grasp_radius * 0.7 and not lapsing:
                want = min(obj.min_grip_force + 3.0,
                           s.scenario.motion_limits.max_grip_force)
                if s.gripper.force_setpoint < obj.min_grip_force:
                    out.append({"type": "set_force", "value": want})
            elif s.gripper.force_setpoint != 0.0:
                out.append({"type": "set_force", "value": 0.0})
            out.append(self._jog_command(aim, self._care(aim)))
            return out

        # holding: carry to disposal, drop once inside
        q_target = self._ik(("disposal",), s.scenario.disposal.center)
        if q_target is None:
            return []
        inset = 0.02
        d = s.scenario.disposal
        inside = (d.x_min + inset <= ee[0] <= d.x_max - inset
                  and d.y_min + inset <= ee[1] <= d.y_max - inset)
        if inside:
            return [{"type": "set_force", "value": 0.0}]
        key = ("haul", oid)
        if key != self._servo_key:
            self._servo_key = key
            self._servo_corr = np.zeros(2)
            self._servo_jpinv = np.linalg.pinv(jacobian(s.master.model, q_target))
        err_xy = s.scenario.disposal.center - ee
        corr = self._servo_corr + 0.5 * s.dt * err_xy
        norm = float(np.linalg.norm(corr))
        if norm > 0.25:
            corr *= 0.25 / norm
        self._servo_corr = corr
        servoed = q_target + self._servo_jpinv @ corr
        servoed = np.clip(servoed, s.master.model.q_min + 0.1,
                          s.master.model.q_max - 0.1)
        aim = self._leg_target(key, servoed)
        out.append(self._jog_command(aim, self._care(aim)))
        return out


class Session:
    """Owner of the logical clock and every piece of mutable run state."""

    def __init__(self, scenario: Scenario, channel_model: ChannelModel,
                 config: SessionConfig, telemetry=None):
        self.scenario = scenario
        self.config = config
        self.telemetry = telemetry
        self.gains = scenario.gains or default_gains(scenario.arm)
        self.master_gains = (scenario.gains or default_gains(scenario.master_arm))

        self.tick_us = int(round(1e6 / scenario.control_rate))
        self.dt = self.tick_us / 1e6
        self.decimation = max(1, int(round(scenario.control_rate / scenario.telemetry_rate)))

        q0 = scenario.arm.q_home
        self.master = _Node("master", scenario.master_arm, q0)
        self.slave = _Node("slave", scenario.arm, q0)
        # independent seeded impairment streams per direction
        self.ch_m2s = Channel(replace(channel_model, seed=channel_model.seed * 2 + 1))
        self.ch_s2m = Channel(replace(channel_model, seed=channel_model.seed * 2 + 2))

        self.descriptors = scenario.descriptors()
        self.status = TaskStatus.initial(scenario, self.descriptors)
        self.gripper = GripperState(0.0, None)
        self.speed_scale = scenario.motion_limits.speed_scale
        self.snapshot = fsm.AutonomySnapshot()
        self.event_log: list = []
        self.camera_preset = 0

        self.plan_ids: tuple = ()
        self.active_traj: Trajectory | None = None
        self.traj_start_us = 0
        self._planned_in_state = False
        self.previews_clean = True
        self.violations_by_prior_state: dict = {}
        self.script_skipped: set = set()

        self._jog = np.zeros(scenario.master_arm.n)
        self._jog_age = 10**9
        self._tau_ext_fb = np.zeros(scenario.master_arm.n)

        self.tick = 0
        self.frames: list = [] if config.frames_log else None
        self.driver = ScriptDriver(self) if config.operator == "scripted" else None

        self._mask_area = {o.id: int(o.mask.grid.sum()) for o in scenario.objects}
        self._fault_substeps = max(1, int(np.ceil(1000.0 / scenario.control_rate)))
        # operator hand: impedance around a reference pose that integrates the
        # jog velocity; stiff enough to reject rendered feedback weight
        self._hand_kp = HAND_STIFFNESS_SCALE * self.master_gains.kp
        self._hand_kd = HAND_STIFFNESS_SCALE * self.master_gains.kd
        self._hand_ref = np.array(q0, dtype=np.float64)
        self._hand_was_active = False

    # -- helpers -------------------------------------------------------------

    @property
    def now_us(self) -> int:
        return self.tick * self.tick_us

    @property
    def now_s(self) -> float:
        return self.now_us / 1e6

    def slave_ee(self) -> np.ndarray:
        return ee_position(self.slave.model, self.slave.state.q)

    def pending_ids(self) -> list:
        return [o.id for o in self.scenario.objects
                if self.status.state[o.id] == PENDING and o.id not in self.script_skipped]

    def current_target_id(self) -> str | None:
        """First pending object at or past the plan cursor; plan order when a
        plan exists, priority order otherwise."""
        if self.snapshot.active_plan is not None and self.plan_ids:
            for i in range(self.snapshot.active_plan.cursor, len(self.plan_ids)):
                oid = self.plan_ids[i]
                if self.status.state[oid] == PENDING and oid not in self.script_skipped:
                    return oid
        ordered, ids = self._ordered_descriptors()
        for oid in ids:
            if self.status.state[oid] == PENDING and oid not in self.script_skipped:
                return oid
        return None

    def _ordered_descriptors(self):
        pairs = []
        for o in self.scenario.objects:
            if self.status.state[o.id] != PENDING:
                continue
            pos = self.status.positions[o.id]
            pairs.append((ObjectDescriptor(
                cm_px=(0.0, 0.0), cm_world=(float(pos[0]), float(pos[1])),
                theta=float(self.status.theta[o.id]), area=self._mask_area[o.id],
                pl=o.pl, isotropic=False), o.id))
        pairs.sort(key=lambda p: (p[0].pl, -p[0].area, p[0].cm_world[0], p[0].cm_world[1]))
        return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)

    def _build_plan(self) -> DisassemblyPlan | None:
        ordered, ids = self._ordered_descriptors()
        if not ordered:
            return None
        self.plan_ids = ids
        return DisassemblyPlan(ordered, 0)

    # -- FSM ------------------------------------------------------------------

    def _apply_event(self, event: fsm.FsmEvent) -> fsm.TransitionResult:
        result = fsm.transition(self.snapshot, event)
        prior = self.snapshot.state
        self.snapshot = result.snapshot
        if result.accepted and isinstance(event, fsm.LimitViolation):
            key = prior.value
            self.violations_by_prior_state[key] = (
                self.violations_by_prior_state.get(key, 0) + 1)
        if result.accepted and prior is not self.snapshot.state:
            self._planned_in_state = False
        self.event_log.append({
            "t_us": self.now_us,
            "state": self.snapshot.state.value,
            "event": event.to_json(),
            "accepted": result.accepted,
            "violations": self.snapshot.violation_count,
        })
        return result

    # -- commands --------------------------------------------------------------

    def _apply_command(self, cmd: dict, client=None) -> str | None:
        """Returns an error string for a rejected/invalid command, else None."""
        typ = cmd.get("type")
        if typ == "set_mode":
            if cmd.get("mode") not in ("manual", "semi"):
                return "mode must be 'manual' or 'semi'"
            r = self._apply_event(fsm.SetMode(fsm.Mode(cmd["mode"])))
            return None if r.accepted else r.reason
        if typ == "execute":
            plan = None
            snap_plan = self.snapshot.active_plan
            if snap_plan is None or snap_plan.remaining == 0:
                plan = self._build_plan()
            r = self._apply_event(fsm.ExecutePlan(plan))
            return None if r.accepted else r.reason
        if typ == "recover":
            r = self._apply_event(fsm.Recover())
            return None if r.accepted else r.reason
        if typ == "jog":
            v = cmd.get("v")
            n = self.master.model.n
            if (not isinstance(v, (list, tuple)) or len(v) != n
                    or not all(isinstance(x, (int, float)) for x in v)):
                return f"jog needs a list of {n} numbers"
            self._jog = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
            self._jog_age = 0
            return None
        if typ == "set_speed":
            value = cmd.get("value")
            if not isinstance(value, (int, float)) or not (0.0 < value <= 1.0):
                return "speed must lie in (0, 1]"
            self.speed_scale = float(value)
            return None
        if typ == "set_force":
            value = cmd.get("value")
            if not isinstance(value, (int, float)) or value < 0:
                return "force must be >= 0"
            capped = min(float(value), self.scenario.motion_limits.max_grip_force)
            self.gripper = GripperState(capped, self.gripper.holding)
            return None
        if typ == "camera":
            direction = cmd.get("dir", "next")
            if direction not in ("next", "prev"):
                return "camera dir must be 'next' or 'prev'"
            self.camera_preset = (self.camera_preset + (1 if direction == "next" else -1)) % 3
            return None
        return f"unknown command type {typ!r}"

    def _drain_commands(self):
        if self.driver is not None:
            for cmd in self.driver.commands():
                self._apply_command(cmd)
        if self.telemetry is not None:
            for client, cmd in self.telemetry.poll_commands():
                err = self._apply_command(cmd, client)
                if err is not None:
                    self.telemetry.reply(client, {
                        "type": "error", "reason": err, "command": cmd.get("type")})

    # -- orchestration -----------------------------------------------------------

    def _orchestrate(self):
        state = self.snapshot.state
        if state is fsm.FsmState.PLANNING and not self._planned_in_state:
            self._planned_in_state = True
            self._plan_step()
        elif state is fsm.FsmState.AUTO_APPROACH and self.active_traj is not None:
            t_traj = (self.now_us - self.traj_start_us) / 1e6
            if t_traj >= self.active_traj.duration:
                self._apply_event(fsm.ApproachDone())
                self.active_traj = None
        elif state is fsm.FsmState.RECOVERING:
            if (fsm.recovery_settled(self.master.model, self.master.state)
                    and fsm.recovery_settled(self.slave.model, self.slave.state)):
                self._apply_event(fsm.Settled())

    def _plan_step(self):
        model = self.master.model
        if self.gripper.holding is not None:
            # resuming mid-transport: hand straight over at the current pose
            traj = plan_trajectory(model, self.master.state.q, self.master.state.q,
                                   MotionLimits(self.scenario.motion_limits.max_grip_force,
                                                self.speed_scale), dt=self.dt)
            self._accept_plan(traj)
            return
        oid = self.current_target_id()
        if oid is None:
            self._apply_event(fsm.PlanFailed("no pending object"))
            return
        target = self.status.positions[oid] + np.asarray(self.config.approach.offset)
        try:
            q_goal = solve_ik(model, target, seed_q=self.master.state.q,
                              limit_margin=IK_LIMIT_MARGIN)
        except (UnreachableError, NoConvergenceError, LimitsViolatedError) as exc:
            self._apply_event(fsm.PlanFailed(f"ik: {exc}"))
            return
        speed = max(min(AUTO_SPEED_FACTOR * self.speed_scale, 1.0), 1e-3)
        traj = plan_trajectory(model, self.master.state.q, q_goal,
                               MotionLimits(self.scenario.motion_limits.max_grip_force,
                                            speed), dt=self.dt)
        rep = preview(model, traj)
        if not rep.empty:
            self.previews_clean = False
            self._apply_event(fsm.PlanFailed("preview found limit violations"))
            return
        self._accept_plan(traj)

    def _accept_plan(self, traj: Trajectory):
        r = self._apply_event(fsm.PlanReady(traj))
        if r.accepted:
            self.active_traj = traj
            self.traj_start_us = self.now_us

    # -- control -----------------------------------------------------------------

    def _master_tau(self) -> tuple[np.ndarray, np.ndarray]:
        """(actuator command, external hand torque) for the master arm."""
        model = self.master.model
        state = self.snapshot.state
        ms = self.master.state
        if state is fsm.FsmState.FAULT:
            return fsm.brake_torque(self.master_gains, model, ms), np.zeros(model.n)
        if state is fsm.FsmState.AUTO_APPROACH and self.active_traj is not None:
            t_traj = (self.now_us - self.traj_start_us) / 1e6
            r, rd = self.active_traj.sample_pair(t_traj)
            frame = slave_torque(self.master_gains, model, ms,
                                 JointState(r, rd, np.zeros(model.n)))
            return clamp_torque(model, frame.tau_f), np.zeros(model.n)
        tau_fb = master_torque(self.master_gains, self._tau_ext_fb, ms).tau_l
        cmd = clamp_torque(model, tau_fb + gravity_torque(model, ms.q))
        hand = np.zeros(model.n)
        active = state in (fsm.FsmState.MANUAL_TELEOP, fsm.FsmState.HANDOVER,
                           fsm.FsmState.RECOVERING)
        if active:
            if not self._hand_was_active:
                self._hand_ref = np.array(ms.q)
            qd_cmd = np.zeros(model.n)
            if self._jog_age * self.dt <= JOG_TTL_S:
                qd_cmd = self._jog * model.qd_max * self.speed_scale
            ref = self._hand_ref + qd_cmd * self.dt
            self._hand_ref = np.clip(ref, ms.q - HAND_REF_WINDUP_RAD,
                                     ms.q + HAND_REF_WINDUP_RAD)
            hand = (self._hand_kp * (self._hand_ref - ms.q)
                    + self._hand_kd * (qd_cmd - ms.qd))
        self._hand_was_active = active
        return cmd, hand

    def _slave_tau(self) -> np.ndarray:
        model = self.slave.model
        if self.snapshot.state is fsm.FsmState.FAULT:
            return fsm.brake_torque(self.gains, model, self.slave.state)
        leader = self.slave.peer if self.slave.peer is not None else self.slave.state
        frame = slave_torque(self.gains, model, self.slave.state, leader)
        return clamp_torque(model, frame.tau_f)

    # -- workcell ------------------------------------------------------------------

    def _workcell_update(self):
        ee = self.slave_ee()
        if self.gripper.holding is not None:
            self.status = self.status.moved(self.gripper.holding, ee)
            held = self.scenario.object_by_id(self.gripper.holding)
            if self.gripper.force_setpoint < held.min_grip_force:
                res = release(ee, self.gripper, self.scenario, self.status, self.now_s)
                self.gripper, self.status = res.gripper, res.status
                if res.sorted:
                    self._apply_event(fsm.TaskDone())
        elif self.gripper.force_setpoint > 0.0:
            res = try_grasp(ee, self.gripper, self.scenario, self.status, self.now_s)
            if res.grasped:
                self.gripper, self.status = res.gripper, res.status

    # -- per-tick -------------------------------------------------------------------

    def run_tick(self):
        now = self.now_us

        # 1. deliver frames
        for payload in self.ch_m2s.poll(now):
            self.slave.take_frame(decode(payload))
        for payload in self.ch_s2m.poll(now):
            frame = decode(payload)
            self.master.take_frame(frame)
            if frame.kind == KIND_JOINT_STATE:
                self._tau_ext_fb = frame.tau_ext
        self.master.ticks_since_rx += 1
        self.slave.ticks_since_rx += 1
        self._jog_age += 1

        # 2. operator / console commands
        self._drain_commands()

        # 3. autonomy bookkeeping
        self._orchestrate()

        # 4. control and integration; the fault brake is stiff, so Fault
        # ticks integrate in substeps at an effective rate of >= 1 kHz
        n_sub = (self._fault_substeps
                 if self.snapshot.state is fsm.FsmState.FAULT else 1)
        sub_dt = self.dt / n_sub
        for _ in range(n_sub):
            tau_m, hand = self._master_tau()
            ms = self.master.state
            self.master.state = step(self.master.model, JointState(ms.q, ms.qd, hand),
                                     tau_m, sub_dt)
            contact = contact_torque(
                self.slave.model, self.slave.state.q,
                self.scenario.object_by_id(self.gripper.holding)
                if self.gripper.holding else None)
            tau_s = self._slave_tau()
            ss = self.slave.state
            self.slave.state = step(self.slave.model, JointState(ss.q, ss.qd, contact),
                                    tau_s, sub_dt)

        # 5. workcell consequences of the new pose
        self._workcell_update()

        # 6. safety: operator-side joint-limit watchdog (position excursions;
        # velocity bounds are vetted by preview, not latched as faults)
        if self.snapshot.state in fsm.MOTION_STATES:
            rep = check_limits(self.master.model, self.master.state)
            if rep.position_violations:
                self._apply_event(fsm.LimitViolation(
                    LimitReport(rep.position_violations, ())))

        # 7. exchange state frames
        send_t = self.now_us
        if self.tick == 0:
            hb_m = encode(Frame.heartbeat(self.master.next_seq(), send_t))
            hb_s = encode(Frame.heartbeat(self.slave.next_seq(), send_t))
            self.ch_m2s.push(hb_m, send_t)
            self.ch_s2m.push(hb_s, send_t)
            if self.frames is not None:
                self.frames.append({"t_us": send_t, "dir": "m2s", "hex": hb_m.hex()})
                self.frames.append({"t_us": send_t, "dir": "s2m", "hex": hb_s.hex()})
        mf = Frame(KIND_JOINT_STATE, self.master.next_seq(), send_t,
                   self.master.state.q, self.master.state.qd, self.master.state.tau_ext)
        sf = Frame(KIND_JOINT_STATE, self.slave.next_seq(), send_t,
                   self.slave.state.q, self.slave.state.qd, self.slave.state.tau_ext)
        m_bytes, s_bytes = encode(mf), encode(sf)
        self.ch_m2s.push(m_bytes, send_t)
        self.ch_s2m.push(s_bytes, send_t)
        if self.frames is not None:
            self.frames.append({"t_us": send_t, "dir": "m2s", "hex": m_bytes.hex()})
            self.frames.append({"t_us": send_t, "dir": "s2m", "hex": s_bytes.hex()})

        # 8. telemetry
        if self.telemetry is not None and self.tick % self.decimation == 0:
            self.telemetry.publish(self.state_message())

        self.tick += 1

    # -- telemetry message ------------------------------------------------------------

    def _task_timers(self) -> dict:
        """Sequential category windows in dismantling order: a category's
        clock starts when the previous category finishes and stops at its own
        last sort (or keeps running while incomplete)."""
        cursor_t = 0.0
        now = self.now_s
        timers = dict.fromkeys(TASK_KEYS, 0.0)
        for cat in CATEGORY_ORDER:
            oids = [o.id for o in self.scenario.objects
                    if KIND_TO_CATEGORY[o.kind] == cat]
            if not oids:
                continue
            if all(self.status.state[oid] == SORTED for oid in oids):
                end = max((t for t, oid, st in self.status.stamps
                           if oid in oids and st == SORTED), default=cursor_t)
                end = max(end, cursor_t)
            else:
                end = now
            timers[cat] = max(0.0, end - cursor_t)
            cursor_t = end
        return timers

    def state_message(self) -> dict:
        ghost = None
        if self.active_traj is not None:
            pts = [self.active_traj.waypoints[i][1]
                   for i in range(0, len(self.active_traj.waypoints),
                                  max(1, len(self.active_traj.waypoints) // 40))]
            ghost = [[float(x) for x in ee_position(self.master.model, q)] for q in pts]
        task_status = {
            o.id: {"kind": o.kind, "state": self.status.state[o.id],
                   "xy": [float(v) for v in self.status.positions[o.id]],
                   "theta": float(self.status.theta[o.id]), "pl": o.pl,
                   "grasp_radius": o.grasp_radius}
            for o in self.scenario.objects}
        links = joint_points(self.slave.model, self.slave.state.q)
        links_m = joint_points(self.master.model, self.master.state.q)
        return {
            "type": "state",
            "t_us": self.now_us,
            "master_q": [float(v) for v in self.master.state.q],
            "slave_q": [float(v) for v in self.slave.state.q],
            "ee_xy": [float(v) for v in links[-1]],
            "links_xy": [[float(a), float(b)] for a, b in links],
            "master_links_xy": [[float(a), float(b)] for a, b in links_m],
            "mode": self.snapshot.mode.value,
            "fsm": self.snapshot.state.value,
            "violations": self.snapshot.violation_count,
            "task_status": task_status,
            "timers": self._task_timers(),
            "link_stale": self.master.stale or self.slave.stale,
            "speed_scale": self.speed_scale,
            "grip_force": self.gripper.force_setpoint,
            "max_grip_force": self.scenario.motion_limits.max_grip_force,
            "holding": self.gripper.holding,
            "camera_preset": self.camera_preset,
            "plan_ghost": ghost,
            "sorted": self.status.count(SORTED),
            "disposal": [self.scenario.disposal.x_min, self.scenario.disposal.y_min,
                         self.scenario.disposal.x_max, self.scenario.disposal.y_max],
            "reach": self.slave.model.reach,
        }

    # -- run to completion ---------------------------------------------------------------

    def _stop_now(self) -> bool:
        if self.config.duration_s is not None and self.now_s >= self.config.duration_s:
            return True
        if self.now_s >= self.config.max_duration_s:
            return True
        if (self.config.until_complete and self.config.operator == "scripted"
                and not self.pending_ids() and self.gripper.holding is None):
            return True
        return False

    def run(self) -> SessionResult:
        wall_start = time.monotonic()
        while not self._stop_now():
            if self.config.realtime:
                target = wall_start + self.now_s
                lag = target - time.monotonic()
                if lag > 0:
                    time.sleep(lag)
            self.run_tick()
        return self.finalize()

    def finalize(self) -> SessionResult:
        record = SessionRecord(
            mode=1 if self.config.mode is fsm.Mode.MANUAL else 2,
            im_label=self.config.im_label,
            per_task_s=self._task_timers(),
            sorted_bolts=self.status.count(SORTED, "bolt", self.scenario),
            violations=self.snapshot.violation_count,
        )
        completed = self.status.all_sorted()
        result = SessionResult(
            record=record, snapshot=self.snapshot, status=self.status,
            event_log=list(self.event_log), ticks=self.tick,
            sim_duration_s=self.now_s, completed=completed,
            faulted_at_end=self.snapshot.state is fsm.FsmState.FAULT,
            previews_clean=self.previews_clean,
            violations_by_prior_state=dict(self.violations_by_prior_state),
            artifacts={},
        )
        if self.config.out_dir is not None:
            result.artifacts = write_artifacts(self, result, Path(self.config.out_dir))
        return result


def write_artifacts(session: Session, result: SessionResult, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    session_doc = {
        "config": session.config.to_json(),
        "record": result.record.to_json(),
        "final_state": result.snapshot.state.value,
        "completed": result.completed,
        "ticks": result.ticks,
        "sim_duration_s": result.sim_duration_s,
        "sorted": result.status.count(SORTED),
        "diagnostics": {
            "previews_clean": result.previews_clean,
            "violations_by_prior_state": result.violations_by_prior_state,
        },
        "task_state": {oid: result.status.state[oid] for oid in
                       sorted(result.status.state)},
    }
    session_path = out_dir / "session.json"
    session_path.write_text(json.dumps(session_doc, sort_keys=True, indent=2) + "\n")
    events_path = out_dir / "events.ndjson"
    with events_path.open("w") as fh:
        for entry in result.event_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    artifacts = {"session": str(session_path), "events": str(events_path)}
    if session.frames is not None:
        frames_path = out_dir / "frames.ndjson"
        with frames_path.open("w") as fh:
            for entry in session.frames:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        artifacts["frames"] = str(frames_path)
    return artifacts


def run_nodes(scenario: Scenario, channel_model: ChannelModel,
              config: SessionConfig, telemetry=None) -> SessionResult:
    """Wire both node loops over the impaired link and run to completion."""
    return Session(scenario, channel_model, config, telemetry=telemetry).run()


def replay_events(path) -> list:
    """Reconstruct the snapshot sequence from an event log, verifying that
    every recorded outcome matches the pure transition function."""
    snap = fsm.AutonomySnapshot()
    out = [snap]
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                event = fsm.event_from_json(entry["event"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ReplayError(f"line {line_no}: {exc}") from None
            result = fsm.transition(snap, event)
            snap = result.snapshot
            if (result.accepted != entry["accepted"]
                    or snap.state.value != entry["state"]
                    or snap.violation_count != entry["violations"]):
                raise ReplayError(
                    f"line {line_no}: replay diverged "
                    f"(state {snap.state.value!r} vs {entry['state']!r})")
            out.append(snap)
    return out
