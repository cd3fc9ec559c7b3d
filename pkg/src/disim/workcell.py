"""Scenario model: objects to dismantle, disposal region, gripper and the
scripted stand-in for the human operator.

The bundled default scene is a battery-stack-like stack at desk scale:
eight bolts, one cover, one busbar and four modules, each with a synthetic
segmentation mask, sorted into a disposal rectangle on the opposite side of
the arm base. Grasping is force-gated: attachment requires the gripper
force setpoint to meet the object's minimum, and a held object loads the
slave arm through the planar Jacobian transpose (the simulator's ground
truth for external torque).
"""

from __future__ import annotations

import io
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import ImpedanceGains, MotionLimits
from .dynamics import ArmModel, jacobian
from .perception import Calibration, Mask, ObjectDescriptor, analyze_all

KINDS = ("bolt", "busbar", "cover", "module")

# task categories keyed by kind; order of dismantling follows priority level
TASK_KEYS = {"bolt": "bolts", "busbar": "busbar", "cover": "cover", "module": "modules"}

PENDING, GRASPED, SORTED = "pending", "grasped", "sorted"


class ScenarioError(ValueError):
    """Scenario file failed validation."""


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: str
    kind: str
    mask: Mask
    pl: int
    mass: float
    grasp_radius: float
    min_grip_force: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"object {self.id!r}: unknown kind {self.kind!r}")
        if self.mass <= 0 or self.grasp_radius <= 0 or self.min_grip_force <= 0:
            raise ScenarioError(f"object {self.id!r}: mass, grasp_radius and "
                                "min_grip_force must be positive")


@dataclass(frozen=True)
class Rect:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ScenarioError("disposal rectangle is degenerate")

    def contains(self, xy) -> bool:
        return (self.x_min <= xy[0] <= self.x_max) and (self.y_min <= xy[1] <= self.y_max)

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)])


@dataclass(frozen=True, eq=False)
class Scenario:
    arm: ArmModel                      # slave
    master_arm: ArmModel               # identical by default
    objects: tuple[SceneObject, ...]
    disposal: Rect
    calibration: Calibration
    control_rate: float
    telemetry_rate: float = 30.0
    gains: ImpedanceGains | None = None
    motion_limits: MotionLimits = field(default_factory=lambda: MotionLimits(30.0, 1.0))

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioError("object ids must be unique")
        if self.control_rate <= 0 or self.telemetry_rate <= 0:
            raise ScenarioError("rates must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    def descriptors(self) -> list[ObjectDescriptor]:
        """Mask analytics for every object, in scenario order, world-mapped."""
        ds = analyze_all([o.mask for o in self.objects], calib=self.calibration)
        return ds

    def object_by_id(self, oid: str) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass(frozen=True)
class GripperState:
    force_setpoint: float = 0.0
    holding: str | None = None

    def __post_init__(self):
        if self.force_setpoint < 0:
            raise ValueError("force setpoint must be >= 0")


@dataclass(frozen=True, eq=False)
class TaskStatus:
    """Per-object lifecycle (pending -> grasped -> sorted), their current
    world positions, and state-change timestamps in seconds."""

    state: dict
    positions: dict
    theta: dict
    stamps: tuple

    @staticmethod
    def initial(scenario: Scenario, descriptors=None) -> "TaskStatus":
        ds = descriptors if descriptors is not None else scenario.descriptors()
        state = {o.id: PENDING for o in scenario.objects}
        positions = {o.id: np.asarray(d.cm_world, dtype=np.float64)
                     for o, d in zip(scenario.objects, ds)}
        theta = {o.id: d.theta for o, d in zip(scenario.objects, ds)}
        return TaskStatus(state, positions, theta, ())

    def with_event(self, oid: str, new_state: str, t: float) -> "TaskStatus":
        if self.stamps and t < self.stamps[-1][0]:
            raise ValueError("timestamps must be non-decreasing")
        state = dict(self.state)
        state[oid] = new_state
        return TaskStatus(state, dict(self.positions), dict(self.theta),
                          self.stamps + ((t, oid, new_state),))

    def moved(self, oid: str, xy) -> "TaskStatus":
        positions = dict(self.positions)
        positions[oid] = np.asarray(xy, dtype=np.float64)
        return TaskStatus(dict(self.state), positions, dict(self.theta), self.stamps)

    def count(self, state: str, kind: str | None = None,
              scenario: Scenario | None = None) -> int:
        if kind is None:
            return sum(1 for s in self.state.values() if s == state)
        assert scenario is not None
        return sum(1 for o in scenario.objects
                   if o.kind == kind and self.state[o.id] == state)

    def all_sorted(self) -> bool:
        return all(s == SORTED for s in self.state.values())


@dataclass(frozen=True, eq=False)
class GraspResult:
    gripper: GripperState
    status: TaskStatus
    grasped: bool
    diagnostic: str | None = None


@dataclass(frozen=True, eq=False)
class ReleaseResult:
    gripper: GripperState
    status: TaskStatus
    sorted: bool


def try_grasp(ee_pos, gripper: GripperState, scenario: Scenario,
              status: TaskStatus, t: float = 0.0) -> GraspResult:
    """Attach the nearest pending object in range, if the force setpoint
    meets its minimum. A failed grasp is a normal outcome, not an error."""
    if gripper.holding is not None:
        raise ValueError("gripper already holding an object")
    ee = np.asarray(ee_pos, dtype=np.float64)
    candidates = []
    for obj in scenario.objects:
        if status.state[obj.id] != PENDING:
            continue
        dist = float(np.linalg.norm(ee - status.positions[obj.id]))
        if dist <= obj.grasp_radius:
            candidates.append((dist, obj.id, obj))
    if not candidates:
        return GraspResult(gripper, status, False, "no pending object in range")
    candidates.sort(key=lambda c: (c[0], c[1]))  # nearest, ties by lower id
    _, oid, obj = candidates[0]
    if gripper.force_setpoint < obj.min_grip_force:
        return GraspResult(gripper, status, False,
                           f"insufficient force for {oid}: "
                           f"{gripper.force_setpoint:.1f} < {obj.min_grip_force:.1f} N")
    return GraspResult(GripperState(gripper.force_setpoint, oid),
                       status.with_event(oid, GRASPED, t), True)


def release(ee_pos, gripper: GripperState, scenario: Scenario,
            status: TaskStatus, t: float = 0.0) -> ReleaseResult:
    """Drop the held object at the end effector: sorted if inside the
    disposal region, otherwise pending at the new location."""
    if gripper.holding is None:
        raise ValueError("gripper is not holding an object")
    oid = gripper.holding
    ee = np.asarray(ee_pos, dtype=np.float64)
    status = status.moved(oid, ee)
    inside = scenario.disposal.contains(ee)
    status = status.with_event(oid, SORTED if inside else PENDING, t)
    return ReleaseResult(GripperState(gripper.force_setpoint, None), status, inside)


def contact_torque(model: ArmModel, q, held: SceneObject | None) -> np.ndarray:
    """Held-object weight mapped into joint torques through J^T; zero when
    the gripper is empty."""
    if held is None:
        return np.zeros(model.n)
    force = np.array([0.0, -held.mass * model.gravity])
    return jacobian(model, q).T @ force


# ---------------------------------------------------------------------------
# scripted operator


@dataclass(frozen=True)
class OperatorPolicy:
    """Headless human stand-in: proportional drive toward a joint target
    with seeded Gaussian tremor, clamped to the speed limit.

    The tremor is a stationary Gaussian process; when the caller supplies a
    control period, successive draws are correlated over noise_corr_s to
    mimic human drift rather than per-tick white noise."""

    gain: float = 3.0
    noise_std: float = 0.0
    seed: int = 0
    noise_corr_s: float = 0.7

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.noise_corr_s <= 0:
            raise ValueError("noise_corr_s must be positive")


class ScriptedOperator:
    def __init__(self, policy: OperatorPolicy, n: int, dt: float | None = None):
        self.policy = policy
        self._rng = np.random.Generator(np.random.PCG64(policy.seed))
        self._n = n
        self._rho = float(np.exp(-dt / policy.noise_corr_s)) if dt else 0.0
        self._xi = np.zeros(n)

    def command(self, q_l, q_target, qd_max, speed_scale: float,
                care: float = 1.0) -> np.ndarray:
        """Velocity command toward q_target; `care` in [0,1] scales the
        tremor down for fine positioning."""
        q_l = np.asarray(q_l, dtype=np.float64)
        q_target = np.asarray(q_target, dtype=np.float64)
        cmd = self.policy.gain * (q_target - q_l)
        if self.policy.noise_std > 0.0:
            eta = self._rng.standard_normal(self._n)
            self._xi = self._rho * self._xi + np.sqrt(1.0 - self._rho**2) * eta
            cmd = cmd + care * self.policy.noise_std * self._xi
        cap = np.asarray(qd_max) * speed_scale
        return np.clip(cmd, -cap, cap)


def scripted_operator(policy: OperatorPolicy, observation: dict) -> np.ndarray:
    """Single-shot functional form of the scripted operator."""
    op = ScriptedOperator(policy, len(observation["q_l"]))
    return op.command(observation["q_l"], observation["q_target"],
                      observation["qd_max"], observation.get("speed_scale", 1.0))


# ---------------------------------------------------------------------------
# default scenario


def _block_mask(height: int, width: int, center_rc, shape, pl: int) -> Mask:
    g = np.zeros(shape, dtype=np.uint8)
    r0 = center_rc[0] - height // 2
    c0 = center_rc[1] - width // 2
    g[r0:r0 + height, c0:c0 + width] = 1
    return Mask(g, pl)


def default_scenario(control_rate: float = 250.0) -> Scenario:
    """Bundled desk-scale scene: 8 bolts, a cover, a busbar, 4 modules.

    Masks are synthetic blocks in a 160x200 image; the affine calibration
    maps pixels to world coordinates inside the slave arm's reach, with the
    image y axis flipped into the world frame.
    """
    arm = ArmModel.with_default_limits([0.35, 0.30, 0.25], [2.0, 1.2, 0.8], gravity=9.81)
    # world = 0.005 m/px, x offset -0.62 m, y flipped: y = 0.62 - 0.005 * py
    calib = Calibration(np.array([[0.005, 0.0, -0.62], [0.0, -0.005, 0.62]]))
    shape = (160, 300)

    def px(world_x, world_y):
        return int(round((0.62 - world_y) / 0.005)), int(round((world_x + 0.62) / 0.005))

    objects = []
    # three bolts sit in the close-in fold region where grasp configurations
    # run the elbow near its travel bound; the rest lie in open workspace
    bolt_xy = [(-0.25, 0.07), (-0.20, 0.12), (-0.15, 0.07),
               (0.34, 0.24), (0.44, 0.24), (0.54, 0.24),
               (0.44, 0.40), (0.34, 0.40)]
    for i, (x, y) in enumerate(bolt_xy):
        objects.append(SceneObject(
            id=f"bolt{i}", kind="bolt", mask=_block_mask(3, 3, px(x, y), shape, pl=0),
            pl=0, mass=0.05, grasp_radius=0.04, min_grip_force=5.0))
    objects.append(SceneObject(
        id="cover", kind="cover", mask=_block_mask(24, 40, px(0.48, 0.12), shape, pl=1),
        pl=1, mass=2.0, grasp_radius=0.08, min_grip_force=15.0))
    objects.append(SceneObject(
        id="busbar", kind="busbar", mask=_block_mask(4, 30, px(0.30, 0.52), shape, pl=2),
        pl=2, mass=0.5, grasp_radius=0.06, min_grip_force=5.0))
    module_xy = [(0.62, 0.14), (0.68, 0.28), (0.58, 0.06), (0.70, 0.10)]
    for i, (x, y) in enumerate(module_xy):
        objects.append(SceneObject(
            id=f"module{i}", kind="module",
            mask=_block_mask(12, 16, px(x, y), shape, pl=3),
            pl=3, mass=1.0, grasp_radius=0.06, min_grip_force=10.0))

    return Scenario(
        arm=arm, master_arm=arm, objects=tuple(objects),
        disposal=Rect(-0.52, 0.10, -0.24, 0.38),
        calibration=calib, control_rate=control_rate,
        motion_limits=MotionLimits(max_grip_force=30.0, speed_scale=1.0),
    )


# ---------------------------------------------------------------------------
# scenario file loading


def _arm_from_table(tab: dict, where: str) -> ArmModel:
    try:
        return ArmModel(
            link_lengths=np.asarray(tab["link_lengths"], dtype=np.float64),
            link_masses=np.asarray(tab["link_masses"], dtype=np.float64),
            gravity=float(tab.get("gravity", 9.81)),
            q_min=np.asarray(tab["q_min"], dtype=np.float64),
            q_max=np.asarray(tab["q_max"], dtype=np.float64),
            qd_max=np.asarray(tab["qd_max"], dtype=np.float64),
            tau_max=np.asarray(tab["tau_max"], dtype=np.float64),
        )
    except KeyError as exc:
        raise ScenarioError(f"[{where}] missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ScenarioError(f"[{where}] {exc}") from None


_OBJECT_KEYS = {"id", "kind", "mask", "pl", "pL", "mass", "grasp_radius", "min_grip_force"}


def load_scenario(path) -> Scenario:
    """Parse a scenario TOML file; mask files are resolved relative to it."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    known = {"arm", "master_arm", "object", "disposal", "calibration", "rates",
             "gains", "limits"}
    for key in data:
        if key not in known:
            raise ScenarioError(f"{path}: unknown section or key {key!r}")

    if "arm" not in data:
        raise ScenarioError(f"{path}: missing [arm] section")
    arm = _arm_from_table(data["arm"], "arm")
    master = _arm_from_table(data["master_arm"], "master_arm") if "master_arm" in data else arm

    try:
        disp = data["disposal"]
        disposal = Rect(float(disp["x_min"]), float(disp["y_min"]),
                        float(disp["x_max"]), float(disp["y_max"]))
    except KeyError as exc:
        raise ScenarioError(f"[disposal] missing key {exc.args[0]!r}") from None

    if "calibration" not in data or "affine" not in data["calibration"]:
        raise ScenarioError("missing [calibration] affine")
    calibration = Calibration(np.asarray(data["calibration"]["affine"], dtype=np.float64))

    rates = data.get("rates", {})
    control_rate = float(rates.get("control_rate", 1000.0))
    telemetry_rate = float(rates.get("telemetry_rate", 30.0))

    from .perception import parse_grid  # local to avoid cycle at import time

    objects = []
    for i, tab in enumerate(data.get("object", [])):
        extra = set(tab) - _OBJECT_KEYS
        if extra:
            raise ScenarioError(f"[[object]] #{i}: unknown key {sorted(extra)[0]!r}")
        try:
            mask_file = path.parent / tab["mask"]
            pl = int(tab["pl"] if "pl" in tab else tab["pL"])
            objects.append(SceneObject(
                id=str(tab["id"]), kind=str(tab["kind"]),
                mask=Mask(parse_grid(mask_file.read_text(), mask_file), pl),
                pl=pl, mass=float(tab["mass"]),
                grasp_radius=float(tab["grasp_radius"]),
                min_grip_force=float(tab["min_grip_force"]),
            ))
        except KeyError as exc:
            raise ScenarioError(f"[[object]] #{i}: missing key {exc.args[0]!r}") from None
        except FileNotFoundError as exc:
            raise ScenarioError(f"[[object]] #{i}: mask file not found: {exc}") from None

    gains = None
    if "gains" in data:
        g = data["gains"]
        try:
            gains = ImpedanceGains(np.asarray(g["kp"], dtype=np.float64),
                                   np.asarray(g["kd"], dtype=np.float64),
                                   np.asarray(g["kdl"], dtype=np.float64))
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"[gains] {exc}") from None

    limits = MotionLimits(30.0, 1.0)
    if "limits" in data:
        lim = data["limits"]
        limits = MotionLimits(float(lim.get("max_grip_force", 30.0)),
                              float(lim.get("speed_scale", 1.0)))

    return Scenario(arm=arm, master_arm=master, objects=tuple(objects),
                    disposal=disposal, calibration=calibration,
                    control_rate=control_rate, telemetry_rate=telemetry_rate,
                    gains=gains, motion_limits=limits)
