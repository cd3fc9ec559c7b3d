"""Bilateral joint impedance control.

The follower (slave) arm renders a joint-space spring-damper around the
leader's configuration with full Coriolis and gravity compensation:

    tau_f = -Kp e_q - Kd ed_q + cor(q_f, qd_f) + grav(q_f)

with e_q = q_f - q_l and ed_q = qd_f - qd_l, so the closed loop reads
M(q_f) qdd_f + Kd ed_q + Kp e_q = tau_ext whenever the leader acceleration
is excluded. The leader (master) arm feels the follower's external torque
one-to-one plus a damping term that tames the bilateral coupling:

    tau_l = tau_ext - Kdl qd_l
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ArmModel, JointState, _vec, bias_torque, mass_matrix


@dataclass(frozen=True, eq=False)
class ImpedanceGains:
    """Per-joint stiffness, damping and master-side damping."""

    kp: np.ndarray
    kd: np.ndarray
    kdl: np.ndarray

    def __post_init__(self):
        kp = _vec(self.kp, "kp", copy=True)
        kd = _vec(self.kd, "kd", kp.size, copy=True)
        kdl = _vec(self.kdl, "kdl", kp.size, copy=True)
        if np.any(kp <= 0) or np.any(kd <= 0) or np.any(kdl <= 0):
            raise ValueError("gains must be strictly positive")
        for a in (kp, kd, kdl):
            a.flags.writeable = False
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)
        object.__setattr__(self, "kdl", kdl)

    @property
    def n(self) -> int:
        return self.kp.size


@dataclass(frozen=True)
class MotionLimits:
    """Operator-adjustable caps: gripping force and speed scaling."""

    max_grip_force: float
    speed_scale: float = 1.0

    def __post_init__(self):
        if not self.max_grip_force > 0:
            raise ValueError("max_grip_force must be positive")
        if not (0.0 < self.speed_scale <= 1.0):
            raise ValueError("speed_scale must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class ControlFrame:
    """One evaluation of the bilateral law: errors plus both torque outputs."""

    e_q: np.ndarray
    ed_q: np.ndarray
    tau_f: np.ndarray
    tau_l: np.ndarray


def slave_torque(gains: ImpedanceGains, model: ArmModel,
                 follower: JointState, leader: JointState) -> ControlFrame:
    """Impedance torque driving the follower onto the leader's joints."""
    if follower.n != leader.n or follower.n != model.n or gains.n != model.n:
        raise ValueError("dimension mismatch between gains, model and states")
    e_q = follower.q - leader.q
    ed_q = follower.qd - leader.qd
    tau_f = (-gains.kp * e_q - gains.kd * ed_q
             + bias_torque(model, follower.q, follower.qd))
    return ControlFrame(e_q, ed_q, tau_f, np.zeros_like(tau_f))


def master_torque(gains: ImpedanceGains, tau_ext_follower, leader: JointState) -> ControlFrame:
    """One-to-one force feedback on the leader, damped by kdl."""
    tau_ext = _vec(tau_ext_follower, "tau_ext_follower", leader.n)
    if gains.n != leader.n:
        raise ValueError("dimension mismatch between gains and leader state")
    tau_l = tau_ext - gains.kdl * leader.qd
    z = np.zeros_like(tau_l)
    return ControlFrame(z, z, z, tau_l)


def default_gains(model: ArmModel, stiffness_fraction: float = 0.5,
                  damping_ratio: float = 1.0) -> ImpedanceGains:
    """Gains scaled to each joint's torque capability.

    Stiffness renders stiffness_fraction of tau_max at a 0.5 rad error;
    damping is set for the requested ratio against the home-configuration
    inertia diagonal; master damping is a tenth of the follower's.
    """
    if not (0.0 < stiffness_fraction <= 1.0):
        raise ValueError("stiffness_fraction must lie in (0, 1]")
    if not damping_ratio > 0:
        raise ValueError("damping_ratio must be positive")
    e_ref = 0.5
    kp = stiffness_fraction * model.tau_max / e_ref
    m_diag = np.diag(mass_matrix(model, model.q_home))
    kd = 2.0 * damping_ratio * np.sqrt(kp * m_diag)
    return ImpedanceGains(kp, kd, 0.1 * kd)


def clamp_torque(model: ArmModel, tau) -> np.ndarray:
    """Elementwise saturation to the actuator limits. Idempotent."""
    tau = _vec(tau, "tau", model.n)
    return np.clip(tau, -model.tau_max, model.tau_max)
