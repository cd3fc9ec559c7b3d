"""Planar serial-chain rigid-body dynamics.

The arm is an n-joint revolute chain moving in a vertical plane with a point
mass at the tip of each link. For that model the mass matrix, the
Coriolis/centrifugal torque vector and the gravity torque vector all have
closed forms built from suffix sums over the links, so every term here is
exact (no model identification, no URDF).

With cumulative angles Q_a = q_1 + ... + q_a and suffix masses
mu_a = sum_{k >= a} m_k:

    M_ij   = sum_{a>=i, b>=j} l_a l_b mu_max(a,b) cos(Q_a - Q_b)
    V(q)   = g * sum_a l_a mu_a sin(Q_a)
    grav_i = dV/dq_i
    cor_i  = sum_{j,k} (dM_ij/dq_k - 0.5 dM_jk/dq_i) qd_j qd_k

Integration is fixed-step RK4 on (q, qd) with the commanded and external
torques held constant over the step, which keeps every trajectory
deterministic and bit-reproducible for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dep, fallback for debugging
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _vec(x, name: str, n: int | None = None, copy: bool = False) -> np.ndarray:
    a = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {a.shape}")
    if n is not None and a.size != n:
        raise ValueError(f"{name} has length {a.size}, expected {n}")
    return a


@dataclass(frozen=True, eq=False)
class JointState:
    """Positions, velocities and external torques of one arm at one instant."""

    q: np.ndarray
    qd: np.ndarray
    tau_ext: np.ndarray

    def __post_init__(self):
        q = _vec(self.q, "q", copy=True)
        if q.size < 1:
            raise ValueError("JointState needs at least one joint")
        qd = _vec(self.qd, "qd", q.size, copy=True)
        tau_ext = _vec(self.tau_ext, "tau_ext", q.size, copy=True)
        for name, a in (("q", q), ("qd", qd), ("tau_ext", tau_ext)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite entries in {name}")
        for a in (q, qd, tau_ext):
            a.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)
        object.__setattr__(self, "tau_ext", tau_ext)

    @property
    def n(self) -> int:
        return self.q.size

    @staticmethod
    def rest(q) -> "JointState":
        q = np.asarray(q, dtype=np.float64)
        return JointState(q, np.zeros_like(q), np.zeros_like(q))


@dataclass(frozen=True, eq=False)
class ArmModel:
    """Kinematic/dynamic parameters and limits of one planar arm.

    gravity is the in-plane gravitational acceleration (0 is allowed and
    turns the plane horizontal).
    """

    link_lengths: np.ndarray
    link_masses: np.ndarray
    gravity: float
    q_min: np.ndarray
    q_max: np.ndarray
    qd_max: np.ndarray
    tau_max: np.ndarray

    def __post_init__(self):
        l = _vec(self.link_lengths, "link_lengths", copy=True)
        n = l.size
        if n < 1:
            raise ValueError("ArmModel needs at least one link")
        m = _vec(self.link_masses, "link_masses", n, copy=True)
        q_min = _vec(self.q_min, "q_min", n, copy=True)
        q_max = _vec(self.q_max, "q_max", n, copy=True)
        qd_max = _vec(self.qd_max, "qd_max", n, copy=True)
        tau_max = _vec(self.tau_max, "tau_max", n, copy=True)
        if np.any(l <= 0):
            raise ValueError("link lengths must be positive")
        if np.any(m <= 0):
            raise ValueError("link masses must be positive")
        if np.any(q_min >= q_max):
            raise ValueError("q_min must be strictly below q_max")
        if np.any(qd_max <= 0) or np.any(tau_max <= 0):
            raise ValueError("velocity and torque limits must be positive")
        for a in (l, m, q_min, q_max, qd_max, tau_max):
            a.flags.writeable = False
        object.__setattr__(self, "link_lengths", l)
        object.__setattr__(self, "link_masses", m)
        object.__setattr__(self, "gravity", float(self.gravity))
        object.__setattr__(self, "q_min", q_min)
        object.__setattr__(self, "q_max", q_max)
        object.__setattr__(self, "qd_max", qd_max)
        object.__setattr__(self, "tau_max", tau_max)
        # suffix mass sums mu_a = sum_{k>=a} m_k, shared by every kernel call
        mu = np.cumsum(m[::-1])[::-1].copy()
        mu.flags.writeable = False
        object.__setattr__(self, "_mu", mu)

    @property
    def n(self) -> int:
        return self.link_lengths.size

    @property
    def q_home(self) -> np.ndarray:
        """Mid-range configuration used as the gain-synthesis linearization point."""
        return 0.5 * (self.q_min + self.q_max)

    @property
    def reach(self) -> float:
        return float(np.sum(self.link_lengths))

    @staticmethod
    def with_default_limits(link_lengths, link_masses, gravity: float = 9.81) -> "ArmModel":
        """Franka-like default limits: q in [-2.8, 2.8] rad, qd_max 2 rad/s, tau_max 50 Nm."""
        l = _vec(link_lengths, "link_lengths")
        n = l.size
        return ArmModel(
            link_lengths=l,
            link_masses=link_masses,
            gravity=gravity,
            q_min=np.full(n, -2.8),
            q_max=np.full(n, 2.8),
            qd_max=np.full(n, 2.0),
            tau_max=np.full(n, 50.0),
        )


@dataclass(frozen=True)
class LimitReport:
    """Joints outside their position or velocity bounds. Bounds are closed:
    sitting exactly on a limit is legal."""

    position_violations: tuple[tuple[int, str], ...] = ()
    velocity_violations: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.position_violations and not self.velocity_violations

    def to_json(self) -> dict:
        return {
            "position": [[j, side] for j, side in self.position_violations],
            "velocity": list(self.velocity_violations),
        }

    @staticmethod
    def from_json(d: dict) -> "LimitReport":
        return LimitReport(
            tuple((int(j), str(side)) for j, side in d.get("position", [])),
            tuple(int(j) for j in d.get("velocity", [])),
        )


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _terms(l, mu, grav, q, qd):
    """Mass matrix, Coriolis torque vector and gravity torque vector."""
    n = l.size
    Q = np.cumsum(q)
    cQ = np.cos(Q)
    sQ = np.sin(Q)

    # W_ab = l_a l_b mu_max(a,b) cos(Qa-Qb); S_ab its sin twin
    W = np.empty((n, n))
    S = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            mab = mu[a] if a >= b else mu[b]
            lab = l[a] * l[b] * mab
            W[a, b] = lab * (cQ[a] * cQ[b] + sQ[a] * sQ[b])
            S[a, b] = lab * (sQ[a] * cQ[b] - cQ[a] * sQ[b])

    # 2-D suffix sums: M_ij = sum_{a>=i,b>=j} W_ab, T likewise over S
    M = np.empty((n, n))
    T = np.empty((n, n))
    for i in range(n - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            w = W[i, j]
            s = S[i, j]
            if i + 1 < n:
                w += M[i + 1, j]
                s += T[i + 1, j]
            if j + 1 < n:
                w += M[i, j + 1]
                s += T[i, j + 1]
            if i + 1 < n and j + 1 < n:
                w -= M[i + 1, j + 1]
                s -= T[i + 1, j + 1]
            M[i, j] = w
            T[i, j] = s

    # dM_ij/dq_m = -(T[max(i,m),j] - T[i,max(j,m)])
    cor = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            for k in range(n):
                d_ij_k = -(T[max(i, k), j] - T[i, max(j, k)])
                d_jk_i = -(T[max(j, i), k] - T[j, max(k, i)])
                acc += (d_ij_k - 0.5 * d_jk_i) * qd[j] * qd[k]
        cor[i] = acc

    gvec = np.zeros(n)
    if grav != 0.0:
        tail = 0.0
        for a in range(n - 1, -1, -1):
            tail += l[a] * mu[a] * cQ[a]
            gvec[a] = grav * tail

    return M, cor, gvec


@njit(cache=True)
def _accel(l, mu, grav, q, qd, tau):
    M, cor, gvec = _terms(l, mu, grav, q, qd)
    return np.linalg.solve(M, tau - cor - gvec)


@njit(cache=True)
def _rk4_step(l, mu, grav, q, qd, tau, dt):
    k1q = qd
    k1v = _accel(l, mu, grav, q, qd, tau)
    k2q = qd + 0.5 * dt * k1v
    k2v = _accel(l, mu, grav, q + 0.5 * dt * k1q, k2q, tau)
    k3q = qd + 0.5 * dt * k2v
    k3v = _accel(l, mu, grav, q + 0.5 * dt * k2q, k3q, tau)
    k4q = qd + dt * k3v
    k4v = _accel(l, mu, grav, q + dt * k3q, k4q, tau)
    q_next = q + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd_next = qd + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return q_next, qd_next


# ---------------------------------------------------------------------------
# public operations


def mass_matrix(model: ArmModel, q) -> np.ndarray:
    """Symmetric positive definite joint-space inertia matrix M(q)."""
    q = _vec(q, "q", model.n)
    M, _, _ = _terms(model.link_lengths, model._mu, model.gravity, q, np.zeros(model.n))
    return M


def coriolis_torque(model: ArmModel, q, qd) -> np.ndarray:
    """Coriolis/centrifugal torque vector such that M(q) qdd = tau - cor - grav."""
    q = _vec(q, "q", model.n)
    qd = _vec(qd, "qd", model.n)
    _, cor, _ = _terms(model.link_lengths, model._mu, model.gravity, q, qd)
    return cor


def gravity_torque(model: ArmModel, q) -> np.ndarray:
    """Gradient of the chain's potential energy with respect to q."""
    q = _vec(q, "q", model.n)
    _, _, gvec = _terms(model.link_lengths, model._mu, model.gravity, q, np.zeros(model.n))
    return gvec


def bias_torque(model: ArmModel, q, qd) -> np.ndarray:
    """Coriolis plus gravity torque in a single kernel evaluation."""
    q = _vec(q, "q", model.n)
    qd = _vec(qd, "qd", model.n)
    _, cor, gvec = _terms(model.link_lengths, model._mu, model.gravity, q, qd)
    return cor + gvec


def acceleration(model: ArmModel, state: JointState, tau_cmd) -> np.ndarray:
    """Instantaneous joint acceleration under commanded plus external torque."""
    tau_cmd = _vec(tau_cmd, "tau_cmd", model.n)
    if state.n != model.n:
        raise ValueError("state/model dimension mismatch")
    return _accel(model.link_lengths, model._mu, model.gravity,
                  state.q, state.qd, tau_cmd + state.tau_ext)


def step(model: ArmModel, state: JointState, tau_cmd, dt: float) -> JointState:
    """One RK4 step of M qdd = tau_cmd + tau_ext - cor - grav.

    tau_cmd and tau_ext are held constant across the step. tau_ext is carried
    through unchanged; the caller refreshes it each tick.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau_cmd = _vec(tau_cmd, "tau_cmd", model.n)
    if not np.all(np.isfinite(tau_cmd)):
        raise ValueError("non-finite torque command")
    if state.n != model.n:
        raise ValueError("state/model dimension mismatch")
    q_next, qd_next = _rk4_step(model.link_lengths, model._mu, model.gravity,
                                state.q, state.qd, tau_cmd + state.tau_ext, float(dt))
    return JointState(q_next, qd_next, state.tau_ext)


def check_limits(model: ArmModel, state: JointState) -> LimitReport:
    """Report joints with q outside [q_min, q_max] or |qd| above qd_max."""
    if state.n != model.n:
        raise ValueError("state/model dimension mismatch")
    pos = []
    for j in range(model.n):
        if state.q[j] < model.q_min[j]:
            pos.append((j, "lower"))
        elif state.q[j] > model.q_max[j]:
            pos.append((j, "upper"))
    vel = tuple(int(j) for j in np.nonzero(np.abs(state.qd) > model.qd_max)[0])
    return LimitReport(tuple(pos), vel)


def clamp_to_limits(model: ArmModel, q) -> np.ndarray:
    q = _vec(q, "q", model.n)
    return np.clip(q, model.q_min, model.q_max)


# ---------------------------------------------------------------------------
# planar kinematics helpers (shared by planning, workcell and telemetry)


def joint_points(model: ArmModel, q) -> np.ndarray:
    """(n+1, 2) world positions of the base and every link tip."""
    q = _vec(q, "q", model.n)
    Q = np.cumsum(q)
    xs = np.concatenate(([0.0], np.cumsum(model.link_lengths * np.cos(Q))))
    ys = np.concatenate(([0.0], np.cumsum(model.link_lengths * np.sin(Q))))
    return np.column_stack((xs, ys))


def ee_position(model: ArmModel, q) -> np.ndarray:
    return joint_points(model, q)[-1]


def jacobian(model: ArmModel, q) -> np.ndarray:
    """2 x n positional Jacobian of the end effector."""
    q = _vec(q, "q", model.n)
    Q = np.cumsum(q)
    lx = model.link_lengths * np.cos(Q)
    ly = model.link_lengths * np.sin(Q)
    # column i: z-hat cross (p_ee - p_joint_i) = sums of link vectors from i on
    J = np.empty((2, model.n))
    J[0] = -np.cumsum(ly[::-1])[::-1]
    J[1] = np.cumsum(lx[::-1])[::-1]
    return J


def kinetic_energy(model: ArmModel, q, qd) -> float:
    qd = _vec(qd, "qd", model.n)
    return float(0.5 * qd @ mass_matrix(model, q) @ qd)


def potential_energy(model: ArmModel, q) -> float:
    pts = joint_points(model, q)[1:]
    return float(model.gravity * np.sum(model.link_masses * pts[:, 1]))


def total_energy(model: ArmModel, state: JointState) -> float:
    return kinetic_energy(model, state.q, state.qd) + potential_energy(model, state.q)
