"""Toy environments, scripted data collection, augmentation schemes and guidance costs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ndauto as nd
from .errors import ConfigError, ContractError, NumericError
from .ndauto import Array

DEFAULT_HORIZON = 64
DEFAULT_MARGIN = 0.03


class Scheme(str, Enum):
    NONE = "none"
    ACTION_NOISE = "action_noise"
    SAME_NOISE = "same_noise"
    RANDOM_POS = "random_pos"
    RANDOM_FORCES = "random_forces"


@dataclass(frozen=True)
class AugmentScheme:
    """Dataset augmentation applied during scripted rollouts.

    ``noise_std`` is in units of the control limit (``std = noise_std * a_max``)
    and is used by ACTION_NOISE and SAME_NOISE. ``pos_range`` is the half-width of
    the uniform start/goal perturbation for RANDOM_POS. RANDOM_FORCES starts a
    force episode with probability ``force_prob`` per step; each lasts
    ``force_steps`` steps with magnitude ``force_std * a_max`` per axis.
    """

    kind: Scheme = Scheme.NONE
    noise_std: float = 0.3
    pos_range: float = 0.15
    force_std: float = 0.4
    force_prob: float = 0.05
    force_steps: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", Scheme(self.kind))
        for name in ("noise_std", "pos_range", "force_std", "force_prob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.force_steps < 1:
            raise ConfigError(f"force_steps must be >= 1, got {self.force_steps}")


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"obstacle radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


# --------------------------------------------------------------------------- #
# environments
# --------------------------------------------------------------------------- #


class ParticleEnv:
    """Planar double integrator; state ``(px, py, vx, vy)``, control = acceleration."""

    name = "particle"
    state_dim = 4
    control_dim = 2
    position_dims = 2

    def __init__(self, dt: float = 0.05, a_max: float = 4.0, kp: float = 6.0, kd: float = 5.0, bound: float = 10.0):
        self.dt = dt
        self.a_max = a_max
        self.kp = kp
        self.kd = kd
        self.bound = bound

    def params(self) -> dict:
        return {"dt": self.dt, "a_max": self.a_max, "kp": self.kp, "kd": self.kd, "bound": self.bound}

    def rest_state(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64)
        return np.concatenate([pos, np.zeros_like(pos)], axis=-1)

    def clip(self, a: np.ndarray, limit: float) -> np.ndarray:
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return a * np.minimum(1.0, limit / np.maximum(n, 1e-12))

    def step(self, state: np.ndarray, accel: np.ndarray) -> np.ndarray:
        """Symplectic Euler: velocity first, then position with the new velocity."""
        v = state[..., 2:] + self.dt * accel
        p = state[..., :2] + self.dt * v
        return np.concatenate([p, v], axis=-1)

    def begin(self, start: np.ndarray, goal: np.ndarray, horizon: int) -> None:
        self._goal = goal[..., :2]

    def control(self, state: np.ndarray, k: int) -> np.ndarray:
        a = self.kp * (self._goal - state[..., :2]) - self.kd * state[..., 2:]
        return self.clip(a, self.a_max)

    def apply(self, state: np.ndarray, control: np.ndarray, force: np.ndarray) -> np.ndarray:
        return self.step(state, self.clip(control, self.a_max) + force)

    def points(self, states: Array) -> Array:
        """Collision-check points ``[..., 1, 2]`` (the particle itself)."""
        pos = nd.index(states, (Ellipsis, slice(0, 2)))
        return nd.reshape(pos, (*pos.shape[:-1], 1, 2))

    def points_np(self, states: np.ndarray) -> np.ndarray:
        return states[..., None, :2]

    def track(self, plan: np.ndarray, start: np.ndarray, kp: float = 30.0, kd: float = 10.0) -> np.ndarray:
        """Execute a planned state sequence with a feed-forward + PD tracker.

        ``plan`` is ``[..., T, 4]``; the feed-forward acceleration is the
        plan's own velocity difference. Returns executed states of the same shape.
        """
        plan = np.asarray(plan, dtype=np.float64)
        out = np.empty_like(plan)
        s = np.broadcast_to(np.asarray(start, dtype=np.float64), plan[..., 0, :].shape).copy()
        out[..., 0, :] = s
        for k in range(plan.shape[-2] - 1):
            ff = (plan[..., k + 1, 2:] - plan[..., k, 2:]) / self.dt
            a = ff + kp * (plan[..., k + 1, :2] - s[..., :2]) + kd * (plan[..., k + 1, 2:] - s[..., 2:])
            s = self.step(s, self.clip(a, self.a_max))
            out[..., k + 1, :] = s
        return out


class ArmEnv:
    """Planar three-link arm with point masses at the link tips.

    State is ``(q1, q2, q3, dq1, dq2, dq3)``. Data collection uses a
    computed-torque controller tracking a minimum-jerk joint reference.
    """

    name = "arm"
    state_dim = 6
    control_dim = 3
    position_dims = 3

    def __init__(
        self,
        dt: float = 0.05,
        link_lengths=(0.5, 0.4, 0.3),
        masses=(1.0, 0.8, 0.5),
        joint_inertia: float = 0.05,
        tau_max: float = 20.0,
        kp: float = 64.0,
        kd: float = 16.0,
        samples_per_link: int = 3,
        bound: float = 50.0,
    ):
        self.dt = dt
        self.link_lengths = tuple(float(x) for x in link_lengths)
        self.masses = tuple(float(m) for m in masses)
        self.joint_inertia = joint_inertia
        self.tau_max = tau_max
        self.a_max = tau_max
        self.kp = kp
        self.kd = kd
        self.samples_per_link = samples_per_link
        self.bound = bound

    def params(self) -> dict:
        return {
            "dt": self.dt,
            "link_lengths": list(self.link_lengths),
            "masses": list(self.masses),
            "joint_inertia": self.joint_inertia,
            "tau_max": self.tau_max,
            "kp": self.kp,
            "kd": self.kd,
            "samples_per_link": self.samples_per_link,
            "bound": self.bound,
        }

    def rest_state(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return np.concatenate([q, np.zeros_like(q)], axis=-1)

    # dynamics ---------------------------------------------------------------

    def _jacobians(self, q: np.ndarray):
        """Tip Jacobians ``[..., 3 links, 2, 3 joints]`` and the ``J_dot q_dot`` helper angles."""
        phi = np.cumsum(q, axis=-1)
        lens = np.asarray(self.link_lengths)
        c = np.cos(phi) * lens
        s = np.sin(phi) * lens
        jac = np.zeros((*q.shape[:-1], 3, 2, 3))
        for i in range(3):  # link tip i
            for j in range(i + 1):  # joint j moves links j..i
                jac[..., i, 0, j] = -s[..., j : i + 1].sum(axis=-1)
                jac[..., i, 1, j] = c[..., j : i + 1].sum(axis=-1)
        return jac, phi, c, s

    def dynamics_terms(self, q: np.ndarray, dq: np.ndarray):
        """Mass matrix ``M(q)`` and velocity-product torques ``h(q, dq)``."""
        jac, phi, c, s = self._jacobians(q)
        dphi = np.cumsum(dq, axis=-1)
        m = np.asarray(self.masses)
        mass = np.einsum("...iaj,...iak,i->...jk", jac, jac, m) + self.joint_inertia * np.eye(3)
        # J_dot dq for each tip: -sum_{l<=i} l_l dphi_l^2 [cos, sin]
        cen = np.stack([-(c * dphi**2), -(s * dphi**2)], axis=-1)  # [..., 3, 2]
        acc_bias = np.cumsum(cen, axis=-2)
        h = np.einsum("...iaj,...ia,i->...j", jac, acc_bias, m)
        return mass, h

    def step(self, state: np.ndarray, tau: np.ndarray) -> np.ndarray:
        q, dq = state[..., :3], state[..., 3:]
        mass, h = self.dynamics_terms(q, dq)
        ddq = np.linalg.solve(mass, (tau - h)[..., None])[..., 0]
        dq = dq + self.dt * ddq
        q = q + self.dt * dq
        over = np.abs(q) > math.pi
        q = np.clip(q, -math.pi, math.pi)
        dq = np.where(over, 0.0, dq)
        return np.concatenate([q, dq], axis=-1)

    def begin(self, start: np.ndarray, goal: np.ndarray, horizon: int) -> None:
        self._q0 = start[..., :3]
        self._qg = goal[..., :3]
        self._duration = 0.85 * (horizon - 1) * self.dt

    def _reference(self, k: int):
        tt = min(k * self.dt / self._duration, 1.0)
        s = 10 * tt**3 - 15 * tt**4 + 6 * tt**5
        ds = (30 * tt**2 - 60 * tt**3 + 30 * tt**4) / self._duration if tt < 1 else 0.0
        dds = (60 * tt - 180 * tt**2 + 120 * tt**3) / self._duration**2 if tt < 1 else 0.0
        delta = self._qg - self._q0
        return self._q0 + s * delta, ds * delta, dds * delta

    def control(self, state: np.ndarray, k: int) -> np.ndarray:
        q, dq = state[..., :3], state[..., 3:]
        qr, dqr, ddqr = self._reference(k)
        mass, h = self.dynamics_terms(q, dq)
        acc = ddqr + self.kp * (qr - q) + self.kd * (dqr - dq)
        tau = np.einsum("...jk,...k->...j", mass, acc) + h
        return np.clip(tau, -self.tau_max, self.tau_max)

    def apply(self, state: np.ndarray, control: np.ndarray, force: np.ndarray) -> np.ndarray:
        tau = np.clip(control, -self.tau_max, self.tau_max)
        if np.any(force):
            jac, *_ = self._jacobians(state[..., :3])
            tau = tau + np.einsum("...aj,...a->...j", jac[..., 2, :, :], force)
        return self.step(state, tau)

    # kinematics -------------------------------------------------------------

    def fk_points(self, q: Array) -> Array:
        return fk_planar(q, self.link_lengths, self.samples_per_link)

    def points(self, states: Array) -> Array:
        return self.fk_points(nd.index(states, (Ellipsis, slice(0, 3))))

    def points_np(self, states: np.ndarray) -> np.ndarray:
        return self.fk_points(Array(states[..., :3])).data

    def end_effector(self, q: np.ndarray) -> np.ndarray:
        phi = np.cumsum(q, axis=-1)
        lens = np.asarray(self.link_lengths)
        return np.stack([(np.cos(phi) * lens).sum(-1), (np.sin(phi) * lens).sum(-1)], axis=-1)

    def ik(self, target, psi: float | None = None) -> np.ndarray:
        """Elbow-down IK with the last link pointing radially outward unless ``psi`` is given."""
        x, y = (float(v) for v in target)
        l1, l2, l3 = self.link_lengths
        if psi is None:
            psi = math.atan2(y, x)
        wx, wy = x - l3 * math.cos(psi), y - l3 * math.sin(psi)
        d2 = wx * wx + wy * wy
        c2 = (d2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        if abs(c2) > 1:
            raise ContractError(f"target {target} is out of reach")
        q2 = -math.acos(c2)
        q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
        q3 = psi - q1 - q2
        q = np.array([q1, q2, q3])
        return (q + math.pi) % (2 * math.pi) - math.pi

    def track(self, plan: np.ndarray, start: np.ndarray, kp: float | None = None, kd: float | None = None) -> np.ndarray:
        kp = self.kp if kp is None else kp
        kd = self.kd if kd is None else kd
        plan = np.asarray(plan, dtype=np.float64)
        out = np.empty_like(plan)
        s = np.broadcast_to(np.asarray(start, dtype=np.float64), plan[..., 0, :].shape).copy()
        out[..., 0, :] = s
        for k in range(plan.shape[-2] - 1):
            ff = (plan[..., k + 1, 3:] - plan[..., k, 3:]) / self.dt
            acc = ff + kp * (plan[..., k + 1, :3] - s[..., :3]) + kd * (plan[..., k + 1, 3:] - s[..., 3:])
            mass, h = self.dynamics_terms(s[..., :3], s[..., 3:])
            tau = np.einsum("...jk,...k->...j", mass, acc) + h
            s = self.step(s, np.clip(tau, -self.tau_max, self.tau_max))
            out[..., k + 1, :] = s
        return out


def make_env(name: str, **kw):
    if name == "particle":
        return ParticleEnv(**kw)
    if name == "arm":
        return ArmEnv(**kw)
    raise ConfigError(f"unknown env {name!r}; valid: particle, arm")


# --------------------------------------------------------------------------- #
# rollouts
# --------------------------------------------------------------------------- #


@dataclass
class Trajectory:
    states: np.ndarray
    dt: float
    env: str
    scheme: str = Scheme.NONE.value

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if not np.all(np.isfinite(self.states)):
            raise NumericError("trajectory contains non-finite states")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


@dataclass
class RolloutBatch:
    states: np.ndarray  # [N, T, D]
    perturbation: np.ndarray  # [N, T-1, control_dim] injected control noise
    starts: np.ndarray
    goals: np.ndarray


def rollout_batch(
    env,
    starts: np.ndarray,
    goals: np.ndarray,
    scheme: AugmentScheme,
    horizon: int = DEFAULT_HORIZON,
    rng: np.random.Generator | None = None,
    max_retries: int = 5,
) -> RolloutBatch:
    """Roll out the scripted controller from each start toward each goal.

    Rows whose state leaves ``env.bound`` are re-drawn with fresh randomness,
    at most ``max_retries`` times.
    """
    rng = np.random.default_rng() if rng is None else rng
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64)).copy()
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64)).copy()
    n = starts.shape[0]
    out = np.empty((n, horizon, env.state_dim))
    pert = np.zeros((n, horizon - 1, env.control_dim))
    todo = np.arange(n)
    for _ in range(max_retries + 1):
        s0, g0 = starts[todo].copy(), goals[todo].copy()
        m = len(todo)
        if scheme.kind is Scheme.RANDOM_POS:
            npos = env.position_dims
            s0[:, :npos] += rng.uniform(-scheme.pos_range, scheme.pos_range, size=(m, npos))
            g0[:, :npos] += rng.uniform(-scheme.pos_range, scheme.pos_range, size=(m, npos))
        std = scheme.noise_std * env.a_max
        if scheme.kind is Scheme.ACTION_NOISE:
            noise = rng.normal(0.0, 1.0, size=(m, horizon - 1, env.control_dim)) * std
        elif scheme.kind is Scheme.SAME_NOISE:
            noise = np.repeat(rng.normal(0.0, 1.0, size=(m, horizon - 1, 1)) * std, env.control_dim, axis=2)
        else:
            noise = np.zeros((m, horizon - 1, env.control_dim))
        forces = np.zeros((m, horizon - 1, 2))
        if scheme.kind is Scheme.RANDOM_FORCES:
            starts_ep = rng.random((m, horizon - 1)) < scheme.force_prob
            mags = rng.normal(0.0, scheme.force_std * env.a_max, size=(m, horizon - 1, 2))
            for k in range(horizon - 1):
                on = starts_ep[:, k]
                stop = min(k + scheme.force_steps, horizon - 1)
                forces[on, k:stop] = mags[on, k][:, None, :]
        s = s0
        env.begin(s0, g0, horizon)
        traj = np.empty((m, horizon, env.state_dim))
        traj[:, 0] = s
        for k in range(horizon - 1):
            u = env.control(s, k) + noise[:, k]
            s = env.apply(s, u, forces[:, k])
            traj[:, k + 1] = s
        bad = ~np.all(np.isfinite(traj) & (np.abs(traj) <= env.bound), axis=(1, 2))
        ok = todo[~bad]
        out[ok] = traj[~bad]
        pert[ok] = noise[~bad]
        todo = todo[bad]
        if len(todo) == 0:
            return RolloutBatch(out, pert, starts, goals)
    raise NumericError(f"{len(todo)} rollouts diverged after {max_retries} retries")


def rollout(env, start, goal, scheme: AugmentScheme | None = None, T: int = DEFAULT_HORIZON, rng=None) -> Trajectory:
    scheme = scheme or AugmentScheme()
    batch = rollout_batch(env, np.asarray(start)[None], np.asarray(goal)[None], scheme, T, rng)
    return Trajectory(batch.states[0], env.dt, env.name, scheme.kind.value)


# --------------------------------------------------------------------------- #
# datasets
# --------------------------------------------------------------------------- #

# arm ids of the cross: 0 left, 1 right, 2 bottom, 3 top
ARM_NAMES = ("left", "right", "bottom", "top")
OPPOSITE = {0: 1, 1: 0, 2: 3, 3: 2}
TRAIN_PAIRS = ((0, 1), (1, 0), (2, 3), (3, 2))
STITCH_PAIRS = tuple((a, b) for a in range(4) for b in range(4) if a != b and OPPOSITE[a] != b)


@dataclass
class Normalizer:
    """Per-dimension min-max map onto ``[-1, 1]``."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)

    @property
    def half_range(self) -> np.ndarray:
        r = (self.maxs - self.mins) / 2.0
        return np.where(r > 0, r, 1.0)

    @property
    def center(self) -> np.ndarray:
        return (self.maxs + self.mins) / 2.0

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) / self.half_range

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.half_range + self.center

    @classmethod
    def fit(cls, states: np.ndarray) -> "Normalizer":
        flat = states.reshape(-1, states.shape[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))


@dataclass
class Dataset:
    states: np.ndarray  # raw [N, T, D]
    normalizer: Normalizer
    labels: np.ndarray  # [N, 2] (start arm, goal arm); -1 when not a cross dataset
    env: str
    dt: float
    scheme: str
    kind: str = "cross"
    anchors: np.ndarray | None = None  # [4, D] rest states at the cross arms
    perturbation: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.dt, self.env, self.scheme)

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def normalized(self) -> np.ndarray:
        return self.normalizer.normalize(self.states)


def cross_anchors(env) -> np.ndarray:
    """Rest states at the four arm tips of the cross (left, right, bottom, top)."""
    if env.name == "particle":
        pts = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        return env.rest_state(pts)
    center = np.array([0.75, 0.0])
    arm = 0.25
    pts = center + arm * np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    return np.stack([env.rest_state(env.ik(p)) for p in pts])


def make_cross_dataset(
    env,
    n_per_mode: int,
    scheme: AugmentScheme | None = None,
    rng: np.random.Generator | None = None,
    horizon: int = DEFAULT_HORIZON,
    jitter: float = 0.02,
) -> Dataset:
    """Left<->right and bottom<->top crossings, ``n_per_mode`` per direction."""
    if n_per_mode < 1:
        raise ConfigError(f"n_per_mode must be >= 1, got {n_per_mode}")
    scheme = scheme or AugmentScheme()
    rng = np.random.default_rng(0) if rng is None else rng
    anchors = cross_anchors(env)
    labels = np.repeat(np.asarray(TRAIN_PAIRS), n_per_mode, axis=0)
    npos = env.position_dims
    starts = anchors[labels[:, 0]].copy()
    goals = anchors[labels[:, 1]].copy()
    starts[:, :npos] += rng.uniform(-jitter, jitter, size=(len(labels), npos))
    goals[:, :npos] += rng.uniform(-jitter, jitter, size=(len(labels), npos))
    batch = rollout_batch(env, starts, goals, scheme, horizon, rng)
    return Dataset(
        states=batch.states,
        normalizer=Normalizer.fit(batch.states),
        labels=labels,
        env=env.name,
        dt=env.dt,
        scheme=scheme.kind.value,
        kind="cross",
        anchors=anchors,
        perturbation=batch.perturbation,
    )


def make_straight_dataset(
    env,
    n: int,
    scheme: AugmentScheme | None = None,
    rng: np.random.Generator | None = None,
    horizon: int = DEFAULT_HORIZON,
    lateral: float = 0.8,
    jitter: float = 0.02,
) -> Dataset:
    """Particle crossings from ``x=-1`` to ``x=+1`` at random heights in ``[-lateral, lateral]``."""
    if env.name != "particle":
        raise ConfigError("straight-line dataset is defined for the particle env")
    scheme = scheme or AugmentScheme()
    rng = np.random.default_rng(0) if rng is None else rng
    y = rng.uniform(-lateral, lateral, size=n)
    starts = env.rest_state(np.stack([np.full(n, -1.0), y], axis=1))
    goals = env.rest_state(np.stack([np.full(n, 1.0), y], axis=1))
    starts[:, :2] += rng.uniform(-jitter, jitter, size=(n, 2))
    goals[:, :2] += rng.uniform(-jitter, jitter, size=(n, 2))
    batch = rollout_batch(env, starts, goals, scheme, horizon, rng)
    return Dataset(
        states=batch.states,
        normalizer=Normalizer.fit(batch.states),
        labels=np.full((n, 2), -1),
        env=env.name,
        dt=env.dt,
        scheme=scheme.kind.value,
        kind="straight",
        perturbation=batch.perturbation,
    )


def noise_cross_correlation(perturbation: np.ndarray) -> float:
    """Mean absolute pairwise correlation between control dims of injected noise."""
    flat = perturbation.reshape(-1, perturbation.shape[-1])
    if flat.shape[1] < 2 or np.allclose(flat, 0):
        return 0.0
    corr = np.corrcoef(flat, rowvar=False)
    iu = np.triu_indices(flat.shape[1], 1)
    return float(np.mean(np.abs(corr[iu])))


# --------------------------------------------------------------------------- #
# costs
# --------------------------------------------------------------------------- #


def fk_planar(q: Array, link_lengths, k: int = 3) -> Array:
    """Points along a planar serial chain, ``[..., n_links * k, 2]``.

    Point ``(i, j)`` sits at fraction ``(j + 1) / k`` along link ``i``, so the
    last point of each link is its tip.
    """
    q = q if isinstance(q, Array) else Array(q)
    lens = np.asarray(link_lengths, dtype=np.float64)
    n = len(lens)
    cum = np.tril(np.ones((n, n)))
    phi = nd.linear(q, Array(cum))
    mix = np.zeros((n * k, n))
    for i in range(n):
        for j in range(k):
            mix[i * k + j, :i] = lens[:i]
            mix[i * k + j, i] = lens[i] * (j + 1) / k
    a = Array(mix)
    return nd.stack([nd.linear(nd.cos(phi), a), nd.linear(nd.sin(phi), a)], axis=-1)


def sdf_circle(point, obstacle: Obstacle):
    """Signed distance from ``point`` (``[..., 2]``) to a circle; negative inside."""
    if isinstance(point, Array):
        c = Array(np.broadcast_to(obstacle.center, point.shape))
        return nd.add_scalar(nd.norm(nd.sub(point, c), axis=-1), -obstacle.radius)
    p = np.asarray(point, dtype=np.float64)
    return np.linalg.norm(p - np.asarray(obstacle.center), axis=-1) - obstacle.radius


def collision_cost(states: Array, obstacles, env, margin: float = DEFAULT_MARGIN) -> Array:
    """Sum over timesteps, checked points and obstacles of ``relu(margin - sdf)``."""
    states = states if isinstance(states, Array) else Array(states)
    if not obstacles:
        raise ContractError("collision_cost needs at least one obstacle")
    pts = env.points(states)
    total = None
    for ob in obstacles:
        term = nd.sum(nd.relu(nd.scale(nd.add_scalar(sdf_circle(pts, ob), -margin), -1.0)))
        total = term if total is None else nd.add(total, term)
    return total


def smoothness_cost(states: Array, position_dims: int) -> Array:
    """Sum of squared first differences of the position coordinates."""
    states = states if isinstance(states, Array) else Array(states)
    if states.shape[-2] < 2:
        raise ContractError("smoothness_cost needs at least two states")
    pos = nd.index(states, (Ellipsis, slice(0, position_dims)))
    nxt = nd.index(pos, (Ellipsis, slice(1, None), slice(None)))
    prv = nd.index(pos, (Ellipsis, slice(0, -1), slice(None)))
    return nd.sum(nd.square(nd.sub(nxt, prv)))


def min_clearance(states: np.ndarray, obstacles, env) -> np.ndarray:
    """Smallest SDF value over time and checked points, per leading index."""
    pts = env.points_np(np.asarray(states))
    best = np.full(pts.shape[:-3], np.inf)
    for ob in obstacles:
        d = sdf_circle(pts, ob)
        best = np.minimum(best, d.reshape(*pts.shape[:-3], -1).min(axis=-1))
    return best
