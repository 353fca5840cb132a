"""Conditional flow matching on the straight-line (OT) path: training, Euler sampling,
inpainting, cost guidance and trajectory splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from types import SimpleNamespace

import numpy as np

from . import ndauto as nd
from .errors import ConfigError, ContractError, GuidanceError, LengthError, NumericError, SamplingError
from .model import Arch, Conditioning, check_unet_length, is_power_of_two
from .ndauto import Array
from .world import DEFAULT_MARGIN, Normalizer, Obstacle, collision_cost, smoothness_cost

OT_RATIO_FLOOR = 1e-3


class BtSchedule(str, Enum):
    ONE_MINUS_T = "one_minus_t"
    OT_RATIO = "ot_ratio"


@dataclass(frozen=True)
class GuidanceSpec:
    obstacles: tuple[Obstacle, ...] = ()
    collision_weight: float = 0.1
    smoothness_weight: float = 1e-6
    guidance_scale: float = 1.0
    bt_schedule: BtSchedule = BtSchedule.ONE_MINUS_T
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "bt_schedule", BtSchedule(self.bt_schedule))
        if self.collision_weight < 0 or self.smoothness_weight < 0:
            raise ConfigError("guidance cost weights must be >= 0")

    def bt(self, t: float) -> float:
        if self.bt_schedule is BtSchedule.ONE_MINUS_T:
            return 1.0 - t
        t = max(t, OT_RATIO_FLOOR)
        return (1.0 - t) / t


@dataclass
class PlanRequest:
    """One planning call. States are in normalized units.

    ``start_state``/``goal_state`` may be ``[D]`` or ``[B, D]``; ``n_samples``
    replicates ``[D]`` boundaries. Both ``None`` means unconditional sampling.
    """

    start_state: np.ndarray | None
    goal_state: np.ndarray | None
    horizon: int = 64
    n_steps: int = 10
    guidance: GuidanceSpec | None = None
    inference_split: bool = False
    seed: int = 0
    n_samples: int = 1
    split_guidance: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if (self.start_state is None) != (self.goal_state is None):
            raise ContractError("give both start_state and goal_state, or neither")


@dataclass
class OTPathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target_u: np.ndarray


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


def interpolate(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> np.ndarray:
    tb = np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (x1.ndim - 1)))
    return tb * x1 + (1.0 - tb) * x0


def sample_path(x1: np.ndarray, rng: np.random.Generator, t: np.ndarray | None = None) -> OTPathSample:
    """Draw noise and flow times for a batch of data trajectories ``[B, T, D]``."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = rng.random(x1.shape[0])
    t = np.asarray(t, dtype=np.float64)
    return OTPathSample(x0=x0, x1=x1, t=t, x_t=interpolate(x0, x1, t), target_u=x1 - x0)


def boundary_condition(net, x1: np.ndarray):
    if net.config.conditioning is Conditioning.DIRECT:
        return x1[:, 0], x1[:, -1]
    return None


def _clean_inpaint(net) -> bool:
    return net.config.conditioning is Conditioning.INPAINT and getattr(net.config, "inpaint_rule", "clean") == "clean"


def cfm_loss(net, batch: OTPathSample, cond=None) -> Array:
    """Mean squared error between ``net(x_t, t)`` and ``x1 - x0`` over batch, time and dims."""
    if cond is None:
        cond = boundary_condition(net, batch.x1)
    x_t = batch.x_t
    if _clean_inpaint(net):
        # the sampler pins clean boundary states, so train on the same inputs
        x_t = x_t.copy()
        x_t[:, 0] = batch.x1[:, 0]
        x_t[:, -1] = batch.x1[:, -1]
    pred = net(Array(x_t), batch.t, cond)
    loss = nd.mean(nd.square(nd.sub(pred, Array(batch.target_u))))
    if not np.isfinite(loss.item()):
        raise NumericError("cfm loss is not finite")
    return loss


def check_split(net, horizon: int, split_prob: float) -> None:
    """Fail at startup if half-length crops would be invalid for ``net``."""
    if not 0.0 <= split_prob <= 1.0:
        raise ConfigError(f"split_prob must be in [0, 1], got {split_prob}")
    if split_prob == 0:
        return
    if horizon % 2 or horizon // 2 < 1:
        raise LengthError(f"horizon {horizon} cannot be halved")
    if net.config.arch is Arch.UNET:
        check_unet_length(horizon // 2, net.config.channel_dims)
    elif not is_power_of_two(horizon // 2):
        raise LengthError(f"half horizon {horizon // 2} is not a power of 2")


def draw_batch(data: np.ndarray, batch_size: int, split_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Sample trajectories; with probability ``split_prob`` crop all of them to half length.

    Crop offsets are even and uniform over ``0, 2, ..., T/2``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = rng.integers(0, data.shape[0], size=batch_size)
    x1 = data[idx]
    if split_prob > 0 and rng.random() < split_prob:
        half = data.shape[1] // 2
        offsets = 2 * rng.integers(0, half // 2 + 1, size=batch_size)
        x1 = np.stack([x1[i, o : o + half] for i, o in enumerate(offsets)])
    return x1


def train_step(net, data, batch_size: int, split_prob: float, rng: np.random.Generator, adam: nd.AdamState) -> float:
    """One CFM update on a freshly drawn (possibly half-length) batch; returns the loss."""
    data = data.normalized() if hasattr(data, "normalized") else np.asarray(data)
    x1 = draw_batch(data, batch_size, split_prob, rng)
    batch = sample_path(x1, rng)
    params = net.params
    with nd.Tape() as tape:
        loss = cfm_loss(net, batch)
    grads = nd.backward(tape, loss, wrt=params.values())
    nd.adam_step(params, {k: grads[p] for k, p in params.items()}, adam)
    return loss.item()


@dataclass
class Trainer:
    """Training loop state for one network on one normalized dataset."""

    net: object
    data: np.ndarray
    batch_size: int = 32
    split_prob: float = 0.5
    seed: int = 0
    lr: float = 2e-4
    decay_steps: int | None = None  # cosine decay of the learning rate to 0 over this many steps
    adam: nd.AdamState = None
    rng: np.random.Generator = None
    losses: list[float] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    def __post_init__(self):
        check_split(self.net, self.data.shape[1], self.split_prob)
        if self.adam is None:
            self.adam = nd.AdamState(lr=self.lr)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def step(self) -> int:
        return self.adam.step

    def train(self, n_steps: int, callback=None) -> list[float]:
        for _ in range(n_steps):
            x1 = draw_batch(self.data, self.batch_size, self.split_prob, self.rng)
            batch = sample_path(x1, self.rng)
            params = self.net.params
            if self.decay_steps:
                frac = min(self.adam.step, self.decay_steps) / self.decay_steps
                self.adam.lr = self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
            with nd.Tape() as tape:
                loss = cfm_loss(self.net, batch)
            grads = nd.backward(tape, loss, wrt=params.values())
            try:
                nd.adam_step(params, {k: grads[p] for k, p in params.items()}, self.adam)
            except NumericError as e:
                raise NumericError(f"step {self.adam.step + 1}: {e}") from e
            self.losses.append(loss.item())
            self.lengths.append(x1.shape[1])
            if callback is not None:
                callback(self)
        return self.losses


# --------------------------------------------------------------------------- #
# sampling
# --------------------------------------------------------------------------- #


def inpaint_clamp(x: np.ndarray, t: float, start, goal, frozen_noise: np.ndarray, rule: str = "ot") -> np.ndarray:
    """Overwrite the first/last states.

    ``rule="ot"`` puts them on the straight path from the frozen noise to
    start/goal; ``rule="clean"`` writes start/goal directly.
    """
    x = x.copy()
    if rule == "clean":
        x[..., 0, :] = start
        x[..., -1, :] = goal
        return x
    x[..., 0, :] = t * start + (1.0 - t) * frozen_noise[..., 0, :]
    x[..., -1, :] = t * goal + (1.0 - t) * frozen_noise[..., -1, :]
    return x


@dataclass
class CostContext:
    """What guidance needs to turn normalized plans into env-space costs."""

    env: object
    normalizer: Normalizer


def cost_gradient(x: np.ndarray, spec: GuidanceSpec, ctx: CostContext) -> np.ndarray:
    """Gradient of the weighted guidance cost w.r.t. normalized states ``x``."""
    raw = Array(ctx.normalizer.denormalize(x), requires_grad=True)
    terms = []
    with nd.Tape() as tape:
        if spec.obstacles and spec.collision_weight > 0:
            terms.append(("collision", nd.scale(collision_cost(raw, spec.obstacles, ctx.env, spec.margin), spec.collision_weight)))
        if spec.smoothness_weight > 0:
            terms.append(("smoothness", nd.scale(smoothness_cost(raw, ctx.env.position_dims), spec.smoothness_weight)))
        total = None
        for _, term in terms:
            total = term if total is None else nd.add(total, term)
    if total is None:
        return np.zeros_like(x)
    g = nd.backward(tape, total, wrt=[raw])[raw] * ctx.normalizer.half_range
    if not np.all(np.isfinite(g)):
        names = ", ".join(name for name, term in terms if not np.isfinite(term.item())) or "gradient"
        raise GuidanceError(f"non-finite guidance gradient (terms: {names})")
    return g


def guided_velocity(net, x: np.ndarray, t: float, spec: GuidanceSpec | None, ctx: CostContext | None = None, cond=None) -> np.ndarray:
    """``u(x, t) + b_t * scale * grad(-cost)(x)``; plain ``u`` when unguided or scale is 0."""
    u = net(Array(x), np.full(x.shape[0], t), cond).data
    if spec is None or spec.guidance_scale == 0:
        return u
    if ctx is None:
        raise ContractError("guidance needs an env and normalizer (CostContext)")
    return u - (spec.bt(t) * spec.guidance_scale) * cost_gradient(x, spec, ctx)


def _boundaries(request: PlanRequest, dim: int):
    if request.start_state is None:
        return None, None, request.n_samples
    start = np.asarray(request.start_state, dtype=np.float64)
    goal = np.asarray(request.goal_state, dtype=np.float64)
    if start.shape[-1] != dim or goal.shape[-1] != dim:
        raise ContractError(f"start/goal must have {dim} dims")
    b = start.shape[0] if start.ndim == 2 else request.n_samples
    return np.broadcast_to(start, (b, dim)), np.broadcast_to(goal, (b, dim)), b


def _state_dim(net) -> int:
    return net.config.state_dim


def integrate(
    net,
    x: np.ndarray,
    t0: float,
    n_steps: int,
    start,
    goal,
    frozen_noise: np.ndarray,
    guidance: GuidanceSpec | None,
    ctx: CostContext | None,
    trace: list | None = None,
    phase: str = "main",
) -> np.ndarray:
    """Euler integration from ``t0`` to 1 in ``n_steps`` uniform steps."""
    inpaint = start is not None and net.config.conditioning is Conditioning.INPAINT
    cond = (start, goal) if start is not None and net.config.conditioning is Conditioning.DIRECT else None
    rule = getattr(net.config, "inpaint_rule", "clean")
    h = (1.0 - t0) / n_steps
    if inpaint:
        x = inpaint_clamp(x, t0, start, goal, frozen_noise, rule)
    for k in range(n_steps):
        t = t0 + k * h
        x = x + h * guided_velocity(net, x, t, guidance, ctx, cond)
        t_next = 1.0 if k == n_steps - 1 else t0 + (k + 1) * h
        if inpaint:
            x = inpaint_clamp(x, t_next, start, goal, frozen_noise, rule)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after Euler step {k + 1}/{n_steps} ({phase})")
        if trace is not None:
            trace.append(SimpleNamespace(phase=phase, step=k + 1, t=t, h=h))
    return x


def euler_sample(
    net,
    request: PlanRequest,
    env=None,
    normalizer: Normalizer | None = None,
    trace: list | None = None,
    denormalize: bool = False,
) -> np.ndarray:
    """Integrate the (guided, inpainted) flow from Gaussian noise at t=0 to t=1.

    Returns ``[B, T, D]`` normalized states, or env units when ``denormalize``.
    """
    d = _state_dim(net)
    start, goal, b = _boundaries(request, d)
    if net.config.conditioning is Conditioning.DIRECT and start is None:
        raise ContractError("DIRECT-conditioned networks need start and goal")
    if net.config.arch is Arch.UNET:
        check_unet_length(request.horizon, net.config.channel_dims)
    rng = np.random.default_rng(request.seed)
    noise = rng.standard_normal((b, request.horizon, d))
    ctx = _context(request.guidance, env, normalizer)
    x = integrate(net, noise, 0.0, request.n_steps, start, goal, noise, request.guidance, ctx, trace)
    return normalizer.denormalize(x) if denormalize else x


def _context(guidance, env, normalizer):
    if guidance is None or guidance.guidance_scale == 0:
        return None
    if env is None or normalizer is None:
        raise ContractError("guided sampling needs env and normalizer")
    return CostContext(env, normalizer)


def split_inference(
    net,
    request: PlanRequest,
    initial: np.ndarray,
    env=None,
    normalizer: Normalizer | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Re-noise a plan to t=0.5, cut it in two and re-integrate both halves.

    The first half ``[0, T/2)`` is pinned to ``(start, initial[T/2 - 1])`` and
    the second ``[T/2, T)`` to ``(initial[T/2], goal)``; each half runs
    ``ceil(n_steps / 2)`` steps from t=0.5.
    """
    initial = np.asarray(initial, dtype=np.float64)
    if initial.ndim == 2:
        initial = initial[None]
    b, length, d = initial.shape
    half = length // 2
    if length % 2 or not is_power_of_two(half):
        raise LengthError(f"cannot split length {length} into power-of-2 halves")
    if net.config.arch is Arch.UNET:
        check_unet_length(half, net.config.channel_dims)
    if request.start_state is not None:
        start, goal, _ = _boundaries(SimpleNamespace(start_state=request.start_state, goal_state=request.goal_state, n_samples=b), d)
    else:
        start, goal = initial[:, 0], initial[:, -1]
    rng = np.random.default_rng([request.seed, 1])
    eps = rng.standard_normal(initial.shape)
    x_half = 0.5 * initial + 0.5 * eps
    seg_x = np.concatenate([x_half[:, :half], x_half[:, half:]], axis=0)
    seg_eps = np.concatenate([eps[:, :half], eps[:, half:]], axis=0)
    seg_start = np.concatenate([start, initial[:, half]], axis=0)
    seg_goal = np.concatenate([initial[:, half - 1], goal], axis=0)
    guidance = request.guidance if request.split_guidance else None
    ctx = _context(guidance, env, normalizer)
    steps = math.ceil(request.n_steps / 2)
    out = integrate(net, seg_x, 0.5, steps, seg_start, seg_goal, seg_eps, guidance, ctx, trace, phase="split")
    return np.concatenate([out[:b], out[b:]], axis=1)


def plan(net, request: PlanRequest, env=None, normalizer: Normalizer | None = None, trace: list | None = None) -> np.ndarray:
    """Full planning call: Euler sampling, optional inference-time split. Normalized units."""
    x = euler_sample(net, request, env, normalizer, trace)
    if request.inference_split:
        x = split_inference(net, request, x, env, normalizer, trace)
    return x
