"""Velocity-field networks: temporal UNet and transformer, inpainting or direct conditioning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import ndauto as nd
from .errors import ConfigError, ContractError, LengthError, ShapeError
from .ndauto import Array


class Arch(str, Enum):
    UNET = "unet"
    TRANSFORMER = "transformer"


class Conditioning(str, Enum):
    INPAINT = "inpaint"
    DIRECT = "direct"


# sinusoid inputs are t * TIME_SCALE so that t in [0, 1] spans several periods
TIME_SCALE = 100.0

# "clean": boundary states are the clean values, during training and sampling.
# "ot": boundary states follow the straight path from the sampler's initial noise.
INPAINT_RULES = ("clean", "ot")


@dataclass(frozen=True)
class NetConfig:
    arch: Arch = Arch.UNET
    conditioning: Conditioning = Conditioning.INPAINT
    state_dim: int = 4
    horizon: int = 64
    channel_dims: tuple[int, ...] = (32, 64, 128, 256)
    time_embed_dim: int = 32
    kernel_size: int = 5
    groups: int = 8
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 128
    inpaint_rule: str = "clean"

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "conditioning", Conditioning(self.conditioning))
        object.__setattr__(self, "channel_dims", tuple(int(c) for c in self.channel_dims))
        if not self.channel_dims:
            raise ConfigError("channel_dims must be nonempty")
        if self.inpaint_rule not in INPAINT_RULES:
            raise ConfigError(f"inpaint_rule must be one of {', '.join(INPAINT_RULES)}, got {self.inpaint_rule!r}")
        if self.state_dim < 1:
            raise ConfigError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.arch is Arch.UNET:
            check_unet_length(self.horizon, self.channel_dims)
        else:
            if self.model_dim % self.n_heads:
                raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
            if self.horizon < 1:
                raise ConfigError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def min_length(self) -> int:
        return 2 ** len(self.channel_dims) if self.arch is Arch.UNET else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        d["conditioning"] = self.conditioning.value
        d["channel_dims"] = list(self.channel_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def check_unet_length(length: int, channel_dims) -> None:
    if not is_power_of_two(length):
        raise LengthError(f"UNet trajectory length must be a power of 2, got {length}")
    need = 2 ** len(channel_dims)
    if length < need:
        raise LengthError(f"UNet with {len(channel_dims)} levels needs length >= {need}, got {length}")


def group_count(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """Sine/cosine features of flow time at geometrically spaced frequencies.

    Returns ``[B, dim]`` with the sines in the first half and cosines in the
    second, so ``t = 0`` maps to ``[0..0, 1..1]``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ContractError(f"flow time must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    arg = (t * TIME_SCALE)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class _Init:
    """Truncated-normal weights: fixed std 0.02, or ``1/sqrt(fan_in)`` when ``fan_in``."""

    def __init__(self, rng: np.random.Generator, params: dict[str, Array], fan_in: bool = False):
        self.rng = rng
        self.params = params
        self.fan_in = fan_in

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Array(value, requires_grad=True, name=name)

    def normal(self, name: str, shape, std: float = 0.02) -> None:
        w = self.rng.normal(0.0, std, size=shape)
        # truncate at two standard deviations
        bad = np.abs(w) > 2 * std
        while bad.any():
            w[bad] = self.rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(w) > 2 * std
        self._add(name, w)

    def zeros(self, name: str, shape) -> None:
        self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> None:
        self._add(name, np.ones(shape))

    def _weight(self, name: str, shape, fan: int, zero: bool) -> None:
        if zero:
            self.zeros(name, shape)
        else:
            self.normal(name, shape, 1.0 / math.sqrt(fan) if self.fan_in else 0.02)

    def linear(self, name: str, d_in: int, d_out: int, zero: bool = False) -> None:
        self._weight(f"{name}.w", (d_out, d_in), d_in, zero)
        self.zeros(f"{name}.b", (d_out,))

    def conv(self, name: str, c_in: int, c_out: int, k: int, zero: bool = False) -> None:
        self._weight(f"{name}.w", (c_out, c_in, k), c_in * k, zero)
        self.zeros(f"{name}.b", (c_out,))

    def norm(self, name: str, c: int) -> None:
        self.ones(f"{name}.g", (c,))
        self.zeros(f"{name}.b", (c,))


class VelocityNet:
    """Parameterized velocity field ``u(x_t, t)``.

    Parameters live in ``params`` under stable dotted names; the set of names
    and shapes depends only on ``config``.
    """

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Array] = {}
        init = _Init(np.random.default_rng(seed), self.params, fan_in=config.arch is Arch.UNET)
        c = config
        e = c.time_embed_dim
        init.linear("time.fc1", e, 4 * e)
        init.linear("time.fc2", 4 * e, e)
        if c.arch is Arch.UNET:
            self._build_unet(init)
        else:
            self._build_transformer(init)

    # ------------------------------------------------------------------ build

    @property
    def cond_dim(self) -> int:
        return self.config.time_embed_dim

    def _embed_dim(self) -> int:
        e = self.config.time_embed_dim
        return 2 * e if self.config.conditioning is Conditioning.DIRECT else e

    def _res_block(self, init: _Init, name: str, c_in: int, c_out: int) -> None:
        k = self.config.kernel_size
        init.conv(f"{name}.conv1", c_in, c_out, k)
        init.norm(f"{name}.gn1", c_out)
        init.linear(f"{name}.film", self._embed_dim(), 2 * c_out)
        init.conv(f"{name}.conv2", c_out, c_out, k)
        init.norm(f"{name}.gn2", c_out)
        if c_in != c_out:
            init.conv(f"{name}.skip", c_in, c_out, 1)

    def _build_unet(self, init: _Init) -> None:
        c = self.config
        e = c.time_embed_dim
        if c.conditioning is Conditioning.DIRECT:
            init.linear("cond.fc1", 2 * c.state_dim, 4 * e)
            init.linear("cond.fc2", 4 * e, e)
        dims = (c.state_dim, *c.channel_dims)
        n = len(c.channel_dims)
        for i in range(n):
            self._res_block(init, f"down{i}", dims[i], dims[i + 1])
            if i < n - 1:
                init.conv(f"down{i}.pool", dims[i + 1], dims[i + 1], 3)
        self._res_block(init, "mid", dims[-1], dims[-1])
        for i in reversed(range(1, n)):
            init.conv(f"up{i}.unpool", dims[i + 1], dims[i + 1], 3)
            self._res_block(init, f"up{i}", dims[i + 1] + dims[i], dims[i])
        k = c.kernel_size
        init.conv("final.conv", dims[1], dims[1], k)
        init.norm("final.gn", dims[1])
        init.conv("final.out", dims[1], c.state_dim, 1, zero=True)

    def _build_transformer(self, init: _Init) -> None:
        c = self.config
        m = c.model_dim
        init.linear("tok", c.state_dim, m)
        init.normal("pos", (c.horizon, m))
        init.linear("time.proj", c.time_embed_dim, m)
        if c.conditioning is Conditioning.DIRECT:
            init.linear("cond.tok", c.state_dim, m)
            init.normal("cond.type", (2, m))
        for i in range(c.n_layers):
            init.norm(f"blk{i}.ln1", m)
            init.linear(f"blk{i}.qkv", m, 3 * m)
            init.linear(f"blk{i}.proj", m, m)
            init.norm(f"blk{i}.ln2", m)
            init.linear(f"blk{i}.fc1", m, 4 * m)
            init.linear(f"blk{i}.fc2", 4 * m, m)
        init.norm("final.ln", m)
        init.linear("final.out", m, c.state_dim, zero=True)

    # ---------------------------------------------------------------- helpers

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def p(self, name: str) -> Array:
        return self.params[name]

    def _lin(self, x: Array, name: str) -> Array:
        return nd.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _conv(self, x: Array, name: str, **kw) -> Array:
        return nd.conv1d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], **kw)

    def _gn(self, x: Array, name: str) -> Array:
        g = group_count(x.shape[-2], self.config.groups)
        return nd.group_norm(x, g, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def time_embed(self, t) -> Array:
        """Sinusoidal flow-time features passed through a two-layer MLP: ``[B, E]``."""
        feats = Array(sinusoidal_features(t, self.config.time_embed_dim))
        return self._lin(nd.silu(self._lin(feats, "time.fc1")), "time.fc2")

    def _check_inputs(self, x: Array, t, cond):
        c = self.config
        if x.ndim != 3 or x.shape[2] != c.state_dim:
            raise ShapeError(f"expected x_t of shape [B, T, {c.state_dim}], got {x.shape}")
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (x.shape[0],))
        if c.conditioning is Conditioning.DIRECT:
            if cond is None:
                raise ContractError("DIRECT-conditioned network requires a (start, goal) condition")
            start, goal = (np.asarray(v, dtype=np.float64) for v in cond)
            start = np.broadcast_to(start, (x.shape[0], c.state_dim))
            goal = np.broadcast_to(goal, (x.shape[0], c.state_dim))
            cond = (start, goal)
        elif cond is not None:
            raise ContractError("INPAINT-conditioned network takes no condition; clamp in the sampler instead")
        return t, cond

    # ---------------------------------------------------------------- forward

    def __call__(self, x, t, cond=None) -> Array:
        """Velocity ``[B, T, D]`` at trajectories ``x`` ``[B, T, D]`` and flow times ``t`` ``[B]``."""
        x = x if isinstance(x, Array) else Array(x)
        if self.config.arch is Arch.UNET:
            return self.unet_forward(x, t, cond)
        return self.transformer_forward(x, t, cond)

    def _film(self, h: Array, emb: Array, name: str) -> Array:
        b, ch, length = h.shape
        ss = self._lin(nd.silu(emb), f"{name}.film")
        scale = nd.broadcast_to(nd.reshape(nd.index(ss, (slice(None), slice(0, ch))), (b, ch, 1)), (b, ch, length))
        shift = nd.broadcast_to(nd.reshape(nd.index(ss, (slice(None), slice(ch, 2 * ch))), (b, ch, 1)), (b, ch, length))
        return nd.add(nd.add(h, nd.mul(h, scale)), shift)

    def _res(self, x: Array, emb: Array, name: str) -> Array:
        h = self._gn(self._conv(x, f"{name}.conv1"), f"{name}.gn1")
        h = nd.silu(self._film(h, emb, name))
        h = nd.silu(self._gn(self._conv(h, f"{name}.conv2"), f"{name}.gn2"))
        skip = self._conv(x, f"{name}.skip") if f"{name}.skip.w" in self.params else x
        return nd.add(h, skip)

    def unet_forward(self, x: Array, t, cond=None) -> Array:
        c = self.config
        check_unet_length(x.shape[1], c.channel_dims)
        t, cond = self._check_inputs(x, t, cond)
        emb = self.time_embed(t)
        if cond is not None:
            ce = Array(np.concatenate(cond, axis=1))
            ce = self._lin(nd.silu(self._lin(ce, "cond.fc1")), "cond.fc2")
            emb = nd.concat([emb, ce], axis=1)
        h = nd.transpose(x, (0, 2, 1))
        n = len(c.channel_dims)
        skips = []
        for i in range(n):
            h = self._res(h, emb, f"down{i}")
            if i < n - 1:
                skips.append(h)
                h = self._conv(h, f"down{i}.pool", padding=1, stride=2)
        h = self._res(h, emb, "mid")
        for i in reversed(range(1, n)):
            h = self._conv(nd.upsample_nearest(h, 2), f"up{i}.unpool")
            h = self._res(nd.concat([h, skips.pop()], axis=1), emb, f"up{i}")
        h = nd.silu(self._gn(self._conv(h, "final.conv"), "final.gn"))
        out = self._conv(h, "final.out")
        return nd.transpose(out, (0, 2, 1))

    def transformer_forward(self, x: Array, t, cond=None) -> Array:
        c = self.config
        b, length, _ = x.shape
        if length > c.horizon:
            raise LengthError(f"transformer supports length <= {c.horizon}, got {length}")
        t, cond = self._check_inputs(x, t, cond)
        m = c.model_dim
        tok = self._lin(x, "tok")
        pos = nd.index(self.params["pos"], slice(0, length))
        tok = nd.add(tok, nd.broadcast_to(nd.reshape(pos, (1, length, m)), (b, length, m)))
        if cond is not None:
            types = self.params["cond.type"]
            ctoks = [
                nd.add(self._lin(Array(v[:, None, :]), "cond.tok"), nd.broadcast_to(nd.reshape(nd.index(types, slice(i, i + 1)), (1, 1, m)), (b, 1, m)))
                for i, v in enumerate(cond)
            ]
            tok = nd.concat([*ctoks, tok], axis=1)
        n_tok = tok.shape[1]
        temb = self._lin(self.time_embed(t), "time.proj")
        h = nd.add(tok, nd.broadcast_to(nd.reshape(temb, (b, 1, m)), (b, n_tok, m)))
        heads = c.n_heads
        dh = m // heads
        for i in range(c.n_layers):
            a = nd.layer_norm(h, self.params[f"blk{i}.ln1.g"], self.params[f"blk{i}.ln1.b"])
            qkv = nd.transpose(nd.reshape(self._lin(a, f"blk{i}.qkv"), (b, n_tok, 3, heads, dh)), (2, 0, 3, 1, 4))
            att = nd.attention(qkv[0], qkv[1], qkv[2])
            att = nd.reshape(nd.transpose(att, (0, 2, 1, 3)), (b, n_tok, m))
            h = nd.add(h, self._lin(att, f"blk{i}.proj"))
            a = nd.layer_norm(h, self.params[f"blk{i}.ln2.g"], self.params[f"blk{i}.ln2.b"])
            h = nd.add(h, self._lin(nd.gelu(self._lin(a, f"blk{i}.fc1")), f"blk{i}.fc2"))
        h = nd.layer_norm(h, self.params["final.ln.g"], self.params["final.ln.b"])
        out = self._lin(h, "final.out")
        if cond is not None:
            out = nd.index(out, (slice(None), slice(2, None)))
        return out
