"""Dataset and checkpoint files, run configuration and its defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndauto as nd
from .errors import ConfigError, FormatError, ShapeError
from .flow import BtSchedule, GuidanceSpec
from .model import INPAINT_RULES, Arch, Conditioning, NetConfig
from .world import AugmentScheme, Dataset, Normalizer, Scheme

DATASET_MAGIC = b"FPDS"
CHECKPOINT_MAGIC = b"FPCK"
FORMAT_VERSION = 1
ENV_IDS = {"particle": 1, "arm": 2}
ENV_NAMES = {v: k for k, v in ENV_IDS.items()}

# magic, version, env id, T, D, count, has anchors, has perturbation, control dim, meta length
_DS_HEADER = struct.Struct("<4sHBIIQBBII")
# magic, version, header length
_CK_HEADER = struct.Struct("<4sHI")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what} file: need {self.pos + n} bytes, have {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, shape, dtype="<f8") -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what} file has {len(self.data) - self.pos} trailing bytes")


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# --------------------------------------------------------------------------- #
# datasets
# --------------------------------------------------------------------------- #


def dataset_bytes(ds: Dataset, config_hash: str = "") -> bytes:
    if ds.env not in ENV_IDS:
        raise FormatError(f"unknown env {ds.env!r}")
    n, t, d = ds.states.shape
    meta = canonical_json({"dt": ds.dt, "scheme": ds.scheme, "kind": ds.kind, "config_hash": config_hash})
    pert = ds.perturbation
    has_pert = pert is not None
    c = pert.shape[-1] if has_pert else 0
    parts = [
        _DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, ENV_IDS[ds.env], t, d, n, ds.anchors is not None, has_pert, c, len(meta)),
        meta,
        _f8(ds.normalizer.mins),
        _f8(ds.normalizer.maxs),
        _f8(ds.states),
        np.ascontiguousarray(ds.labels, dtype="<i4").tobytes(),
    ]
    if ds.anchors is not None:
        parts.append(_f8(ds.anchors))
    if has_pert:
        parts.append(_f8(pert))
    return b"".join(parts)


def save_dataset(path, ds: Dataset, config_hash: str = "") -> None:
    atomic_write(path, dataset_bytes(ds, config_hash))


def read_dataset(data: bytes) -> Dataset:
    r = _Reader(data, "dataset")
    if data[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    magic, version, env_id, t, d, n, has_anchors, has_pert, c, meta_len = _DS_HEADER.unpack(r.take(_DS_HEADER.size))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version} (supported: {FORMAT_VERSION})")
    if env_id not in ENV_NAMES:
        raise FormatError(f"unknown env id {env_id}")
    meta = json.loads(r.take(meta_len))
    mins, maxs = r.array((d,)), r.array((d,))
    states = r.array((n, t, d))
    labels = r.array((n, 2), "<i4")
    anchors = r.array((4, d)) if has_anchors else None
    pert = r.array((n, t - 1, c)) if has_pert else None
    r.finish()
    return Dataset(
        states=states,
        normalizer=Normalizer(mins, maxs),
        labels=labels,
        env=ENV_NAMES[env_id],
        dt=meta["dt"],
        scheme=meta["scheme"],
        kind=meta["kind"],
        anchors=anchors,
        perturbation=pert,
    )


def load_dataset(path) -> Dataset:
    return read_dataset(Path(path).read_bytes())


def dataset_fingerprint(ds: Dataset) -> str:
    return digest(_f8(ds.states) + _f8(ds.normalizer.mins) + _f8(ds.normalizer.maxs))[:16]


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #


@dataclass
class Checkpoint:
    net_config: NetConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: nd.AdamState | None = None
    dataset_fingerprint: str = ""
    config_hash: str = ""
    normalizer: Normalizer | None = None
    env: str = "particle"
    meta: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @classmethod
    def from_net(cls, net, **kw) -> "Checkpoint":
        return cls(net_config=net.config, params={k: p.data.copy() for k, p in net.params.items()}, **kw)

    def build(self):
        from .model import VelocityNet

        net = VelocityNet(self.net_config)
        load_into(net, self)
        return net


def load_into(net, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into ``net``; shapes and names must match exactly."""
    missing = sorted(set(net.params) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(net.params))
    if missing or extra:
        name = (missing or extra)[0]
        raise ShapeError(f"parameter {name!r} {'missing from checkpoint' if missing else 'not in network'}")
    for name in sorted(net.params):
        if net.params[name].shape != ckpt.params[name].shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape {ckpt.params[name].shape} vs network {net.params[name].shape}")
    for name in sorted(net.params):
        net.params[name].data[...] = ckpt.params[name]


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    names = sorted(ck.params)
    header = {
        "net_config": ck.net_config.to_dict(),
        "params": [[n, list(ck.params[n].shape)] for n in names],
        "step": int(ck.step),
        "dataset_fingerprint": ck.dataset_fingerprint,
        "config_hash": ck.config_hash,
        "env": ck.env,
        "meta": ck.meta,
        "losses": [float(x) for x in ck.losses],
        "normalizer": None if ck.normalizer is None else [ck.normalizer.mins.tolist(), ck.normalizer.maxs.tolist()],
        "adam": None,
    }
    if ck.adam is not None:
        a = ck.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step, "has_moments": bool(a.m)}
    blob = canonical_json(header)
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(blob)), blob]
    parts += [_f8(ck.params[n]) for n in names]
    if ck.adam is not None and ck.adam.m:
        parts += [_f8(ck.adam.m[n]) for n in names]
        parts += [_f8(ck.adam.v[n]) for n in names]
    return b"".join(parts)


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ck))


def read_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    r = _Reader(data, "checkpoint")
    _, version, hlen = _CK_HEADER.unpack(r.take(_CK_HEADER.size))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version} (supported: {FORMAT_VERSION})")
    h = json.loads(r.take(hlen))
    shapes = [(n, tuple(s)) for n, s in h["params"]]
    params = {n: r.array(s) for n, s in shapes}
    adam = None
    if h["adam"] is not None:
        a = h["adam"]
        adam = nd.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        if a["has_moments"]:
            adam.m = {n: r.array(s) for n, s in shapes}
            adam.v = {n: r.array(s) for n, s in shapes}
    r.finish()
    norm = None if h["normalizer"] is None else Normalizer(np.array(h["normalizer"][0]), np.array(h["normalizer"][1]))
    return Checkpoint(
        net_config=NetConfig.from_dict(h["net_config"]),
        params=params,
        step=h["step"],
        adam=adam,
        dataset_fingerprint=h["dataset_fingerprint"],
        config_hash=h["config_hash"],
        normalizer=norm,
        env=h["env"],
        meta=h["meta"],
        losses=h["losses"],
        version=version,
    )


def load_checkpoint(path, expect_fingerprint: str | None = None) -> Checkpoint:
    ck = read_checkpoint(Path(path).read_bytes())
    if expect_fingerprint is not None and ck.dataset_fingerprint and ck.dataset_fingerprint != expect_fingerprint:
        warnings.warn(f"checkpoint {path} was trained on dataset {ck.dataset_fingerprint}, not {expect_fingerprint}", stacklevel=2)
    return ck


# --------------------------------------------------------------------------- #
# run configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run. Defaults follow the reference hyperparameters, except
    ``train_steps`` which is cut to 20k for desk-scale runs."""

    env: str = "particle"
    scheme: Scheme = Scheme.ACTION_NOISE
    noise_std: float = 0.3
    pos_range: float = 0.15
    force_std: float = 0.4
    force_prob: float = 0.05
    n_per_mode: int = 1024
    horizon: int = 64
    arch: Arch = Arch.UNET
    conditioning: Conditioning = Conditioning.INPAINT
    inpaint_rule: str = "clean"
    channel_dims: tuple[int, ...] = (32, 64, 128, 256)
    time_embed_dim: int = 32
    kernel_size: int = 5
    groups: int = 8
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 128
    train_steps: int = 20_000
    lr: float = 2e-4
    lr_schedule: str = "constant"
    batch_size: int = 32
    split_prob: float = 0.5
    checkpoint_every: int = 1000
    inference_steps: int = 10
    collision_weight: float = 0.1
    smoothness_weight: float = 1e-6
    guidance_scale: float = 1.0
    bt_schedule: BtSchedule = BtSchedule.ONE_MINUS_T
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            kind = _FIELD_KINDS[f.name]
            if isinstance(kind, type) and issubclass(kind, str) and kind is not str:
                object.__setattr__(self, f.name, kind(v))
        if self.inpaint_rule not in INPAINT_RULES:
            raise ConfigError(f"inpaint_rule must be one of {', '.join(INPAINT_RULES)}, got {self.inpaint_rule!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}, got {self.lr_schedule!r}")
        if self.env not in ENV_IDS:
            raise ConfigError(f"env must be one of {sorted(ENV_IDS)}, got {self.env!r}")
        for name, lo, hi in _RANGES:
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"{name} must be in [{lo}, {hi}], got {v}")
        object.__setattr__(self, "channel_dims", tuple(int(c) for c in self.channel_dims))
        if any(c < 1 for c in self.channel_dims):
            raise ConfigError("channel_dims entries must be >= 1")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if hasattr(v, "value") else list(v) if isinstance(v, tuple) else v
        return out

    def hash(self) -> str:
        return digest(canonical_json(self.to_dict()))[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def net_config(self, state_dim: int) -> NetConfig:
        return NetConfig(
            arch=self.arch,
            conditioning=self.conditioning,
            state_dim=state_dim,
            horizon=self.horizon,
            channel_dims=self.channel_dims,
            time_embed_dim=self.time_embed_dim,
            kernel_size=self.kernel_size,
            groups=self.groups,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            model_dim=self.model_dim,
            inpaint_rule=self.inpaint_rule,
        )

    @property
    def decay_steps(self) -> int | None:
        """Cosine schedules run the learning rate down to 0 at ``train_steps``."""
        return self.train_steps if self.lr_schedule == "cosine" and self.train_steps > 0 else None

    def augment(self) -> AugmentScheme:
        return AugmentScheme(self.scheme, self.noise_std, self.pos_range, self.force_std, self.force_prob)

    def guidance(self, obstacles=(), scale: float | None = None) -> GuidanceSpec:
        return GuidanceSpec(
            obstacles=tuple(obstacles),
            collision_weight=self.collision_weight,
            smoothness_weight=self.smoothness_weight,
            guidance_scale=self.guidance_scale if scale is None else scale,
            bt_schedule=self.bt_schedule,
        )


LR_SCHEDULES = ("constant", "cosine")

_FIELD_KINDS = {
    "env": str,
    "inpaint_rule": str,
    "lr_schedule": str,
    "scheme": Scheme,
    "arch": Arch,
    "conditioning": Conditioning,
    "bt_schedule": BtSchedule,
    "channel_dims": tuple,
    **{n: int for n in ("n_per_mode", "horizon", "time_embed_dim", "kernel_size", "groups", "n_layers", "n_heads", "model_dim", "train_steps", "batch_size", "checkpoint_every", "inference_steps", "seed")},
    **{n: float for n in ("noise_std", "pos_range", "force_std", "force_prob", "lr", "split_prob", "collision_weight", "smoothness_weight", "guidance_scale")},
}

_INF = float("inf")
_RANGES = (
    ("noise_std", 0.0, _INF),
    ("pos_range", 0.0, _INF),
    ("force_std", 0.0, _INF),
    ("force_prob", 0.0, 1.0),
    ("n_per_mode", 1, 10**7),
    ("horizon", 2, 4096),
    ("time_embed_dim", 2, 4096),
    ("kernel_size", 1, 31),
    ("groups", 1, 4096),
    ("n_layers", 1, 64),
    ("n_heads", 1, 64),
    ("model_dim", 1, 8192),
    ("train_steps", 0, 10**9),
    ("lr", 1e-12, 1.0),
    ("batch_size", 1, 65536),
    ("split_prob", 0.0, 1.0),
    ("checkpoint_every", 1, 10**9),
    ("inference_steps", 1, 10_000),
    ("collision_weight", 0.0, _INF),
    ("smoothness_weight", 0.0, _INF),
    ("guidance_scale", 0.0, _INF),
    ("seed", 0, 2**63 - 1),
)


def _convert(key: str, raw):
    if key not in _FIELD_KINDS:
        valid = ", ".join(sorted(_FIELD_KINDS))
        raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
    kind = _FIELD_KINDS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is tuple:
            return tuple(int(p) for p in text.strip("()[]").replace(",", " ").split())
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return kind(text)
    except ValueError:
        if isinstance(kind, type) and issubclass(kind, str) and kind is not str:
            valid = ", ".join(m.value for m in kind)
            raise ConfigError(f"{key}: {text!r} is not one of {valid}") from None
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file at ``path``, then ``overrides`` (e.g. CLI flags)."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig(**{k: _convert(k, v) for k, v in values.items()})


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
