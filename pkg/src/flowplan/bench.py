"""Stitching and obstacle-avoidance benchmarks, consistency and mode-collapse probes,
plus CSV and SVG emitters for their results."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .flow import GuidanceSpec, PlanRequest, plan
from .model import Conditioning
from .world import STITCH_PAIRS, Obstacle, min_clearance

GOAL_TOLERANCE = 0.1
RELIABLE_RATE = 0.9


# --------------------------------------------------------------------------- #
# stitching
# --------------------------------------------------------------------------- #


@dataclass
class StitchResult:
    errors: np.ndarray
    descriptor: dict = field(default_factory=dict)
    pairs: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


def stitching_error(plans: np.ndarray, starts: np.ndarray, goals: np.ndarray, conditioning: Conditioning) -> np.ndarray:
    """Per-sample squared error of the first/last planned states against the condition.

    Inpainted nets have their endpoints overwritten, so indices 1 and T-2 are
    scored; directly conditioned nets are scored on 0 and T-1. The squared
    error is averaged over state dims and both ends.
    """
    lo, hi = (1, -2) if Conditioning(conditioning) is Conditioning.INPAINT else (0, -1)
    e_start = np.mean((plans[:, lo] - starts) ** 2, axis=-1)
    e_goal = np.mean((plans[:, hi] - goals) ** 2, axis=-1)
    return 0.5 * (e_start + e_goal)


def stitching_benchmark(
    net,
    dataset,
    n_batches: int = 1,
    batch_size: int = 64,
    seed: int = 0,
    n_steps: int = 10,
    pairs=STITCH_PAIRS,
) -> StitchResult:
    """Plan between arm pairs never seen together in training; score the boundary fit."""
    if dataset.anchors is None:
        raise ContractError("stitching benchmark needs a cross dataset (with arm anchors)")
    anchors = dataset.normalizer.normalize(dataset.anchors)
    pairs = np.asarray(pairs)
    rng = np.random.default_rng(seed)
    errors, used = [], []
    for b in range(n_batches):
        sel = pairs[rng.integers(0, len(pairs), size=batch_size)]
        starts, goals = anchors[sel[:, 0]], anchors[sel[:, 1]]
        req = PlanRequest(starts, goals, horizon=dataset.horizon, n_steps=n_steps, seed=int(rng.integers(2**31)))
        x = plan(net, req)
        errors.append(stitching_error(x, starts, goals, net.config.conditioning))
        used.append(sel)
    desc = {"arch": net.config.arch.value, "conditioning": net.config.conditioning.value, "scheme": dataset.scheme}
    return StitchResult(np.concatenate(errors), desc, np.concatenate(used))


def augmentation_benchmark(cells, n_batches: int = 1, batch_size: int = 64, seed: int = 0, n_steps: int = 10) -> list[StitchResult]:
    """``cells`` is an iterable of ``(net, dataset)``, one per augmentation scheme."""
    return [stitching_benchmark(net, ds, n_batches, batch_size, seed, n_steps) for net, ds in cells]


# --------------------------------------------------------------------------- #
# obstacle avoidance
# --------------------------------------------------------------------------- #


@dataclass
class AvoidResult:
    radii: np.ndarray
    success: np.ndarray  # [R] success rate per radius
    guidance_scale: float
    use_split: bool
    n_trials: int
    trials: list = field(default_factory=list)  # (radius, trial, success, goal_err, clearance, max_jump, residual)

    @property
    def max_reliable_radius(self) -> float:
        ok = [r for r, s in zip(self.radii, self.success) if s >= RELIABLE_RATE]
        return float(max(ok)) if ok else 0.0


def avoid_task(env, radius: float):
    """Start, goal and obstacle list of the avoidance task (obstacle midway, radius 0 = none)."""
    start = env.rest_state(np.array([-1.0, 0.0]))
    goal = env.rest_state(np.array([1.0, 0.0]))
    obstacles = (Obstacle((0.0, 0.0), radius),) if radius > 0 else ()
    return start, goal, obstacles


def execute(env, plans_raw: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Run plans through the environment's tracking controller."""
    return env.track(plans_raw, start)


def avoid_trials(net, normalizer, env, spec: GuidanceSpec, radius: float, n_trials: int, use_split: bool, seed: int, n_steps: int = 10, horizon: int = 64, goal_tol: float = GOAL_TOLERANCE):
    start, goal, obstacles = avoid_task(env, radius)
    spec = GuidanceSpec(obstacles, spec.collision_weight, spec.smoothness_weight, spec.guidance_scale if obstacles else 0.0, spec.bt_schedule, spec.margin)
    req = PlanRequest(normalizer.normalize(start), normalizer.normalize(goal), horizon=horizon, n_steps=n_steps, guidance=spec, inference_split=use_split, seed=seed, n_samples=n_trials)
    raw = normalizer.denormalize(plan(net, req, env, normalizer))
    executed = execute(env, raw, start)
    goal_err = np.linalg.norm(executed[:, -1, : env.position_dims] - goal[: env.position_dims], axis=-1)
    clearance = min_clearance(executed, obstacles, env) if obstacles else np.full(n_trials, np.inf)
    success = (goal_err < goal_tol) & (clearance > 0)
    return success, goal_err, clearance, raw, executed


def avoid_sweep(
    net,
    normalizer,
    env,
    base_spec: GuidanceSpec,
    radii,
    n_trials: int = 50,
    use_split: bool = False,
    seed: int = 0,
    n_steps: int = 10,
    horizon: int = 64,
    goal_tol: float = GOAL_TOLERANCE,
) -> AvoidResult:
    """Success rate of guided plans against a centred obstacle of each radius."""
    radii = np.asarray(radii, dtype=np.float64)
    rates, rows = [], []
    for i, r in enumerate(radii):
        success, goal_err, clearance, raw, _ = avoid_trials(net, normalizer, env, base_spec, float(r), n_trials, use_split, seed + 7919 * i, n_steps, horizon, goal_tol)
        rates.append(float(success.mean()))
        for k in range(n_trials):
            c = consistency_probe(raw[k], env)
            rows.append((float(r), k, bool(success[k]), float(goal_err[k]), float(clearance[k]), c.max_jump, c.residual))
    return AvoidResult(radii, np.array(rates), base_spec.guidance_scale, use_split, n_trials, rows)


# --------------------------------------------------------------------------- #
# probes
# --------------------------------------------------------------------------- #


@dataclass
class Consistency:
    max_jump: float
    residual: float


def consistency_probe(states: np.ndarray, env=None) -> Consistency:
    """Largest inter-step state change and, for the particle, the largest violation of
    ``p[k+1] = p[k] + dt * v[k+1]`` (the integrator's position update)."""
    s = np.asarray(states, dtype=np.float64)
    if s.shape[-2] < 2:
        return Consistency(0.0, 0.0)
    jump = float(np.max(np.linalg.norm(np.diff(s, axis=-2), axis=-1)))
    residual = 0.0
    if env is not None and env.name == "particle":
        pred = s[..., :-1, :2] + env.dt * s[..., 1:, 2:]
        residual = float(np.max(np.linalg.norm(s[..., 1:, :2] - pred, axis=-1)))
    return Consistency(jump, residual)


@dataclass
class CollapseProfile:
    steps: list[int]
    bend: np.ndarray
    translate: np.ndarray


def bend_translate(raw_plans: np.ndarray) -> tuple[float, float]:
    """Lateral (y) deviation at the midpoint minus that near the ends, and the near-end deviation.

    A plan that bends around the obstacle has a large midpoint deviation with
    its near-end states on the line; one that rigidly translates moves both.
    """
    t = raw_plans.shape[-2]
    y = np.abs(raw_plans[..., 1])
    ends = 0.5 * (y[..., 1] + y[..., t - 2])
    return float(np.mean(y[..., t // 2] - ends)), float(np.mean(ends))


def mode_collapse_probe(
    nets,
    normalizer,
    env,
    spec: GuidanceSpec,
    radius: float = 0.3,
    n_trials: int = 16,
    seed: int = 0,
    n_steps: int = 10,
    horizon: int = 64,
    steps=None,
) -> CollapseProfile:
    """Bend and translate metrics of guided plans for each checkpoint in ``nets``."""
    bend, trans = [], []
    start, goal, obstacles = avoid_task(env, radius)
    for net in nets:
        guided = GuidanceSpec(obstacles, spec.collision_weight, spec.smoothness_weight, spec.guidance_scale if obstacles else 0.0, spec.bt_schedule, spec.margin)
        req = PlanRequest(normalizer.normalize(start), normalizer.normalize(goal), horizon=horizon, n_steps=n_steps, guidance=guided, seed=seed, n_samples=n_trials)
        raw = normalizer.denormalize(plan(net, req, env, normalizer))
        b, tr = bend_translate(raw)
        bend.append(b)
        trans.append(tr)
    steps = list(range(len(bend))) if steps is None else list(steps)
    return CollapseProfile(steps, np.array(bend), np.array(trans))


def late_degradation(values, window: float = 0.5) -> float:
    """Relative drop from the peak to the minimum within the final ``window`` of a series."""
    v = np.asarray(values, dtype=np.float64)
    tail = v[int(np.floor(len(v) * (1 - window))) :]
    peak = tail.max()
    if peak <= 0:
        return 1.0
    return float((peak - tail.min()) / peak)


# --------------------------------------------------------------------------- #
# output
# --------------------------------------------------------------------------- #


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def _cell_note(desc: dict) -> str:
    # no external baseline is reimplemented; DIRECT-UNet is its closest in-repo stand-in
    return "mpd_proxy" if (desc.get("arch"), desc.get("conditioning")) == ("unet", "direct") else ""


def stitch_csv(results: list[StitchResult]) -> str:
    """One summary row per cell: ``arch, conditioning, scheme, n, mean, std, note``."""
    rows = []
    for r in results:
        d = r.descriptor
        rows.append((d.get("arch", ""), d.get("conditioning", ""), d.get("scheme", ""), len(r.errors), r.mean, r.std, _cell_note(d)))
    return csv_text(("arch", "conditioning", "scheme", "n", "mean", "std", "note"), rows)


def stitch_trials_csv(results: list[StitchResult]) -> str:
    """One row per planned sample: the cell, the arm pair and its error."""
    rows = []
    for r in results:
        d = r.descriptor
        pairs = r.pairs if r.pairs is not None else np.full((len(r.errors), 2), -1)
        for k, (e, (a, b)) in enumerate(zip(r.errors, pairs)):
            rows.append((d.get("arch", ""), d.get("conditioning", ""), d.get("scheme", ""), k, int(a), int(b), float(e)))
    return csv_text(("arch", "conditioning", "scheme", "sample", "start_arm", "goal_arm", "error"), rows)


def avoid_csv(results: list[AvoidResult]) -> str:
    """Per-radius ``rate`` rows, per-plan ``trial`` rows and one ``max_reliable`` row per sweep."""
    rows = []
    for res in results:
        tag = (res.guidance_scale, int(res.use_split))
        for r, s in zip(res.radii, res.success):
            rows.append(("rate", *tag, r, "", s, "", "", "", ""))
        for r, k, ok, g, c, j, q in res.trials:
            rows.append(("trial", *tag, r, k, int(ok), g, c, j, q))
        rows.append(("max_reliable", *tag, res.max_reliable_radius, "", "", "", "", "", ""))
    header = ("row", "guidance_scale", "split", "radius", "trial", "success", "goal_err", "clearance", "max_jump", "residual")
    return csv_text(header, rows)


def probe_csv(profile: CollapseProfile) -> str:
    rows = [(s, b, t) for s, b, t in zip(profile.steps, profile.bend, profile.translate)]
    return csv_text(("step", "bend", "translate"), rows)


def read_csv(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ContractError("empty CSV")
    return rows[0], rows[1:]


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class Svg:
    """Minimal SVG canvas in data coordinates."""

    def __init__(self, xlim, ylim, width: int = 480, height: int = 360, pad: int = 40):
        self.xlim, self.ylim = xlim, ylim
        self.w, self.h, self.pad = width, height, pad
        self.items: list[str] = []

    def _x(self, x) -> float:
        lo, hi = self.xlim
        return self.pad + (x - lo) / (hi - lo or 1.0) * (self.w - 2 * self.pad)

    def _y(self, y) -> float:
        lo, hi = self.ylim
        return self.h - self.pad - (y - lo) / (hi - lo or 1.0) * (self.h - 2 * self.pad)

    def polyline(self, xs, ys, color: str = "#000", width: float = 1.5, opacity: float = 1.0) -> None:
        pts = " ".join(f"{self._x(x):.2f},{self._y(y):.2f}" for x, y in zip(xs, ys))
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>')

    def circle(self, x, y, r_data: float | None = None, r_px: float = 4.0, color: str = "#000", fill: str = "none") -> None:
        r = r_px if r_data is None else abs(self._x(r_data) - self._x(0))
        self.items.append(f'<circle cx="{self._x(x):.2f}" cy="{self._y(y):.2f}" r="{r:.2f}" stroke="{color}" fill="{fill}"/>')

    def text(self, x_px: float, y_px: float, s: str, size: int = 12, anchor: str = "start") -> None:
        s = s.replace("&", "&amp;").replace("<", "&lt;")
        self.items.append(f'<text x="{x_px:.1f}" y="{y_px:.1f}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{s}</text>')

    def axes(self, xlabel: str = "", ylabel: str = "") -> None:
        x0, x1 = self._x(self.xlim[0]), self._x(self.xlim[1])
        y0, y1 = self._y(self.ylim[0]), self._y(self.ylim[1])
        self.items.append(f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" fill="none" stroke="#888"/>')
        self.text(x0, y0 + 15, f"{self.xlim[0]:.3g}")
        self.text(x1, y0 + 15, f"{self.xlim[1]:.3g}", anchor="end")
        self.text(x0 - 4, y0, f"{self.ylim[0]:.3g}", anchor="end")
        self.text(x0 - 4, y1 + 10, f"{self.ylim[1]:.3g}", anchor="end")
        self.text((x0 + x1) / 2, self.h - 8, xlabel, anchor="middle")
        self.text(12, (y0 + y1) / 2, ylabel)

    def render(self) -> str:
        body = "\n".join(self.items)
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" viewBox="0 0 {self.w} {self.h}">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'


def trajectory_svg(paths, obstacles=(), starts=(), goals=(), title: str = "") -> str:
    """Planar paths (each ``[T, 2]``) with obstacles and endpoint markers."""
    pts = [np.asarray(p)[:, :2] for p in paths]
    allp = np.concatenate(pts + [np.zeros((1, 2))]) if pts else np.zeros((1, 2))
    lo = allp.min(0) - 0.2
    hi = allp.max(0) + 0.2
    for ob in obstacles:
        lo = np.minimum(lo, np.asarray(ob.center) - ob.radius)
        hi = np.maximum(hi, np.asarray(ob.center) + ob.radius)
    span = max(hi - lo)
    mid = (hi + lo) / 2
    svg = Svg((mid[0] - span / 2, mid[0] + span / 2), (mid[1] - span / 2, mid[1] + span / 2), 420, 420)
    svg.axes("x", "y")
    for ob in obstacles:
        svg.circle(ob.center[0], ob.center[1], r_data=ob.radius, color="#444", fill="#ddd")
    for i, p in enumerate(pts):
        svg.polyline(p[:, 0], p[:, 1], PALETTE[i % len(PALETTE)], 1.2, 0.7)
    for s in starts:
        svg.circle(s[0], s[1], color="#000", fill="#000")
    for g in goals:
        svg.circle(g[0], g[1], r_px=6, color="#000")
    if title:
        svg.text(svg.w / 2, 16, title, 13, "middle")
    return svg.render()


def curves_svg(series: dict, xlabel: str, ylabel: str, title: str = "", ylim=None) -> str:
    """Line plot of ``{label: (xs, ys)}``."""
    xs = np.concatenate([np.asarray(v[0], dtype=float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], dtype=float) for v in series.values()])
    ylim = ylim or (float(min(0.0, ys.min())), float(ys.max() if ys.max() > 0 else 1.0))
    svg = Svg((float(xs.min()), float(xs.max())), ylim)
    svg.axes(xlabel, ylabel)
    for i, (label, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        svg.polyline(x, y, color, 2.0)
        svg.items.append(f'<rect x="{svg.w - 150}" y="{20 + 16 * i}" width="10" height="10" fill="{color}"/>')
        svg.text(svg.w - 135, 29 + 16 * i, str(label), 11)
    if title:
        svg.text(svg.w / 2, 16, title, 13, "middle")
    return svg.render()


def bars_svg(labels, means, stds, ylabel: str, title: str = "") -> str:
    n = len(labels)
    top = float(max(m + s for m, s in zip(means, stds))) if n else 1.0
    svg = Svg((0.0, float(n)), (0.0, top * 1.1 or 1.0))
    svg.axes("", ylabel)
    for i, (lab, m, s) in enumerate(zip(labels, means, stds)):
        x0, x1 = svg._x(i + 0.15), svg._x(i + 0.85)
        y0, y1 = svg._y(0), svg._y(m)
        svg.items.append(f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        svg.polyline([i + 0.5, i + 0.5], [m, m + s], "#000", 1.0)
        svg.text((x0 + x1) / 2, svg.h - 22, str(lab), 10, "middle")
    if title:
        svg.text(svg.w / 2, 16, title, 13, "middle")
    return svg.render()
