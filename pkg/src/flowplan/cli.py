"""Command-line entry point: ``flowplan <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
All numeric flag values are in environment units; normalization is internal.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench
from .errors import FlowPlanError, NumericError
from .flow import PlanRequest, Trainer, plan
from .model import Arch, Conditioning, VelocityNet
from .store import (
    Checkpoint,
    atomic_write,
    dataset_fingerprint,
    load_checkpoint,
    load_dataset,
    parse_config,
    save_checkpoint,
    save_dataset,
)
from .world import (
    ARM_NAMES,
    Obstacle,
    make_cross_dataset,
    make_env,
    make_straight_dataset,
    min_clearance,
    noise_cross_correlation,
)


class UsageError(FlowPlanError):
    """Bad or missing command inputs (exit code 2)."""


def _write(path: Path, text: str) -> None:
    atomic_write(path, text.encode())


def _config(args, **overrides):
    flags = {"seed": args.seed, **overrides}
    return parse_config(args.config, flags)


def _floats(text: str, n: int | None = None, what: str = "value") -> np.ndarray:
    try:
        vals = np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise UsageError(f"{what}: cannot parse {text!r} as comma-separated numbers") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _env_for(ck: Checkpoint):
    return make_env(ck.env)


# --------------------------------------------------------------------------- #
# gen-data
# --------------------------------------------------------------------------- #


def cmd_gen_data(args) -> int:
    cfg = _config(args, env=args.env, scheme=args.scheme, noise_std=args.noise_std, horizon=args.horizon)
    env = make_env(cfg.env)
    rng = np.random.default_rng(cfg.seed)
    if args.kind == "cross":
        n = args.n if args.n is not None else 4 * cfg.n_per_mode
        if n % 4:
            raise UsageError(f"--n must be a multiple of 4 for the cross dataset (one share per direction), got {n}")
        ds = make_cross_dataset(env, n // 4, cfg.augment(), rng, horizon=cfg.horizon)
    else:
        n = args.n if args.n is not None else cfg.n_per_mode
        ds = make_straight_dataset(env, n, cfg.augment(), rng, horizon=cfg.horizon)
    out = Path(args.out_dir)
    save_dataset(out / "data.fpds", ds, config_hash=cfg.hash())
    modes = {}
    for a, b in ds.labels:
        key = f"{ARM_NAMES[a]}->{ARM_NAMES[b]}" if a >= 0 else "straight"
        modes[key] = modes.get(key, 0) + 1
    summary = {
        "count": len(ds),
        "env": ds.env,
        "scheme": ds.scheme,
        "kind": ds.kind,
        "horizon": ds.horizon,
        "mode_counts": dict(sorted(modes.items())),
        "normalizer": {"mins": ds.normalizer.mins.tolist(), "maxs": ds.normalizer.maxs.tolist()},
        "noise_cross_correlation": None if ds.perturbation is None else noise_cross_correlation(ds.perturbation),
        "fingerprint": dataset_fingerprint(ds),
        "config_hash": cfg.hash(),
    }
    _write(out / "data.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} trajectories to {out / 'data.fpds'}")
    return 0


# --------------------------------------------------------------------------- #
# train
# --------------------------------------------------------------------------- #


def _ckpt_name(step: int) -> str:
    return f"ckpt_{step:07d}.fpck"


def train_run(cfg, ds, out: Path, steps: int, resume: Path | None = None, log=print) -> Checkpoint:
    """Train one net on ``ds``; periodic and final checkpoints plus ``loss.csv`` go to ``out``."""
    fp = dataset_fingerprint(ds)
    meta = {"split_prob": cfg.split_prob, "scheme": ds.scheme, "kind": ds.kind, "seed": cfg.seed}
    if resume is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ck = load_checkpoint(resume, expect_fingerprint=fp)
        for w in caught:
            log(f"warning: {w.message}", file=sys.stderr)
        net = ck.build()
        losses = list(ck.losses)
        trainer = Trainer(net, ds.normalized(), batch_size=cfg.batch_size, split_prob=cfg.split_prob, lr=cfg.lr, decay_steps=cfg.decay_steps and ck.step + steps, adam=ck.adam, rng=np.random.default_rng([cfg.seed, ck.step]))
    else:
        net = VelocityNet(cfg.net_config(ds.state_dim), seed=cfg.seed)
        losses = []
        trainer = Trainer(net, ds.normalized(), batch_size=cfg.batch_size, split_prob=cfg.split_prob, seed=cfg.seed, lr=cfg.lr, decay_steps=cfg.decay_steps)

    def snapshot() -> Checkpoint:
        return Checkpoint.from_net(
            net,
            step=trainer.step,
            adam=trainer.adam,
            dataset_fingerprint=fp,
            config_hash=cfg.hash(),
            normalizer=ds.normalizer,
            env=ds.env,
            meta=meta,
            losses=losses + trainer.losses,
        )

    def on_step(tr):
        if tr.step % cfg.checkpoint_every == 0:
            save_checkpoint(out / _ckpt_name(tr.step), snapshot())

    out.mkdir(parents=True, exist_ok=True)
    if trainer.step == 0:
        save_checkpoint(out / _ckpt_name(0), snapshot())
    try:
        trainer.train(steps, on_step)
    finally:
        all_losses = losses + trainer.losses
        first = trainer.step - len(all_losses) + 1
        _write(out / "loss.csv", bench.csv_text(("step", "loss"), [(first + i, v) for i, v in enumerate(all_losses)]))
    final = snapshot()
    save_checkpoint(out / "final.fpck", final)
    return final


def cmd_train(args) -> int:
    data = _need(args.data, "--data")
    cfg = _config(
        args,
        arch=args.arch,
        conditioning=args.conditioning,
        split_prob=args.split_prob,
        train_steps=args.steps,
        lr=args.lr,
        lr_schedule=args.lr_schedule,
        batch_size=args.batch_size,
        checkpoint_every=args.checkpoint_every,
    )
    ds = load_dataset(data)
    resume = _need(args.resume, "--resume") if args.resume else None
    ck = train_run(cfg, ds, Path(args.out_dir), cfg.train_steps, resume)
    print(f"trained to step {ck.step}; final loss {ck.losses[-1] if ck.losses else float('nan'):.6g}")
    return 0


# --------------------------------------------------------------------------- #
# plan
# --------------------------------------------------------------------------- #


def _state(env, values: np.ndarray, what: str) -> np.ndarray:
    if len(values) == env.position_dims:
        return env.rest_state(values)
    if len(values) == env.state_dim:
        return values
    raise UsageError(f"{what}: expected {env.position_dims} position or {env.state_dim} state values, got {len(values)}")


def _obstacles(specs) -> tuple[Obstacle, ...]:
    out = []
    for s in specs or ():
        cx, cy, r = _floats(s, 3, "--obstacle")
        out.append(Obstacle((cx, cy), r))
    return tuple(out)


def _workspace_path(env, states: np.ndarray) -> np.ndarray:
    # particle position, or the arm's end effector
    return env.points_np(states)[..., -1, :]


def cmd_plan(args) -> int:
    ck = load_checkpoint(_need(args.ckpt, "--ckpt"))
    cfg = _config(args, inference_steps=args.steps, guidance_scale=args.guidance_scale)
    env = _env_for(ck)
    norm = ck.normalizer
    start = _state(env, _floats(args.start, what="--start"), "--start")
    goal = _state(env, _floats(args.goal, what="--goal"), "--goal")
    obstacles = _obstacles(args.obstacle)
    for ob in obstacles:
        if min_clearance(start[None, None], (ob,), env)[0] <= 0:
            print(f"warning: start lies inside obstacle at {ob.center} (r={ob.radius}); planning anyway", file=sys.stderr)
    guidance = cfg.guidance(obstacles) if obstacles else None
    net = ck.build()
    req = PlanRequest(
        norm.normalize(start),
        norm.normalize(goal),
        horizon=args.horizon or ck.net_config.horizon,
        n_steps=cfg.inference_steps,
        guidance=guidance,
        inference_split=args.split,
        seed=cfg.seed,
        n_samples=args.n_samples,
    )
    raw = norm.denormalize(plan(net, req, env, norm))
    out = Path(args.out_dir)
    rows = [(k, t, *raw[k, t]) for k in range(raw.shape[0]) for t in range(raw.shape[1])]
    header = ("sample", "t", *(f"s{i}" for i in range(raw.shape[2])))
    _write(out / "plan.csv", bench.csv_text(header, rows))
    meta = {"env": ck.env, "obstacles": [[*ob.center, ob.radius] for ob in obstacles]}
    _write(out / "plan.json", json.dumps(meta, sort_keys=True) + "\n")
    _write(out / "plan.svg", _plan_svg(env, raw, obstacles))
    print(f"wrote {raw.shape[0]} plan(s) of {raw.shape[1]} steps to {out / 'plan.csv'}")
    return 0


def _plan_svg(env, raw: np.ndarray, obstacles) -> str:
    path = _workspace_path(env, raw)
    return bench.trajectory_svg(list(path), obstacles, starts=path[:1, 0], goals=path[:1, -1], title="plan")


# --------------------------------------------------------------------------- #
# bench-stitch
# --------------------------------------------------------------------------- #


def cmd_bench_stitch(args) -> int:
    data = _need(args.data, "--data")
    ds = load_dataset(data)
    if ds.anchors is None:
        raise UsageError(f"{data} is not a cross dataset; stitching needs arm anchors")
    cfg = _config(args, train_steps=args.steps, inference_steps=args.inference_steps)
    out = Path(args.out_dir)
    nets = []
    if args.ckpt:
        for p in args.ckpt:
            nets.append(load_checkpoint(_need(p, "--ckpt"), expect_fingerprint=dataset_fingerprint(ds)).build())
    else:
        for arch in (Arch.UNET, Arch.TRANSFORMER):
            for cond in (Conditioning.INPAINT, Conditioning.DIRECT):
                cell = cfg.replace(arch=arch, conditioning=cond)
                name = f"{arch.value}_{cond.value}"
                print(f"training {name} for {cell.train_steps} steps")
                nets.append(train_run(cell, ds, out / name, cell.train_steps).build())
    results = [
        bench.stitching_benchmark(net, ds, args.batches, args.batch_size, cfg.seed, cfg.inference_steps)
        for net in nets
    ]
    _write(out / "stitch.csv", bench.stitch_csv(results))
    _write(out / "stitch_trials.csv", bench.stitch_trials_csv(results))
    _write(out / "stitch.svg", _stitch_svg(bench.stitch_csv(results)))
    for r in results:
        print(f"{r.descriptor['arch']:>11} {r.descriptor['conditioning']:>7}: {r.mean:.4f} +- {r.std:.4f}")
    return 0


def _stitch_svg(text: str) -> str:
    header, rows = bench.read_csv(text)
    col = {h: i for i, h in enumerate(header)}
    labels = [f"{r[col['arch']]}/{r[col['conditioning']]}/{r[col['scheme']]}" for r in rows]
    return bench.bars_svg(labels, [float(r[col["mean"]]) for r in rows], [float(r[col["std"]]) for r in rows], "stitching error", "stitching error (mean, +std)")


# --------------------------------------------------------------------------- #
# bench-avoid
# --------------------------------------------------------------------------- #


def _avoid_cell(job):
    ckpt_path, cfg, scale, use_split, radii, n_trials = job
    ck = load_checkpoint(ckpt_path)
    env = _env_for(ck)
    return bench.avoid_sweep(ck.build(), ck.normalizer, env, cfg.guidance(scale=scale), radii, n_trials, use_split, cfg.seed, cfg.inference_steps, ck.net_config.horizon)


def cmd_bench_avoid(args) -> int:
    ckpt = _need(args.ckpt, "--ckpt")
    cfg = _config(args, inference_steps=args.inference_steps)
    radii = _floats(args.radii, what="--radii")
    scales = _floats(args.scales, what="--scales")
    modes = {"fp": [False], "split": [True], "both": [False, True]}[args.mode]
    jobs = [(str(ckpt), cfg, float(s), m, radii, args.trials) for s in scales for m in modes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_avoid_cell, jobs))
    else:
        results = [_avoid_cell(j) for j in jobs]
    out = Path(args.out_dir)
    text = bench.avoid_csv(results)
    _write(out / "avoid.csv", text)
    _write(out / "avoid.svg", _avoid_svg(text))
    for r in results:
        print(f"scale {r.guidance_scale:g} {'split' if r.use_split else 'fp':>5}: max reliable radius {r.max_reliable_radius:g}")
    return 0


def _avoid_svg(text: str) -> str:
    header, rows = bench.read_csv(text)
    col = {h: i for i, h in enumerate(header)}
    series: dict = {}
    for r in rows:
        if r[col["row"]] != "rate":
            continue
        label = f"{'FP+split' if r[col['split']] == '1' else 'FP'} scale {r[col['guidance_scale']]}"
        xs, ys = series.setdefault(label, ([], []))
        xs.append(float(r[col["radius"]]))
        ys.append(float(r[col["success"]]))
    if not series:
        raise UsageError("avoid CSV has no rate rows")
    return bench.curves_svg(series, "obstacle radius", "success rate", "collision-free success", ylim=(0.0, 1.0))


# --------------------------------------------------------------------------- #
# probe
# --------------------------------------------------------------------------- #


def _checkpoint_series(args) -> list[Path]:
    paths = [Path(p) for p in args.ckpt or ()]
    if args.ckpt_dir:
        d = _need(args.ckpt_dir, "--ckpt-dir")
        paths += sorted(d.glob("ckpt_*.fpck"))
    if not paths:
        raise UsageError("probe needs --ckpt or --ckpt-dir with saved checkpoints")
    for p in paths:
        _need(p, "--ckpt")
    return paths


def cmd_probe(args) -> int:
    paths = _checkpoint_series(args)
    cfg = _config(args, inference_steps=args.inference_steps, guidance_scale=args.guidance_scale)
    cks = [load_checkpoint(p) for p in paths]
    cks.sort(key=lambda c: c.step)
    env = _env_for(cks[-1])
    norm = cks[-1].normalizer
    prof = bench.mode_collapse_probe(
        (c.build() for c in cks), norm, env, cfg.guidance(), args.radius, args.trials, cfg.seed, cfg.inference_steps, cks[-1].net_config.horizon, steps=[c.step for c in cks]
    )
    out = Path(args.out_dir)
    text = bench.probe_csv(prof)
    _write(out / "probe.csv", text)
    _write(out / "probe.svg", _probe_svg(text))
    deg = bench.late_degradation(prof.bend)
    _write(out / "probe.json", json.dumps({"late_bend_degradation": deg, "n_checkpoints": len(cks)}, sort_keys=True) + "\n")
    print(f"bend degradation over the final half of {len(cks)} checkpoints: {deg:.3f}")
    return 0


def _probe_svg(text: str) -> str:
    header, rows = bench.read_csv(text)
    if not rows:
        raise UsageError("probe CSV has no rows")
    steps = [float(r[0]) for r in rows]
    series = {"bend": (steps, [float(r[1]) for r in rows]), "translate": (steps, [float(r[2]) for r in rows])}
    return bench.curves_svg(series, "training step", "lateral deviation", "bend vs translate")


# --------------------------------------------------------------------------- #
# plot
# --------------------------------------------------------------------------- #


def _loss_svg(text: str) -> str:
    _, rows = bench.read_csv(text)
    if not rows:
        raise UsageError("loss CSV has no rows")
    steps = np.array([float(r[0]) for r in rows])
    loss = np.array([float(r[1]) for r in rows])
    w = max(1, len(loss) // 100)
    smooth = np.convolve(loss, np.ones(w) / w, mode="valid")
    return bench.curves_svg({"loss": (steps[w - 1 :], smooth)}, "step", "CFM loss", "training loss")


def _plan_csv_svg(text: str, meta_path: Path) -> str:
    _, rows = bench.read_csv(text)
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"env": "particle", "obstacles": []}
    env = make_env(meta["env"])
    arr = np.array([[float(v) for v in r] for r in rows])
    n = int(arr[:, 0].max()) + 1
    raw = arr[:, 2:].reshape(n, -1, arr.shape[1] - 2)
    return _plan_svg(env, raw, tuple(Obstacle((cx, cy), r) for cx, cy, r in meta["obstacles"]))


PLOTTERS = {
    "stitch.csv": _stitch_svg,
    "avoid.csv": _avoid_svg,
    "probe.csv": _probe_svg,
    "loss.csv": _loss_svg,
}


def cmd_plot(args) -> int:
    out = Path(args.out_dir)
    if not out.is_dir():
        raise UsageError(f"{out} is not a directory")
    made = 0
    for csv_path in sorted(out.rglob("*.csv")):
        if csv_path.name == "plan.csv":
            svg = _plan_csv_svg(csv_path.read_text(), csv_path.with_name("plan.json"))
        elif csv_path.name in PLOTTERS:
            svg = PLOTTERS[csv_path.name](csv_path.read_text())
        else:
            continue
        _write(csv_path.with_suffix(".svg"), svg)
        made += 1
    if not made:
        raise UsageError(f"no plottable CSV files (stitch, avoid, probe, loss, plan) under {out}")
    print(f"wrote {made} SVG file(s)")
    return 0


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #

_CSV_HELP = {
    "gen-data": "writes data.fpds and data.json (count, mode counts, normalization stats, noise cross-correlation)",
    "train": "writes ckpt_<step>.fpck every checkpoint_every steps, final.fpck, and loss.csv with columns step,loss",
    "plan": "writes plan.csv with columns sample,t,s0..s<D-1> (environment units), plan.json and plan.svg",
    "bench-stitch": "writes stitch.csv (arch,conditioning,scheme,n,mean,std,note; one row per cell), "
    "stitch_trials.csv (arch,conditioning,scheme,sample,start_arm,goal_arm,error) and stitch.svg",
    "bench-avoid": "writes avoid.csv (row,guidance_scale,split,radius,trial,success,goal_err,clearance,max_jump,residual; "
    "row is rate, trial or max_reliable) and avoid.svg",
    "probe": "writes probe.csv (step,bend,translate), probe.json (late bend degradation) and probe.svg",
    "plot": "regenerates <name>.svg beside every stitch/avoid/probe/loss/plan CSV under --out-dir",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file; flags override it")
    common.add_argument("--seed", type=int, help="random seed (default from config, 0)")
    common.add_argument("--out-dir", default=".", help="output directory (default: current)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for benchmark trials")

    p = argparse.ArgumentParser(prog="flowplan", description="Flow-matching trajectory planner with stitching, guidance and splitting.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, text):
        sp = sub.add_parser(name, parents=[common], help=text, description=f"{text}. Output: {_CSV_HELP[name]}.")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a trajectory dataset")
    g.add_argument("--env", help="particle or arm")
    g.add_argument("--scheme", help="augmentation: none, action_noise, same_noise, random_pos, random_forces")
    g.add_argument("--kind", choices=("cross", "straight"), default="cross", help="cross (stitching) or straight (avoidance) dataset")
    g.add_argument("--n", type=int, help="number of trajectories")
    g.add_argument("--noise-std", type=float, help="action noise std as a fraction of the control limit")
    g.add_argument("--horizon", type=int, help="trajectory length")

    t = add("train", cmd_train, "train a velocity network")
    t.add_argument("--data", help="dataset file from gen-data")
    t.add_argument("--arch", help="unet or transformer")
    t.add_argument("--conditioning", help="inpaint or direct")
    t.add_argument("--split-prob", type=float, help="probability of a half-length training batch")
    t.add_argument("--steps", type=int, help="training steps to run")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=("constant", "cosine"), help="cosine decays the rate to 0 at --steps")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    pl = add("plan", cmd_plan, "plan one or more trajectories")
    pl.add_argument("--ckpt", help="checkpoint file")
    pl.add_argument("--start", required=True, help="start position (or full state), comma separated")
    pl.add_argument("--goal", required=True, help="goal position (or full state), comma separated")
    pl.add_argument("--obstacle", action="append", help="cx,cy,r circle; repeatable; enables guidance")
    pl.add_argument("--guidance-scale", type=float)
    pl.add_argument("--split", action="store_true", help="use inference-time splitting")
    pl.add_argument("--steps", type=int, help="Euler steps")
    pl.add_argument("--horizon", type=int, help="plan length (default: the net's)")
    pl.add_argument("--n-samples", type=int, default=1)

    s = add("bench-stitch", cmd_bench_stitch, "stitching error over an arch x conditioning grid")
    s.add_argument("--data", help="cross dataset file")
    s.add_argument("--ckpt", action="append", help="checkpoint(s) to score; if omitted, train the four grid cells")
    s.add_argument("--steps", type=int, help="training steps per grid cell")
    s.add_argument("--batches", type=int, default=1)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--inference-steps", type=int)

    a = add("bench-avoid", cmd_bench_avoid, "success rate against obstacle radius")
    a.add_argument("--ckpt", help="checkpoint trained on a straight dataset")
    a.add_argument("--radii", default="0,0.1,0.2,0.3,0.4,0.5", help="comma-separated radii")
    a.add_argument("--scales", default="1", help="comma-separated guidance scales")
    a.add_argument("--mode", choices=("fp", "split", "both"), default="both")
    a.add_argument("--trials", type=int, default=50)
    a.add_argument("--inference-steps", type=int)

    pr = add("probe", cmd_probe, "bend/translate profile over a checkpoint series")
    pr.add_argument("--ckpt", action="append", help="checkpoint file; repeatable")
    pr.add_argument("--ckpt-dir", help="directory of ckpt_*.fpck from train")
    pr.add_argument("--radius", type=float, default=0.3)
    pr.add_argument("--trials", type=int, default=16)
    pr.add_argument("--guidance-scale", type=float)
    pr.add_argument("--inference-steps", type=int)

    add("plot", cmd_plot, "regenerate SVGs from CSVs in --out-dir")
    return p


_VECTOR_FLAGS = ("--start", "--goal", "--obstacle", "--radii", "--scales")


def _join_negative_values(argv: list[str]) -> list[str]:
    # let "--start -1,0" through; argparse would read "-1,0" as an option
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        nxt = argv[i + 1] if i + 1 < len(argv) else ""
        if tok in _VECTOR_FLAGS and len(nxt) > 1 and nxt[0] == "-" and (nxt[1].isdigit() or nxt[1] == "."):
            out.append(f"{tok}={nxt}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_negative_values(list(sys.argv[1:] if argv is None else argv)))
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FlowPlanError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
