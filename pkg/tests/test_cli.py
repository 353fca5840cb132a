import json

import numpy as np
import pytest

from flowplan.bench import read_csv
from flowplan.cli import main
from flowplan.store import load_checkpoint, load_dataset, save_dataset

TINY = """\
channel_dims = 8, 16
time_embed_dim = 8
groups = 4
horizon = 32
checkpoint_every = 3
batch_size = 8
lr = 1e-3
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    cfg = str(d / "tiny.cfg")
    assert main(["gen-data", "--config", cfg, "--n", "16", "--out-dir", str(d / "data")]) == 0
    assert main(["gen-data", "--config", cfg, "--kind", "straight", "--n", "8", "--out-dir", str(d / "straight")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--steps", "6", "--out-dir", str(d / "run")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "straight" / "data.fpds"), "--steps", "3", "--out-dir", str(d / "srun")]) == 0
    return d, cfg


class TestGenData:
    def test_count_and_summary(self, work):
        d, _ = work
        ds = load_dataset(d / "data" / "data.fpds")
        assert len(ds) == 16
        summary = json.loads((d / "data" / "data.json").read_text())
        assert summary["count"] == 16
        assert summary["mode_counts"] == {"bottom->top": 4, "left->right": 4, "right->left": 4, "top->bottom": 4}
        assert summary["noise_cross_correlation"] < 0.2
        assert len(summary["normalizer"]["mins"]) == 4

    def test_bad_scheme_lists_choices(self, capsys):
        assert main(["gen-data", "--scheme", "bogus"]) == 2
        err = capsys.readouterr().err
        assert "action_noise" in err and "same_noise" in err

    def test_cross_count_must_split_evenly(self, tmp_path):
        assert main(["gen-data", "--n", "10", "--out-dir", str(tmp_path)]) == 2

    def test_same_seed_same_file(self, work, tmp_path):
        _, cfg = work
        for name in ("a", "b"):
            assert main(["gen-data", "--config", cfg, "--n", "8", "--seed", "4", "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "data.fpds").read_bytes() == (tmp_path / "b" / "data.fpds").read_bytes()
        assert main(["gen-data", "--config", cfg, "--n", "8", "--seed", "5", "--out-dir", str(tmp_path / "c")]) == 0
        assert (tmp_path / "a" / "data.fpds").read_bytes() != (tmp_path / "c" / "data.fpds").read_bytes()


class TestTrain:
    def test_outputs(self, work):
        d, _ = work
        names = sorted(p.name for p in (d / "run").glob("*.fpck"))
        assert names == ["ckpt_0000000.fpck", "ckpt_0000003.fpck", "ckpt_0000006.fpck", "final.fpck"]
        header, rows = read_csv((d / "run" / "loss.csv").read_text())
        assert header == ["step", "loss"] and [r[0] for r in rows] == [str(i) for i in range(1, 7)]
        ck = load_checkpoint(d / "run" / "final.fpck")
        assert ck.step == 6 and ck.meta["split_prob"] == 0.5 and ck.env == "particle"

    def test_split_flag_recorded(self, work, tmp_path):
        d, cfg = work
        assert main(["train", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--steps", "1", "--split-prob", "0", "--out-dir", str(tmp_path)]) == 0
        assert load_checkpoint(tmp_path / "final.fpck").meta["split_prob"] == 0.0

    def test_resume_continues_counter(self, work, tmp_path):
        d, cfg = work
        args = ["train", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--steps", "4", "--out-dir", str(tmp_path)]
        assert main([*args, "--resume", str(d / "run" / "final.fpck")]) == 0
        ck = load_checkpoint(tmp_path / "final.fpck")
        assert ck.step == 10 and len(ck.losses) == 10
        _, rows = read_csv((tmp_path / "loss.csv").read_text())
        assert [int(r[0]) for r in rows] == list(range(1, 11))

    def test_cosine_schedule_ends_at_zero(self, work, tmp_path):
        d, cfg = work
        args = ["train", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--lr-schedule", "cosine"]
        assert main([*args, "--steps", "4", "--out-dir", str(tmp_path / "a")]) == 0
        assert load_checkpoint(tmp_path / "a" / "final.fpck").adam.lr == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 3 / 4)))
        assert main([*args, "--steps", "4", "--resume", str(tmp_path / "a" / "final.fpck"), "--out-dir", str(tmp_path / "b")]) == 0
        assert load_checkpoint(tmp_path / "b" / "final.fpck").adam.lr == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 7 / 8)))

    def test_same_seed_same_checkpoint(self, work, tmp_path):
        d, cfg = work
        for name in ("a", "b"):
            assert main(["train", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--steps", "2", "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "final.fpck").read_bytes() == (tmp_path / "b" / "final.fpck").read_bytes()
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()

    def test_nan_loss_exits_3_and_keeps_last_checkpoint(self, work, tmp_path, capsys):
        d, cfg = work
        ds = load_dataset(d / "data" / "data.fpds")
        ds.states[0, 5, 0] = np.nan
        ds.normalizer.maxs[0] = np.nan
        save_dataset(tmp_path / "bad.fpds", ds)
        rc = main(["train", "--config", cfg, "--data", str(tmp_path / "bad.fpds"), "--steps", "5", "--out-dir", str(tmp_path / "run")])
        assert rc == 3
        assert "not finite" in capsys.readouterr().err
        assert (tmp_path / "run" / "ckpt_0000000.fpck").exists()
        assert not (tmp_path / "run" / "final.fpck").exists()

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.fpds"), "--out-dir", str(tmp_path)]) == 2


class TestPlan:
    def run(self, work, out, *extra):
        d, cfg = work
        ckpt = str(d / "srun" / "final.fpck")
        assert main(["plan", "--config", cfg, "--ckpt", ckpt, "--start", "-1,0", "--goal", "1,0", "--out-dir", str(out), *extra]) == 0
        _, rows = read_csv((out / "plan.csv").read_text())
        return np.array([[float(v) for v in r] for r in rows])

    def test_csv_shape_and_endpoints(self, work, tmp_path):
        arr = self.run(work, tmp_path)
        assert arr.shape == (32, 6)
        np.testing.assert_allclose(arr[0, 2:], [-1, 0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(arr[-1, 2:], [1, 0, 0, 0], atol=1e-12)
        assert (tmp_path / "plan.svg").read_text().startswith("<svg")

    def test_zero_guidance_equals_no_guidance(self, work, tmp_path):
        self.run(work, tmp_path / "a")
        self.run(work, tmp_path / "b", "--obstacle", "0,0,0.3", "--guidance-scale", "0")
        assert (tmp_path / "a" / "plan.csv").read_bytes() == (tmp_path / "b" / "plan.csv").read_bytes()

    def test_split_keeps_endpoints(self, work, tmp_path):
        arr = self.run(work, tmp_path, "--split", "--obstacle", "0,0.5,0.2", "--n-samples", "2")
        assert arr.shape == (64, 6)
        for k in range(2):
            np.testing.assert_allclose(arr[32 * k, 2:], [-1, 0, 0, 0], atol=1e-12)
            np.testing.assert_allclose(arr[32 * k + 31, 2:], [1, 0, 0, 0], atol=1e-12)

    def test_start_inside_obstacle_warns(self, work, tmp_path, capsys):
        self.run(work, tmp_path, "--obstacle", "-1,0,0.2")
        assert "inside obstacle" in capsys.readouterr().err

    def test_bad_start(self, work, tmp_path):
        d, cfg = work
        assert main(["plan", "--ckpt", str(d / "srun" / "final.fpck"), "--start", "1", "--goal", "1,0", "--out-dir", str(tmp_path)]) == 2


class TestBenchmarks:
    def test_stitch_grid_emits_four_rows(self, work, tmp_path):
        d, cfg = work
        args = ["bench-stitch", "--config", cfg, "--data", str(d / "data" / "data.fpds"), "--steps", "2", "--batch-size", "4"]
        assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
        header, rows = read_csv((tmp_path / "a" / "stitch.csv").read_text())
        assert header[4:6] == ["mean", "std"] and len(rows) == 4
        assert {(r[0], r[1]) for r in rows} == {("unet", "inpaint"), ("unet", "direct"), ("transformer", "inpaint"), ("transformer", "direct")}
        assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "stitch.csv").read_bytes() == (tmp_path / "b" / "stitch.csv").read_bytes()

    def test_stitch_needs_cross_data(self, work, tmp_path):
        d, cfg = work
        assert main(["bench-stitch", "--data", str(d / "straight" / "data.fpds"), "--out-dir", str(tmp_path)]) == 2

    def test_avoid_csv_and_jobs_agree(self, work, tmp_path):
        d, cfg = work
        args = ["bench-avoid", "--config", cfg, "--ckpt", str(d / "srun" / "final.fpck"), "--radii", "0,0.2", "--scales", "0,1", "--trials", "2"]
        assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
        assert main([*args, "--out-dir", str(tmp_path / "b"), "--jobs", "2"]) == 0
        text = (tmp_path / "a" / "avoid.csv").read_text()
        assert text == (tmp_path / "b" / "avoid.csv").read_text()
        header, rows = read_csv(text)
        assert header[3] == "radius" and header[5] == "success"
        assert sum(r[0] == "max_reliable" for r in rows) == 4

    def test_probe(self, work, tmp_path):
        d, cfg = work
        assert main(["probe", "--config", cfg, "--ckpt-dir", str(d / "run"), "--trials", "2", "--out-dir", str(tmp_path)]) == 0
        _, rows = read_csv((tmp_path / "probe.csv").read_text())
        assert [r[0] for r in rows] == ["0", "3", "6"]
        assert "late_bend_degradation" in json.loads((tmp_path / "probe.json").read_text())

    def test_probe_without_checkpoints(self, tmp_path):
        assert main(["probe", "--ckpt-dir", str(tmp_path), "--out-dir", str(tmp_path)]) == 2


class TestPlot:
    def test_empty_dir(self, tmp_path, capsys):
        assert main(["plot", "--out-dir", str(tmp_path)]) == 2
        assert "no plottable" in capsys.readouterr().err

    def test_regenerates_svgs(self, work, tmp_path):
        d, _ = work
        (tmp_path / "loss.csv").write_bytes((d / "run" / "loss.csv").read_bytes())
        assert main(["plot", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "loss.svg").read_text().startswith("<svg")


def test_every_command_takes_common_flags(capsys):
    for cmd in ("gen-data", "train", "plan", "bench-stitch", "bench-avoid", "probe", "plot"):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        assert all(flag in out for flag in ("--config", "--seed", "--out-dir", "--jobs"))
