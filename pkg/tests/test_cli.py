import json

import numpy as np
import pytest

from based.cli import main
from based.data import read_bdep, read_ppm
from based.eval import load_run
from tiny import TINY_OVERRIDES, TINY_SPEC


def ovr(*extra):
    out = []
    for o in [*TINY_OVERRIDES, *extra]:
        out += ["--override", o]
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(TINY_SPEC))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "ds"), "--seed", "3"]) == 0
    return root, spec


@pytest.fixture(scope="module")
def trained(dataset):
    root, _ = dataset
    out = root / "train"
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(out), *ovr("log_wall_time=false")]) == 0
    return root, out


def _tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synth_deterministic(dataset, tmp_path, capsys):
    root, spec = dataset
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    assert "frames=10" in capsys.readouterr().out
    assert _tree(root / "ds") == _tree(tmp_path / "b")
    assert not (tmp_path / "b" / "INCOMPLETE").exists()


def test_synth_static_warns(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({**TINY_SPEC, "amplitude": 0.0}))
    with pytest.warns(UserWarning, match="static scene"):
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0


def test_synth_invalid_spec(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"frame_count": 1}))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    spec.write_text("{not json")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o2")]) == 1


def test_train_smoke(trained):
    _, out = trained
    assert (out / "checkpoint.bin").exists() and (out / "train_log.tsv").exists()
    assert not (out / "INCOMPLETE").exists()
    assert load_run(out / "checkpoint.bin").step == 6


def test_train_bad_override_exits_before_side_effects(dataset, tmp_path):
    root, _ = dataset
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(tmp_path / "o"),
                 "--override", "schedule.nope=1"]) == 1
    assert not (tmp_path / "o").exists()


def test_train_without_pose_stage(dataset, tmp_path):
    root, _ = dataset
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(tmp_path / "o"),
                 *ovr("schedule.pose_joint_iters=0")]) == 0
    poses = load_run(tmp_path / "o" / "checkpoint.bin").poses
    np.testing.assert_array_equal(poses, np.tile([1.0, 0, 0, 0, 1, 0, 0, 0, 0], (len(poses), 1)))


def test_resume_continues_counter(dataset, tmp_path):
    root, _ = dataset
    ds = str(root / "ds")
    assert main(["train", "--dataset", ds, "--out", str(tmp_path / "a"),
                 *ovr("schedule.total_iters=4")]) == 0
    assert main(["train", "--dataset", ds, "--out", str(tmp_path / "b"),
                 "--resume", str(tmp_path / "a" / "checkpoint.bin"), *ovr()]) == 0
    log = (tmp_path / "b" / "train_log.tsv").read_text().splitlines()
    assert [int(line.split("\t")[0]) for line in log[1:]] == list(range(1, 7))


def test_resume_missing_checkpoint(dataset, tmp_path):
    root, _ = dataset
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(tmp_path / "o"),
                 "--resume", str(tmp_path / "none.bin"), *ovr()]) == 1


def test_render_matches_eval(trained, tmp_path):
    root, out = trained
    ck = str(out / "checkpoint.bin")
    assert main(["eval", "--dataset", str(root / "ds"), "--checkpoint", ck, "--out", str(tmp_path / "ev")]) == 0
    frame = load_run(ck).meta["test"][0]
    assert main(["render", "--checkpoint", ck, "--frame", str(frame), "--out", str(tmp_path / "r")]) == 0
    a = (tmp_path / "r" / f"frame_{frame:05d}.ppm").read_bytes()
    assert a == (tmp_path / "ev" / f"render_{frame:05d}.ppm").read_bytes()
    assert (tmp_path / "r" / f"frame_{frame:05d}.bdep").read_bytes() == \
        (tmp_path / "ev" / f"render_{frame:05d}.bdep").read_bytes()


def test_render_time_zero_is_canonical(trained, tmp_path):
    _, out = trained
    ck = str(out / "checkpoint.bin")
    run = load_run(ck)
    row = run.poses[0]
    from based.geometry import pose_to_se3
    p = pose_to_se3(row)
    vals = [str(v) for v in [*p.R.ravel(), *p.t]]
    assert main(["render", "--checkpoint", ck, "--pose", *vals, "--time", "0", "--out", str(tmp_path / "n")]) == 0
    assert main(["render", "--checkpoint", ck, "--frame", "0", "--out", str(tmp_path / "f")]) == 0
    # frame 0 sits at t = 0, so both renders see the undeformed canonical field
    np.testing.assert_allclose(read_ppm(tmp_path / "n" / "novel.ppm"), read_ppm(tmp_path / "f" / "frame_00000.ppm"),
                               atol=1 / 255)


def test_render_novel_pose(trained, tmp_path):
    _, out = trained
    ck = str(out / "checkpoint.bin")
    from based.geometry import pose_to_se3
    run = load_run(ck)
    a, b = pose_to_se3(run.poses[1]), pose_to_se3(run.poses[2])
    vals = [str(v) for v in [*a.R.ravel(), *((a.t + b.t) / 2)]]
    assert main(["render", "--checkpoint", ck, "--pose", *vals, "--time", "0.15", "--out", str(tmp_path / "n")]) == 0
    assert np.isfinite(read_bdep(tmp_path / "n" / "novel.bdep")).all()


def test_render_bad_frame(trained, tmp_path):
    _, out = trained
    assert main(["render", "--checkpoint", str(out / "checkpoint.bin"), "--frame", "99",
                 "--out", str(tmp_path / "r")]) == 1


def test_eval_report_printed(trained, tmp_path, capsys):
    root, out = trained
    assert main(["eval", "--dataset", str(root / "ds"), "--checkpoint", str(out / "checkpoint.bin"),
                 "--median-scaling", "--out", str(tmp_path / "e")]) == 0
    text = capsys.readouterr().out
    assert "median_scaling=true" in text and "[mean]" in text


def test_incomplete_sentinel_on_failure(dataset, tmp_path):
    root, _ = dataset
    ds = str(root / "ds")
    assert main(["train", "--dataset", ds, "--out", str(tmp_path / "a"), *ovr("schedule.total_iters=4")]) == 0
    # a checkpoint from a different architecture fails after the output dir exists
    assert main(["train", "--dataset", ds, "--out", str(tmp_path / "b"), "--resume",
                 str(tmp_path / "a" / "checkpoint.bin"), *ovr("field.mlp_canon.width=8")]) == 1
    assert (tmp_path / "b" / "INCOMPLETE").exists()


def test_ablate_structure(dataset, tmp_path, capsys):
    root, _ = dataset
    assert main(["ablate", "--dataset", str(root / "ds"), "--out", str(tmp_path / "ab"), "--workers", "1",
                 *ovr()]) == 0
    table = (tmp_path / "ab" / "ablation.tsv").read_text().splitlines()
    assert len(table) == 5 and table[0].startswith("method")
    for tag in ("no_corr_no_depth", "no_depth", "no_corr", "final"):
        rep = (tmp_path / "ab" / tag / "eval" / "report.txt").read_text()
        assert f"loss_config={tag}" in rep
    log = (tmp_path / "ab" / "no_corr_no_depth" / "train_log.tsv").read_text().splitlines()[1:]
    for line in log:
        p = line.split("\t")
        assert float(p[3]) == 0.0 and float(p[4]) == 0.0
