import warnings

import numpy as np
import pytest

from based.data import (CorrespondenceRecord, DatasetError, ExportError, default_split,
                        load_dataset, lookup_depth, read_bdep, read_correspondences, read_pgm, read_ppm,
                        records_to_array, save_dataset, write_bdep, write_correspondences, write_pgm,
                        write_ppm)
from based.geometry import backproject
from based.synthetic import SceneSpecError, SyntheticScene, SyntheticSceneSpec, generate_synthetic

SMALL = dict(frame_count=10, width=24, height=18, focal=20.0, pairs_per_frame_pair=6)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSceneSpec(**SMALL), np.random.default_rng(0))


def test_ppm_quantisation_bound(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    assert np.abs(read_ppm(tmp_path / "a.ppm") - img).max() <= 1 / 510 + 1e-12


def test_depth_round_trip_bit_exact(tmp_path):
    d = np.random.default_rng(1).uniform(1, 9, (6, 4)).astype(np.float32).astype(np.float64)
    write_bdep(tmp_path / "d.bdep", d)
    assert read_bdep(tmp_path / "d.bdep").tobytes() == d.tobytes()
    raw = (tmp_path / "d.bdep").read_bytes()
    assert raw[:4] == b"BDEP" and len(raw) == 16 + 4 * 24


def test_nan_export_rejected(tmp_path):
    bad = np.zeros((2, 2, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ExportError):
        write_ppm(tmp_path / "x.ppm", bad)
    with pytest.raises(ExportError):
        write_bdep(tmp_path / "x.bdep", np.full((2, 2), np.nan))


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(2).random((5, 6)) < 0.4
    write_pgm(tmp_path / "m.pgm", m)
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), m)


def test_correspondence_confidence_filter(tmp_path):
    recs = records_to_array([CorrespondenceRecord(0, 1, (1.0, 2.0), (3.0, 4.0), 0.9),
                             CorrespondenceRecord(1, 2, (1.5, 2.5), (3.5, 4.5), 0.3)])
    write_correspondences(tmp_path / "c.txt", recs)
    got = read_correspondences(tmp_path / "c.txt", 0.5)
    assert len(got) == 1 and got[0]["confidence"] == 0.9
    (tmp_path / "bad.txt").write_text("0 0 1 1 1 1 1\n")
    with pytest.raises(DatasetError, match="bad.txt:1"):
        read_correspondences(tmp_path / "bad.txt")


def test_default_split_is_ten_percent_interior():
    train, test = default_split(16)
    assert test == [5, 10] and 0 in train and len(train) == 14


def test_lookup_depth_exact_at_centres_and_nan_when_invalid():
    d = np.array([[2.0, 4.0, 4.0], [3.0, 5.0, 0.0], [1.0, 1.0, 1.0]])
    assert lookup_depth(d, np.array([[0.5, 0.5]]))[0] == 2.0
    assert lookup_depth(d, np.array([[0.5, 1.5]]))[0] == 3.0
    assert np.isnan(lookup_depth(d, np.array([[2.2, 1.4]]))[0])


def test_save_load_round_trip_bit_exact(small, tmp_path):
    ds, _ = small
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds", confidence_threshold=0.5)
    assert len(back) == 10 and back.train == ds.train and back.test == ds.test
    for a, b in zip(ds.frames, back.frames):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.ref_depth.tobytes() == b.ref_depth.tobytes()
        assert a.time == b.time
        assert a.gt_pose.R.tobytes() == b.gt_pose.R.tobytes()
    assert back.correspondences.tobytes() == ds.correspondences.tobytes()


def test_wrong_depth_resolution_names_file(small, tmp_path):
    ds, _ = small
    save_dataset(ds, tmp_path / "ds")
    write_bdep(tmp_path / "ds" / "depth" / "00003.bdep", np.ones((5, 5)))
    with pytest.raises(DatasetError, match="00003.bdep"):
        load_dataset(tmp_path / "ds")


def test_non_monotone_timestamps_rejected(small, tmp_path):
    ds, _ = small
    save_dataset(ds, tmp_path / "ds")
    meta = (tmp_path / "ds" / "meta.txt").read_text().splitlines()
    meta = [("timestamps " + " ".join(["0.5"] * 10)) if m.startswith("timestamps") else m for m in meta]
    (tmp_path / "ds" / "meta.txt").write_text("\n".join(meta) + "\n")
    with pytest.raises(DatasetError, match="meta.txt"):
        load_dataset(tmp_path / "ds")


def test_missing_intrinsics_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="intrinsics"):
        load_dataset(tmp_path / "empty")


def test_empty_test_split_rejected_for_evaluation(small, tmp_path):
    ds, _ = small
    ds2 = type(ds)(ds.frames, ds.intrinsics, ds.near, ds.far, ds.scene_box, list(range(10)), [])
    with pytest.raises(DatasetError):
        ds2.validate(require_test=True)


# ----------------------------------------------------------------- synthetic


def test_displacement_zero_at_time_zero():
    scene = SyntheticScene(SyntheticSceneSpec())
    g = np.random.default_rng(3)
    S = np.column_stack([g.uniform(-5, 5, 10_000), g.uniform(-5, 5, 10_000), np.full(10_000, 5.0)])
    assert np.all(scene.displacement(S, 0.0) == 0.0)


def test_frame_zero_principal_depth_is_plane_distance():
    spec = SyntheticSceneSpec(width=48, height=36)
    scene = SyntheticScene(spec)
    _, depth, _, _, _ = scene.render_frame(0)
    # principal point sits on the corner shared by the four central pixels
    z = lookup_depth(depth, np.array([[24.0, 18.0]]))[0]
    assert z == pytest.approx(5.0, abs=1e-6)
    assert np.all(np.abs(depth - 5.0) <= 0.03 * 5.0 + 1e-6)


def test_static_scene_static_camera_frames_identical():
    spec = SyntheticSceneSpec(amplitude=0.0, max_rotation_deg=0.0, max_translation=0.0, **SMALL)
    with pytest.warns(UserWarning, match="static scene"):
        ds, _ = generate_synthetic(spec, np.random.default_rng(0))
    for f in ds.frames[1:]:
        assert f.image.tobytes() == ds.frames[0].image.tobytes()
        assert f.ref_depth.tobytes() == ds.frames[0].ref_depth.tobytes()


def test_every_record_maps_to_its_canonical_point(small):
    ds, oracle = small
    spec = SyntheticSceneSpec(**SMALL)
    scene = SyntheticScene(spec)
    corr = ds.correspondences
    assert len(corr) > 50
    for k, r in enumerate(corr):
        for frame, px, z in ((r["frame_a"], r["pixel_a"], oracle["depth_a"][k]),
                             (r["frame_b"], r["pixel_b"], oracle["depth_b"][k])):
            x = backproject(ds.intrinsics, ds.frames[frame].gt_pose, px, z)
            canon = scene.undeform(x[None], ds.frames[frame].time)[0]
            np.testing.assert_allclose(canon, oracle["canonical"][k], atol=1e-6)


def test_degenerate_framing_rejected():
    with pytest.raises(SceneSpecError):
        generate_synthetic(SyntheticSceneSpec(surface="sphere", sphere_radius=0.5, **SMALL),
                           np.random.default_rng(0))


def test_generation_deterministic(tmp_path):
    spec = SyntheticSceneSpec(**SMALL)
    generate_synthetic(spec, np.random.default_rng(5), out_dir=tmp_path / "a")
    generate_synthetic(spec, np.random.default_rng(5), out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("spec", [
    dict(SMALL),
    dict(SMALL, surface="sphere", sphere_radius=6.0),
    dict(SMALL, tool=True),
    dict(SMALL, texture="checker"),
])
def test_generated_specs_load_back(spec, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds, _ = generate_synthetic(SyntheticSceneSpec(**spec), np.random.default_rng(1), out_dir=tmp_path)
    back = load_dataset(tmp_path, require_test=True)
    assert len(back) == len(ds)
