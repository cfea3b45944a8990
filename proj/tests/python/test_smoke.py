import json

import numpy as np
import pytest

import csg

TINY = json.dumps(
    {
        "seed": 11,
        "dataset": {"count": 8, "width": 24, "height": 24, "texture_jitter": True},
        "train": {
            "steps": 12,
            "batch_size": 4,
            "net_width": 4,
            "net_levels": 2,
            "schedule_steps": 50,
            "beta_end": 0.12,
            "log_every": 5,
        },
        "maskgen": {"steps": 10, "batch_size": 4, "net_width": 4, "net_levels": 2, "log_every": 5},
        "genmask": {"count": 2, "min_ditf_fraction": 0.0},
        "generate": {"count": 4},
        "evaluate": {"guard_divisor": 64},
        "segval": {"epochs": 2, "net_width": 4, "net_levels": 2},
    }
)


def test_version_and_classes():
    assert csg.__version__ == "0.1.0"
    names = csg.class_names()
    assert len(names) == csg.NUM_CLASSES == 8
    assert names[0] == "background"
    assert "ditf" in names


def test_phantom_shapes_and_determinism():
    mask, image = csg.phantom(seed=3, width=48, height=32)
    assert mask.shape == (32, 48) and mask.dtype == np.uint8
    assert image.shape == (32, 48) and image.dtype == np.float32
    assert mask.max() < csg.NUM_CLASSES
    assert 0.0 <= image.min() and image.max() <= 1.0

    mask2, image2 = csg.phantom(seed=3, width=48, height=32)
    assert np.array_equal(mask, mask2) and np.array_equal(image, image2)

    mask3, _ = csg.phantom(seed=4, width=48, height=32)
    assert not np.array_equal(mask, mask3)


def test_mask_io_round_trip(tmp_path):
    mask, image = csg.phantom(seed=5, width=24, height=24)
    csg.write_mask(tmp_path / "m.pgm", mask)
    csg.write_image(tmp_path / "i.pgm", image)
    assert np.array_equal(csg.read_mask(tmp_path / "m.pgm"), mask)
    # Renders quantize to 8 bits on disk.
    assert np.abs(csg.read_image(tmp_path / "i.pgm") - image).max() <= 1.0 / 255.0


def test_edit_round_trip():
    program = csg.parse_edit("scale tendon x 2 y 2 ; translate ditf dx 3 dy -1")
    assert csg.parse_edit(str(program)) == program
    assert len(program) == 2

    mask = np.ones((32, 32), dtype=np.uint8)
    mask[10:20, 12:18] = 2  # tendon block
    doubled = csg.apply_edit(mask, "scale tendon x 2 y 2")
    assert (doubled == 2).sum() > (mask == 2).sum()
    restored = csg.apply_edit(doubled, "scale tendon x 0.5 y 0.5")
    ys, xs = np.nonzero(restored == 2)
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    assert abs(h - 10) <= 1 and abs(w - 6) <= 1

    with pytest.raises(csg.CsgError, match="unknown class"):
        csg.parse_edit("scale shrubbery x 2")


def test_seg_scores_identities():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
    gt = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
    s = csg.seg_scores(pred, gt, class_id=2)
    assert s["dsc"] == pytest.approx(s["f1"], abs=1e-12)
    assert s["iou"] == pytest.approx(s["dsc"] / (2 - s["dsc"]), abs=1e-12)
    perfect = csg.seg_scores(gt, gt, class_id=1)
    assert perfect["dsc"] == 1.0


def test_quality_prefers_matching_distribution():
    real = [csg.phantom(seed=7, width=24, height=24, index=i)[1] for i in range(8)]
    same = [csg.phantom(seed=7, width=24, height=24, index=100 + i)[1] for i in range(8)]
    noise = [np.random.default_rng(i).random((24, 24)).astype(np.float32) for i in range(8)]
    q_same = csg.quality(real, same, stack_seed=1, guard_divisor=64)
    q_noise = csg.quality(real, noise, stack_seed=1, guard_divisor=64)
    assert q_same["frechet"] < q_noise["frechet"]


def test_config_hash_and_overrides():
    cfg = csg.parse_config(TINY)
    rid = csg.run_id(cfg)
    assert rid.startswith("cfg-") and len(rid) == 20
    assert csg.run_id(csg.parse_config(TINY)) == rid

    csg.apply_override(cfg, "train.steps=24")
    assert csg.run_id(cfg) != rid
    assert json.loads(csg.config_json(cfg))["train"]["steps"] == 24

    with pytest.raises(csg.CsgError, match="unknown key"):
        csg.apply_override(cfg, "train.stepz=24")
    with pytest.raises(csg.CsgError, match="unknown key"):
        csg.parse_config('{"sedd": 1}')


def test_pipeline_end_to_end(tmp_path):
    cfg = csg.parse_config(TINY)
    stages = csg.pipeline_stages()
    assert stages[0] == "dataset" and "generate" in stages

    plan = csg.dry_run(cfg, "all", tmp_path)
    assert len(plan) > 0 and not any(tmp_path.iterdir())

    outcomes = csg.run_pipeline(cfg, "all", run_root=tmp_path)
    assert [o.stage for o in outcomes] == csg.execution_plan(cfg, "all")

    run_dir = tmp_path / csg.run_id(cfg)
    for outcome in outcomes:
        for rel in outcome.artifacts:
            assert (run_dir / rel).exists(), rel

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["run_id"] == csg.run_id(cfg)

    synth = csg.read_image(run_dir / "synth" / "images" / "g0000.pgm")
    assert synth.shape == (24, 24)
    report = json.loads((run_dir / "report.json").read_text())
    assert "frechet" in report

    # Rerunning a finished stage reproduces identical bytes.
    before = (run_dir / "data" / "manifest.jsonl").read_bytes()
    csg.run_pipeline(cfg, "dataset", run_root=tmp_path)
    assert (run_dir / "data" / "manifest.jsonl").read_bytes() == before
