import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrguide import evaluation as ev
from corrguide.domain import CorrespondenceField, GuidanceConfig, Status
from corrguide.synthdata import SceneParams, generate_scene, random_params
from corrguide.toydiff import gt_field


def test_psnr_examples(rng):
    a = rng.random((4, 4, 2))
    assert ev.psnr(a, a) == ev.PSNR_CAP
    assert ev.psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError):
        ev.psnr(a, a, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ev.psnr(a, a[:2])


@given(st.integers(0, 2**32 - 1))
def test_psnr_matches_direct_formula_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    region = rng.random((6, 6)) < 0.5
    region[0, 0] = True
    diffs = [(a[i, j, c] - b[i, j, c]) ** 2 for i in range(6) for j in range(6) for c in range(3) if region[i, j]]
    oracle = 10 * np.log10(1 / (sum(diffs) / len(diffs)))
    assert abs(ev.psnr(a, b, region) - oracle) < 1e-9
    assert ev.psnr(a, b, region) == ev.psnr(b, a, region)


def test_ssim_examples(rng):
    a = rng.random((8, 8, 2))
    assert ev.ssim(a, a) == pytest.approx(1.0)
    assert ev.ssim(a, 1 - a) < 0.5
    c = np.full((8, 8), 0.3)
    assert ev.ssim(c, c) == pytest.approx(1.0)
    small = rng.random((4, 5))
    assert ev.ssim(small, small) == pytest.approx(1.0)
    assert -1 <= ev.ssim(small, rng.random((4, 5))) <= 1


def test_ssim_sliding_window_oracle(rng):
    a, b = rng.random((10, 9)), rng.random((10, 9))
    vals = []
    for i in range(3):
        for j in range(2):
            x, y = a[i : i + 8, j : j + 8], b[i : i + 8, j : j + 8]
            mx, my = x.mean(), y.mean()
            cov = ((x - mx) * (y - my)).mean()
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (x.var() + y.var() + c2)))
    assert ev.ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_count_correct_rules():
    sc = generate_scene(0, SceneParams(shift=(0, 2)), with_mask=False)
    p = gt_field(sc)
    assert ev.count_correct(p, sc) == (48, 48)
    for off, expect in ((1, 48), (2, 0)):
        coords = np.where(p.coords >= 0, p.coords, 0)
        coords = coords.copy()
        coords[..., 0] = np.where(coords[..., 0] + off < 8, coords[..., 0] + off, coords[..., 0] - off)
        q = CorrespondenceField(sc.shape, p.status, np.where(p.coords >= 0, coords, -1), p.consensus)
        assert ev.count_correct(q, sc)[0] == expect
    assert ev.count_correct(CorrespondenceField.unmatched(sc.shape), sc) == (0, 48)


@given(st.integers(0, 2**32 - 1))
def test_count_correct_monotone_under_oracle_repair(seed):
    rng = np.random.default_rng(seed)
    sc = generate_scene(seed % 100, random_params(seed % 100), with_mask=False)
    status = np.full((8, 8), Status.INLIER)
    coords = rng.integers(0, 8, (8, 8, 2))
    p = CorrespondenceField(sc.shape, status, coords, np.ones((8, 8)))
    before, _ = ev.count_correct(p, sc)
    ov = sc.overlap_mask == 1
    pick = tuple(rng.integers(0, 8, 2))
    if ov[pick]:
        coords = coords.copy()
        coords[pick] = sc.gt_coords[pick]
        after, _ = ev.count_correct(CorrespondenceField(sc.shape, status, coords, np.ones((8, 8))), sc)
        assert after >= before


def test_single_seed_noguide_report():
    rep = ev.ablation_suite([0], GuidanceConfig(steps_total=5), ["noguide"])
    assert len(rep["rows"]) == 1
    row = rep["rows"][0]
    assert row["mode"] == "noguide" and row["lpips"] is None
    assert len(row["correct_curve"]) == 5
    assert rep["schema_version"] == 1


def test_suite_records_failures(monkeypatch):
    real = ev.run_inpaint

    def flaky(scene, cfg, mode, **kw):
        if scene.seed == 1:
            raise FloatingPointError("boom")
        return real(scene, cfg, mode, **kw)

    monkeypatch.setattr(ev, "run_inpaint", flaky)
    rep = ev.ablation_suite([0, 1, 2], GuidanceConfig(steps_total=4), ["full"])
    assert rep["rows"][0]["n_failed"] == 1
    assert rep["failures"][0]["seed"] == 1


def test_suite_deterministic_and_parallel():
    cfg = GuidanceConfig(steps_total=6)
    a = ev.ablation_suite(range(3), cfg, ["full", "noacc"])
    b = ev.ablation_suite(range(3), cfg, ["full", "noacc"], jobs=2)
    strip = lambda rep: [{k: v for k, v in r.items() if k not in ("timing", "step_time")} for r in rep["rows"]]
    assert strip(a) == strip(b)
    assert a["runs"] == b["runs"]


def test_report_round_trip(tmp_path):
    rep = ev.ablation_suite(range(2), GuidanceConfig(steps_total=5), ["full", "noguide"])
    ev.emit_report(rep, tmp_path / "r.json", "json")
    ev.emit_report(rep, tmp_path / "r.csv", "csv")
    from_json = json.loads((tmp_path / "r.json").read_text())
    rows = ev.read_report_csv(tmp_path / "r.csv")
    assert len(rows) == 2
    for jr, cr in zip(from_json["rows"], rows):
        assert jr["mode"] == cr["mode"]
        assert np.abs(np.array(jr["correct_curve"]) - np.array(cr["correct_curve"])).max() <= 1e-12
        for key in ("psnr_mask", "ssim", "step_time"):
            assert abs(jr[key] - cr[key]) <= 1e-12
        for key, val in jr["timing"].items():
            assert abs(val - cr["timing"][key]) <= 1e-12
        assert len(cr["correct_curve"]) == 5
    text = (tmp_path / "r.json").read_text()
    assert text == json.dumps(from_json, sort_keys=True, indent=2) + "\n"


def test_empty_report(tmp_path):
    rep = ev.empty_report()
    ev.emit_report(rep, tmp_path / "e.csv", "csv")
    ev.emit_report(rep, tmp_path / "e.json", "json")
    assert ev.read_report_csv(tmp_path / "e.csv") == []
    assert json.loads((tmp_path / "e.json").read_text())["rows"] == []
    with pytest.raises(ValueError):
        ev.emit_report(rep, tmp_path / "e.xml", "xml")
    with pytest.raises(OSError):
        ev.emit_report(rep, tmp_path / "missing" / "e.json", "json")
