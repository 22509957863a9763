import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amalgseg import metrics
from amalgseg import synthdata as sd

import oracles
from conftest import TINY_SHAPE


def random_mask_pair(rng, shape=(8, 8, 8), p=0.3):
    a = (rng.random(shape) < p).astype(np.uint8)
    b = (rng.random(shape) < p).astype(np.uint8)
    return a, b


class TestDice:
    def test_identical_nonempty(self):
        m = np.zeros((8, 8, 8), np.uint8)
        m[2:5, 2:5, 2:5] = 1
        assert metrics.dice(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a[0, 0, 0] = 1
        b[7, 7, 7] = 1
        assert metrics.dice(a, b, 1) == 0.0

    def test_half_overlap(self):
        # |A|=4, |B|=4, |A cap B|=2 -> 0.5
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a.ravel()[[0, 1, 2, 3]] = 1
        b.ravel()[[2, 3, 4, 5]] = 1
        assert metrics.dice(a, b, 1) == 0.5

    def test_both_empty_convention(self):
        z = np.zeros((8, 8, 8), np.uint8)
        assert metrics.dice(z, z, 1) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.dice(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), 1)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask_pair(rng, (6, 6, 6))
        assert metrics.dice(a, b, 1) == metrics.dice(b, a, 1)

    def test_matches_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = random_mask_pair(rng)
            assert metrics.dice(a, b, 1) == oracles.brute_dice(a, b, 1)


class TestHausdorff:
    def test_identical_sets_zero(self):
        m = np.zeros((8, 8, 8), np.uint8)
        m[2:6, 2:6, 2:6] = 1
        assert metrics.hausdorff(m, m, 1, (1, 1, 1)) == 0.0

    def test_single_voxels_anisotropic(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a[0, 0, 0] = 1
        b[0, 0, 3] = 1
        assert metrics.hausdorff(a, b, 1, (1, 1, 2)) == pytest.approx(6.0, abs=1e-12)

    def test_empty_set_sentinel(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        b[1, 1, 1] = 1
        assert math.isinf(metrics.hausdorff(a, b, 1, (1, 1, 1)))
        assert math.isinf(metrics.hausdorff(a, a, 1, (1, 1, 1)))

    def test_nonpositive_spacing_rejected(self):
        m = np.ones((4, 4, 4), np.uint8)
        with pytest.raises(ValueError):
            metrics.hausdorff(m, m, 1, (1, 0, 1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.hausdorff(np.zeros((4, 4, 4)), np.zeros((5, 4, 4)), 1, (1, 1, 1))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        spacings = [(1, 1, 1), (2, 1, 0.5), (1.3, 0.7, 2.1)]
        for i in range(40):
            a, b = random_mask_pair(rng)
            if not a.any() or not b.any():
                continue
            spacing = spacings[i % 3]
            got = metrics.hausdorff(a, b, 1, spacing)
            want = oracles.brute_hausdorff(a, b, 1, spacing)
            assert got == pytest.approx(want, abs=1e-9)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask_pair(rng, (6, 6, 6), p=0.4)
        if not (a.any() and b.any()):
            return
        d1 = metrics.hausdorff(a, b, 1, (1, 1, 1))
        d2 = metrics.hausdorff(b, a, 1, (1, 1, 1))
        assert d1 == pytest.approx(d2, abs=1e-9)

    def test_triangle_inequality_spot_checks(self):
        rng = np.random.default_rng(7)
        for _ in range(15):
            a, b, c = (random_mask_pair(rng, (6, 6, 6), p=0.4)[0] for _ in range(3))
            if not (a.any() and b.any() and c.any()):
                continue
            dab = metrics.hausdorff(a, b, 1, (1, 1, 1))
            dbc = metrics.hausdorff(b, c, 1, (1, 1, 1))
            dac = metrics.hausdorff(a, c, 1, (1, 1, 1))
            assert dac <= dab + dbc + 1e-9

    def test_surface_definition_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = (rng.random((7, 7, 7)) < 0.4)
            got = set(map(tuple, metrics.surface_voxels(m)))
            want = set(oracles.brute_surface(m))
            assert got == want


def _write_exact_dice_pair(tmp_path, sample_id, center, inter, size=1000):
    """GT/pred masks engineered so dice == 2*inter/(2*size) exactly."""
    shape = TINY_SHAPE
    gt = np.zeros(shape, np.uint8)
    pred = np.zeros(shape, np.uint8)
    gt.ravel()[:size] = 1
    pred.ravel()[:inter] = 1
    pred.ravel()[size:size + (size - inter)] = 1
    box = sd.tight_box(gt, 1)
    common = dict(task_id="taskA", center_id=center, spacing=(1.0, 1.0, 1.0), prompt=box)
    gt_s = sd.VolumeSample(sample_id=sample_id, image=gt[None].astype(np.float32),
                           label=gt, **common)
    pred_s = sd.VolumeSample(sample_id=sample_id, image=gt[None].astype(np.float32),
                             label=pred, **common)
    return gt_s, pred_s


class TestEvaluateDataset:
    def test_generalization_gap_matches_reported_style(self, tmp_path):
        # InVal mean dice 0.886, ExVal 0.881 -> G = -0.005 (i.e. -0.5 in %)
        gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
        gts, preds = [], []
        for sid, center, inter in (("a", "c0", 886), ("b", "c1", 881)):
            g, p = _write_exact_dice_pair(tmp_path, sid, center, inter)
            gts.append(g)
            preds.append(p)
        sd.write_dataset(gts, str(gt_dir))
        sd.write_dataset(preds, str(pred_dir))
        report = metrics.evaluate_dataset(str(pred_dir), str(gt_dir),
                                          {"c0": "InVal", "c1": "ExVal"})
        agg = report["aggregate"]["taskA"]
        assert agg["InVal"]["mean_dsc"] == pytest.approx(0.886, abs=1e-12)
        assert agg["ExVal"]["mean_dsc"] == pytest.approx(0.881, abs=1e-12)
        g = report["generalization"]["taskA"]
        assert 100 * g == pytest.approx(-0.5, abs=1e-9)
        table = metrics.format_generalization_table(report)
        assert "88.6" in table and "88.1" in table

    def test_single_case_mean_equals_case(self, tmp_path):
        g, p = _write_exact_dice_pair(tmp_path, "solo", "c0", 700)
        sd.write_dataset([g], str(tmp_path / "gt"))
        sd.write_dataset([p], str(tmp_path / "pred"))
        report = metrics.evaluate_dataset(str(tmp_path / "pred"), str(tmp_path / "gt"))
        case = report["cases"][0]
        agg = report["aggregate"]["taskA"]["InVal"]
        assert agg["mean_dsc"] == case["mean_dsc"] == pytest.approx(0.7)
        assert agg["n_cases"] == 1

    def test_unmatched_cases_warn_and_continue(self, tmp_path):
        g1, p1 = _write_exact_dice_pair(tmp_path, "x", "c0", 500)
        g2, _ = _write_exact_dice_pair(tmp_path, "only-gt", "c0", 500)
        sd.write_dataset([g1, g2], str(tmp_path / "gt"))
        sd.write_dataset([p1], str(tmp_path / "pred"))
        with pytest.warns(UserWarning, match="unmatched"):
            report = metrics.evaluate_dataset(str(tmp_path / "pred"), str(tmp_path / "gt"))
        assert report["unmatched"] == ["only-gt"]
        assert len(report["cases"]) == 1

    def test_empty_prediction_dir(self, tmp_path):
        g, _ = _write_exact_dice_pair(tmp_path, "x", "c0", 500)
        sd.write_dataset([g], str(tmp_path / "gt"))
        (tmp_path / "pred").mkdir()
        with pytest.warns(UserWarning):
            report = metrics.evaluate_dataset(str(tmp_path / "pred"), str(tmp_path / "gt"))
        assert report["cases"] == []

    def test_report_files_written(self, tmp_path):
        g, p = _write_exact_dice_pair(tmp_path, "x", "c0", 500)
        sd.write_dataset([g], str(tmp_path / "gt"))
        sd.write_dataset([p], str(tmp_path / "pred"))
        report = metrics.evaluate_dataset(str(tmp_path / "pred"), str(tmp_path / "gt"))
        metrics.write_report(report, str(tmp_path / "r.json"), str(tmp_path / "r.csv"))
        assert (tmp_path / "r.json").exists()
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "sample_id,task_id,center_id,split,label,dsc,hd"
        assert report["schema_version"] == metrics.REPORT_SCHEMA_VERSION


class TestPostprocessInteraction:
    def test_largest_cc_never_decreases_dice_single_component_gt(self):
        from amalgseg.inference import postprocess_largest_cc
        rng = np.random.default_rng(11)
        for _ in range(10):
            gt = np.zeros((12, 12, 12), np.uint8)
            gt[3:9, 3:9, 3:9] = 1  # one component
            pred = gt.copy()
            # main blob partially right plus spurious far-away islands
            pred[rng.integers(0, 2), rng.integers(0, 12), rng.integers(0, 12)] = 1
            pred[11, rng.integers(0, 12), rng.integers(0, 12)] = 1
            before = metrics.dice(pred, gt, 1)
            after = metrics.dice(postprocess_largest_cc(pred), gt, 1)
            assert after >= before
