import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.stats.multitest import multipletests

from atlas4d.atlas import AtlasModel, CohortEntry
from atlas4d.volume import identity_grid
from atlas4d.vbm import VbmConfig, descriptor_map, fdr_bh, group_test, make_windows, run_vbm

pytestmark = pytest.mark.criterion(8)


class TestDescriptor:
    def test_identity(self):
        d = descriptor_map(np.zeros((8, 8, 8, 3)), np.ones((8, 8, 8), bool))
        assert not d.values.any()
        assert d.n_clamped == 0

    def test_uniform_scaling(self):
        n = 16
        u = 0.1 * (identity_grid((n, n, n)) - (n - 1) / 2)
        d = descriptor_map(u, np.ones((n, n, n), bool))
        np.testing.assert_allclose(d.values, 3 * np.log(1.1), atol=1e-12)
        assert 3 * np.log(1.1) == pytest.approx(0.2860, abs=1e-4)

    def test_folding_tally(self, caplog):
        n = 32
        u = np.zeros((n, n, n, 3))
        for m in range(10):
            j = 3 + 2 * m + (m // 5) * 2
            u[9, j, 16, 0] = -2.0
            u[7, j, 16, 0] = 2.0
        with caplog.at_level("WARNING"):
            d = descriptor_map(u, np.ones((n, n, n), bool))
        assert d.n_clamped == 10
        assert "10 voxels" in caplog.text

    def test_outside_mask_zero(self, rng):
        u = 0.1 * rng.standard_normal((8, 8, 8, 3))
        mask = np.zeros((8, 8, 8), bool)
        mask[2:6, 2:6, 2:6] = True
        d = descriptor_map(u, mask)
        assert not d.values[~mask].any()

    def test_smooth_first_variant(self):
        n = 12
        u = 0.1 * (identity_grid((n, n, n)) - (n - 1) / 2)
        d = descriptor_map(u, np.ones((n, n, n), bool), log_first=False)
        np.testing.assert_allclose(d.values, 3 * np.log(1.1), atol=1e-12)


class TestGroupTest:
    def test_identical_groups(self, rng):
        maps = list(rng.standard_normal((5, 4, 4, 4)))
        maps[0][0, 0, 0] = maps[1][0, 0, 0] = maps[2][0, 0, 0] = maps[3][0, 0, 0] = maps[4][0, 0, 0] = 0.0
        np.testing.assert_array_equal(group_test(maps, maps), 1.0)

    def test_separated_groups(self, rng):
        a = rng.normal(0.0, 0.01, (20, 1, 1, 1))
        b = rng.normal(0.5, 0.01, (20, 1, 1, 1))
        p = group_test(list(a), list(b))
        assert p[0, 0, 0] < 1e-6

    def test_matches_scipy_welch(self, rng):
        a = rng.normal(0.0, 1.0, (7, 3, 3, 3))
        b = rng.normal(0.4, 2.0, (9, 3, 3, 3))
        want = stats.ttest_ind(a, b, axis=0, equal_var=False).pvalue
        np.testing.assert_allclose(group_test(list(a), list(b)), want, rtol=1e-10)

    def test_swap_symmetric(self, rng):
        a, b = list(rng.standard_normal((4, 3, 3, 3))), list(rng.standard_normal((6, 3, 3, 3)))
        np.testing.assert_array_equal(group_test(a, b), group_test(b, a))

    def test_mask(self, rng):
        a, b = list(rng.standard_normal((4, 3, 3, 3))), list(rng.standard_normal((4, 3, 3, 3)) + 5)
        mask = np.zeros((3, 3, 3), bool)
        mask[1, 1, 1] = True
        p = group_test(a, b, mask)
        assert p[1, 1, 1] < 1 and (p[~mask] == 1).all()

    def test_too_few(self, rng):
        with pytest.raises(ValueError):
            group_test([rng.random((2, 2, 2))], [rng.random((2, 2, 2))] * 3)


class TestFdr:
    def test_hand_example(self):
        thr, rej = fdr_bh([0.01, 0.02, 0.03, 0.5], 0.05)
        assert thr == 0.03
        assert rej.tolist() == [True, True, True, False]

    def test_all_ones(self):
        thr, rej = fdr_bh(np.ones(10), 0.05)
        assert thr == 0.0 and not rej.any()

    def test_single(self):
        thr, rej = fdr_bh([0.04], 0.05)
        assert rej.tolist() == [True] and thr == 0.04

    def test_empty(self):
        thr, rej = fdr_bh([], 0.05)
        assert thr == 0.0 and rej.size == 0

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            fdr_bh([0.1], 1.5)

    @settings(max_examples=40)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.sampled_from([0.01, 0.05, 0.2]))
    def test_matches_statsmodels(self, p, q):
        _, rej = fdr_bh(p, q)
        want = multipletests(p, alpha=q, method="fdr_bh")[0]
        np.testing.assert_array_equal(rej, want)


class TestWindows:
    def test_partition(self):
        assert make_windows(range(56, 91), 3) == [(56, 62), (63, 69), (70, 76), (77, 83), (84, 90)]

    def test_tail_truncated(self):
        assert make_windows([56, 60], 1) == [(56, 58), (59, 60)]

    def test_config(self):
        assert VbmConfig(delta=3).window == 7
        with pytest.raises(ValueError):
            VbmConfig(q=0)
        with pytest.raises(ValueError):
            VbmConfig(sigma=0)


def _vbm_setup(rng, effect=0.0, n=10, subjects=12):
    img = np.zeros((n, n, n))
    img[2:-2, 2:-2, 2:-2] = 0.6
    model = AtlasModel([60, 61], {t: img for t in (60, 61)}, {t: np.zeros_like(img) for t in (60, 61)},
                       {60: 1.0, 61: 1.0})
    region = np.zeros((n, n, n), bool)
    region[4:6, 4:6, 4:6] = True
    cohort, desc = [], {}
    for s in range(subjects):
        group = "AB"[s % 2]
        e = CohortEntry(f"s{s}", 60 + s % 2, img, img > 0.1, group=group)
        cohort.append(e)
        d = 0.01 * rng.standard_normal((n, n, n))
        if group == "B":
            d[region] += effect
        desc[e.key] = d
    return model, cohort, desc, region


class TestRunVbm:
    def test_identical_groups(self, rng):
        model, cohort, desc, _ = _vbm_setup(rng)
        same = {e.key: desc[cohort[0].key] for e in cohort}
        res = run_vbm(model, cohort, VbmConfig(delta=1), descriptors=same)
        assert res.total_significant() == 0

    def test_detects_effect(self, rng):
        model, cohort, desc, region = _vbm_setup(rng, effect=-0.3)
        labels = region.astype(np.int16)
        res = run_vbm(model, cohort, VbmConfig(delta=1), labels=labels, descriptors=desc)
        sig = res.significant[0]
        assert sig[region].all()
        assert not sig[~region].any()
        assert res.structure_rows() == [(1, 60, 61, 100.0)]

    def test_group_override_and_skip(self, rng, caplog):
        model, cohort, desc, _ = _vbm_setup(rng, subjects=3)
        with caplog.at_level("WARNING"):
            res = run_vbm(model, cohort, VbmConfig(delta=1), descriptors=desc)
        assert res.skipped == [(60, 61)]
        assert res.total_significant() == 0
        with pytest.raises(ValueError):
            run_vbm(model, cohort, VbmConfig(delta=1), descriptors=desc, groups={"s1": "A"})

    def test_first_visit_per_window(self, rng):
        model, cohort, desc, _ = _vbm_setup(rng, subjects=4)
        extra = CohortEntry("s0", 61, cohort[0].image, cohort[0].head_mask, group="A")
        desc[extra.key] = np.full((10, 10, 10), 100.0)
        res = run_vbm(model, cohort + [extra], VbmConfig(delta=1), descriptors=desc)
        # the repeat visit is ignored, so no voxel moves towards significance
        res0 = run_vbm(model, cohort, VbmConfig(delta=1), descriptors=desc)
        np.testing.assert_array_equal(res.p_values[0], res0.p_values[0])
