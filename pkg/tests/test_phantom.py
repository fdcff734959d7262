import numpy as np
import pytest

from atlasseg.errors import ConfigurationError
from atlasseg.evaluation import biomarker, dice
from atlasseg.phantom import PhantomSpec, base_region_masks, generate_bank, generate_base
from atlasseg.registration import _det_grad_y


class TestSpec:
    def test_csf_must_dominate(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(csf_mu=1.0)


@pytest.fixture(scope="module")
def base():
    return generate_base(PhantomSpec(seed=9, resolution=128)).bundle


class TestGenerateBase:

    def test_labels_exactly_three_classes(self, base):
        assert set(np.unique(base.mask.labels)) == {0, 1, 2}
        assert (base.mask.labels == 1).sum() > 0
        assert (base.mask.labels == 2).sum() > 0

    def test_regions_disjoint(self, base):
        regions = base_region_masks(PhantomSpec(seed=9, resolution=128))
        assert not (regions["cerebellum"] & regions["brainstem"]).any()

    def test_biomarkers_near_configured_means(self):
        spec = PhantomSpec(seed=9, resolution=128)
        base = generate_base(spec).bundle
        for region, mu in ((1, spec.cerebellum_mu), (2, spec.brainstem_mu)):
            n_px = int((base.mask.labels == region).sum())
            tol = 3.0 * spec.dense_noise_sigma / np.sqrt(n_px)
            assert biomarker(base.peak_dense, base.mask, region) == pytest.approx(mu, abs=tol)

    def test_same_seed_bit_identical(self):
        spec = PhantomSpec(seed=13, resolution=64)
        a = generate_base(spec).bundle
        b = generate_base(spec).bundle
        np.testing.assert_array_equal(a.magnitude.values, b.magnitude.values)
        np.testing.assert_array_equal(a.peak_dense.values, b.peak_dense.values)
        np.testing.assert_array_equal(a.mask.labels, b.mask.labels)

    def test_mean_below_peak(self, base):
        assert np.all(base.mean_dense.values <= base.peak_dense.values + 1e-12)

    def test_csf_ring_values_high(self):
        spec = PhantomSpec(seed=9, resolution=128)
        base = generate_base(spec).bundle
        ring = base_region_masks(spec)["csf"]
        assert ring.sum() > 0
        assert base.peak_dense.values[ring].min() > spec.csf_mu / 2


class TestGenerateBank:
    def test_zero_deformation_equals_base_up_to_noise(self):
        spec = PhantomSpec(seed=4, resolution=64, bank_size=2, test_size=0, deformation_px=0.0)
        base = generate_base(spec).bundle
        result = generate_bank(spec)
        for s in result.bank.subjects:
            np.testing.assert_array_equal(s.mask.labels, base.mask.labels)
            assert np.abs(s.magnitude.values - base.magnitude.values).max() <= 6 * spec.noise_sigma
            assert result.truth_warps[s.id].max_abs == 0.0

    def test_truth_warps_fold_free(self):
        spec = PhantomSpec(seed=4, resolution=64, bank_size=4, test_size=2, deformation_px=6.0)
        result = generate_bank(spec)
        for sid, field in result.truth_warps.items():
            assert _det_grad_y(field.u, *field.grid.spacing).min() > 0.0

    def test_pairwise_mask_overlap_nontrivial(self):
        spec = PhantomSpec(seed=4, resolution=64, bank_size=6, test_size=0, deformation_px=6.0)
        result = generate_bank(spec)
        subjects = result.bank.subjects
        for i in range(len(subjects)):
            for j in range(i + 1, len(subjects)):
                d = dice(subjects[i].mask, subjects[j].mask)
                assert 0.0 < d < 1.0

    def test_bank_deterministic(self):
        spec = PhantomSpec(seed=8, resolution=64, bank_size=3, test_size=1, deformation_px=5.0)
        a = generate_bank(spec)
        b = generate_bank(spec)
        for sa, sb in zip(a.bank.subjects, b.bank.subjects):
            np.testing.assert_array_equal(sa.magnitude.values, sb.magnitude.values)
            np.testing.assert_array_equal(sa.mask.labels, sb.mask.labels)
        for sid in a.truth_warps:
            np.testing.assert_array_equal(a.truth_warps[sid].u, b.truth_warps[sid].u)

    def test_ids_and_sizes(self):
        spec = PhantomSpec(seed=8, resolution=64, bank_size=3, test_size=2, deformation_px=5.0)
        result = generate_bank(spec)
        assert [s.id for s in result.bank.subjects] == ["s000", "s001", "s002"]
        assert [s.id for s in result.test_subjects] == ["t000", "t001"]
        assert set(result.truth_warps) == {"s000", "s001", "s002", "t000", "t001"}
