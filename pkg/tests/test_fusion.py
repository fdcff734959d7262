import numpy as np
import pytest

from atlasseg.bundleio import AtlasBank
from atlasseg.errors import ConfigurationError, InputError, ShapeError
from atlasseg.evaluation import dice
from atlasseg.fusion import FusionConfig, fuse, rank_templates, segment
from atlasseg.imaging import ImageGrid, LabelMask, ScalarImage, SubjectBundle, normalize_bundle


def mask_of(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return LabelMask(ImageGrid(labels.shape[1], labels.shape[0]), labels)


class TestRankTemplates:
    def test_self_ranks_first_with_zero_ssd(self, bank64):
        bank, _ = bank64
        ref = bank.subjects[3]
        ranked = rank_templates(ref, bank)
        assert ranked[0][0] == ref.id
        assert ranked[0][1] == 0.0

    def test_noise_ordering(self, base64):
        rng = np.random.default_rng(0)
        g = base64.grid
        v = base64.magnitude.values

        def noisy(sid, sigma):
            return SubjectBundle(
                id=sid,
                magnitude=ScalarImage(g, np.clip(v + rng.normal(0, sigma, v.shape), 0, 1)),
                mean_dense=base64.mean_dense,
                peak_dense=base64.peak_dense,
                mask=base64.mask,
                normalized=True,
            )

        bank = AtlasBank((noisy("far", 0.2), noisy("near", 0.05)))
        ranked = rank_templates(base64, bank)
        assert [r[0] for r in ranked] == ["near", "far"]

    def test_ranking_is_permutation(self, bank64):
        bank, _ = bank64
        ranked = rank_templates(bank.subjects[0], bank)
        assert sorted(r[0] for r in ranked) == sorted(s.id for s in bank.subjects)

    def test_requires_normalized_reference(self, bank64, spec64):
        from atlasseg.phantom import generate_base

        bank, _ = bank64
        raw = generate_base(spec64).bundle
        with pytest.raises(InputError):
            rank_templates(raw, bank)

    def test_resolution_mismatch(self, bank64):
        bank, _ = bank64
        g = ImageGrid(16, 16)
        other = SubjectBundle(
            id="odd",
            magnitude=ScalarImage(g, np.zeros((16, 16))),
            normalized=True,
        )
        with pytest.raises(ShapeError):
            rank_templates(other, bank)


class TestFuse:
    def test_single_mask_any_threshold(self):
        rng = np.random.default_rng(1)
        m = mask_of(rng.integers(0, 3, size=(8, 8)))
        for thr in (0.1, 0.5, 0.9):
            soft, hard = fuse([m], thr)
            np.testing.assert_array_equal(hard.labels, m.labels)

    def test_ten_identical_masks(self):
        rng = np.random.default_rng(2)
        m = mask_of(rng.integers(0, 3, size=(8, 8)))
        soft, hard = fuse([m] * 10, 0.5)
        np.testing.assert_array_equal(hard.labels, m.labels)
        assert set(np.unique(soft.p_cerebellum)) <= {0.0, 1.0}
        assert set(np.unique(soft.p_brainstem)) <= {0.0, 1.0}

    def test_two_of_three_hand_case(self):
        a = mask_of([[1]])
        b = mask_of([[1]])
        c = mask_of([[0]])
        soft, hard = fuse([a, b, c], 0.5)
        assert soft.p_cerebellum[0, 0] == pytest.approx(2 / 3)
        assert hard.labels[0, 0] == 1
        _, hard70 = fuse([a, b, c], 0.7)
        assert hard70.labels[0, 0] == 0

    def test_empty_list_rejected(self):
        with pytest.raises(InputError):
            fuse([], 0.5)

    def test_probabilities_are_multiples_of_one_over_n(self):
        rng = np.random.default_rng(3)
        masks = [mask_of(rng.integers(0, 3, size=(6, 6))) for _ in range(7)]
        soft, _ = fuse(masks, 0.5)
        for p in (soft.p_cerebellum, soft.p_brainstem):
            np.testing.assert_allclose(p * 7, np.round(p * 7), atol=1e-9)

    def test_class_probabilities_sum_to_one_with_background(self):
        rng = np.random.default_rng(4)
        masks = [mask_of(rng.integers(0, 3, size=(6, 6))) for _ in range(5)]
        soft, _ = fuse(masks, 0.5)
        stack = np.stack([m.labels for m in masks])
        p0 = (stack == 0).sum(axis=0) / 5
        np.testing.assert_allclose(p0 + soft.p_cerebellum + soft.p_brainstem, 1.0, atol=1e-12)

    def test_threshold_monotone_shrink(self):
        rng = np.random.default_rng(5)
        masks = [mask_of(rng.integers(0, 3, size=(12, 12))) for _ in range(9)]
        prev = {1: None, 2: None}
        for thr in np.arange(0.1, 0.95, 0.1):
            _, hard = fuse(masks, float(thr))
            for cls in (1, 2):
                cur = hard.labels == cls
                if prev[cls] is not None:
                    assert np.all(cur <= prev[cls])
                prev[cls] = cur

    def test_tie_goes_to_background(self):
        a = mask_of([[1]])
        b = mask_of([[2]])
        _, hard = fuse([a, b], 0.3)  # p_c = p_b = 0.5, both above threshold
        assert hard.labels[0, 0] == 0

    def test_larger_class_wins_when_both_exceed(self):
        masks = [mask_of([[1]])] * 3 + [mask_of([[2]])] * 2
        _, hard = fuse(masks, 0.3)
        assert hard.labels[0, 0] == 1


class TestSegment:
    def test_self_atlas_recovers_mask(self, bank64, reg_config64):
        bank, _ = bank64
        ref = bank.subjects[0]
        cfg = FusionConfig(n=1, threshold=0.5, registration=reg_config64)
        result = segment(ref, bank, cfg, exclude_self=False)
        assert result.per_template[0].template_id == ref.id
        assert dice(ref.mask, result.hard) >= 0.99

    def test_n_exceeding_bank_rejected(self, bank64, reg_config64):
        bank, _ = bank64
        cfg = FusionConfig(n=len(bank), threshold=0.5, registration=reg_config64)
        with pytest.raises(ConfigurationError):
            segment(bank.subjects[0], bank, cfg)  # self-exclusion leaves n-1

    def test_self_exclusion_ok_when_bank_large_enough(self, bank64, reg_config64):
        bank, _ = bank64
        cfg = FusionConfig(n=2, threshold=0.5, registration=reg_config64)
        result = segment(bank.subjects[0], bank, cfg)
        assert all(t.template_id != bank.subjects[0].id for t in result.per_template)

    def test_threshold_monotone_on_fixed_registrations(self, bank64, reg_config64):
        bank, _ = bank64
        ref = bank.subjects[1]
        cfg = FusionConfig(n=4, threshold=0.5, registration=reg_config64)
        result = segment(ref, bank, cfg)
        warped = [t.warped_mask for t in result.per_template if t.warped_mask is not None]
        prev = None
        for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
            _, hard = fuse(warped, thr)
            cur = hard.labels > 0
            if prev is not None:
                assert np.all(cur <= prev)
            prev = cur

    def test_deterministic(self, bank64, reg_config64):
        bank, _ = bank64
        ref = bank.subjects[2]
        cfg = FusionConfig(n=3, threshold=0.5, registration=reg_config64)
        a = segment(ref, bank, cfg)
        b = segment(ref, bank, cfg)
        np.testing.assert_array_equal(a.hard.labels, b.hard.labels)
        np.testing.assert_array_equal(a.soft.p_cerebellum, b.soft.p_cerebellum)

    def test_parallel_jobs_match_serial(self, bank64, reg_config64):
        bank, _ = bank64
        ref = bank.subjects[3]
        cfg = FusionConfig(n=2, threshold=0.5, registration=reg_config64)
        serial = segment(ref, bank, cfg, jobs=1)
        parallel = segment(ref, bank, cfg, jobs=2)
        np.testing.assert_array_equal(serial.hard.labels, parallel.hard.labels)
