import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumordistill.core import (
    MODALITY_ORDER,
    ExperimentConfig,
    ImageSlice,
    MaskMode,
    Modality,
    StudentScheme,
    TumorMask,
    TumorRegion,
    compose_region,
    directed_modality_pairs,
    one_hot,
)


class TestModality:
    def test_canonical_ordering(self):
        assert [m.name for m in MODALITY_ORDER] == ["FLAIR", "T1", "T1CE", "T2"]
        assert [m.canonical_index for m in MODALITY_ORDER] == [0, 1, 2, 3]

    def test_one_hot_endpoints(self):
        assert one_hot(Modality.FLAIR).tolist() == [1, 0, 0, 0]
        assert one_hot(Modality.T2).tolist() == [0, 0, 0, 1]

    def test_one_hot_is_binary_and_sums_to_one(self):
        for m in Modality:
            v = one_hot(m)
            assert v.shape == (4,)
            assert set(np.unique(v)) <= {0.0, 1.0}
            assert v.sum() == 1

    def test_one_hot_injective(self):
        encodings = {tuple(one_hot(m)) for m in Modality}
        assert len(encodings) == 4

    def test_from_name_accepts_file_tags(self):
        assert Modality.from_name("t1ce") is Modality.T1CE
        assert Modality.from_name("FLAIR") is Modality.FLAIR
        with pytest.raises(ValueError):
            Modality.from_name("pd")

    def test_directed_pairs(self):
        pairs = directed_modality_pairs()
        assert len(pairs) == 12
        assert all(s is not t for s, t in pairs)


class TestComposeRegion:
    def test_all_et_labels_tc_gives_ones(self):
        labels = np.full((6, 6), 4)
        mask = compose_region(labels, TumorRegion.TC)
        assert mask.pixels.all()

    def test_all_background_gives_zeros(self):
        labels = np.zeros((6, 6), dtype=int)
        for region in TumorRegion:
            assert compose_region(labels, region).pixels.sum() == 0

    def test_unknown_label_rejected(self):
        labels = np.array([[0, 3], [1, 2]])
        with pytest.raises(ValueError, match="unknown label"):
            compose_region(labels, TumorRegion.WT)

    def test_wt_matches_per_pixel_set_membership(self):
        # oracle: per-pixel membership test against the base-label union
        rng = np.random.default_rng(42)
        labels = rng.choice([0, 1, 2, 4], size=(17, 13))
        mask = compose_region(labels, TumorRegion.WT)
        for i in range(labels.shape[0]):
            for j in range(labels.shape[1]):
                assert mask.pixels[i, j] == (1 if labels[i, j] in (1, 2, 4) else 0)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_region_nesting_et_tc_wt(self, seed):
        labels = np.random.default_rng(seed).choice([0, 1, 2, 4], size=(12, 12))
        et = compose_region(labels, TumorRegion.ET).pixels
        tc = compose_region(labels, TumorRegion.TC).pixels
        wt = compose_region(labels, TumorRegion.WT).pixels
        assert np.all(et <= tc)
        assert np.all(tc <= wt)


class TestImageTypes:
    def test_image_slice_rejects_nonfinite(self):
        bad = np.zeros((4, 4))
        bad[1, 1] = np.nan
        with pytest.raises(ValueError, match="finite"):
            ImageSlice(bad)

    def test_image_slice_range_checked_per_space(self):
        ImageSlice(np.full((4, 4), 0.5), space="unit")
        ImageSlice(np.full((4, 4), -0.5), space="network")
        with pytest.raises(ValueError, match="range"):
            ImageSlice(np.full((4, 4), -0.5), space="unit")

    def test_image_slice_immutable(self):
        s = ImageSlice(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            s.pixels[0, 0] = 1.0

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError, match="binary"):
            TumorMask(np.array([[0, 2], [1, 0]]))


class TestExperimentConfig:
    def test_defaults_match_recipe(self):
        cfg = ExperimentConfig()
        assert cfg.lambda_gp == 10.0
        assert cfg.lambda_1 == 10.0 and cfg.lambda_2 == 10.0
        assert cfg.epochs == 100
        assert cfg.lr_initial == 1e-4 and cfg.lr_final == 1e-6
        assert cfg.lr_constant_epochs == 50
        assert (cfg.moment_1, cfg.moment_2) == (0.9, 0.999)

    def test_round_trip_is_lossless(self):
        cfg = ExperimentConfig(
            seed=123,
            batch_size=7,
            lr_initial=3.5e-4,
            lr_final=1.25e-6,
            mask_mode=MaskMode.RANDOM,
            student_scheme=StudentScheme.C,
            resolution=96,
            augment=False,
        )
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    def test_round_trip_file(self, tmp_path):
        cfg = ExperimentConfig(seed=9, mask_mode=MaskMode.ET)
        p = tmp_path / "config.resolved"
        cfg.save(p)
        assert ExperimentConfig.load(p) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            ExperimentConfig.from_text("nonsense_knob = 3\n")

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(lr_initial=1e-6, lr_final=1e-4)
        with pytest.raises(ValueError):
            ExperimentConfig(lr_constant_epochs=200, epochs=100)
        with pytest.raises(ValueError):
            ExperimentConfig(lambda_gp=-1.0)

    def test_hash_tracks_content(self):
        a = ExperimentConfig()
        b = ExperimentConfig(seed=1)
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == ExperimentConfig().config_hash()

    def test_enum_coercion_from_strings(self):
        cfg = ExperimentConfig(mask_mode="zeros", student_scheme="b")
        assert cfg.mask_mode is MaskMode.ZEROS
        assert cfg.student_scheme is StudentScheme.B


class TestStudentScheme:
    def test_feature_taps(self):
        assert StudentScheme.A.feature_tap == "fusion"
        assert StudentScheme.D.feature_tap == "fusion"
        assert StudentScheme.B.feature_tap == "encoder"
        assert StudentScheme.C.feature_tap == "encoder"

    def test_tumor_output_presence(self):
        assert StudentScheme.A.has_tumor_output
        assert StudentScheme.C.has_tumor_output
        assert not StudentScheme.B.has_tumor_output
        assert not StudentScheme.D.has_tumor_output
