import numpy as np
import pytest

from mrsynth import phantom
from mrsynth.data import LABEL_INDEX, SEQUENCES, validate_instance
from mrsynth.phantom import (
    AtlasVolume,
    PhantomConfig,
    build_atlas,
    generate_phantom,
    make_dataset,
    tissue_priors,
)


class TestGeneratePhantom:
    def test_valid_instance(self, phantom_config):
        inst = generate_phantom(phantom_config, seed=3)
        validate_instance(inst)

    def test_lesion_probability_zero(self):
        cfg = PhantomConfig(lesion_probability=0.0)
        inst = generate_phantom(cfg, seed=1)
        assert inst.mask[2:5].sum() == 0

    def test_deterministic(self, phantom_config):
        a = generate_phantom(phantom_config, seed=42)
        b = generate_phantom(phantom_config, seed=42)
        for field in ("images", "mask", "atlas", "tissue_priors"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_distinct_seeds_differ(self, phantom_config):
        a = generate_phantom(phantom_config, seed=1)
        b = generate_phantom(phantom_config, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_lesion_incidence(self):
        cfg = PhantomConfig(lesion_probability=0.6)
        n = 1000
        hits = sum(
            generate_phantom(cfg, seed=s).mask[2:5].sum() > 0 for s in range(n)
        )
        assert abs(hits / n - 0.6) <= 0.05

    def test_mask_image_consistency(self, small_corpus):
        # edema pixels carry FLAIR intensity from the edema table row
        instances, _ = small_corpus
        cfg = PhantomConfig()
        flair = SEQUENCES.index("FLAIR")
        vals = np.concatenate([
            inst.images[flair][inst.mask[LABEL_INDEX["edema"]] > 0]
            for inst in instances if inst.mask[LABEL_INDEX["edema"]].any()
        ])
        expected = cfg.intensity_table["FLAIR"]["edema"]
        assert abs(vals.mean() - expected) < 0.1

    def test_separability(self, small_corpus):
        instances, _ = small_corpus
        sep = phantom.class_separability(instances)
        assert sep >= 3 * PhantomConfig().noise_sigma

    def test_infeasible_lesion_raises(self):
        cfg = PhantomConfig(
            brain_semiaxis_y=(6.0, 7.0), brain_semiaxis_x=(6.0, 7.0),
            ventricle_semiaxis_y=(1.0, 1.5), ventricle_semiaxis_x=(1.0, 1.2),
            ventricle_offset_x=(1.5, 2.0),
            tumor_radius=(5.0, 6.0), edema_width=(3, 4),
            cavity_radius=(1.0, 2.0), lesion_probability=1.0,
        )
        with pytest.raises(phantom.PhantomGeometryError):
            for seed in range(10):
                generate_phantom(cfg, seed=seed)


class TestAtlas:
    def test_single_instance(self, phantom_config):
        inst = generate_phantom(phantom_config, seed=0, slice_index=4)
        atlas = build_atlas([inst])
        assert np.allclose(atlas.data[4], inst.images)

    def test_mean_of_two(self, phantom_config):
        a = generate_phantom(phantom_config, seed=1, slice_index=2)
        b = generate_phantom(phantom_config, seed=9, slice_index=2)
        atlas = build_atlas([a, b])
        assert np.allclose(atlas.data[2], (a.images + b.images) / 2, atol=1e-6)

    def test_identical_instances(self, phantom_config):
        inst = generate_phantom(phantom_config, seed=5, slice_index=0)
        atlas = build_atlas([inst] * 4)
        assert np.allclose(atlas.data[0], inst.images, atol=1e-6)

    def test_shape_mismatch(self, phantom_config):
        a = generate_phantom(phantom_config, seed=1)
        b = generate_phantom(PhantomConfig.for_size(128, 128), seed=1)
        with pytest.raises(ValueError, match="shape mismatch"):
            build_atlas([a, b])

    def test_triplet_clamps_at_boundaries(self):
        data = np.arange(3 * 5 * 4 * 4, dtype=np.float32).reshape(3, 5, 4, 4)
        vol = AtlasVolume(data=data)
        first = vol.triplet(0)
        assert np.array_equal(first[0], data[0, 0])   # prev clamped to 0
        assert np.array_equal(first[2], data[1, 0])
        last = vol.triplet(2)
        assert np.array_equal(last[2], data[2, 0])    # next clamped to end


class TestTissuePriors:
    def test_channel_maxima(self, phantom_config):
        rng = np.random.default_rng(5)
        geom = phantom.sample_geometry(phantom_config, rng, 7)
        priors = tissue_priors(geom)
        assert priors.shape == (3, 64, 64)
        assert priors.min() >= 0 and priors.max() <= 1
        vent = np.argwhere(geom.ventricles)
        y, x = vent[len(vent) // 2]
        assert priors[:, y, x].argmax() == 2  # CSF
        interior = geom.brain & ~geom.ventricles & ~geom.gm_band
        yy, xx = np.argwhere(interior)[50]
        assert priors[:, yy, xx].argmax() == 0  # WM
        assert priors[:, 0, 0].max() < 0.05  # background corner


class TestMakeDataset:
    def test_shapes_and_patients(self, phantom_config):
        instances, atlas = make_dataset(phantom_config, 12, seed=1,
                                        slices_per_patient=4)
        assert len(instances) == 12
        assert len({i.patient_id for i in instances}) == 3
        assert atlas.data.shape == (15, 5, 64, 64)
        for inst in instances:
            validate_instance(inst)

    def test_deterministic(self, phantom_config):
        a, _ = make_dataset(phantom_config, 6, seed=9)
        b, _ = make_dataset(phantom_config, 6, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.images, y.images)
            assert np.array_equal(x.mask, y.mask)

    def test_atlas_triplet_assigned(self, phantom_config):
        instances, atlas = make_dataset(phantom_config, 4, seed=2)
        for inst in instances:
            assert np.array_equal(inst.atlas, atlas.triplet(inst.slice_index))
