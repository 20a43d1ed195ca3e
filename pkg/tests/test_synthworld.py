import numpy as np
import pytest

from maskdiff import synthworld as sw
from maskdiff.conditions import Condition


def corpus(scenario, variant=None, n=200, seed=0, **kw):
    return sw.generate(sw.ScenarioConfig(scenario, variant, n_images=n, rng_seed=seed, **kw))


@pytest.mark.parametrize("scenario", sw.SCENARIOS)
def test_seed_determinism(scenario):
    a, b = corpus(scenario, n=20, seed=4), corpus(scenario, n=20, seed=4)
    c = corpus(scenario, n=20, seed=5)
    for x, y in zip(a, b):
        assert x.sample_id == y.sample_id and x.condition == y.condition
        np.testing.assert_array_equal(x.image, y.image)
        assert x.masks.keys() == y.masks.keys()
    assert not np.array_equal(sw.stack_images(a), sw.stack_images(c))


@pytest.mark.parametrize("scenario", sw.SCENARIOS)
def test_samples_are_well_formed(scenario):
    for s in corpus(scenario, n=50):
        assert s.image.shape == (32, 32, 1) and s.image.dtype == np.float32
        assert -1 <= s.image.min() and s.image.max() <= 1
        for m in s.masks.values():
            assert m.shape == (32, 32) and m.dtype == bool


def test_prefix_is_independent_of_corpus_size():
    small, large = corpus("manifestation", n=10, seed=2), corpus("manifestation", n=30, seed=2)
    np.testing.assert_array_equal(sw.stack_images(small), sw.stack_images(large[:10]))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(scenario="weather"),
        dict(scenario="acquisition", variant="mixed"),
        dict(scenario="acquisition", n_images=0),
        dict(scenario="acquisition", image_size=30),
        dict(scenario="manifestation", prevalence={"disease": 1.5}),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        sw.ScenarioConfig(**kwargs)


def test_biased_acquisition_ties_marker_to_disease():
    samples = corpus("acquisition", "biased", n=400)
    marker = np.array([s.masks["marker"].any() for s in samples], float)
    disease = np.array([s.label for s in samples], float)
    assert np.corrcoef(marker, disease)[0, 1] == pytest.approx(1.0)
    for s in samples:
        assert s.masks["disease"].any() == bool(s.label)
        assert ("disease_blob" in s.condition) == bool(s.label)
        assert (s.site in s.condition) and s.site in ("site_a", "site_b")


def test_unbiased_acquisition_mixes_sites():
    samples = corpus("acquisition", "unbiased", n=400)
    combos = {(s.site, s.label) for s in samples}
    assert combos == {("site_a", 0), ("site_a", 1), ("site_b", 0), ("site_b", 1)}


def test_marker_glyph_is_drawn_exactly():
    cfg = sw.ScenarioConfig("acquisition")
    glyph = sw.marker_glyph(cfg.marker_size)
    for s in corpus("acquisition", "unbiased", n=50):
        if s.site == "site_a":
            patch = s.image[..., 0][s.masks["marker"]].reshape(glyph.shape)
            np.testing.assert_array_equal(patch, np.where(glyph, 0.95, -0.95).astype(np.float32))


BLOB_MARGIN = 0.05


def test_blob_brighter_than_background():
    samples = [s for s in corpus("acquisition", "unbiased", n=1000) if s.label == 1]
    gaps = []
    for s in samples:
        box, bg = s.masks["disease"], ~(s.masks["disease"] | s.masks["marker"])
        gaps.append(s.image[..., 0][box].mean() - s.image[..., 0][bg].mean())
    assert np.mean(gaps) > BLOB_MARGIN


def test_drain_rate_among_healthy_matches_configuration():
    samples = corpus("manifestation", "biased", n=10_000)
    healthy = [s for s in samples if s.label == 0]
    rate = np.mean([s.masks["drain"].any() for s in healthy])
    p = 0.01
    assert abs(rate - p) <= 3 * np.sqrt(p * (1 - p) / len(healthy))


def test_manifestation_masks_disjoint_and_consistent():
    for s in corpus("manifestation", "unbiased", n=300):
        assert not (s.masks["disease"] & s.masks["drain"]).any()
        assert s.masks["disease"].any() == ("disease_patch" in s.condition)
        assert s.masks["drain"].any() == ("drain_line" in s.condition)
        if not s.condition.findings:
            assert s.condition == Condition("no_findings")


def test_lung_masks_are_exact_ellipses():
    for s in corpus("population", "mixed", n=100):
        left, right = s.masks["lungs_left"], s.masks["lungs_right"]
        for name in ("lungs_left", "lungs_right"):
            np.testing.assert_array_equal(s.masks[name], sw.ellipse_mask(32, *s.geometry[name]))
        assert not (left & right).any()
        np.testing.assert_array_equal(s.masks["lungs"], left | right)


def test_healthy_population_has_no_findings():
    for s in corpus("population", "healthy", n=50):
        assert s.label == 0 and s.condition == Condition("no_findings")
        assert "pacemaker" not in s.masks


def test_mixed_population_prevalence():
    samples = corpus("population", "mixed", n=3000)
    for tag in ("edema", "pacemaker", "consolidation"):
        rate = np.mean([tag in s.condition for s in samples])
        assert abs(rate - 0.3) <= 3 * np.sqrt(0.3 * 0.7 / len(samples))
    assert all(("pacemaker" in s.masks) == ("pacemaker" in s.condition) for s in samples)


def test_edema_enlarges_lungs():
    samples = corpus("population", "mixed", n=600)
    area = {True: [], False: []}
    for s in samples:
        area["edema" in s.condition].append(s.masks["lungs"].sum())
    assert np.mean(area[True]) > 1.06 * np.mean(area[False])


def test_zones_fit_image():
    for name, fn in sw.ZONES.items():
        for zone in fn(32).values():
            assert zone.shape == (32, 32) and zone.any()
