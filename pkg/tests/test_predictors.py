import numpy as np
import pytest

from maskdiff import synthworld as sw
from maskdiff.predictors import DECISION_THRESHOLD, LesionClassifier, LungSegmenter, load_predictor, save_predictor


def _separable(n=120, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 0.1, (n, 16, 16, 1)).astype(np.float32)
    X[y == 1, 4:12, 4:12] += 0.8
    return X, y


@pytest.fixture(scope="module")
def classifier():
    X, y = _separable()
    return LesionClassifier(width=8, epochs=4, random_state=0).fit(X, y), X, y


def test_classifier_learns_a_separable_problem(classifier):
    model, X, y = classifier
    assert model.score(X, y) >= 0.95
    assert model.best_validation_score_ == max(model.validation_scores_)


def test_classifier_outputs(classifier):
    model, X, _ = classifier
    proba = model.predict_proba(X)
    assert proba.shape == (len(X), 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert np.array_equal(model.predict(X), (proba[:, 1] >= DECISION_THRESHOLD).astype(int))


def test_classifier_is_deterministic():
    X, y = _separable(60)
    a = LesionClassifier(width=8, epochs=2, random_state=3).fit(X, y).predict_proba(X)
    b = LesionClassifier(width=8, epochs=2, random_state=3).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_single_class_is_rejected():
    X, _ = _separable(20)
    with pytest.raises(ValueError, match="class"):
        LesionClassifier(epochs=1).fit(X, np.zeros(20, int))


def test_classifier_round_trip(classifier, tmp_path):
    model, X, _ = classifier
    model.training_manifest_ = {"task": "classifier", "seed": 0}
    save_predictor(model, tmp_path / "c.ckpt")
    loaded = load_predictor(tmp_path / "c.ckpt")
    assert np.array_equal(loaded.predict_proba(X), model.predict_proba(X))
    assert loaded.get_params() == model.get_params()
    assert loaded.training_manifest_ == {"task": "classifier", "seed": 0}


def test_segmenter_fits_lungs_and_round_trips(tmp_path):
    samples = sw.generate(sw.ScenarioConfig("population", "healthy", n_images=120, rng_seed=1))
    X, masks = sw.stack_images(samples), sw.stack_masks(samples, "lungs")
    model = LungSegmenter(width=8, epochs=4, random_state=0).fit(X, masks)
    assert model.predict(X).shape == masks.shape
    assert model.score(X, masks) >= 0.8
    save_predictor(model, tmp_path / "s.ckpt")
    assert np.array_equal(load_predictor(tmp_path / "s.ckpt").predict_proba(X), model.predict_proba(X))


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b'{"magic": "nope"}\n')
    with pytest.raises(ValueError):
        load_predictor(path)
