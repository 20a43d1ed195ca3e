"""Directional editing score over a pluggable joint embedder, and filtering."""

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conditions import as_condition

DEFAULT_TAU = 0.2


class JointEmbedder(Protocol):
    def embed_image(self, image): ...

    def embed_text(self, condition): ...


@dataclass(frozen=True)
class ScoreResult:
    score: float | None
    delta_image_norm: float
    delta_text_norm: float

    @property
    def defined(self):
        return self.score is not None


def directional_score(delta_image, delta_text):
    di = np.asarray(delta_image, dtype=np.float64).ravel()
    dt = np.asarray(delta_text, dtype=np.float64).ravel()
    ni, nt = float(np.linalg.norm(di)), float(np.linalg.norm(dt))
    if ni == 0 or nt == 0:
        return ScoreResult(None, ni, nt)
    score = float(np.clip(di @ dt / (ni * nt), -1.0, 1.0))
    return ScoreResult(score, ni, nt)


def editing_score(i_real, t_real, i_edit, t_edit, embedder):
    """Cosine between the image-embedding change and the text-embedding change.

    The score is undefined (``None``) when either change is exactly zero,
    e.g. for an unedited image or identical prompts.
    """
    delta_image = embedder.embed_image(i_edit) - embedder.embed_image(i_real)
    delta_text = embedder.embed_text(t_edit) - embedder.embed_text(t_real)
    return directional_score(delta_image, delta_text)


def filter_edits(items, tau=DEFAULT_TAU):
    """Split ``(edit, ScoreResult)`` pairs into (kept, discarded), order preserved.

    Scores equal to ``tau`` are kept; undefined scores are discarded.
    """
    kept, discarded = [], []
    for item in items:
        score = item[1]
        (kept if score.defined and score.score >= tau else discarded).append(item)
    return kept, discarded


class RegionStatsEmbedder(BaseEstimator):
    """Toy joint embedder built from mean intensities inside fixed zones.

    ``embed_image`` returns the zone means of an image. ``embed_text``
    returns, for a tag set, the average image embedding of calibration
    samples carrying exactly that tag set. Tag sets with fewer than
    ``min_group_size`` calibration samples (or none) fall back to an
    additive per-tag least-squares fit over all calibration samples.

    Parameters
    ----------
    zones : dict mapping zone name to a boolean (H, W) mask.
    min_group_size : smallest group whose plain mean is trusted.
    """

    def __init__(self, zones, min_group_size=20):
        self.zones = zones
        self.min_group_size = min_group_size

    def fit(self, images, conditions):
        images = np.asarray(images, dtype=np.float32)
        conds = [as_condition(c) for c in conditions]
        if len(conds) != len(images) or any(c is None for c in conds):
            raise ValueError("need one tag set per calibration image")
        self.zone_names_ = sorted(self.zones)
        self._weights = np.stack(
            [np.asarray(self.zones[z], np.float64) / np.sum(self.zones[z]) for z in self.zone_names_]
        )
        feats = self._embed_batch(images)
        keys = [str(c) for c in conds]
        self.text_vectors_ = {}
        for key in sorted(set(keys)):
            idx = [i for i, k in enumerate(keys) if k == key]
            if len(idx) >= self.min_group_size:
                self.text_vectors_[key] = feats[idx].mean(axis=0)
        self.tags_ = sorted({t for c in conds for t in c.tags})
        design = np.array([[t in c for t in self.tags_] for c in conds], dtype=np.float64)
        self.tag_coef_, *_ = np.linalg.lstsq(design, feats, rcond=None)
        return self

    def _embed_batch(self, images):
        gray = images.mean(axis=-1) if images.ndim == 4 else images
        return np.einsum("nhw,zhw->nz", gray.astype(np.float64), self._weights)

    def embed_image(self, image):
        check_is_fitted(self, "text_vectors_")
        image = np.asarray(image, dtype=np.float32)
        return self._embed_batch(image[None])[0]

    def embed_images(self, images):
        check_is_fitted(self, "text_vectors_")
        return self._embed_batch(np.asarray(images, dtype=np.float32))

    def embed_text(self, condition):
        check_is_fitted(self, "text_vectors_")
        cond = as_condition(condition)
        key = str(cond)
        if key in self.text_vectors_:
            return self.text_vectors_[key]
        unknown = [t for t in cond.tags if t not in self.tags_]
        if unknown:
            raise KeyError(f"no calibration samples for tags {unknown}")
        row = np.array([t in cond for t in self.tags_], dtype=np.float64)
        return row @ self.tag_coef_


def toy_embedder(zones, images, conditions):
    return RegionStatsEmbedder(zones).fit(images, conditions)


def score_batch(real_images, edited_images, t_real, t_edit, embedder):
    """Editing scores for aligned batches of real and edited images."""
    real = embedder.embed_images(real_images)
    edited = embedder.embed_images(edited_images)
    n = len(real)
    t_real = t_real if isinstance(t_real, (list, tuple)) else [t_real] * n
    t_edit = t_edit if isinstance(t_edit, (list, tuple)) else [t_edit] * n
    return [
        directional_score(edited[i] - real[i], embedder.embed_text(t_edit[i]) - embedder.embed_text(t_real[i]))
        for i in range(n)
    ]
