"""Mask-constrained diffusion editing and its baselines.

Three generation rules share one loop over an inversion trajectory:

* ``radedit``: guidance only inside ``m_edit``, unconditional elsewhere,
  and pixels under ``m_keep`` reset to the inversion trajectory each step.
* ``diffedit``: global guidance, everything outside ``m_edit`` reset to
  the inversion trajectory each step.
* ``lance``: global guidance, no masks.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _validation
from .conditions import as_condition
from .inversion import derive_seeds, invert
from .io import array_digest
from .schedule import forward_diffuse, posterior_mean

METHODS = ("lance", "diffedit", "radedit")
INVERSIONS = ("ddim", "ddpm")
DEFAULT_CFG_WEIGHT = 15.0


@dataclass(frozen=True)
class EditRequest:
    source: np.ndarray = field(repr=False)
    c_inv: object
    c: object
    m_edit: np.ndarray = field(default=None, repr=False)
    m_keep: np.ndarray = field(default=None, repr=False)
    cfg_weight: float = DEFAULT_CFG_WEIGHT
    method: str = "radedit"
    inversion: str = "ddpm"
    seed: int = 0

    def __post_init__(self):
        src = _validation.check_image(self.source, "source", allow_nd=False)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "c_inv", as_condition(self.c_inv))
        object.__setattr__(self, "c", as_condition(self.c))
        hw = src.shape[:2]
        m_edit = np.ones(hw, bool) if self.m_edit is None else _validation.check_mask(self.m_edit, hw, "m_edit")
        m_keep = np.zeros(hw, bool) if self.m_keep is None else _validation.check_mask(self.m_keep, hw, "m_keep")
        object.__setattr__(self, "m_edit", m_edit)
        object.__setattr__(self, "m_keep", m_keep)
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.inversion not in INVERSIONS:
            raise ValueError(f"inversion must be one of {INVERSIONS}, got {self.inversion!r}")

    def to_json(self):
        return {
            "c_inv": str(self.c_inv),
            "c": str(self.c),
            "cfg_weight": self.cfg_weight,
            "method": self.method,
            "inversion": self.inversion,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EditResult:
    edited: np.ndarray = field(repr=False)
    request: EditRequest
    trajectory_digest: str


def cfg_combine(eps_uncond, eps_cond, w):
    """Classifier-free guidance, exact at ``w = 0`` and ``w = 1``."""
    _validation.check_same_shape(eps_uncond, eps_cond, "noise predictions")
    w = float(w)
    return (1.0 - w) * eps_uncond + w * eps_cond


def _per_image(c, n):
    if isinstance(c, (list, tuple)):
        if len(c) != n:
            raise ValueError(f"got {len(c)} conditions for {n} images")
        return [as_condition(ci) for ci in c]
    return [as_condition(c)] * n


def guided_generation(record, c, predictor, schedule, w, cfg_mask=None, restore_mask=None):
    """Generate an (N, H, W, C) batch from its inversion record with CFG towards ``c``.

    ``cfg_mask`` (N, H, W) limits guidance to a region, unconditional
    outside; ``restore_mask`` resets pixels to the trajectory after every
    step.
    """
    x = record.latent.copy()
    n = len(x)
    conds = _per_image(c, n)
    if cfg_mask is not None:
        cfg_mask = np.asarray(cfg_mask, bool)[..., None]
    if restore_mask is not None:
        restore_mask = np.asarray(restore_mask, bool)[..., None]
    eta = 0.0 if record.kind == "ddim" else 1.0
    for t in range(schedule.num_steps, 0, -1):
        pred = predictor.predict(np.concatenate([x, x]), t, conds + [None] * n)
        eps_cond, eps_uncond = pred[:n], pred[n:]
        eps = cfg_combine(eps_uncond, eps_cond, w)
        if cfg_mask is not None:
            eps = np.where(cfg_mask, eps, eps_uncond)
        x = posterior_mean(x, eps, t, schedule.sigma(t, eta), schedule)
        noise = record.step_noise(t, schedule)
        if noise is not None:
            x = x + noise
        if restore_mask is not None:
            x = np.where(restore_mask, record.x_hat[t - 1], x)
    return x


def edit_arrays(
    sources,
    c_inv,
    c,
    predictor,
    schedule,
    m_edit=None,
    m_keep=None,
    w=DEFAULT_CFG_WEIGHT,
    method="radedit",
    inversion="ddpm",
    seeds=0,
):
    """Batched editing of ``sources`` (N, H, W, C); returns (edited, record).

    ``c_inv``/``c`` are one condition or one per image; masks are
    (N, H, W); ``seeds`` is a base seed or one seed per image.
    """
    sources = _validation.check_batch(sources, "sources")
    n, h, wd = sources.shape[:3]
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if np.ndim(seeds) == 0:
        seeds = derive_seeds(seeds, n)
    m_edit = np.ones((n, h, wd), bool) if m_edit is None else _validation.check_mask(m_edit, (n, h, wd), "m_edit")
    m_keep = np.zeros((n, h, wd), bool) if m_keep is None else _validation.check_mask(m_keep, (n, h, wd), "m_keep")
    record = invert(sources, c_inv, predictor, schedule, kind=inversion, seed=seeds)
    if method == "radedit":
        out = guided_generation(record, c, predictor, schedule, w, cfg_mask=m_edit, restore_mask=m_keep)
    elif method == "diffedit":
        out = guided_generation(record, c, predictor, schedule, w, restore_mask=~m_edit)
    else:
        out = guided_generation(record, c, predictor, schedule, w)
    return out, record


def _run(req, predictor, schedule, method):
    if req.method != method:
        req = replace(req, method=method)
    out, record = edit_arrays(
        req.source[None],
        [req.c_inv],
        [req.c],
        predictor,
        schedule,
        m_edit=req.m_edit[None],
        m_keep=req.m_keep[None],
        w=req.cfg_weight,
        method=method,
        inversion=req.inversion,
        seeds=[req.seed],
    )
    edited = out[0]
    return EditResult(edited, req, array_digest(record.latent, record.z, edited))


def radedit(req, predictor, schedule):
    """Edit with separate edit/keep masks over a DDPM (or DDIM) inversion."""
    return _run(req, predictor, schedule, "radedit")


def diffedit_edit(req, predictor, schedule):
    """Single-mask editing; ``m_keep`` is ignored."""
    return _run(req, predictor, schedule, "diffedit")


def lance_edit(source, c_inv, c, w, inversion_kind, predictor, schedule, seed=0):
    """Maskless global-prompt editing."""
    req = EditRequest(source, c_inv, c, cfg_weight=w, method="lance", inversion=inversion_kind, seed=seed)
    return _run(req, predictor, schedule, "lance")


def edit(req, predictor, schedule):
    return _run(req, predictor, schedule, req.method)


def edit_difference_maps(sources, c_a, c_b, noise_strength, n_samples, predictor, schedule, seed=0):
    """Max-normalised mean |eps(c_a) - eps(c_b)| per pixel, shape (N, H, W).

    All-zero difference maps stay zero.
    """
    sources = _validation.check_batch(sources, "sources")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if not 0 < noise_strength <= 1:
        raise ValueError("noise_strength must lie in (0, 1]")
    n = len(sources)
    t = max(1, int(round(noise_strength * schedule.num_steps)))
    seeds = derive_seeds(seed, n)
    rngs = [np.random.default_rng(s) for s in seeds]
    ca, cb = _per_image(c_a, n), _per_image(c_b, n)
    diff = np.zeros(sources.shape[:3], dtype=np.float64)
    for _ in range(n_samples):
        eps = np.stack([r.standard_normal(sources.shape[1:], dtype=np.float32) for r in rngs])
        x_t = forward_diffuse(sources, t, eps, schedule)
        pred = predictor.predict(np.concatenate([x_t, x_t]), t, ca + cb)
        diff += np.abs(pred[:n] - pred[n:]).mean(axis=-1)
    diff /= n_samples
    peak = diff.reshape(n, -1).max(axis=1).reshape(n, 1, 1)
    return np.divide(diff, peak, out=np.zeros_like(diff), where=peak > 0)


def estimate_edit_mask(source, c_a, c_b, noise_strength, threshold, n_samples, predictor, schedule, seed=0):
    """Automatic edit mask from the disagreement of two prompts."""
    source = _validation.check_image(source, "source", allow_nd=False)
    diff = edit_difference_maps(source[None], c_a, c_b, noise_strength, n_samples, predictor, schedule, seed)[0]
    if not diff.any():
        return np.zeros(diff.shape, dtype=bool)
    return diff >= threshold
