"""Procedural labelled corpora mirroring three dataset-shift structures.

* ``acquisition``: a corner marker glyph identifies site A; in the biased
  variant every site-A image carries the disease blob and no site-B image
  does.
* ``manifestation``: a dark patch (the finding) and a bright drain line
  that almost only appears together with the patch.
* ``population``: two elliptical lung fields with exact masks, optionally
  occluded by edema, a pacemaker or consolidation.

Images are (S, S, 1) float32 in [-1, 1]. Every sample is a pure function
of ``(config, index)`` so corpora can be regenerated from their manifest.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .conditions import Condition, condition_from_findings

SCENARIOS = ("acquisition", "manifestation", "population")
VARIANTS = {
    "acquisition": ("biased", "unbiased"),
    "manifestation": ("biased", "unbiased"),
    "population": ("healthy", "mixed"),
}
DEFAULT_PREVALENCE = {
    "acquisition": {"site_a": 0.5, "disease": 0.5},
    "manifestation": {"disease": 0.5, "drain_given_disease": 0.9, "drain_given_healthy": 0.01, "drain": 0.5},
    "population": {"edema": 0.3, "pacemaker": 0.3, "consolidation": 0.3},
}


@dataclass
class ScenarioConfig:
    scenario: str
    variant: str = None
    n_images: int = 1000
    rng_seed: int = 0
    image_size: int = 32
    prevalence: dict = field(default_factory=dict)
    noise_level: float = 0.05
    field_amplitude: float = 0.12
    marker_size: int = 5
    id_prefix: str = ""

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.variant is None:
            self.variant = VARIANTS[self.scenario][0]
        if self.variant not in VARIANTS[self.scenario]:
            raise ValueError(f"variant for {self.scenario} must be one of {VARIANTS[self.scenario]}")
        if self.n_images < 1:
            raise ValueError("n_images must be at least 1")
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError("image_size must be a multiple of 4 and at least 16")
        merged = dict(DEFAULT_PREVALENCE[self.scenario])
        merged.update(self.prevalence)
        for key, p in merged.items():
            if not 0 <= p <= 1:
                raise ValueError(f"probability {key}={p} outside [0, 1]")
        self.prevalence = merged

    def to_json(self):
        return asdict(self)


@dataclass
class LabeledSample:
    sample_id: str
    image: np.ndarray = field(repr=False)
    condition: Condition
    masks: dict = field(repr=False)
    site: str = None
    label: int = 0
    geometry: dict = field(default_factory=dict, repr=False)


# -- rendering primitives ----------------------------------------------------


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _background(rng, cfg, base):
    s = cfg.image_size
    field_ = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=s / 6, mode="wrap")
    field_ *= cfg.field_amplitude / (field_.std() + 1e-12)
    return base + field_


def _finish(rng, cfg, img):
    img = img + cfg.noise_level * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)[..., None]


def ellipse_mask(size, cy, cx, ry, rx):
    """Pixels whose centre lies inside the axis-aligned ellipse."""
    yy, xx = _grid(size)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def marker_glyph(size):
    """Fixed 'L'-shaped glyph pattern of shape (size, size)."""
    g = np.zeros((size, size), bool)
    g[:, 0] = True
    g[-1, :] = True
    g[0, : max(2, size // 2)] = True
    return g


def marker_box(cfg):
    s = cfg.image_size
    m = np.zeros((s, s), bool)
    m[1 : 1 + cfg.marker_size, 1 : 1 + cfg.marker_size] = True
    return m


def _draw_marker(img, cfg):
    box = marker_box(cfg)
    ys, xs = np.nonzero(box)
    glyph = marker_glyph(cfg.marker_size)
    patch = img[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    patch[:] = np.where(glyph, 0.95, -0.95)
    return box


def _rng(cfg, index):
    return np.random.default_rng((cfg.rng_seed, SCENARIOS.index(cfg.scenario), index))


def _sample_id(cfg, index):
    prefix = cfg.id_prefix or f"{cfg.scenario}-{cfg.variant}-{cfg.rng_seed}"
    return f"{prefix}-{index:06d}"


# -- acquisition ---------------------------------------------------------------


def acquisition_zones(size):
    k = size / 32
    blob = np.zeros((size, size), bool)
    lo, hi = int(round(9 * k)), int(round(25 * k))
    blob[lo:hi, lo:hi] = True
    cfg = ScenarioConfig("acquisition", image_size=size)
    return {"blob_zone": blob, "marker_zone": marker_box(cfg)}


def render_acquisition(rng, cfg, site, disease):
    s, k = cfg.image_size, cfg.image_size / 32
    img = _background(rng, cfg, base=-0.35)
    masks = {"disease": np.zeros((s, s), bool)}
    if disease:
        sigma = rng.uniform(1.6, 2.2) * k
        cy, cx = rng.uniform(12 * k, 22 * k, size=2)
        amp = rng.uniform(0.35, 0.55)
        yy, xx = _grid(s)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        r = 2.5 * sigma
        box = np.zeros((s, s), bool)
        box[max(0, int(np.floor(cy - r))) : int(np.ceil(cy + r)) + 1, max(0, int(np.floor(cx - r))) : int(np.ceil(cx + r)) + 1] = True
        masks["disease"] = box
    img = img + cfg.noise_level * rng.standard_normal(img.shape)
    if site == "site_a":
        masks["marker"] = _draw_marker(img, cfg)
    else:
        masks["marker"] = np.zeros((s, s), bool)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)[..., None]
    cond = condition_from_findings(["disease_blob"] if disease else [], site)
    return img, cond, masks


def gen_acquisition(cfg):
    if cfg.scenario != "acquisition":
        raise ValueError("config is not an acquisition scenario")
    p = cfg.prevalence
    out = []
    for i in range(cfg.n_images):
        rng = _rng(cfg, i)
        site = "site_a" if rng.random() < p["site_a"] else "site_b"
        if cfg.variant == "biased":
            disease = site == "site_a"
        else:
            disease = bool(rng.random() < p["disease"])
        img, cond, masks = render_acquisition(rng, cfg, site, disease)
        out.append(LabeledSample(_sample_id(cfg, i), img, cond, masks, site, int(disease)))
    return out


# -- manifestation -------------------------------------------------------------


def manifestation_zones(size):
    k = size / 32
    zones = {}
    for side, (x0, x1) in {"left": (2, 15), "right": (17, 30)}.items():
        z = np.zeros((size, size), bool)
        z[int(2 * k) : int(15 * k), int(x0 * k) : int(x1 * k)] = True
        zones[f"patch_zone_{side}"] = z
    drain = np.zeros((size, size), bool)
    drain[int(18 * k) : int(30 * k), int(4 * k) : int(28 * k)] = True
    zones["drain_zone"] = drain
    return zones


def _line_mask(size, p0, p1, width):
    yy, xx = _grid(size)
    d = np.asarray(p1, float) - np.asarray(p0, float)
    u = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d)
    u = np.clip(u, 0, 1)
    dist = np.hypot(yy - (p0[0] + u * d[0]), xx - (p0[1] + u * d[1]))
    return dist <= width / 2


def render_manifestation(rng, cfg, disease, drain):
    s, k = cfg.image_size, cfg.image_size / 32
    img = _background(rng, cfg, base=-0.2)
    masks = {"disease": np.zeros((s, s), bool), "drain": np.zeros((s, s), bool)}
    if disease:
        left = rng.random() < 0.5
        cx = rng.uniform(7, 10) * k if left else rng.uniform(22, 25) * k
        cy = rng.uniform(7, 10) * k
        ry, rx = rng.uniform(3.5, 5) * k, rng.uniform(2.5, 3.5) * k
        yy, xx = _grid(s)
        r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        img = img - rng.uniform(0.35, 0.5) * np.clip((1.3 - r2) / 0.6, 0, 1)
        masks["disease"] = r2 <= 1.3
    if drain:
        y0 = rng.uniform(20, 23) * k
        x_start = 0.0 if rng.random() < 0.5 else s - 1.0
        x_end = rng.uniform(12, 20) * k
        y1 = rng.uniform(25, 28) * k
        line = _line_mask(s, (y0, x_start), (y1, x_end), width=2.0 * k)
        masks["drain"] = line & ~masks["disease"]
    img = img + cfg.noise_level * rng.standard_normal(img.shape)
    img = np.where(masks["drain"], 0.85 + 0.05 * rng.standard_normal(img.shape), img)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)[..., None]
    findings = (["disease_patch"] if disease else []) + (["drain_line"] if drain else [])
    return img, condition_from_findings(findings), masks


def gen_manifestation(cfg):
    if cfg.scenario != "manifestation":
        raise ValueError("config is not a manifestation scenario")
    p = cfg.prevalence
    out = []
    for i in range(cfg.n_images):
        rng = _rng(cfg, i)
        disease = bool(rng.random() < p["disease"])
        if cfg.variant == "biased":
            drain = bool(rng.random() < (p["drain_given_disease"] if disease else p["drain_given_healthy"]))
        else:
            drain = bool(rng.random() < p["drain"])
        img, cond, masks = render_manifestation(rng, cfg, disease, drain)
        out.append(LabeledSample(_sample_id(cfg, i), img, cond, masks, None, int(disease)))
    return out


# -- population ----------------------------------------------------------------


def nominal_lungs(size):
    k = size / 32
    return {
        "lungs_left": (16 * k, 9.5 * k, 10 * k, 4.5 * k),
        "lungs_right": (16 * k, 22.5 * k, 10 * k, 4.5 * k),
    }


def population_zones(size):
    k = size / 32
    zones = {}
    for name, (cy, cx, ry, rx) in nominal_lungs(size).items():
        lung = ellipse_mask(size, cy, cx, ry, rx)
        # consolidation sits high in the lung, so upper and lower halves get separate zones
        upper = np.zeros_like(lung)
        upper[: int(round(cy - ry + 0.9 * ry))] = True
        zones[name + "_upper"] = lung & upper
        zones[name + "_lower"] = lung & ~upper
    pm = np.zeros((size, size), bool)
    pm[int(6 * k) : int(16 * k), int(4 * k) : int(15 * k)] = True
    zones["pacemaker_zone"] = pm
    return zones


def render_population(rng, cfg, findings):
    s, k = cfg.image_size, cfg.image_size / 32
    img = _background(rng, cfg, base=0.25)
    # edema co-occurs with enlarged lung fields in this world
    grow = rng.uniform(1.04, 1.08) if "edema" in findings else 1.0
    masks, geometry = {}, {}
    lung_img = np.zeros((s, s))
    for name, (cy, cx, ry, rx) in nominal_lungs(s).items():
        cy = cy + rng.uniform(-1.0, 1.0) * k
        cx = cx + rng.uniform(-0.75, 0.75) * k
        ry = ry * rng.uniform(0.92, 1.05) * grow
        rx = rx * rng.uniform(0.92, 1.05) * grow
        m = ellipse_mask(s, cy, cx, ry, rx)
        masks[name] = m
        geometry[name] = (cy, cx, ry, rx)
        lung_img = np.maximum(lung_img, m)
    lungs = lung_img > 0
    img = np.where(lungs, img - 0.85, img)
    yy, xx = _grid(s)
    if "edema" in findings:
        img = img + np.where(lungs, rng.uniform(0.55, 0.7), 0.0)
    if "consolidation" in findings:
        name = "lungs_left" if rng.random() < 0.5 else "lungs_right"
        ys, xs = np.nonzero(masks[name])
        cy = ys.min() + rng.uniform(0.2, 0.4) * (ys.max() - ys.min())
        cx = xs.mean() + rng.uniform(-1.5, 1.5) * k
        sig = rng.uniform(2.2, 3.0) * k
        img = img + rng.uniform(0.8, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    if "pacemaker" in findings:
        ys, xs = np.nonzero(masks["lungs_left"])
        y0 = int(ys.min() + rng.uniform(2, 4) * k)
        x0 = int(xs.mean() - rng.uniform(2, 3.5) * k)
        box = np.zeros((s, s), bool)
        box[y0 : y0 + int(4 * k), x0 : x0 + int(6 * k)] = True
        img = np.where(box, 0.9, img)
        masks["pacemaker"] = box
    img = _finish(rng, cfg, img)
    return img, condition_from_findings(findings), masks, geometry


def gen_population(cfg):
    if cfg.scenario != "population":
        raise ValueError("config is not a population scenario")
    p = cfg.prevalence
    out = []
    for i in range(cfg.n_images):
        rng = _rng(cfg, i)
        findings = []
        if cfg.variant == "mixed":
            findings = [f for f in ("edema", "pacemaker", "consolidation") if rng.random() < p[f]]
        img, cond, masks, geometry = render_population(rng, cfg, findings)
        masks["lungs"] = masks["lungs_left"] | masks["lungs_right"]
        label = 0 if not findings else 1
        out.append(LabeledSample(_sample_id(cfg, i), img, cond, masks, None, label, geometry))
    return out


GENERATORS = {
    "acquisition": gen_acquisition,
    "manifestation": gen_manifestation,
    "population": gen_population,
}
ZONES = {
    "acquisition": acquisition_zones,
    "manifestation": manifestation_zones,
    "population": population_zones,
}


def generate(cfg):
    return GENERATORS[cfg.scenario](cfg)


def stack_images(samples):
    return np.stack([s.image for s in samples])


def stack_masks(samples, name):
    return np.stack([s.masks[name] for s in samples])
