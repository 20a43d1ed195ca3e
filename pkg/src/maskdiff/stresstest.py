"""End-to-end stress-testing harness.

Per seed: draw fresh corpora, train a weak predictor (confounded or narrow
training data) and a strong one (de-confounded or broad training data),
turn held-out real images into a synthetic stress set by editing, score and
filter the edits, then evaluate both predictors on real and synthetic test
sets. The editing denoiser is trained once per scenario and shared by all
seeds.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthworld as sw
from .conditions import Condition
from .denoiser import ConditionalDenoiser, load_checkpoint, save_checkpoint
from .editing import edit_arrays, edit_difference_maps
from .inversion import derive_seeds
from .io import array_digest, atomic_write_bytes, atomic_write_json, contact_sheet
from .metrics import accuracy, ahd95, dice
from .predictors import DECISION_THRESHOLD, LesionClassifier, LungSegmenter
from .scoring import RegionStatsEmbedder, filter_edits, score_batch

OCCLUDERS = ("edema", "pacemaker", "consolidation")

# full-scale figures for orientation only; the harness checks directions
FULL_SCALE_REFERENCE = {
    "acquisition": {"metric": "accuracy (%)", "weak": [99.1, 5.5], "strong": [74.4, 76.0]},
    "manifestation": {"metric": "accuracy (%)", "weak": [93.3, 17.9], "strong": [93.7, 81.7]},
    "population": {"metric": "delta dice (pacemaker)", "weak": 12.4, "strong": 8.2},
    "ablation": {
        "metric": "dice (%) / ahd95",
        "radedit+ddpm": [93.9, 22.79],
        "radedit+ddim": [86.2, 39.83],
        "lance+ddpm": [80.1, 65.14],
        "lance+ddim": [78.9, 69.45],
    },
    "mask_estimation": {"metric": "dice (%) / ahd95", "per_image": [33.8, 97.7], "validation": [18.4, 256.8]},
}

# variant used to train the shared editing denoiser of each scenario
DENOISER_VARIANT = {"acquisition": "unbiased", "manifestation": "unbiased", "population": "mixed"}


@dataclass
class StressConfig:
    """Everything a harness run depends on; two equal configs give equal reports."""

    scenario: str = "acquisition"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser_width: int = 32
    denoiser_epochs: int = 30
    denoiser_train_size: int = 3000
    denoiser_seed: int = 100
    predictor_epochs: int = 15
    segmenter_epochs: int = 20
    train_size: int = 1000
    narrow_train_size: int = 200
    test_size: int = 400
    edit_size: int = 100
    method: str = "radedit"
    inversion: str = "ddpm"
    cfg_weight: float = 15.0
    tau: float = 0.2
    occluders: list = field(default_factory=lambda: list(OCCLUDERS))
    ablation_occluder: str = "edema"
    mask_noise_strengths: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    mask_thresholds: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    mask_samples: int = 4
    mask_split_size: int = 50
    contact_rows: int = 8
    cache_dir: str = None

    def __post_init__(self):
        if self.scenario not in sw.SCENARIOS:
            raise ValueError(f"scenario must be one of {sw.SCENARIOS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not set(self.occluders) <= set(OCCLUDERS):
            raise ValueError(f"occluders must be drawn from {OCCLUDERS}")
        self.seeds = [int(s) for s in self.seeds]

    def to_json(self):
        d = asdict(self)
        d.pop("cache_dir")
        return d


# -- corpora -------------------------------------------------------------------

_ROLES = ("train_weak", "train_strong", "test", "stress_source", "validation")


def draw_corpus(scenario, variant, n, seed, role):
    """Corpus for one (role, seed); ids carry the role so manifests can be compared."""
    rng_seed = 10_000 * (1 + _ROLES.index(role)) + seed
    cfg = sw.ScenarioConfig(scenario, variant, n_images=n, rng_seed=rng_seed, id_prefix=f"{scenario}-{role}-s{seed}")
    return sw.generate(cfg), cfg


def corpus_manifest(samples, cfg):
    return {
        "scenario": cfg.scenario,
        "variant": cfg.variant,
        "rng_seed": cfg.rng_seed,
        "id_prefix": cfg.id_prefix,
        "n": len(samples),
        "digest": array_digest(sw.stack_images(samples)),
        "ids": [s.sample_id for s in samples],
    }


def check_disjoint(training_manifests, stress_manifest):
    """Raise if any stress-set id also appears in a training or validation corpus."""
    used = set()
    for m in training_manifests:
        used.update(m["ids"])
    leaked = used.intersection(stress_manifest["source_ids"])
    if leaked:
        raise RuntimeError(f"stress set leaks {len(leaked)} training ids, e.g. {sorted(leaked)[0]}")


# -- models ----------------------------------------------------------------------


def _denoiser_key(cfg):
    identity = {
        "scenario": cfg.scenario,
        "variant": DENOISER_VARIANT[cfg.scenario],
        "n": cfg.denoiser_train_size,
        "seed": cfg.denoiser_seed,
        "steps": cfg.steps,
        "beta": [cfg.beta_start, cfg.beta_end],
        "width": cfg.denoiser_width,
        "epochs": cfg.denoiser_epochs,
    }
    return hashlib.sha256(json.dumps(identity, sort_keys=True).encode()).hexdigest()[:16]


def denoiser_corpus(cfg):
    scfg = sw.ScenarioConfig(
        cfg.scenario,
        DENOISER_VARIANT[cfg.scenario],
        n_images=cfg.denoiser_train_size,
        rng_seed=cfg.denoiser_seed,
        id_prefix=f"{cfg.scenario}-denoiser",
    )
    return sw.generate(scfg), scfg


def scenario_denoiser(cfg, corpus=None):
    """Train (or load from ``cfg.cache_dir``) the shared editing denoiser."""
    path = None
    if cfg.cache_dir:
        path = Path(cfg.cache_dir) / f"denoiser-{cfg.scenario}-{_denoiser_key(cfg)}.ckpt"
        if path.exists():
            return load_checkpoint(path)
    samples = corpus if corpus is not None else denoiser_corpus(cfg)[0]
    model = ConditionalDenoiser(
        num_steps=cfg.steps,
        beta_start=cfg.beta_start,
        beta_end=cfg.beta_end,
        width=cfg.denoiser_width,
        epochs=cfg.denoiser_epochs,
        random_state=cfg.denoiser_seed,
    ).fit(sw.stack_images(samples), [s.condition for s in samples])
    if path is not None:
        save_checkpoint(model, path)
    return model


def train_predictor(samples, task, cfg, seed, manifest=None):
    """Fit a classifier (labels) or a lung segmenter (``lungs`` masks)."""
    X = sw.stack_images(samples)
    if task == "classifier":
        y = np.array([s.label for s in samples])
        if len(np.unique(y)) < 2:
            raise ValueError("classifier corpus has a single class")
        model = LesionClassifier(epochs=cfg.predictor_epochs, random_state=seed).fit(X, y)
    elif task == "segmenter":
        if any("lungs" not in s.masks for s in samples):
            raise ValueError("segmenter corpus lacks lung masks")
        model = LungSegmenter(epochs=cfg.segmenter_epochs, random_state=seed).fit(X, sw.stack_masks(samples, "lungs"))
    else:
        raise ValueError(f"unknown task {task!r}")
    model.training_manifest_ = {
        "task": task,
        "seed": seed,
        "corpus": None if manifest is None else manifest["id_prefix"],
    }
    return model


# -- stress sets ---------------------------------------------------------------


def edit_plan(scenario, samples, occluder=None):
    """Per-sample (c_inv, c, m_edit, m_keep) following each scenario's mask rules."""
    c_inv, c, m_edit, m_keep = [], [], [], []
    for s in samples:
        if scenario == "acquisition":
            if "disease" not in s.masks or not s.masks["disease"].any():
                raise ValueError(f"{s.sample_id}: missing disease mask")
            target = s.condition.with_findings()
            edit_mask = s.masks["disease"]
            keep = ~edit_mask
        elif scenario == "manifestation":
            if not s.masks.get("disease", np.zeros(1)).any() or "drain" not in s.masks:
                raise ValueError(f"{s.sample_id}: missing disease or drain mask")
            remaining = [f for f in s.condition.findings if f != "disease_patch"]
            target = Condition(remaining or ["no_findings"])
            edit_mask = s.masks["disease"]
            keep = s.masks["drain"]
        elif scenario == "population":
            if occluder not in OCCLUDERS:
                raise ValueError(f"population edits need an occluder from {OCCLUDERS}")
            if "lungs_left" not in s.masks:
                raise ValueError(f"{s.sample_id}: missing lung masks")
            target = Condition(occluder)
            if occluder == "pacemaker":
                edit_mask, keep = s.masks["lungs_left"], s.masks["lungs_right"]
            else:
                edit_mask, keep = s.masks["lungs"], np.zeros_like(s.masks["lungs"])
        else:
            raise ValueError(f"unknown scenario {scenario!r}")
        c_inv.append(s.condition)
        c.append(target)
        m_edit.append(edit_mask)
        m_keep.append(keep)
    return c_inv, c, np.stack(m_edit), np.stack(m_keep)


@dataclass
class StressSet:
    sources: list = field(repr=False)
    edited: np.ndarray = field(repr=False)
    m_edit: np.ndarray = field(repr=False)
    m_keep: np.ndarray = field(repr=False)
    scores: list = field(repr=False)
    kept: list
    manifest: dict = field(repr=False)

    @property
    def kept_images(self):
        return self.edited[self.kept]


def build_stress_set(samples, scenario, denoiser, embedder, cfg, seed, occluder=None, method=None, inversion=None):
    """Edit ``samples`` with the scenario mask rules, score, and filter at ``cfg.tau``."""
    method = method or cfg.method
    inversion = inversion or cfg.inversion
    c_inv, c, m_edit, m_keep = edit_plan(scenario, samples, occluder)
    X = sw.stack_images(samples)
    seeds = derive_seeds(seed, len(samples))
    edited, _ = edit_arrays(
        X,
        c_inv,
        c,
        denoiser,
        denoiser.schedule,
        m_edit=m_edit,
        m_keep=m_keep if method == "radedit" else None,
        w=cfg.cfg_weight,
        method=method,
        inversion=inversion,
        seeds=seeds,
    )
    scores = score_batch(X, edited, c_inv, c, embedder)
    kept_items, _ = filter_edits(list(zip(range(len(samples)), scores)), cfg.tau)
    kept = [i for i, _ in kept_items]
    keep_violations = sum(not np.array_equal(edited[i][m_keep[i]], X[i][m_keep[i]]) for i in kept)
    manifest = {
        "scenario": scenario,
        "occluder": occluder,
        "method": method,
        "inversion": inversion,
        "cfg_weight": cfg.cfg_weight,
        "tau": cfg.tau,
        "seed": seed,
        "source_ids": [s.sample_id for s in samples],
        "kept_ids": [samples[i].sample_id for i in kept],
        "n_edited": len(samples),
        "n_kept": len(kept),
        "n_discarded": len(samples) - len(kept),
        "n_undefined": sum(not r.defined for r in scores),
        "n_keep_violations": int(keep_violations),
        "edited_digest": array_digest(edited),
    }
    return StressSet(samples, edited, m_edit, m_keep, scores, kept, manifest)


def calibration_embedder(scenario, samples):
    return RegionStatsEmbedder(sw.ZONES[scenario](samples[0].image.shape[0])).fit(
        sw.stack_images(samples), [s.condition for s in samples]
    )


# -- evaluation ------------------------------------------------------------------


def _row(predictor, test_set, metric, value, n, seed):
    return {"predictor": predictor, "test_set": test_set, "metric": metric, "value": float(value), "n": int(n), "seed": seed}


def _seg_scores(model, X, masks):
    pred = model.predict(X)
    d = [dice(p, r) for p, r in zip(pred, masks)]
    h = [ahd95(p, r) for p, r in zip(pred, masks) if p.any()]
    return float(np.mean(d)), float(np.mean(h)) if h else float("nan"), len(h)


def aggregate(rows, keys=("predictor", "test_set", "metric")):
    """Mean and population std (ddof=0) of ``value`` across seeds per key."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["value"])
    out = []
    for key, values in groups.items():
        v = np.array(values, dtype=np.float64)
        entry = dict(zip(keys, key))
        entry.update(mean=float(v.mean()), std=float(v.std()), n_seeds=len(v))
        out.append(entry)
    return out


def _stress_sources(scenario, cfg, seed):
    variant = {"acquisition": "biased", "manifestation": "biased", "population": "healthy"}[scenario]
    pool, pcfg = draw_corpus(scenario, variant, 4 * cfg.edit_size, seed, "stress_source")
    if scenario == "acquisition":
        pool = [s for s in pool if s.label == 1]
    elif scenario == "manifestation":
        pool = [s for s in pool if s.label == 1 and s.masks["drain"].any()]
    pool = pool[: cfg.edit_size]
    if not pool:
        raise ValueError("stress source pool is empty")
    return pool, pcfg


def _classification_seed(cfg, seed, denoiser, embedder):
    sc = cfg.scenario
    weak_var, strong_var = {"acquisition": ("biased", "unbiased"), "manifestation": ("biased", "unbiased")}[sc]
    weak_corpus, wcfg = draw_corpus(sc, weak_var, cfg.train_size, seed, "train_weak")
    strong_corpus, scfg = draw_corpus(sc, strong_var, cfg.train_size, seed, "train_strong")
    test, tcfg = draw_corpus(sc, "biased", cfg.test_size, seed, "test")
    sources, pcfg = _stress_sources(sc, cfg, seed)
    manifests = {
        "train_weak": corpus_manifest(weak_corpus, wcfg),
        "train_strong": corpus_manifest(strong_corpus, scfg),
        "test": corpus_manifest(test, tcfg),
        "stress_source": corpus_manifest(sources, pcfg),
    }
    models = {
        "weak": train_predictor(weak_corpus, "classifier", cfg, seed, manifests["train_weak"]),
        "strong": train_predictor(strong_corpus, "classifier", cfg, seed, manifests["train_strong"]),
    }
    stress = build_stress_set(sources, sc, denoiser, embedder, cfg, seed)
    check_disjoint([manifests["train_weak"], manifests["train_strong"]], stress.manifest)
    if not stress.kept:
        raise RuntimeError(f"seed {seed}: every edit was filtered out")
    X_test, y_test = sw.stack_images(test), np.array([s.label for s in test])
    y_stress = np.zeros(len(stress.kept), dtype=np.int64)
    rows = []
    for name, model in models.items():
        rows.append(_row(name, "biased_real", "accuracy", accuracy(model.predict(X_test), y_test), len(test), seed))
        rows.append(_row(name, "synthetic", "accuracy", accuracy(model.predict(stress.kept_images), y_stress), len(y_stress), seed))
    return rows, manifests, stress


def _population_seed(cfg, seed, denoiser, embedder):
    sc = "population"
    narrow, ncfg = draw_corpus(sc, "healthy", cfg.narrow_train_size, seed, "train_weak")
    broad, bcfg = draw_corpus(sc, "mixed", cfg.train_size, seed, "train_strong")
    test, tcfg = draw_corpus(sc, "healthy", cfg.test_size, seed, "test")
    sources, pcfg = _stress_sources(sc, cfg, seed)
    manifests = {
        "train_weak": corpus_manifest(narrow, ncfg),
        "train_strong": corpus_manifest(broad, bcfg),
        "test": corpus_manifest(test, tcfg),
        "stress_source": corpus_manifest(sources, pcfg),
    }
    models = {
        "weak": train_predictor(narrow, "segmenter", cfg, seed, manifests["train_weak"]),
        "strong": train_predictor(broad, "segmenter", cfg, seed, manifests["train_strong"]),
    }
    rows, stresses = [], {}
    X_test, gt_test = sw.stack_images(test), sw.stack_masks(test, "lungs")
    for name, model in models.items():
        d, h, nh = _seg_scores(model, X_test, gt_test)
        rows.append(_row(name, "real", "dice", d, len(test), seed))
        rows.append(_row(name, "real", "ahd95", h, nh, seed))
    for occ in cfg.occluders:
        stress = build_stress_set(sources, sc, denoiser, embedder, cfg, seed, occluder=occ)
        check_disjoint([manifests["train_weak"], manifests["train_strong"]], stress.manifest)
        if not stress.kept:
            raise RuntimeError(f"seed {seed}: every {occ} edit was filtered out")
        stresses[occ] = stress
        gt = sw.stack_masks([sources[i] for i in stress.kept], "lungs")
        for name, model in models.items():
            d, h, nh = _seg_scores(model, stress.kept_images, gt)
            rows.append(_row(name, f"stress_{occ}", "dice", d, len(gt), seed))
            rows.append(_row(name, f"stress_{occ}", "ahd95", h, nh, seed))
    return rows, manifests, stresses


def population_deltas(summary, occluders):
    """Real-minus-stress Dice and stress-minus-real AHD95 per predictor and occluder."""
    means = {(s["predictor"], s["test_set"], s["metric"]): s["mean"] for s in summary}
    out = []
    for occ in occluders:
        for p in ("weak", "strong"):
            out.append(
                {
                    "predictor": p,
                    "stress_set": occ,
                    "delta_dice": means[(p, "real", "dice")] - means[(p, f"stress_{occ}", "dice")],
                    "delta_ahd95": means[(p, f"stress_{occ}", "ahd95")] - means[(p, "real", "ahd95")],
                }
            )
    return out


def _contact_rows(stress, limit):
    rows = []
    for i in stress.kept[:limit]:
        rows.append(
            [
                stress.sources[i].image[..., 0],
                stress.edited[i][..., 0],
                stress.m_edit[i] * 2.0 - 1.0,
                stress.m_keep[i] * 2.0 - 1.0,
            ]
        )
    return rows


def run_scenario(cfg, denoiser=None):
    """Weak/strong predictors on real vs edited test sets over ``cfg.seeds``.

    Returns ``(report, previews)`` where ``previews`` maps a name to
    contact-sheet rows (original, edited, edit mask, keep mask).
    """
    dcorpus, dcfg = denoiser_corpus(cfg)
    denoiser = denoiser or scenario_denoiser(cfg, dcorpus)
    embedder = calibration_embedder(cfg.scenario, dcorpus)
    rows, manifests, edits, previews = [], {}, [], {}
    for seed in cfg.seeds:
        if cfg.scenario == "population":
            seed_rows, seed_manifests, stresses = _population_seed(cfg, seed, denoiser, embedder)
        else:
            seed_rows, seed_manifests, stress = _classification_seed(cfg, seed, denoiser, embedder)
            stresses = {"synthetic": stress}
        rows += seed_rows
        manifests[str(seed)] = {k: {kk: vv for kk, vv in v.items() if kk != "ids"} for k, v in seed_manifests.items()}
        for name, stress in stresses.items():
            edits.append({k: v for k, v in stress.manifest.items() if k not in ("source_ids", "kept_ids")})
            if seed == cfg.seeds[0]:
                previews[f"{cfg.scenario}_{name}"] = _contact_rows(stress, cfg.contact_rows)
    summary = aggregate(rows)
    report = {
        "kind": "scenario",
        "scenario": cfg.scenario,
        "config": cfg.to_json(),
        "decision_threshold": DECISION_THRESHOLD,
        "denoiser": {"corpus": corpus_manifest(dcorpus, dcfg) | {"ids": None}, "key": _denoiser_key(cfg)},
        "rows": rows,
        "summary": summary,
        "edits": edits,
        "manifests": manifests,
        "full_scale_reference": FULL_SCALE_REFERENCE[cfg.scenario],
    }
    if cfg.scenario == "population":
        report["deltas"] = population_deltas(summary, cfg.occluders)
    return report, previews


def run_inversion_ablation(cfg, denoiser=None):
    """Add one occluder to the same healthy images with every method/inversion pair."""
    if cfg.scenario != "population":
        raise ValueError("the inversion ablation runs on the population scenario")
    dcorpus, dcfg = denoiser_corpus(cfg)
    denoiser = denoiser or scenario_denoiser(cfg, dcorpus)
    embedder = calibration_embedder("population", dcorpus)
    variants = [("radedit", "ddpm"), ("radedit", "ddim"), ("lance", "ddpm"), ("lance", "ddim")]
    rows, edits, previews = [], [], {}
    for seed in cfg.seeds:
        broad, bcfg = draw_corpus("population", "mixed", cfg.train_size, seed, "train_strong")
        strong = train_predictor(broad, "segmenter", cfg, seed, corpus_manifest(broad, bcfg))
        sources, _ = _stress_sources("population", cfg, seed)
        gt = sw.stack_masks(sources, "lungs")
        d, h, nh = _seg_scores(strong, sw.stack_images(sources), gt)
        rows.append(_row("strong", "unedited", "dice", d, len(sources), seed))
        rows.append(_row("strong", "unedited", "ahd95", h, nh, seed))
        for method, inversion in variants:
            stress = build_stress_set(
                sources, "population", denoiser, embedder, cfg, seed, cfg.ablation_occluder, method, inversion
            )
            name = f"{method}+{inversion}"
            d, h, nh = _seg_scores(strong, stress.edited, gt)
            rows.append(_row("strong", name, "dice", d, len(sources), seed))
            rows.append(_row("strong", name, "ahd95", h, nh, seed))
            edits.append({k: v for k, v in stress.manifest.items() if k not in ("source_ids", "kept_ids")})
            if seed == cfg.seeds[0]:
                stress.kept = list(range(len(sources)))
                previews[f"ablation_{method}_{inversion}"] = _contact_rows(stress, cfg.contact_rows)
    return {
        "kind": "inversion_ablation",
        "scenario": "population",
        "config": cfg.to_json(),
        "occluder": cfg.ablation_occluder,
        "rows": rows,
        "summary": aggregate(rows),
        "edits": edits,
        "full_scale_reference": FULL_SCALE_REFERENCE["ablation"],
    }, previews


def _mask_scores(pred, gt):
    d = [dice(p, g) for p, g in zip(pred, gt)]
    h = [ahd95(p, g) for p, g in zip(pred, gt) if p.any()]
    return d, h


def run_mask_estimation_eval(cfg, denoiser=None):
    """Automatic edit masks versus ground-truth disease masks on the confounded corpus.

    ``per_image`` picks the best grid point for each image against its own
    ground truth; ``validation`` picks one grid point on a validation split.
    """
    if cfg.scenario != "manifestation":
        raise ValueError("mask estimation is evaluated on the manifestation scenario")
    dcorpus, _ = denoiser_corpus(cfg)
    denoiser = denoiser or scenario_denoiser(cfg, dcorpus)
    c_a, c_b = Condition("disease_patch"), Condition("no_findings")
    grid = [(ns, th) for ns in cfg.mask_noise_strengths for th in cfg.mask_thresholds]
    rows, previews = [], {}
    for seed in cfg.seeds:
        splits = {}
        for role in ("validation", "test"):
            pool, _ = draw_corpus("manifestation", "biased", 4 * cfg.mask_split_size, seed, role)
            splits[role] = [s for s in pool if s.label == 1][: cfg.mask_split_size]

        def maps_for(samples):
            X = sw.stack_images(samples)
            return {
                ns: edit_difference_maps(X, c_a, c_b, ns, cfg.mask_samples, denoiser, denoiser.schedule, seed)
                for ns in cfg.mask_noise_strengths
            }

        val_maps = maps_for(splits["validation"])
        val_gt = sw.stack_masks(splits["validation"], "disease")
        val_dice = {(ns, th): np.mean(_mask_scores(val_maps[ns] >= th, val_gt)[0]) for ns, th in grid}
        best = max(grid, key=lambda g: (val_dice[g], -g[0], -g[1]))
        test = splits["test"]
        test_maps = maps_for(test)
        gt = sw.stack_masks(test, "disease")
        drains = sw.stack_masks(test, "drain")
        per_grid = {g: np.array([dice(m, r) for m, r in zip(test_maps[g[0]] >= g[1], gt)]) for g in grid}
        choice = np.argmax(np.stack([per_grid[g] for g in grid]), axis=0)
        per_image = np.stack([test_maps[grid[k][0]][i] >= grid[k][1] for i, k in enumerate(choice)])
        validation = test_maps[best[0]] >= best[1]
        for regime, pred in (("per_image", per_image), ("validation", validation), ("ground_truth", gt)):
            d, h = _mask_scores(pred, gt)
            rows.append(_row("estimate_edit_mask", regime, "dice", np.mean(d), len(d), seed))
            rows.append(_row("estimate_edit_mask", regime, "ahd95", np.mean(h) if h else float("nan"), len(h), seed))
            included = np.mean([(p & dm).any() for p, dm in zip(pred, drains)])
            rows.append(_row("estimate_edit_mask", regime, "drain_inclusion_rate", included, len(pred), seed))
        rows.append(_row("estimate_edit_mask", "validation", "chosen_noise_strength", best[0], 1, seed))
        rows.append(_row("estimate_edit_mask", "validation", "chosen_threshold", best[1], 1, seed))
        if seed == cfg.seeds[0]:
            previews["mask_estimation"] = [
                [s.image[..., 0], test_maps[best[0]][i] * 2 - 1, validation[i] * 2.0 - 1, per_image[i] * 2.0 - 1, gt[i] * 2.0 - 1]
                for i, s in enumerate(test[: cfg.contact_rows])
            ]
    return {
        "kind": "mask_estimation",
        "scenario": "manifestation",
        "config": cfg.to_json(),
        "prompts": [str(c_a), str(c_b)],
        "rows": rows,
        "summary": aggregate(rows),
        "full_scale_reference": FULL_SCALE_REFERENCE["mask_estimation"],
    }, previews


# -- output --------------------------------------------------------------------


def _fmt(x):
    return "nan" if x != x else f"{x:.3f}"


def report_markdown(report):
    lines = [f"# Stress report: {report['kind']} ({report['scenario']})", ""]
    if "decision_threshold" in report:
        lines += [f"Classifier decision threshold: {report['decision_threshold']}", ""]
    lines += ["| predictor | test set | metric | mean | std | seeds |", "|---|---|---|---|---|---|"]
    for s in report["summary"]:
        lines.append(
            f"| {s['predictor']} | {s['test_set']} | {s['metric']} | {_fmt(s['mean'])} | {_fmt(s['std'])} | {s['n_seeds']} |"
        )
    if "deltas" in report:
        lines += ["", "| predictor | stress set | delta dice | delta ahd95 |", "|---|---|---|---|"]
        for d in report["deltas"]:
            lines.append(f"| {d['predictor']} | {d['stress_set']} | {_fmt(d['delta_dice'])} | {_fmt(d['delta_ahd95'])} |")
    if report.get("edits"):
        lines += ["", "| seed | occluder | method | inversion | w | tau | kept | discarded | undefined |", "|---|---|---|---|---|---|---|---|---|"]
        for e in report["edits"]:
            lines.append(
                f"| {e['seed']} | {e['occluder'] or '-'} | {e['method']} | {e['inversion']} | {e['cfg_weight']} "
                f"| {e['tau']} | {e['n_kept']} | {e['n_discarded']} | {e['n_undefined']} |"
            )
    lines += ["", f"Full-scale reference (context only): `{json.dumps(report['full_scale_reference'])}`", ""]
    return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def write_report(report, previews, out_dir):
    """Write report.json, report.md and one contact-sheet PNG per preview."""
    out = Path(out_dir)
    atomic_write_json(out / "report.json", _jsonable(report))
    atomic_write_bytes(out / "report.md", report_markdown(report).encode())
    for name, rows in previews.items():
        if rows:
            contact_sheet(out / f"{name}.png", rows)
    return out / "report.json"
