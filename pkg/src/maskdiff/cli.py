"""``maskdiff`` command-line entry point.

Subcommands: gen, train, edit, stress, verify. Settings come from built-in
defaults, then an optional JSON ``--config`` file, then command-line flags.
Every flag is named after the config key it overrides (``--cfg-weight`` sets
``cfg_weight``).
"""

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import synthworld as sw
from .conditions import Condition
from .denoiser import ConditionalDenoiser, load_checkpoint, save_checkpoint
from .editing import INVERSIONS, METHODS, EditRequest, edit
from .io import array_digest, atomic_write_json, contact_sheet, load_mask, load_tensor, save_png, save_tensor
from .predictors import LesionClassifier, LungSegmenter, save_predictor
from .scoring import filter_edits, score_batch
from . import stresstest as st
from .verify import run_all

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VERIFY = 4
EXIT_UNWRITABLE = 5

EXPERIMENTS = ("scenario", "inversion_ablation", "mask_estimation")
TASKS = ("denoiser", "classifier", "segmenter")

_num_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenario": {"enum": list(sw.SCENARIOS)},
        "variant": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "steps": {"type": "integer", "minimum": 1},
        "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "method": {"enum": list(METHODS)},
        "inversion": {"enum": list(INVERSIONS)},
        "cfg_weight": {"type": "number", "minimum": 0},
        "tau": {"type": "number", "minimum": -1, "maximum": 1},
        "out": {"type": "string"},
        "experiment": {"enum": list(EXPERIMENTS)},
        "task": {"enum": list(TASKS)},
        "corpus": {"type": "string"},
        "checkpoint": {"type": "string"},
        "manifest": {"type": "string"},
        "cache_dir": {"type": ["string", "null"]},
        "n_images": {"type": "integer", "minimum": 1},
        "rng_seed": {"type": "integer", "minimum": 0},
        "image_size": {"type": "integer", "minimum": 16, "multipleOf": 4},
        "epochs": {"type": "integer", "minimum": 1},
        "denoiser_width": {"type": "integer", "minimum": 4},
        "denoiser_epochs": {"type": "integer", "minimum": 1},
        "denoiser_train_size": {"type": "integer", "minimum": 2},
        "denoiser_seed": {"type": "integer", "minimum": 0},
        "predictor_epochs": {"type": "integer", "minimum": 1},
        "segmenter_epochs": {"type": "integer", "minimum": 1},
        "train_size": {"type": "integer", "minimum": 10},
        "narrow_train_size": {"type": "integer", "minimum": 10},
        "test_size": {"type": "integer", "minimum": 4},
        "edit_size": {"type": "integer", "minimum": 1},
        "occluders": {"type": "array", "items": {"enum": list(st.OCCLUDERS)}, "minItems": 1},
        "ablation_occluder": {"enum": list(st.OCCLUDERS)},
        "mask_noise_strengths": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "minItems": 1},
        "mask_thresholds": _num_list,
        "mask_samples": {"type": "integer", "minimum": 1},
        "mask_split_size": {"type": "integer", "minimum": 1},
        "contact_rows": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS = {
    "scenario": "acquisition",
    "seeds": [0, 1, 2, 3, 4],
    "steps": 50,
    "method": "radedit",
    "inversion": "ddpm",
    "cfg_weight": 15.0,
    "tau": 0.2,
    "out": "maskdiff-out",
    "experiment": "scenario",
    "task": "denoiser",
    "n_images": 1000,
    "rng_seed": 0,
    "epochs": 30,
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- configuration ---------------------------------------------------------------


def _seeds(text):
    """``5`` means seeds 0..4; ``3,7`` means exactly those seeds."""
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be positive")
    return list(range(n))


def _float_list(text):
    return [float(s) for s in text.split(",") if s.strip()]


def _str_list(text):
    return [s for s in text.split(",") if s.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (each flag overrides the config key of the same name)")
    g.add_argument("--config", help="JSON config file validated against the built-in schema")
    g.add_argument("--scenario", choices=sw.SCENARIOS)
    g.add_argument("--seeds", type=_seeds, help="seed count N (seeds 0..N-1) or comma list")
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--inversion", choices=INVERSIONS)
    g.add_argument("--cfg-weight", type=float, help="guidance weight w")
    g.add_argument("--tau", type=float, help="edit filter threshold")
    g.add_argument("--steps", type=int, help="diffusion steps T")
    g.add_argument("--out", help="output directory (or checkpoint path for train)")
    g.add_argument("--cache-dir", help="directory for cached editing denoisers")

    p = argparse.ArgumentParser(prog="maskdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--variant")
    s.add_argument("--n-images", type=int)
    s.add_argument("--rng-seed", type=int)
    s.add_argument("--image-size", type=int)

    s = sub.add_parser("train", parents=[common], help="train a denoiser, classifier or segmenter")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--corpus", help="corpus directory written by gen")
    s.add_argument("--epochs", type=int)
    s.add_argument("--denoiser-width", type=int)

    s = sub.add_parser("edit", parents=[common], help="apply a JSON list of edit requests")
    s.add_argument("--manifest", help="JSON file with a list of edit requests")
    s.add_argument("--checkpoint", help="denoiser checkpoint written by train")
    s.add_argument("--corpus", help="calibration corpus for the edit scores")

    s = sub.add_parser("stress", parents=[common], help="run a stress-testing experiment")
    s.add_argument("--experiment", choices=EXPERIMENTS)
    s.add_argument("--edit-size", type=int)
    s.add_argument("--train-size", type=int)
    s.add_argument("--test-size", type=int)
    s.add_argument("--denoiser-epochs", type=int)
    s.add_argument("--denoiser-train-size", type=int)
    s.add_argument("--predictor-epochs", type=int)
    s.add_argument("--segmenter-epochs", type=int)
    s.add_argument("--occluders", type=_str_list, help="comma list of population occluders")
    s.add_argument("--mask-noise-strengths", type=_float_list)
    s.add_argument("--mask-thresholds", type=_float_list)

    sub.add_parser("verify", parents=[common], help="run the analytic and metric self-checks")
    return p


def resolve_config(args):
    """Defaults, then the config file, then flags; validated against ``CONFIG_SCHEMA``."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_MISSING, f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
    for key, value in vars(args).items():
        if key not in ("command", "config") and value is not None:
            cfg[key] = value
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, f"config error at {where}: {exc.message}") from None
    return {**DEFAULTS, **cfg, "_explicit_scenario": "scenario" in cfg}


def stress_config(cfg):
    names = {f.name for f in fields(st.StressConfig)}
    try:
        return st.StressConfig(**{k: v for k, v in cfg.items() if k in names})
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return path


def _writable_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise CliError(EXIT_UNWRITABLE, f"output directory not writable: {path} ({exc.strerror})") from None
    return path


# -- corpus directories ------------------------------------------------------------


def save_corpus(samples, scfg, out):
    """images.mdt, one mask_<name>.mdt per mask name, index.json and a preview sheet."""
    out = _writable_dir(out)
    names = sorted({n for s in samples for n in s.masks})
    save_tensor(out / "images.mdt", sw.stack_images(samples))
    for name in names:
        stack = np.stack([s.masks.get(name, np.zeros(s.image.shape[:2], bool)) for s in samples])
        save_tensor(out / f"mask_{name}.mdt", stack.astype(np.float32))
    index = {
        "config": scfg.to_json(),
        "mask_names": names,
        "samples": [
            {"id": s.sample_id, "condition": str(s.condition), "label": s.label, "site": s.site, "masks": sorted(s.masks)}
            for s in samples
        ],
    }
    atomic_write_json(out / "index.json", index)
    contact_sheet(out / "preview.png", [[s.image[..., 0]] for s in samples[:8]])
    return out


def load_corpus(path):
    path = _require(path, "corpus directory")
    index = json.loads(_require(path / "index.json", "corpus index").read_text())
    images = load_tensor(path / "images.mdt")
    masks = {n: load_tensor(path / f"mask_{n}.mdt") > 0.5 for n in index["mask_names"]}
    return [
        sw.LabeledSample(
            e["id"], images[i], Condition(e["condition"]), {n: masks[n][i] for n in e["masks"]}, e["site"], e["label"]
        )
        for i, e in enumerate(index["samples"])
    ]


# -- commands ---------------------------------------------------------------------


def cmd_gen(cfg):
    try:
        scfg = sw.ScenarioConfig(
            cfg["scenario"],
            cfg.get("variant"),
            n_images=cfg["n_images"],
            rng_seed=cfg["rng_seed"],
            image_size=cfg.get("image_size", 32),
            id_prefix=f"{cfg['scenario']}-gen",
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = save_corpus(sw.generate(scfg), scfg, cfg["out"])
    print(f"wrote {scfg.n_images} images to {out}")
    return EXIT_OK


def cmd_train(cfg):
    if "corpus" not in cfg:
        raise CliError(EXIT_CONFIG, "train needs --corpus")
    samples = load_corpus(cfg["corpus"])
    out = Path(cfg["out"])
    if out.suffix == "":
        out = out / f"{cfg['task']}.ckpt"
    _writable_dir(out.parent)
    X = sw.stack_images(samples)
    seed = cfg["seeds"][0]
    if cfg["task"] == "denoiser":
        model = ConditionalDenoiser(
            num_steps=cfg["steps"],
            beta_start=cfg.get("beta_start", 1e-4),
            beta_end=cfg.get("beta_end", 0.02),
            width=cfg.get("denoiser_width", 32),
            epochs=cfg["epochs"],
            random_state=seed,
        ).fit(X, [s.condition for s in samples])
        save_checkpoint(model, out)
    else:
        try:
            if cfg["task"] == "classifier":
                model = LesionClassifier(epochs=cfg["epochs"], random_state=seed).fit(X, [s.label for s in samples])
            else:
                if any("lungs" not in s.masks for s in samples):
                    raise ValueError("segmenter corpus lacks lung masks")
                model = LungSegmenter(epochs=cfg["epochs"], random_state=seed).fit(X, sw.stack_masks(samples, "lungs"))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        model.training_manifest_ = {"task": cfg["task"], "seed": seed, "corpus": str(cfg["corpus"])}
        save_predictor(model, out)
    print(f"wrote {cfg['task']} checkpoint to {out}")
    return EXIT_OK


def _load_request(entry, base, cfg):
    source = load_tensor(_require(base / entry["source"], "edit source"))

    def mask(key):
        if key not in entry:
            return None
        value = entry[key]
        if value in ("all", "none"):
            return np.full(source.shape[:2], value == "all")
        p = _require(base / value, key)
        return load_mask(p) if p.suffix == ".png" else load_tensor(p) > 0.5

    return EditRequest(
        source,
        entry["c_inv"],
        entry["c"],
        m_edit=mask("m_edit"),
        m_keep=mask("m_keep"),
        cfg_weight=entry.get("cfg_weight", cfg["cfg_weight"]),
        method=entry.get("method", cfg["method"]),
        inversion=entry.get("inversion", cfg["inversion"]),
        seed=entry.get("seed", 0),
    )


REQUEST_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["id", "source", "c_inv", "c"],
        "properties": {
            "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
            "source": {"type": "string"},
            "c_inv": {"type": "string"},
            "c": {"type": "string"},
            "m_edit": {"type": "string"},
            "m_keep": {"type": "string"},
            "cfg_weight": {"type": "number", "minimum": 0},
            "method": {"enum": list(METHODS)},
            "inversion": {"enum": list(INVERSIONS)},
            "seed": {"type": "integer", "minimum": 0},
        },
    },
}


def cmd_edit(cfg):
    for key in ("manifest", "checkpoint"):
        if key not in cfg:
            raise CliError(EXIT_CONFIG, f"edit needs --{key}")
    manifest = _require(cfg["manifest"], "edit manifest")
    try:
        entries = json.loads(manifest.read_text())
        jsonschema.validate(entries, REQUEST_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise CliError(EXIT_CONFIG, f"bad edit manifest: {getattr(exc, 'message', exc)}") from None
    denoiser = load_checkpoint(_require(cfg["checkpoint"], "denoiser checkpoint"))
    scenario = cfg["scenario"]
    if "corpus" in cfg:
        calib = load_corpus(cfg["corpus"])
        if not cfg.get("_explicit_scenario"):
            scenario = json.loads((Path(cfg["corpus"]) / "index.json").read_text())["config"]["scenario"]
    else:
        calib = st.denoiser_corpus(stress_config(cfg))[0]
    embedder = st.calibration_embedder(scenario, calib)
    out = _writable_dir(cfg["out"])
    base = manifest.parent
    try:
        requests = [_load_request(e, base, cfg) for e in entries]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    results = [edit(r, denoiser, denoiser.schedule) for r in requests]
    scores = score_batch(
        np.stack([r.source for r in requests]),
        np.stack([r.edited for r in results]),
        [r.c_inv for r in requests],
        [r.c for r in requests],
        embedder,
    )
    kept, _ = filter_edits(list(zip(range(len(requests)), scores)), cfg["tau"])
    kept = {i for i, _ in kept}
    index = []
    for i, (entry, req, res, sc) in enumerate(zip(entries, requests, results, scores)):
        save_tensor(out / f"{entry['id']}.mdt", res.edited)
        save_png(out / f"{entry['id']}.png", res.edited)
        index.append(
            {
                "id": entry["id"],
                "request": req.to_json(),
                "source_digest": array_digest(req.source),
                "edited_digest": array_digest(res.edited),
                "trajectory_digest": res.trajectory_digest,
                "score": sc.score,
                "kept": i in kept,
            }
        )
    atomic_write_json(out / "edits.json", st._jsonable({"tau": cfg["tau"], "edits": index}))
    print(f"edited {len(index)} images, kept {len(kept)} at tau={cfg['tau']}")
    return EXIT_OK


def cmd_stress(cfg):
    scfg = stress_config(cfg)
    out = _writable_dir(cfg["out"])
    runner = {
        "scenario": st.run_scenario,
        "inversion_ablation": st.run_inversion_ablation,
        "mask_estimation": st.run_mask_estimation_eval,
    }[cfg["experiment"]]
    try:
        report, previews = runner(scfg)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    path = st.write_report(report, previews, out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(cfg):
    results = run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "edit": cmd_edit, "stress": cmd_stress, "verify": cmd_verify}


def main(argv=None):
    threads = os.environ.get("MASKDIFF_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"maskdiff: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
