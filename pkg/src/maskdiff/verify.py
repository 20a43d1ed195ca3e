"""Self-checks against exact oracles, runnable without training anything."""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .conditions import Condition
from .denoiser import AnalyticGaussianDenoiser, GaussianPrior
from .editing import EditRequest, edit_arrays, radedit
from .inversion import ddim_generate, ddim_invert, sample
from .metrics import ahd95, auroc, dice
from .schedule import make_linear_schedule
from .scoring import DEFAULT_TAU, ScoreResult, directional_score, filter_edits


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_replay_identity(n=100, size=32, seed=0):
    s = make_linear_schedule(50)
    p = AnalyticGaussianDenoiser(GaussianPrior(mean=0.0, var=0.5), s)
    x = np.random.default_rng(seed).uniform(-1, 1, (n, size, size, 1)).astype(np.float32)
    c = Condition("no_findings")
    out, _ = edit_arrays(x, c, c, p, s, w=1.0, seeds=seed)
    err = float(np.abs(out - x).max())
    return CheckResult("replay identity", err <= 1e-5, f"max abs error {err:.2e}")


def check_keep_exactness(n=100, size=16, seed=0):
    s = make_linear_schedule(50)
    p = AnalyticGaussianDenoiser(GaussianPrior(mean=0.2, var=0.3), s)
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        x = rng.uniform(-1, 1, (size, size, 1)).astype(np.float32)
        keep = rng.random((size, size)) < rng.uniform(0.1, 0.9)
        req = EditRequest(x, "edema", "no_findings", m_edit=~keep, m_keep=keep, cfg_weight=rng.uniform(0, 20), seed=i)
        out = radedit(req, p, s).edited
        bad += not np.array_equal(out[keep], x[keep])
    return CheckResult("keep-mask exactness", bad == 0, f"{bad}/{n} requests changed kept pixels")


def check_sampling(n=10_000, dims=4, seed=0):
    s = make_linear_schedule(50)
    out = sample(AnalyticGaussianDenoiser(GaussianPrior(), s), s, (n, dims), seed=seed)
    mean_err = float(np.abs(out.mean(axis=0)).max())
    var_err = float(np.abs(out.var(axis=0) - 1).max())
    ok = mean_err <= 0.05 and var_err <= 0.1
    return CheckResult("analytic sampling", ok, f"|mean| {mean_err:.3f}, |var-1| {var_err:.3f}")


def ddim_roundtrip_errors(steps=(10, 50, 250, 1000), n=101):
    x0 = np.linspace(-2, 2, n).astype(np.float32)
    errs = []
    for T in steps:
        s = make_linear_schedule(T)
        p = AnalyticGaussianDenoiser(GaussianPrior(), s)
        errs.append(float(np.abs(ddim_generate(ddim_invert(x0, None, p, s), None, p, s) - x0).max()))
    return errs


def check_ddim_convergence():
    errs = ddim_roundtrip_errors()
    ok = all(a > b for a, b in zip(errs, errs[1:])) and errs[-1] <= 1e-2
    return CheckResult("ddim convergence", ok, "errors " + ", ".join(f"{e:.2e}" for e in errs))


def brute_pooled_distances(a, b):
    pa, pb = np.argwhere(a).astype(float), np.argwhere(b).astype(float)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def brute_dice(a, b):
    inter = int(np.sum(a & b))
    total = int(a.sum() + b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def check_metric_oracles(n_masks=1000, n_auroc=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_masks):
        a = rng.random((16, 16)) < rng.uniform(0.02, 0.6)
        b = rng.random((16, 16)) < rng.uniform(0.02, 0.6)
        a[rng.integers(16), rng.integers(16)] = True
        b[rng.integers(16), rng.integers(16)] = True
        worst = max(worst, abs(dice(a, b) - brute_dice(a, b)))
        worst = max(worst, abs(ahd95(a, b) - np.percentile(brute_pooled_distances(a, b), 95)))
    for _ in range(n_auroc):
        m = int(rng.integers(4, 40))
        labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, m - 2)])
        scores = np.round(rng.random(m), 1)
        worst = max(worst, abs(auroc(scores, labels) - brute_auroc(scores, labels)))
    return CheckResult("metric oracles", worst <= 1e-9, f"max deviation {worst:.1e}")


def check_filter_semantics():
    v = np.array([1.0, -2.0, 0.5])
    par, anti = directional_score(3 * v, v).score, directional_score(-v, v).score
    undefined = directional_score(np.zeros(3), v)
    items = [(i, ScoreResult(sc, 1.0, 1.0)) for i, sc in enumerate([0.19, 0.2, 0.21, None, -1.0])]
    items.append((5, undefined))
    kept, dropped = filter_edits(items, DEFAULT_TAU)
    ok = (
        par == 1.0
        and anti == -1.0
        and not undefined.defined
        and [i for i, _ in kept] == [1, 2]
        and sorted(kept + dropped) == items
    )
    return CheckResult("filter semantics", ok, f"parallel {par}, antiparallel {anti}, kept {[i for i, _ in kept]}")


def check_degenerate_prior(seed=0):
    s = make_linear_schedule(50)
    rng = np.random.default_rng(seed)
    mu, eps = rng.standard_normal(8), rng.standard_normal(8)
    xt = math.sqrt(s.alpha_bar[20]) * mu + math.sqrt(1 - s.alpha_bar[20]) * eps
    got = AnalyticGaussianDenoiser(GaussianPrior(mean=mu, var=1e-14), s).predict(xt, 20)
    err = float(np.abs(got - eps).max())
    return CheckResult("degenerate prior", err <= 1e-6, f"max abs error {err:.1e}")


CHECKS = (
    check_replay_identity,
    check_keep_exactness,
    check_sampling,
    check_ddim_convergence,
    check_metric_oracles,
    check_filter_semantics,
    check_degenerate_prior,
)


def run_all():
    return [check() for check in CHECKS]
