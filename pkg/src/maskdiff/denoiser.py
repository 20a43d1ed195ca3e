"""Noise predictors: an exact Gaussian oracle and a small trainable conv net."""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _validation
from .conditions import VOCABULARY, Condition, as_condition
from .schedule import make_linear_schedule

CHECKPOINT_MAGIC = "MDCK1"


class NoisePredictor(Protocol):
    """Anything that maps ``(x_t, t, condition)`` to a noise estimate.

    ``x_t`` may carry a leading batch axis; ``condition`` is then either a
    single ``Condition``/``None`` shared by the batch or one per image.
    ``None`` requests the unconditional prediction.
    """

    def predict(self, x_t, t, condition=None): ...


def predict_noise(predictor, x_t, t, condition=None):
    out = predictor.predict(x_t, t, condition)
    _validation.check_same_shape(out, x_t, "prediction")
    return out


# -- analytic oracle ---------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    """Per-element Gaussian or Gaussian-mixture data distribution.

    With ``weights=None`` ``mean``/``var`` broadcast against the image. With
    K ``weights`` they carry a leading axis of length K.
    """

    mean: object = 0.0
    var: object = 1.0
    weights: object = None

    def __post_init__(self):
        if np.any(np.asarray(self.var) <= 0):
            raise ValueError("prior variance must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("mixture weights must be non-negative and sum to 1")
            if len(np.asarray(self.mean)) != len(w) or len(np.asarray(self.var)) != len(w):
                raise ValueError("mixture means/variances need one entry per weight")


def analytic_gaussian_eps(x_t, t, prior, schedule):
    """Minimum-MSE noise estimate when ``x0`` follows ``prior`` exactly."""
    t = schedule.check_timestep(t)
    x_t = np.asarray(x_t)
    ab = float(schedule.alpha_bar[t])
    a, s2 = math.sqrt(ab), 1.0 - ab
    x = x_t.astype(np.float64)
    if prior.weights is None:
        mu, v = np.asarray(prior.mean, np.float64), np.asarray(prior.var, np.float64)
        x0_mean = mu + a * v / (a * a * v + s2) * (x - a * mu)
    else:
        w = np.asarray(prior.weights, np.float64)
        mu = np.asarray(prior.mean, np.float64).reshape((len(w),) + (1,) * x.ndim)
        v = np.asarray(prior.var, np.float64).reshape((len(w),) + (1,) * x.ndim)
        tot = a * a * v + s2
        logp = np.log(w).reshape(mu.shape) - 0.5 * np.log(tot) - 0.5 * (x - a * mu) ** 2 / tot
        resp = np.exp(logp - logp.max(axis=0))
        resp /= resp.sum(axis=0)
        x0_mean = np.sum(resp * (mu + a * v / tot * (x - a * mu)), axis=0)
    eps = (x - a * x0_mean) / math.sqrt(s2)
    return eps.astype(x_t.dtype if x_t.dtype.kind == "f" else np.float64)


class AnalyticGaussianDenoiser:
    """Exact noise predictor for a Gaussian prior; ignores the condition."""

    def __init__(self, prior, schedule):
        self.prior = prior
        self.schedule = schedule

    def predict(self, x_t, t, condition=None):
        return analytic_gaussian_eps(x_t, t, self.prior, self.schedule)


# -- trainable conv denoiser -------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 2e-3
    condition_dropout_p: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.condition_dropout_p <= 1:
            raise ValueError("condition_dropout_p must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def timestep_embedding(t, dim):
    """Sinusoidal features of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def encode_conditions(conditions, n):
    """Multi-hot tag vectors; the unconditional query is the zero vector."""
    if conditions is None or isinstance(conditions, (Condition, str)):
        conditions = [conditions] * n
    if len(conditions) != n:
        raise ValueError(f"got {len(conditions)} conditions for {n} images")
    out = torch.zeros(n, len(VOCABULARY))
    for i, cond in enumerate(conditions):
        cond = as_condition(cond)
        if cond is not None:
            for tag in cond.tags:
                out[i, VOCABULARY.index(tag)] = 1.0
    return out


class _ResBlock(nn.Module):
    """Residual block whose inner activations get a FiLM scale and shift from ``emb``."""

    def __init__(self, ch, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * ch)

    def forward(self, h, emb):
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        a = self.conv1(F.silu(h)) * (1 + scale) + shift
        return h + self.conv2(F.silu(a))


class EpsNet(nn.Module):
    """Two-level conv net operating on 2x2 pixel-unshuffled inputs.

    Timestep and condition embeddings are summed and modulate every
    residual block. Spatial dims must be divisible by 4.
    """

    def __init__(self, in_channels=1, width=32, time_dim=32):
        super().__init__()
        c0 = 4 * in_channels
        emb = 4 * width
        self.time_dim = time_dim
        self.width = width
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        # zero init: tags never seen during training leave the prediction
        # equal to the unconditional one
        self.cond_embed = nn.Linear(len(VOCABULARY), emb, bias=False)
        nn.init.zeros_(self.cond_embed.weight)
        self.inp = nn.Conv2d(c0, width, 3, padding=1)
        self.block1 = _ResBlock(width, emb)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.block2 = _ResBlock(2 * width, emb)
        self.block3 = _ResBlock(2 * width, emb)
        self.merge = nn.Conv2d(3 * width, width, 3, padding=1)
        self.block4 = _ResBlock(width, emb)
        self.out = nn.Conv2d(width, c0, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t, cond):
        e = F.silu(self.time_mlp(timestep_embedding(t, self.time_dim)) + self.cond_embed(cond))
        h = self.block1(self.inp(F.pixel_unshuffle(x, 2)), e)
        g = self.block3(self.block2(self.down(F.silu(h)), e), e)
        g = F.interpolate(g, scale_factor=2, mode="nearest")
        h = self.block4(self.merge(torch.cat([h, g], dim=1)), e)
        return F.pixel_shuffle(self.out(F.silu(h)), 2)


def eps_mse_loss(net, x0, t, eps, cond, schedule):
    """Mean squared error of the noise prediction at timesteps ``t``."""
    ab = torch.tensor(np.array(schedule.alpha_bar), dtype=x0.dtype)[t].reshape(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return F.mse_loss(net(x_t, t, cond), eps)


class ConditionalDenoiser(BaseEstimator):
    """Trainable epsilon-prediction denoiser with classifier-free dropout.

    Parameters
    ----------
    num_steps, beta_start, beta_end : schedule the model is trained for.
    width : base channel count of :class:`EpsNet`.
    epochs, batch_size, learning_rate : Adam training budget.
    condition_dropout_p : probability of replacing the condition by the
        unconditional token during training.
    random_state : seed for initialisation, batching, noise and dropout.
    """

    def __init__(
        self,
        num_steps=50,
        beta_start=1e-4,
        beta_end=0.02,
        width=32,
        time_dim=32,
        epochs=40,
        batch_size=64,
        learning_rate=2e-3,
        condition_dropout_p=0.1,
        random_state=0,
        verbose=False,
    ):
        self.num_steps = num_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.width = width
        self.time_dim = time_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.condition_dropout_p = condition_dropout_p
        self.random_state = random_state
        self.verbose = verbose

    @property
    def schedule(self):
        return make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)

    def _build(self, image_shape):
        h, w, c = image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image height and width must be divisible by 4, got {h}x{w}")
        torch.manual_seed(self.random_state)
        self.net_ = EpsNet(c, self.width, self.time_dim)
        self.image_shape_ = tuple(image_shape)

    def fit(self, X, conditions):
        X = _validation.check_batch(X)
        if len(X) == 0:
            raise ValueError("cannot train on an empty dataset")
        if len(conditions) != len(X):
            raise ValueError("need one condition per image")
        if not 0 <= self.condition_dropout_p <= 1:
            raise ValueError("condition_dropout_p must lie in [0, 1]")
        self._build(X.shape[1:])
        schedule = self.schedule
        rng = np.random.default_rng(self.random_state)
        gen = torch.Generator().manual_seed(self.random_state)
        data = torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2), dtype=np.float32))
        cond = encode_conditions(list(conditions), len(X))
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.loss_curve_ = []
        self.net_.train()
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = torch.from_numpy(order[start : start + self.batch_size])
                x0, c = data[idx], cond[idx].clone()
                drop = torch.rand(len(idx), generator=gen) < self.condition_dropout_p
                c[drop] = 0.0
                t = torch.randint(1, schedule.num_steps + 1, (len(idx),), generator=gen)
                eps = torch.randn(x0.shape, generator=gen)
                loss = eps_mse_loss(self.net_, x0, t, eps, c, schedule)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(X))
            if self.verbose:
                print(f"epoch {epoch + 1}/{self.epochs} loss {self.loss_curve_[-1]:.4f}")
        self.net_.eval()
        return self

    def predict(self, x_t, t, condition=None):
        check_is_fitted(self, "net_")
        x = np.asarray(x_t, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {x.shape[1:]}")
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside 1..{self.num_steps}")
        if single and not (condition is None or isinstance(condition, (Condition, str))):
            condition = condition[0]
        cond = encode_conditions(condition, len(x))
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
            tt = torch.full((len(x),), int(t), dtype=torch.long)
            out = self.net_(xt, tt, cond).numpy().transpose(0, 2, 3, 1)
        out = np.ascontiguousarray(out)
        return out[0] if single else out


def train_denoiser(images, conditions, cfg, schedule, width=32):
    """Fit a :class:`ConditionalDenoiser` with the budget in ``cfg``."""
    model = ConditionalDenoiser(
        num_steps=schedule.num_steps,
        beta_start=float(schedule.beta[0]),
        beta_end=float(schedule.beta[-1]),
        width=width,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        condition_dropout_p=cfg.condition_dropout_p,
        random_state=cfg.rng_seed,
    )
    return model.fit(images, conditions)


def save_checkpoint(model, path):
    """JSON header line followed by little-endian float32 parameters."""
    check_is_fitted(model, "net_")
    state = model.net_.state_dict()
    header = {
        "magic": CHECKPOINT_MAGIC,
        "architecture": "EpsNet",
        "params": model.get_params(),
        "vocab": list(VOCABULARY),
        "image_shape": list(model.image_shape_),
        "seed": model.random_state,
        "tensors": [[name, list(v.shape)] for name, v in state.items()],
        "loss_curve": list(model.loss_curve_),
    }
    blob = b"".join(v.detach().numpy().astype("<f4").tobytes() for v in state.values())
    from .io import atomic_write_bytes

    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    line, _, blob = raw.partition(b"\n")
    header = json.loads(line)
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    if header["vocab"] != list(VOCABULARY):
        raise ValueError("checkpoint vocabulary does not match this build")
    model = ConditionalDenoiser(**header["params"])
    model._build(tuple(header["image_shape"]))
    values = np.frombuffer(blob, dtype="<f4")
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        state[name] = torch.from_numpy(values[offset : offset + n].reshape(shape).astype(np.float32))
        offset += n
    if offset != len(values):
        raise ValueError("checkpoint parameter block has the wrong length")
    model.net_.load_state_dict(state)
    model.net_.eval()
    model.loss_curve_ = header.get("loss_curve", [])
    return model


