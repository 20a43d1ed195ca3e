"""DDPM (edit-friendly) and DDIM inversion, plus plain samplers.

Batching convention: inputs may carry any leading axes that the predictor
understands. An ``int`` seed draws all noise for the whole array from one
generator; a sequence of seeds draws noise per index of the leading axis,
so per-image noise does not depend on how images are batched together.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _validation
from .conditions import as_condition
from .io import atomic_write_bytes
from .schedule import forward_diffuse, posterior_mean

RECORD_MAGIC = "MDINV1"


@dataclass
class InversionRecord:
    """Trajectory anchoring an edit.

    ``x_hat[t]`` holds x̂_t for t = 0..T with ``x_hat[0]`` the source.
    ``z[t]`` holds z_t for t = 1..T (``z[0]`` unused, ``z[1]`` is zero
    because sigma_1 = 0). ``residual`` is the deterministic correction
    x_0 - mu_1(x̂_1) applied at the last step so that replay is exact.
    """

    kind: str
    x_hat: np.ndarray
    z: np.ndarray
    residual: np.ndarray
    c_inv: object
    schedule_id: str

    @property
    def num_steps(self):
        return len(self.x_hat) - 1

    @property
    def source(self):
        return self.x_hat[0]

    @property
    def latent(self):
        return self.x_hat[-1]

    def step_noise(self, t, schedule):
        """The additive term of generative step t (sigma_t z_t or residual)."""
        if self.kind == "ddim":
            return None
        if t == 1:
            return self.residual
        return schedule.sigma(t) * self.z[t]


def _draw_noise(shape, num_steps, seed):
    """Noise of shape (num_steps, *shape) reproducible per image."""
    if np.ndim(seed) == 0:
        rng = np.random.default_rng(seed)
        return rng.standard_normal((num_steps,) + tuple(shape), dtype=np.float32)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise ValueError(f"got {len(seeds)} seeds for a batch of {shape[0]}")
    out = np.empty((num_steps,) + tuple(shape), dtype=np.float32)
    for i, s in enumerate(seeds):
        out[:, i] = np.random.default_rng(s).standard_normal(
            (num_steps,) + tuple(shape[1:]), dtype=np.float32
        )
    return out


def derive_seeds(base_seed, n):
    return [int(base_seed) ^ i for i in range(n)]


def ddpm_invert(x0, c_inv, predictor, schedule, seed=0):
    """Edit-friendly DDPM inversion.

    Samples independent noisy copies x̂_t of ``x0``, then walks t = T..1
    isolating the noise z_t that maps x̂_t onto x̂_{t-1} under the model,
    overwriting x̂_{t-1} with the exactly replayed value.
    """
    x0 = _validation.check_image(x0, "x0")
    T = schedule.num_steps
    eps_tilde = _draw_noise(x0.shape, T, seed).astype(x0.dtype, copy=False)
    x_hat = np.empty((T + 1,) + x0.shape, dtype=x0.dtype)
    x_hat[0] = x0
    for t in range(1, T + 1):
        x_hat[t] = forward_diffuse(x0, t, eps_tilde[t - 1], schedule)
    z = np.zeros_like(x_hat)
    residual = np.zeros_like(x0)
    for t in range(T, 0, -1):
        eps = predictor.predict(x_hat[t], t, c_inv)
        sigma = schedule.sigma(t)
        mu = posterior_mean(x_hat[t], eps, t, sigma, schedule)
        if t == 1:
            residual = x_hat[0] - mu
        else:
            z[t] = (x_hat[t - 1] - mu) / sigma
            x_hat[t - 1] = mu + sigma * z[t]
    return InversionRecord("ddpm", x_hat, z, residual, c_inv, schedule.digest())


def ddim_invert_trajectory(x0, c, predictor, schedule):
    """Run the deterministic sampler backwards; returns the full trajectory."""
    x0 = _validation.check_image(x0, "x0")
    T = schedule.num_steps
    x_hat = np.empty((T + 1,) + x0.shape, dtype=x0.dtype)
    x_hat[0] = x0
    ab = [float(a) for a in schedule.alpha_bar]
    for t in range(1, T + 1):
        prev = x_hat[t - 1]
        # first-order: the noise estimate at the less noisy state stands in for step t
        eps = predictor.predict(prev, t, c)
        x0_pred = (prev - math.sqrt(1.0 - ab[t - 1]) * eps) / math.sqrt(ab[t - 1])
        x_hat[t] = math.sqrt(ab[t]) * x0_pred + math.sqrt(1.0 - ab[t]) * eps
    zeros = np.zeros_like(x_hat)
    return InversionRecord("ddim", x_hat, zeros, np.zeros_like(x0), c, schedule.digest())


def ddim_invert(x0, c, predictor, schedule):
    """Latent x_T reached by DDIM inversion (``x0`` itself when T = 0)."""
    return ddim_invert_trajectory(x0, c, predictor, schedule).latent


def invert(x0, c_inv, predictor, schedule, kind="ddpm", seed=0):
    if kind == "ddpm":
        return ddpm_invert(x0, c_inv, predictor, schedule, seed)
    if kind == "ddim":
        return ddim_invert_trajectory(x0, c_inv, predictor, schedule)
    raise ValueError(f"unknown inversion kind {kind!r}")


def replay(record, predictor, schedule, condition=None):
    """Regenerate from ``record.latent`` with its recorded noise."""
    cond = record.c_inv if condition is None else condition
    x = record.latent.copy()
    eta = 0.0 if record.kind == "ddim" else 1.0
    for t in range(schedule.num_steps, 0, -1):
        eps = predictor.predict(x, t, cond)
        x = posterior_mean(x, eps, t, schedule.sigma(t, eta), schedule)
        noise = record.step_noise(t, schedule)
        if noise is not None:
            x = x + noise
    return x


def ddim_generate(x_T, c, predictor, schedule):
    x = _validation.check_image(x_T, "x_T")
    for t in range(schedule.num_steps, 0, -1):
        x = posterior_mean(x, predictor.predict(x, t, c), t, 0.0, schedule)
    return x


def sample(predictor, schedule, shape, condition=None, eta=1.0, seed=0):
    """Ancestral sampling from pure noise (``eta=0`` for DDIM)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape, dtype=np.float32)
    for t in range(schedule.num_steps, 0, -1):
        sigma = schedule.sigma(t, eta)
        x = posterior_mean(x, predictor.predict(x, t, condition), t, sigma, schedule)
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape, dtype=np.float32)
    return x


def save_record(path, record):
    """JSON manifest line, then x_hat, z and residual as float32 blocks."""
    c = record.c_inv
    if isinstance(c, (list, tuple)):
        cond = [None if ci is None else str(as_condition(ci)) for ci in c]
    else:
        cond = None if c is None else str(as_condition(c))
    header = {
        "magic": RECORD_MAGIC,
        "kind": record.kind,
        "shape": list(record.x_hat.shape),
        "c_inv": cond,
        "schedule_id": record.schedule_id,
        "blocks": ["x_hat", "z", "residual"],
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (record.x_hat, record.z, record.residual)
    )
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + payload)


def load_record(path):
    line, _, payload = Path(path).read_bytes().partition(b"\n")
    header = json.loads(line)
    if header.get("magic") != RECORD_MAGIC:
        raise ValueError(f"{path} is not an inversion record")
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if len(values) != 2 * n + n // shape[0]:
        raise ValueError("inversion record payload has the wrong length")
    x_hat = values[:n].reshape(shape)
    z = values[n : 2 * n].reshape(shape)
    residual = values[2 * n :].reshape(shape[1:])
    c = header["c_inv"]
    c_inv = [as_condition(ci) for ci in c] if isinstance(c, list) else as_condition(c)
    return InversionRecord(header["kind"], x_hat, z, residual, c_inv, header["schedule_id"])
