"""Small downstream models stress-tested by edited corpora.

Both follow the scikit-learn estimator API and select the checkpoint with
the best validation score (AUROC for the classifier, Dice for the
segmenter).
"""

import copy
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _validation
from .io import atomic_write_bytes
from .metrics import auroc, dice

DECISION_THRESHOLD = 0.5


def _to_torch(X):
    X = _validation.check_batch(X)
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2), dtype=np.float32))


def _split(n, validation_fraction, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * validation_fraction)))
    return order[n_val:], order[:n_val]


class _ClassifierNet(nn.Module):
    def __init__(self, in_channels, width):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.head = nn.Linear(2 * width, 1)

    def forward(self, x):
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.conv3(h))
        return self.head(h.mean(dim=(2, 3)))[:, 0]


class _SegmenterNet(nn.Module):
    def __init__(self, in_channels, width):
        super().__init__()
        self.enc1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.enc2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.enc3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.dec2 = nn.Conv2d(4 * width, width, 3, padding=1)
        self.dec1 = nn.Conv2d(2 * width, width, 3, padding=1)
        self.out = nn.Conv2d(width, 1, 1)

    def forward(self, x):
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(F.max_pool2d(e1, 2)))
        e3 = F.relu(self.enc3(F.max_pool2d(e2, 2)))
        d2 = F.relu(self.dec2(torch.cat([e2, F.interpolate(e3, scale_factor=2)], 1)))
        d1 = F.relu(self.dec1(torch.cat([e1, F.interpolate(d2, scale_factor=2)], 1)))
        return self.out(d1)[:, 0]


class _TorchEstimator(BaseEstimator):
    def _train(self, net, X, y, loss_fn, score_fn):
        rng = np.random.default_rng(self.random_state)
        gen = torch.Generator().manual_seed(self.random_state)
        train_idx, val_idx = _split(len(X), self.validation_fraction, rng)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        # ties on the validation score (common once AUROC saturates) go to
        # the epoch with the lower validation loss
        best, best_state = (-np.inf, -np.inf), None
        self.validation_scores_ = []
        for _ in range(self.epochs):
            net.train()
            order = train_idx[rng.permutation(len(train_idx))]
            for start in range(0, len(order), self.batch_size):
                idx = torch.from_numpy(order[start : start + self.batch_size])
                xb = X[idx]
                if self.input_noise > 0:
                    xb = xb + self.input_noise * torch.randn(xb.shape, generator=gen)
                loss = loss_fn(net(xb), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            net.eval()
            with torch.no_grad():
                logits = net(X[val_idx])
                score = (score_fn(logits, y[val_idx]), -float(loss_fn(logits, y[val_idx])))
            self.validation_scores_.append(score[0])
            if score > best:
                best, best_state = score, copy.deepcopy(net.state_dict())
        net.load_state_dict(best_state)
        net.eval()
        self.best_validation_score_ = best[0]
        return net

    def _forward(self, X):
        check_is_fitted(self, "net_")
        with torch.no_grad():
            return torch.sigmoid(self.net_(_to_torch(X))).numpy().astype(np.float64)


class LesionClassifier(ClassifierMixin, _TorchEstimator):
    """Binary image classifier: three conv layers and a linear head."""

    def __init__(
        self,
        width=16,
        epochs=15,
        batch_size=32,
        learning_rate=2e-3,
        validation_fraction=0.2,
        input_noise=0.0,
        random_state=0,
    ):
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.input_noise = input_noise
        self.random_state = random_state

    def fit(self, X, y):
        y = _validation.check_binary_labels(y)
        if len(np.unique(y)) < 2:
            raise ValueError("classifier training needs both classes present")
        Xt = _to_torch(X)
        if len(Xt) != len(y):
            raise ValueError("X and y have different lengths")
        self.classes_ = np.array([0, 1])
        torch.manual_seed(self.random_state)
        self.in_channels_ = Xt.shape[1]
        net = _ClassifierNet(Xt.shape[1], self.width)
        yt = torch.from_numpy(y.astype(np.float32))

        def score(logits, target):
            t = target.numpy().astype(int)
            return auroc(logits.numpy(), t) if 0 < t.sum() < len(t) else 0.0

        self.net_ = self._train(net, Xt, yt, F.binary_cross_entropy_with_logits, score)
        return self

    def predict_proba(self, X):
        p = self._forward(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= DECISION_THRESHOLD).astype(np.int64)


class LungSegmenter(_TorchEstimator):
    """Per-pixel binary segmenter: three-level mini encoder-decoder."""

    def __init__(
        self,
        width=16,
        epochs=20,
        batch_size=16,
        learning_rate=2e-3,
        validation_fraction=0.2,
        input_noise=0.0,
        random_state=0,
    ):
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.input_noise = input_noise
        self.random_state = random_state

    def fit(self, X, masks):
        Xt = _to_torch(X)
        masks = np.asarray(masks)
        if masks.shape != tuple(Xt.shape[:1]) + tuple(Xt.shape[2:]):
            raise ValueError(f"masks of shape {masks.shape} do not match images")
        torch.manual_seed(self.random_state)
        self.in_channels_ = Xt.shape[1]
        net = _SegmenterNet(Xt.shape[1], self.width)
        yt = torch.from_numpy(masks.astype(np.float32))

        def score(logits, target):
            pred, ref = logits.numpy() >= 0, target.numpy() > 0.5
            return float(np.mean([dice(p, r) for p, r in zip(pred, ref)]))

        self.net_ = self._train(net, Xt, yt, F.binary_cross_entropy_with_logits, score)
        return self

    def predict_proba(self, X):
        return self._forward(X)

    def predict(self, X):
        return self.predict_proba(X) >= DECISION_THRESHOLD

    def score(self, X, masks):
        return float(np.mean([dice(p, r) for p, r in zip(self.predict(X), masks)]))


PREDICTOR_MAGIC = "MDPR1"
_KINDS = {"LesionClassifier": (LesionClassifier, _ClassifierNet), "LungSegmenter": (LungSegmenter, _SegmenterNet)}


def save_predictor(model, path):
    """JSON header line followed by little-endian float32 parameters."""
    check_is_fitted(model, "net_")
    state = model.net_.state_dict()
    header = {
        "magic": PREDICTOR_MAGIC,
        "kind": type(model).__name__,
        "params": model.get_params(),
        "in_channels": model.in_channels_,
        "tensors": [[name, list(v.shape)] for name, v in state.items()],
        "training_manifest": getattr(model, "training_manifest_", None),
    }
    blob = b"".join(v.detach().numpy().astype("<f4").tobytes() for v in state.values())
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_predictor(path):
    line, _, blob = Path(path).read_bytes().partition(b"\n")
    header = json.loads(line)
    if header.get("magic") != PREDICTOR_MAGIC or header.get("kind") not in _KINDS:
        raise ValueError(f"{path} is not a predictor checkpoint")
    cls, net_cls = _KINDS[header["kind"]]
    model = cls(**header["params"])
    model.net_ = net_cls(header["in_channels"], model.width)
    values = np.frombuffer(blob, dtype="<f4")
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        state[name] = torch.from_numpy(values[offset : offset + n].reshape(shape).astype(np.float32))
        offset += n
    if offset != len(values):
        raise ValueError("predictor parameter block has the wrong length")
    model.net_.load_state_dict(state)
    model.net_.eval()
    model.in_channels_ = header["in_channels"]
    model.training_manifest_ = header["training_manifest"]
    if header["kind"] == "LesionClassifier":
        model.classes_ = np.array([0, 1])
    return model
