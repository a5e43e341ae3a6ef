"""Linear probing of a frozen rank encoder on noisy prompt-count labels.

The head ``count = w . z + b`` is fitted by Adam on squared error against the
prompt counts. Optimisation runs in standardised coordinates (features and
targets centred and scaled by their training statistics) and the result is
mapped back, so ``w`` and ``b`` always act on raw encoder features.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from torch import nn

from .datasets import DatasetManifest, load_images
from .encoders import EncoderConfig
from .exceptions import DivergenceError
from .ranking import (
    RankDecoder,
    RankModel,
    TrainConfig,
    batched_forward,
    flush_denormal,
    init_rank_model,
)
from .synth import NoisyCountExample
from .validation import check_finite, check_images

PROBE_DEFAULTS = TrainConfig(epochs=40, learning_rate=1e-2, batch_size=32)


def count_loss(pred, prompt_count):
    """Squared error (pred - prompt_count)**2; arrays give element-wise values."""
    p = np.asarray(pred, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("count_loss needs a finite prediction")
    out = (p - np.asarray(prompt_count, dtype=np.float64)) ** 2
    return float(out) if out.ndim == 0 else out


def count_loss_grad(pred, prompt_count):
    return 2.0 * (np.asarray(pred, dtype=np.float64) - np.asarray(prompt_count, dtype=np.float64))


@dataclass(frozen=True)
class CountPrediction:
    raw: float
    clamped: float


class ProbeModel:
    """Frozen rank encoder plus an affine count head (weights may be negative)."""

    def __init__(self, rank_model: RankModel, weight, bias: float = 0.0,
                 train_cfg: Optional[TrainConfig] = None, rank_digest: Optional[str] = None):
        self.rank_model = rank_model
        self.weight = np.asarray(weight, dtype=np.float64).reshape(-1)
        self.bias = float(bias)
        self.train_cfg = train_cfg
        self.rank_digest = rank_digest
        self.history: list[float] = []
        self.config: Optional[dict] = None
        if self.weight.shape[0] != rank_model.enc_cfg.feature_dim:
            raise ValueError("probe weight length must equal the encoder feature_dim")

    @property
    def input_size(self):
        return self.rank_model.input_size

    def features(self, x: torch.Tensor) -> np.ndarray:
        self.rank_model.eval()
        return batched_forward(self.rank_model.encoder, x).numpy().astype(np.float64)

    def raw_counts(self, x: torch.Tensor) -> np.ndarray:
        return self.features(x) @ self.weight + self.bias


def encoder_digest(model: nn.Module) -> str:
    """SHA-256 over the encoder's parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.encoder.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def predict_count(probe: ProbeModel, image) -> CountPrediction:
    x = check_images([image], probe.input_size)
    raw = float(probe.raw_counts(x)[0])
    return CountPrediction(raw, max(raw, 0.0))


# ---------------------------------------------------------------------------
# data: images and prompt counts only


def noisy_tensors(noisy, input_size):
    """Images at ``input_size`` and prompt counts for a noisy-count dataset.

    Accepts a noisy manifest, a sequence of ``NoisyCountExample`` or an
    ``(images, prompt_counts)`` tuple.
    """
    if isinstance(noisy, DatasetManifest):
        recs = [r for r in noisy.records if r.role == "noisy"]
        return load_images(noisy, recs, input_size), np.array([r.prompt_count for r in recs], dtype=np.float64)
    if isinstance(noisy, tuple) and len(noisy) == 2:
        images, counts = noisy
        return check_images(images, input_size, resize=True), np.asarray(counts, dtype=np.float64)
    examples = list(noisy)
    if examples and not isinstance(examples[0], NoisyCountExample):
        raise TypeError("expected NoisyCountExample items")
    return (check_images([e.image for e in examples], input_size, resize=True),
            np.array([e.prompt_count for e in examples], dtype=np.float64))


def _standardizer(a: np.ndarray):
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return mu, sd


def _schedule(n: int, cfg: TrainConfig):
    """Minibatch index lists for every optimizer step; shared with the
    end-to-end baseline so both see identical batches."""
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            yield epoch, b, order[start:start + cfg.batch_size]


def n_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)


def fit_linear_head(Z: np.ndarray, y: np.ndarray, cfg: TrainConfig = PROBE_DEFAULTS,
                    init_weight=None, init_bias: Optional[float] = None,
                    on_step: Optional[Callable] = None):
    """Minimise mean (w . z + b - y)^2 with Adam; returns (w, b, losses).

    Optimises ``u, v`` in ``(y - my)/sy = u . (z - mz)/sz + v`` and maps
    back to raw coordinates at the end. Without an initial point the head
    starts at the target mean (``u = 0, v = 0``).
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(Z) == 0:
        raise ValueError("cannot fit a probe on an empty dataset")
    mz, sz = _standardizer(Z)
    my, sy = float(y.mean()), float(y.std()) or 1.0
    w0 = np.zeros(Z.shape[1]) if init_weight is None else np.asarray(init_weight, dtype=np.float64)
    u = torch.tensor(w0 * sz / sy, requires_grad=True)
    b0 = my - w0 @ mz if init_bias is None else init_bias
    v = torch.tensor((b0 + w0 @ mz - my) / sy, requires_grad=True)
    Zs = torch.from_numpy((Z - mz) / sz)
    ys = torch.from_numpy((y - my) / sy)
    opt = torch.optim.Adam([u, v], lr=cfg.learning_rate)
    losses = []
    for epoch, b, idx in _schedule(len(Z), cfg):
        loss = ((Zs[idx] @ u + v - ys[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite probe loss at epoch {epoch}, batch {b}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item() * sy * sy)
        if on_step is not None:
            on_step(epoch, b, losses[-1])
    with torch.no_grad():
        u_, v_ = u.numpy(), float(v)
    weight = u_ * sy / sz
    bias = my + sy * v_ - weight @ mz
    return weight, float(bias), losses


def fit_probe(rank_model: RankModel, noisy, train_cfg: TrainConfig = PROBE_DEFAULTS,
              rank_digest: Optional[str] = None, on_step: Optional[Callable] = None) -> ProbeModel:
    """Fit the count head on frozen features. The encoder is checked to be
    bit-identical afterwards."""
    before = encoder_digest(rank_model)
    x, y = noisy_tensors(noisy, rank_model.input_size)
    if len(y) == 0:
        raise ValueError("noisy dataset is empty")
    rank_model.eval()
    with torch.no_grad():
        Z = batched_forward(rank_model.encoder, x).numpy().astype(np.float64)
    weight, bias, losses = fit_linear_head(Z, y, train_cfg, on_step=on_step)
    if encoder_digest(rank_model) != before:
        raise RuntimeError("encoder parameters changed during probing")
    probe = ProbeModel(rank_model, weight, bias, train_cfg, rank_digest)
    probe.history = losses
    return probe


def _fit_end_to_end(encoder, head, opt, x, ys, sy, cfg, losses):
    for epoch, b, idx in _schedule(len(ys), cfg):
        loss = ((head(encoder(x[idx])).squeeze(1) - ys[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite end-to-end loss at epoch {epoch}, batch {b}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item() * sy * sy)


def train_end_to_end(noisy, enc_cfg: EncoderConfig = EncoderConfig(),
                     train_cfg: TrainConfig = PROBE_DEFAULTS,
                     learning_rate: Optional[float] = None, seed: int = 0) -> ProbeModel:
    """Baseline: the same affine head on a randomly initialised, unfrozen
    encoder, trained on the noisy labels with the probe's batch schedule
    (hence the same number of steps). ``learning_rate`` sets the step size
    for all parameters (default: ``train_cfg.learning_rate``)."""
    lr = train_cfg.learning_rate if learning_rate is None else learning_rate
    model = init_rank_model(enc_cfg, seed)
    x, y = noisy_tensors(noisy, model.input_size)
    my, sy = float(y.mean()), float(y.std()) or 1.0
    ys = torch.from_numpy((y - my) / sy).float()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        head = nn.Linear(enc_cfg.feature_dim, 1)
    encoder = model.encoder
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=lr)
    encoder.train()
    losses = []
    with flush_denormal():
        _fit_end_to_end(encoder, head, opt, x, ys, sy, train_cfg, losses)
    encoder.eval()
    w = head.weight.detach().double().numpy()[0] * sy
    bias = float(head.bias.detach()) * sy + my
    frozen = RankModel(encoder, RankDecoder(np.zeros(enc_cfg.feature_dim)), enc_cfg)
    probe = ProbeModel(frozen, w, bias, train_cfg)
    probe.history = losses
    return probe


class LinearProbe(RegressorMixin, BaseEstimator):
    """Estimator fitting a linear count head on a frozen ``RankModel``.

    ``fit(X, y)`` takes images and prompt counts; ``predict`` returns counts
    clamped at zero.
    """

    def __init__(self, rank_model=None, epochs=40, learning_rate=1e-2, batch_size=32, seed=0):
        self.rank_model = rank_model
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        if self.rank_model is None:
            raise ValueError("LinearProbe needs a fitted rank_model")
        y = np.asarray(y, dtype=np.float64)
        for v in y:
            check_finite(v, "target")
        cfg = TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.seed)
        x = check_images(X, self.rank_model.input_size, resize=True)
        self.probe_ = fit_probe(self.rank_model, (x, y), cfg)
        self.coef_ = self.probe_.weight.copy()
        self.intercept_ = self.probe_.bias
        return self

    def _check_fitted(self):
        if not hasattr(self, "probe_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("LinearProbe is not fitted yet")

    def predict_raw(self, X):
        self._check_fitted()
        return self.probe_.raw_counts(check_images(X, self.probe_.input_size, resize=True))

    def predict(self, X):
        return np.maximum(self.predict_raw(X), 0.0)

    def __sklearn_clone__(self):
        # the frozen rank model is shared, not deep-copied
        params = self.get_params(deep=False)
        return type(self)(**params)
