"""Siamese ranking pre-training with a non-negative linear rank decoder.

A shared encoder maps each image of a (real, synthetic) pair to rectified
features; the decoder turns features into a proxy count with non-negative
weights and no bias. Training minimises ``softplus(c_syn - c_real)`` and
clamps negative decoder weights to zero after every optimizer step.
"""
from __future__ import annotations

import contextlib
import copy
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from .datasets import AugmentationConfig, DatasetManifest, augment_batch, draw_augmentation, load_images
from .encoders import EncoderConfig, build_encoder
from .exceptions import DivergenceError
from .validation import check_images, check_pairs


@contextlib.contextmanager
def flush_denormal():
    """Flush subnormal floats to zero for the duration of a training loop.

    Subnormals slow CPU training about 2x once the ranking loss saturates.
    The flag is process-wide, so it is switched off again on exit.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 5e-5
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be >= 1 and learning_rate >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


# ---------------------------------------------------------------------------
# loss


def ranking_loss(c_real_hat, c_syn_hat):
    """-log(sigmoid(c_real - c_syn)), evaluated as softplus(c_syn - c_real).

    Accepts scalars or arrays; scalars give a float.
    """
    a = np.asarray(c_real_hat, dtype=np.float64)
    b = np.asarray(c_syn_hat, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("ranking_loss needs finite proxy counts")
    d = a - b
    out = np.maximum(-d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return float(out) if out.ndim == 0 else out


def ranking_loss_grad(c_real_hat, c_syn_hat):
    """(dL/dc_real, dL/dc_syn) = (-sigmoid(-d), sigmoid(-d)) with d = c_real - c_syn."""
    d = np.asarray(c_real_hat, dtype=np.float64) - np.asarray(c_syn_hat, dtype=np.float64)
    s = np.exp(-np.logaddexp(0.0, d))  # sigmoid(-d)
    if s.ndim == 0:
        s = float(s)
    return -s, s


def _torch_ranking_loss(c_real, c_syn):
    return F.softplus(c_syn - c_real).mean()


# ---------------------------------------------------------------------------
# model


class RankDecoder(nn.Module):
    """Linear map z -> Theta . z with Theta >= 0 and no bias."""

    def __init__(self, weights):
        super().__init__()
        w = torch.as_tensor(np.asarray(weights, dtype=np.float32)).clone()
        self.weight = nn.Parameter(w.clamp(min=0.0))

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, z):
        return z @ self.weight


def project_nonneg(decoder):
    """Replace every weight by max(weight, 0).

    Works in place on a ``RankDecoder`` (returned for chaining); arrays and
    tensors are returned as projected copies.
    """
    if isinstance(decoder, RankDecoder):
        with torch.no_grad():
            decoder.weight.clamp_(min=0.0)
        return decoder
    if isinstance(decoder, torch.Tensor):
        return decoder.clamp(min=0.0)
    return np.maximum(np.asarray(decoder, dtype=np.float64), 0.0)


class RankModel(nn.Module):
    """Encoder plus rank decoder, with the configuration it was built from."""

    def __init__(self, encoder: nn.Module, decoder: RankDecoder, enc_cfg: EncoderConfig,
                 train_cfg: Optional[TrainConfig] = None, epoch: int = 0,
                 val_accuracy: Optional[float] = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.enc_cfg = enc_cfg
        self.train_cfg = train_cfg
        self.epoch = epoch
        self.val_accuracy = val_accuracy
        self.history: dict = {"loss": [], "val_accuracy": []}
        self.config: Optional[dict] = None

    @property
    def input_size(self):
        return self.enc_cfg.input_size

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def provenance(self) -> dict:
        return {
            "encoder": asdict(self.enc_cfg),
            "train": asdict(self.train_cfg) if self.train_cfg else None,
            "epoch": self.epoch,
            "val_accuracy": self.val_accuracy,
        }


def init_rank_model(enc_cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> RankModel:
    """Freshly initialised model; identical for identical (config, seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = build_encoder(enc_cfg)
        w = torch.rand(enc_cfg.feature_dim) / math.sqrt(enc_cfg.feature_dim)
    return RankModel(encoder, RankDecoder(w), enc_cfg)


@torch.no_grad()
def batched_forward(fn, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    if len(x) == 0:
        return fn(x)
    return torch.cat([fn(x[i:i + batch]) for i in range(0, len(x), batch)])


def proxy_count(model: RankModel, image) -> float:
    x = check_images([image], model.input_size)
    model.eval()
    return float(batched_forward(model, x)[0])


def proxy_counts(model: RankModel, images, resize: bool = False) -> np.ndarray:
    x = check_images(images, model.input_size, resize=resize)
    model.eval()
    return batched_forward(model, x).numpy().astype(np.float64)


def _accuracy(c_real: np.ndarray, c_syn: np.ndarray) -> float:
    wins = (c_real > c_syn).astype(np.float64) + 0.5 * (c_real == c_syn)
    return float(wins.mean())


# ---------------------------------------------------------------------------
# data plumbing: only images and source grouping, never counts


def pair_tensors(data, input_size) -> tuple[torch.Tensor, torch.Tensor]:
    """(real, synthetic) NCHW tensors at ``input_size`` for manifests or pairs."""
    if isinstance(data, DatasetManifest):
        pairs = data.pairs()
        reals = {r.id: r for r, _ in pairs}
        real_ids = list(reals)
        real_x = load_images(data, [reals[i] for i in real_ids], input_size)
        index = {rid: k for k, rid in enumerate(real_ids)}
        syn_x = load_images(data, [s for _, s in pairs], input_size)
        return real_x[[index[r.id] for r, _ in pairs]], syn_x
    if isinstance(data, tuple) and len(data) == 2:
        real, syn = data
    else:
        real, syn = check_pairs(data)
    return (check_images(real, input_size, resize=True),
            check_images(syn, input_size, resize=True))


def validation_rank_accuracy(model: RankModel, val) -> float:
    """Fraction of pairs with c_real > c_syn; ties count one half."""
    real, syn = pair_tensors(val, model.input_size)
    if len(real) == 0:
        raise ValueError("validation set is empty")
    model.eval()
    c_real = batched_forward(model, real).numpy()
    c_syn = batched_forward(model, syn).numpy()
    return _accuracy(c_real, c_syn)


# ---------------------------------------------------------------------------
# training

StepCallback = Callable[[RankModel, int, int, float], None]
# (epoch, mean training loss, validation accuracy)
EpochCallback = Callable[[int, float, float], None]


def _fit(model: RankModel, real, syn, val_real, val_syn, cfg: TrainConfig,
         aug: Optional[AugmentationConfig], on_step: Optional[StepCallback],
         on_epoch: Optional[EpochCallback] = None) -> RankModel:
    n = len(real)
    n_batches = math.ceil(n / cfg.batch_size)
    if n == 0:
        raise ValueError("training set is empty")
    if len(val_real) == 0:
        raise ValueError("validation set is empty")
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    best_key, best_state, best_epoch = None, None, 0
    losses, accs = [], []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            r, s = real[idx], syn[idx]
            if aug is not None:
                r, s = augment_batch(r, s, *draw_augmentation(rng, len(idx), aug))
            loss = _torch_ranking_loss(model(r), model(s))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite ranking loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            project_nonneg(model.decoder)
            value = loss.item()
            losses.append(value)
            if on_step is not None:
                on_step(model, epoch, b, value)
        model.eval()
        with torch.no_grad():
            vr = batched_forward(model, val_real).numpy()
            vs = batched_forward(model, val_syn).numpy()
        acc = _accuracy(vr, vs)
        val_loss = float(ranking_loss(vr, vs).mean())
        accs.append(acc)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses[-n_batches:])), acc)
        key = (acc, -val_loss)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.epoch = best_epoch
    model.val_accuracy = best_key[0] if best_key else None
    model.train_cfg = cfg
    model.history = {"loss": losses, "val_accuracy": accs}
    model.eval()
    return model


def train_ranker(train, val, enc_cfg: EncoderConfig = EncoderConfig(),
                 train_cfg: TrainConfig = TrainConfig(),
                 aug_cfg: Optional[AugmentationConfig] = AugmentationConfig(),
                 on_step: Optional[StepCallback] = None,
                 init: Optional[RankModel] = None,
                 on_epoch: Optional[EpochCallback] = None) -> RankModel:
    """Train a rank model and return the checkpoint with the best validation
    ranking accuracy (validation loss breaks ties).

    ``train`` and ``val`` are ranking manifests, sequences of ``RankingPair``
    or ``(real, synthetic)`` image collections. Images are resized to the
    encoder input size; ``aug_cfg.resize_to`` is not used here.
    """
    model = init if init is not None else init_rank_model(enc_cfg, train_cfg.seed)
    real, syn = pair_tensors(train, model.input_size)
    val_real, val_syn = pair_tensors(val, model.input_size)
    with flush_denormal():
        return _fit(model, real, syn, val_real, val_syn, train_cfg, aug_cfg, on_step, on_epoch)


class RankPretrainer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_ranker`.

    ``fit`` takes ranking pairs (a sequence of ``RankingPair`` or an
    (N, 2, H, W, 3) array). ``transform`` returns encoder features and
    ``predict`` proxy counts; ``score`` is ranking accuracy on pairs.
    """

    def __init__(self, architecture="toy_cnn", feature_dim=None, input_size=(48, 48),
                 epochs=40, learning_rate=5e-5, batch_size=8,
                 horizontal_flip_prob=0.5, brightness_jitter=0.2,
                 validation_fraction=0.15, seed=0):
        self.architecture = architecture
        self.feature_dim = feature_dim
        self.input_size = input_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.horizontal_flip_prob = horizontal_flip_prob
        self.brightness_jitter = brightness_jitter
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y=None, X_val=None, groups=None):
        """Hold out ``validation_fraction`` of the sources unless ``X_val`` is
        given. ``groups`` (source ids) defaults to ``source_id`` of each pair."""
        enc_cfg = EncoderConfig(self.architecture, self.feature_dim, tuple(self.input_size))
        cfg = TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.seed)
        aug = AugmentationConfig(self.horizontal_flip_prob, self.brightness_jitter,
                                 tuple(self.input_size))
        real, syn = pair_tensors(X, enc_cfg.input_size)
        if X_val is not None:
            val_real, val_syn = pair_tensors(X_val, enc_cfg.input_size)
        else:
            if groups is None:
                groups = ([p.source_id for p in X] if not isinstance(X, np.ndarray)
                          else np.arange(len(real)))
            groups = np.asarray(groups)
            uniq = list(dict.fromkeys(groups.tolist()))
            n_val = int(math.floor(self.validation_fraction * len(uniq) + 0.5))
            order = np.random.default_rng(self.seed).permutation(len(uniq))
            held = {uniq[i] for i in order[:n_val]}
            mask = torch.as_tensor(np.array([g in held for g in groups.tolist()]))
            val_real, val_syn = real[mask], syn[mask]
            real, syn = real[~mask], syn[~mask]
        model = init_rank_model(enc_cfg, self.seed)
        with flush_denormal():
            self.model_ = _fit(model, real, syn, val_real, val_syn, cfg, aug, None)
        self.n_features_out_ = enc_cfg.feature_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("RankPretrainer is not fitted yet")

    def transform(self, X):
        self._check_fitted()
        x = check_images(X, self.model_.input_size, resize=True)
        self.model_.eval()
        return batched_forward(self.model_.features, x).numpy()

    def predict(self, X):
        self._check_fitted()
        return proxy_counts(self.model_, X, resize=True)

    def score(self, X, y=None):
        self._check_fitted()
        return validation_rank_accuracy(self.model_, X)
