"""Shared per-day feature encoder and its semi-supervised pretraining.

The encoder is a row-wise two-layer MLP shared across reservoirs and days.
Pretraining combines an InfoNCE contrastive term (two augmented views of the
same reservoir's window against momentum prototypes of the other reservoirs)
with an auxiliary supervised inflow head, weighted 4:1 by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NumericError, Tensor, backward, substream, zero_grads
from .data import CHANNEL_INDEX


class EncoderError(Exception):
    pass


class FeatureEncoder:
    """Two-layer MLP mapping F raw features to a d-dimensional embedding."""

    def __init__(self, n_features, dim, rng):
        self.n_features = n_features
        self.dim = dim
        self.w1 = ad.glorot(rng, (n_features, dim))
        self.b1 = ad.zeros((dim,))
        self.w2 = ad.glorot(rng, (dim, dim))
        self.b2 = ad.zeros((dim,))

    def parameters(self):
        return {
            "encoder.w1": self.w1,
            "encoder.b1": self.b1,
            "encoder.w2": self.w2,
            "encoder.b2": self.b2,
        }

    def encode(self, x):
        """(..., F) features -> (..., d) embeddings, row-independent."""
        if isinstance(x, Tensor):
            arr = x.data
        else:
            arr = np.asarray(x)
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                raise NumericError(
                    f"non-finite encoder input at index {tuple(bad[0])} "
                    "(last axis is the feature channel)"
                )
            x = Tensor(arr)
        if arr.shape[-1] != self.n_features:
            raise EncoderError(f"expected {self.n_features} features, got {arr.shape[-1]}")
        h = ad.relu(ad.matmul(x, self.w1) + self.b1)
        return ad.matmul(h, self.w2) + self.b2


def augment(x, channels, sigma, rng):
    """Add Gaussian noise to the named weather channels; inflow stays untouched."""
    if sigma < 0:
        raise EncoderError(f"augmentation noise scale must be >= 0, got {sigma}")
    x = np.array(x, dtype=np.float64, copy=True)
    for name in channels:
        if name not in CHANNEL_INDEX:
            raise EncoderError(f"unknown augmentation channel '{name}'")
        if name == "inflow":
            raise EncoderError("inflow channel is not augmentable")
        idx = CHANNEL_INDEX[name]
        if sigma > 0:
            x[..., idx] += rng.normal(0.0, sigma, size=x[..., idx].shape)
    return x


def _cosine(a: Tensor, b: Tensor):
    na = ad.sqrt(ad.tensor_sum(a * a))
    nb = ad.sqrt(ad.tensor_sum(b * b))
    if float(na.data) == 0.0 or float(nb.data) == 0.0:
        raise EncoderError("cosine similarity undefined for zero-norm vector")
    return ad.tensor_sum(a * b) / (na * nb)


def infonce_loss(anchor: Tensor, positive: Tensor, negatives, tau: float):
    """-log softmax of the positive cosine similarity at temperature ``tau``."""
    if tau <= 0:
        raise EncoderError(f"temperature must be > 0, got {tau}")
    if not negatives:
        raise EncoderError("need at least one negative")
    sims = [_cosine(anchor, positive)] + [_cosine(anchor, n) for n in negatives]
    logits = ad.stack(sims) * (1.0 / tau)
    probs = ad.softmax(logits, axis=0)
    return -ad.log(probs[0])


def supervised_head_loss(h_bar: Tensor, y, w_psi: Tensor):
    """Squared error of the linear horizon head, summed over lead days."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if h_bar.shape[-1] != w_psi.shape[0] or w_psi.shape[1] != y.shape[-1]:
        raise EncoderError(
            f"shape mismatch: h_bar {h_bar.shape}, w_psi {w_psi.shape}, y {y.shape}"
        )
    pred = ad.matmul(h_bar.reshape((1, -1)), w_psi)
    err = pred - y.reshape((1, -1))
    return ad.tensor_sum(err * err)


class PrototypeBank:
    """One momentum-smoothed centroid per reservoir, used as contrastive negatives."""

    def __init__(self, n_reservoirs, dim, momentum=0.99, rng=None):
        if not 0.0 <= momentum <= 1.0:
            raise EncoderError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum = momentum
        if rng is None:
            self.c = np.zeros((n_reservoirs, dim))
        else:
            self.c = rng.normal(0, 0.1, size=(n_reservoirs, dim))

    def update(self, batch_means):
        """c_i <- mu * c_i + (1 - mu) * batch mean, per reservoir with samples."""
        mu = self.momentum
        for i, m in batch_means.items():
            self.c[i] = mu * self.c[i] + (1.0 - mu) * m


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_per_reservoir: int = 4
    tau_c: float = 0.1
    sigma_aug: float = 0.05
    w_c: float = 4.0
    w_s: float = 1.0
    momentum: float = 0.99
    lr: float = 1e-3
    lr_decay: float = 0.5
    seed: int = 0
    augment_channels: tuple = ("temperature", "precipitation")

    def __post_init__(self):
        if self.tau_c <= 0:
            raise EncoderError("tau_c must be > 0")
        if self.w_c < 0 or self.w_s < 0 or (self.w_c == 0 and self.w_s == 0):
            raise EncoderError("loss weights must be >= 0 and not both zero")


def _batched_contrastive(a_emb: Tensor, p_emb: Tensor, prototypes, res_index, tau):
    """Vectorized InfoNCE over a batch; negatives are other reservoirs' prototypes."""
    eps = 1e-12

    def normalize(t):
        n = ad.sqrt(ad.tensor_sum(t * t, axis=-1, keepdims=True) + eps)
        return t / n

    a_n = normalize(a_emb)
    p_n = normalize(p_emb)
    c = prototypes / (np.linalg.norm(prototypes, axis=1, keepdims=True) + eps)
    pos = ad.tensor_sum(a_n * p_n, axis=-1, keepdims=True)  # (B, 1)
    neg = ad.matmul(a_n, Tensor(c.T))  # (B, N)
    # exclude each sample's own prototype from the negative set
    mask = np.zeros((len(res_index), c.shape[0]))
    mask[np.arange(len(res_index)), res_index] = -1e9
    logits = ad.concat([pos, neg + Tensor(mask)], axis=1) * (1.0 / tau)
    probs = ad.softmax(logits, axis=1)
    return -ad.tensor_mean(ad.log(probs[:, 0]))


def pretrain(windows: dict, encoder: FeatureEncoder, horizon: int, config: PretrainConfig):
    """Optimize the encoder on per-reservoir windows; returns the loss history.

    ``windows`` maps reservoir id to (histories (n, T, F), targets (n, H))
    in scaled units. The encoder is updated in place; the auxiliary head is
    discarded afterwards.
    """
    if not windows:
        raise EncoderError("empty pretraining dataset")
    ids = sorted(windows.keys())
    rng_draw = substream(config.seed, "pretrain.draw")
    rng_aug = substream(config.seed, "pretrain.augment")
    rng_init = substream(config.seed, "pretrain.init")

    w_psi = ad.glorot(rng_init, (encoder.dim, horizon))
    params = dict(encoder.parameters())
    params["pretrain.w_psi"] = w_psi
    bank = PrototypeBank(len(ids), encoder.dim, config.momentum, rng=rng_init)
    opt = Adam(params, lr=config.lr)

    steps_per_epoch = max(1, min(len(windows[r][0]) for r in ids) // config.batch_per_reservoir)
    history = []
    for epoch in range(config.epochs):
        opt.lr = config.lr * (config.lr_decay**epoch)
        epoch_losses = []
        for _ in range(steps_per_epoch):
            hists, targs, res_index = [], [], []
            for ri, rid in enumerate(ids):
                h, y = windows[rid]
                pick = rng_draw.integers(0, len(h), size=config.batch_per_reservoir)
                hists.append(h[pick])
                targs.append(y[pick])
                res_index.extend([ri] * config.batch_per_reservoir)
            hist = np.concatenate(hists)  # (B, T, F)
            targ = np.concatenate(targs)  # (B, H)
            res_index = np.asarray(res_index)

            view1 = augment(hist, config.augment_channels, config.sigma_aug, rng_aug)
            view2 = augment(hist, config.augment_channels, config.sigma_aug, rng_aug)
            emb1 = ad.tensor_mean(encoder.encode(view1), axis=1)  # (B, d) window mean
            emb2 = ad.tensor_mean(encoder.encode(view2), axis=1)

            loss_c = _batched_contrastive(emb1, emb2, bank.c, res_index, config.tau_c)
            pred = ad.matmul(emb1, w_psi)
            err = pred - Tensor(targ)
            loss_s = ad.tensor_mean(ad.tensor_sum(err * err, axis=1))
            loss = config.w_c * loss_c + config.w_s * loss_s

            zero_grads(params)
            backward(loss)
            opt.step()
            epoch_losses.append(float(loss.data))

            with ad.no_grad():
                means = {}
                emb = emb1.data
                for ri in range(len(ids)):
                    sel = emb[res_index == ri]
                    if len(sel):
                        means[ri] = sel.mean(axis=0)
                bank.update(means)
        history.append(float(np.mean(epoch_losses)))
    return history
