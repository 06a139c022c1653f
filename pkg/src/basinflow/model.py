"""Full forecasting model: encoder -> daily graph attention -> transformer.

One forward pass consumes a batch of (T, N, F) history windows and emits the
(N, H) forecast matrix for every window, all reservoirs jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FeatureEncoder
from .gat import GatParams, gat_forward
from .transformer import SeqTransformer


@dataclass
class ModelConfig:
    n_features: int = 3
    dim: int = 128
    out_dim: int = 64
    gat_heads: int = 4
    gat_layers: int = 2
    leaky_slope: float = 0.2
    tf_heads: int = 4
    tf_blocks: int = 2
    ff_dim: int = 256
    history_days: int = 30
    horizon: int = 7
    dropout: float = 0.2
    edge_direction: str = "as_paper"  # or "reversed"

    def __post_init__(self):
        if self.edge_direction not in ("as_paper", "reversed"):
            raise ValueError(f"unknown edge_direction '{self.edge_direction}'")


class InflowModel:
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.n_features, cfg.dim, rng)
        self.gat = GatParams(cfg.dim, cfg.gat_heads, rng, n_layers=cfg.gat_layers, leaky_slope=cfg.leaky_slope)
        self.transformer = SeqTransformer(
            cfg.dim,
            cfg.tf_heads,
            cfg.tf_blocks,
            cfg.ff_dim,
            cfg.history_days,
            cfg.out_dim,
            rng,
            dropout_rate=cfg.dropout,
        )

    def parameters(self):
        out = {}
        out.update(self.encoder.parameters())
        out.update(self.gat.parameters())
        out.update(self.transformer.parameters())
        return out

    def forward_full(
        self,
        history,
        adjacency=None,
        training=False,
        rng=None,
        collect_attention=False,
    ):
        """Run the composed model on a (B, T, N, F) batch of windows.

        ``adjacency`` is the active (N, N) or (T, N, N) graph mask; None
        bypasses graph attention entirely (the no-graph ablation). Returns
        (predictions Tensor (B, N, H), condensed attention array (B, T, N, N)
        or None, attention bundle dict when collected).
        """
        history = np.asarray(history)
        if history.ndim == 3:
            history = history[None]
        b, t, n, _ = history.shape
        cfg = self.cfg
        if t != cfg.history_days:
            raise ad.ShapeError(f"expected {cfg.history_days} history days, got {t}")

        h = self.encoder.encode(history)  # (B, T, N, d)

        condensed = None
        if adjacency is not None:
            adj = np.asarray(adjacency, dtype=np.float64)
            if cfg.edge_direction == "reversed":
                adj = adj.swapaxes(-1, -2)
            h, cond, _ = gat_forward(
                h, adj, self.gat, dropout_rate=cfg.dropout, rng=rng, training=training
            )
            condensed = cond.data
            if cfg.edge_direction == "reversed":
                condensed = condensed.swapaxes(-1, -2)

        seq = ad.transpose(h, (0, 2, 1, 3)).reshape((b * n, t, cfg.dim))
        memory, enc_attns = self.transformer.encode_sequence(
            seq, rng=rng, training=training, collect_attention=collect_attention
        )
        pred, _, cross_attns = self.transformer.decode_rollout(
            memory, cfg.horizon, rng=rng, training=training, collect_attention=collect_attention
        )
        pred = pred.reshape((b, n, cfg.horizon))

        bundle = None
        if collect_attention:
            bundle = {"encoder_self": enc_attns, "decoder_cross": cross_attns}
        return pred, condensed, bundle
