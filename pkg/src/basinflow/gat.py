"""Multi-head graph attention over daily reservoir graphs, with pruning.

Two attention layers give each node a 2-hop receptive field. Per-edge
attention coefficients are condensed (mean over layers and heads) into a
ledger of running means; at scheduled epoch boundaries, edges whose running
mean falls below the threshold are masked out of the graph for good.
"""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geo import TemporalGraph, apply_prune_mask

_NEG_INF = -1e9


class GatParams:
    """Per-layer, per-head projections and attention vectors for 2 GAT layers."""

    def __init__(self, dim, n_heads, rng, n_layers=2, leaky_slope=0.2):
        if dim % n_heads != 0:
            raise ad.ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.head_dim = dim // n_heads
        self.leaky_slope = leaky_slope
        self.w = []  # (K, d, d_head) per layer
        self.a_src = []  # (K, d_head, 1): attention weight on the destination node i
        self.a_dst = []  # (K, d_head, 1): attention weight on the source node j
        for _ in range(n_layers):
            self.w.append(ad.glorot(rng, (n_heads, dim, self.head_dim)))
            self.a_src.append(ad.glorot(rng, (n_heads, self.head_dim, 1)))
            self.a_dst.append(ad.glorot(rng, (n_heads, self.head_dim, 1)))

    def parameters(self):
        out = {}
        for layer in range(self.n_layers):
            out[f"gat.{layer}.w"] = self.w[layer]
            out[f"gat.{layer}.a_src"] = self.a_src[layer]
            out[f"gat.{layer}.a_dst"] = self.a_dst[layer]
        return out


def _attention_mask(adjacency):
    """Additive mask: 0 where a_ij = 1, large negative where absent."""
    return (adjacency - 1.0) * -_NEG_INF  # a=1 -> 0, a=0 -> -1e9


def gat_layer(h, adjacency, params: GatParams, layer_index, dropout_rate=0.0, rng=None, training=False):
    """One multi-head attention layer over the active adjacency.

    ``h`` has shape (..., N, d); ``adjacency`` is an (N, N) or broadcastable
    (..., N, N) float matrix with a_ij = 1 when node i may attend to source
    j. Returns the (..., N, d) output and the per-head attention tensor of
    shape (..., K, N, N) (exactly zero on inactive pairs).
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    # every node needs at least its self-loop or the softmax row is undefined
    diag = np.diagonal(adjacency, axis1=-2, axis2=-1)
    if not np.all(diag > 0):
        raise ad.ShapeError("adjacency is missing an active self-loop")

    w = params.w[layer_index]
    # (..., 1, N, d) @ (K, d, dh) -> (..., K, N, dh)
    h_exp = h.reshape(h.shape[:-2] + (1,) + h.shape[-2:])
    wh = ad.matmul(h_exp, w)
    f = ad.matmul(wh, params.a_src[layer_index])  # (..., K, N, 1) score of node i
    g = ad.matmul(wh, params.a_dst[layer_index])  # (..., K, N, 1) score of source j
    g_t = ad.transpose(g, tuple(range(g.ndim - 2)) + (g.ndim - 1, g.ndim - 2))
    logits = ad.leaky_relu(f + g_t, slope=params.leaky_slope)  # (..., K, N, N)

    mask_arr = adjacency if adjacency.ndim == 2 else np.expand_dims(adjacency, -3)
    alpha = ad.softmax(logits + Tensor(_attention_mask(mask_arr)), axis=-1)
    alpha = alpha * Tensor(mask_arr)  # exact zeros on inactive pairs

    agg = ad.matmul(alpha, wh)  # (..., K, N, dh)
    perm = tuple(range(agg.ndim - 3)) + (agg.ndim - 2, agg.ndim - 3, agg.ndim - 1)
    merged = ad.transpose(agg, perm).reshape(h.shape[:-1] + (params.dim,))
    out = ad.relu(merged)
    if dropout_rate > 0 and training:
        out = ad.dropout(out, dropout_rate, rng=rng, training=True)
    return out, alpha


def gat_forward(h, adjacency, params: GatParams, dropout_rate=0.0, rng=None, training=False):
    """Apply all layers; returns adjusted features and condensed attention.

    The condensed tensor is the mean of per-head attentions over layers and
    heads, shape (..., N, N).
    """
    alphas = []
    out = h
    for layer in range(params.n_layers):
        out, alpha = gat_layer(
            out, adjacency, params, layer, dropout_rate=dropout_rate, rng=rng, training=training
        )
        alphas.append(alpha)
    stacked = ad.stack(alphas, axis=0)  # (L, ..., K, N, N)
    condensed = ad.tensor_mean(ad.tensor_mean(stacked, axis=0), axis=-3)
    return out, condensed, alphas


class AttentionLedger:
    """Running mean of condensed attention per non-self edge.

    In ``global`` mode one statistic is kept per edge; in ``per_day`` mode a
    separate statistic is kept for each of the T days of the window.
    """

    def __init__(self, edges, n_days=None):
        self.edges = [e for e in edges if e[0] != e[1]]
        self.per_day = n_days is not None
        shape = (n_days, len(self.edges)) if self.per_day else (len(self.edges),)
        self.sums = np.zeros(shape)
        self.counts = np.zeros(shape)
        self.epoch_of_last_reset = 0

    def update(self, condensed):
        """Accumulate a condensed attention array of shape (B, T, N, N)."""
        condensed = np.asarray(condensed)
        if condensed.ndim == 3:
            condensed = condensed[None]
        for k, (i, j) in enumerate(self.edges):
            vals = condensed[:, :, i, j]  # (B, T)
            if self.per_day:
                self.sums[:, k] += vals.sum(axis=0)
                self.counts[:, k] += vals.shape[0]
            else:
                self.sums[k] += vals.sum()
                self.counts[k] += vals.size

    def running_mean(self):
        """alpha-tilde per edge; NaN-free (unobserved edges report 0)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), 0.0)
        return mean

    def reset(self, epoch):
        self.sums[:] = 0.0
        self.counts[:] = 0.0
        self.epoch_of_last_reset = epoch


def prune_step(ledger: AttentionLedger, graph: TemporalGraph, tau_prune, epoch=0):
    """Mask non-self edges whose running mean fell strictly below the threshold.

    Returns (new graph, removed edge list). The ledger is reset so the next
    pruning window is judged on fresh statistics. For a per-day ledger the
    day axis is averaged here; per-day graphs are handled by calling this
    once per day graph with a sliced ledger view upstream.
    """
    mean = ledger.running_mean()
    if mean.ndim == 2:
        mean = mean.mean(axis=0)
    active = {e for e in graph.active_edges()}
    removed = [
        e
        for e, m, c in zip(ledger.edges, mean, ledger.counts.reshape(-1, len(ledger.edges)).sum(axis=0))
        if e in active and c > 0 and m < tau_prune
    ]
    new_graph = apply_prune_mask(graph, removed) if removed else graph.copy()
    ledger.reset(epoch)
    return new_graph, removed


def prune_step_per_day(ledger: AttentionLedger, graphs, tau_prune, epoch=0):
    """Per-day variant: one mask decision per day graph from that day's statistics."""
    mean = ledger.running_mean()  # (T, E)
    counts = ledger.counts
    out_graphs = []
    removed_by_day = []
    for t, graph in enumerate(graphs):
        active = {e for e in graph.active_edges()}
        removed = [
            e
            for k, e in enumerate(ledger.edges)
            if e in active and counts[t, k] > 0 and mean[t, k] < tau_prune
        ]
        out_graphs.append(apply_prune_mask(graph, removed) if removed else graph.copy())
        removed_by_day.append(removed)
    ledger.reset(epoch)
    return out_graphs, removed_by_day


def export_attention_map(path, rows):
    """Write accumulated per-edge attention rows: epoch, day, src, dst, alpha_bar."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "day", "src", "dst", "alpha_bar"])
        for row in rows:
            writer.writerow(row)


def export_edge_summary(path, graph: TemporalGraph, ledger: AttentionLedger):
    """Final per-edge summary: src, dst, alpha_tilde, pruned."""
    mean = ledger.running_mean()
    if mean.ndim == 2:
        mean = mean.mean(axis=0)
    active = set(graph.active_edges())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "alpha_tilde", "pruned"])
        for (i, j), m in zip(ledger.edges, mean):
            writer.writerow(
                [graph.node_ids[i], graph.node_ids[j], f"{m:.6f}", int((i, j) not in active)]
            )
