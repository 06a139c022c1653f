"""Encoder-decoder transformer over each reservoir's daily embedding sequence.

Pre-norm blocks with residual connections and a ReLU feed-forward. The
encoder sees the full history window (no causal mask); the decoder rolls the
horizon out recursively, feeding a learned start token first and then its
own latent states, with masked self-attention and cross-attention against
the encoder memory. A projection to the narrower decoder width feeds the
scalar inflow head.
"""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def sinusoidal_table(length, dim):
    """Fixed sine/cosine positional encodings, (length, dim)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class _Mha:
    def __init__(self, dim, n_heads, rng, prefix):
        if dim % n_heads != 0:
            raise ShapeError(f"model width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.prefix = prefix
        self.wq = ad.glorot(rng, (dim, dim))
        self.wk = ad.glorot(rng, (dim, dim))
        self.wv = ad.glorot(rng, (dim, dim))
        self.wo = ad.glorot(rng, (dim, dim))

    def parameters(self):
        return {
            f"{self.prefix}.wq": self.wq,
            f"{self.prefix}.wk": self.wk,
            f"{self.prefix}.wv": self.wv,
            f"{self.prefix}.wo": self.wo,
        }

    def __call__(self, q_in, kv_in, mask=None):
        """(B, S, d) queries against (B, S_kv, d); returns output and attention."""
        b, s, _ = q_in.shape
        s_kv = kv_in.shape[1]

        def split(t, length):
            t = t.reshape((b, length, self.n_heads, self.head_dim))
            return ad.transpose(t, (0, 2, 1, 3))  # (B, K, S, dh)

        q = split(ad.matmul(q_in, self.wq), s)
        k = split(ad.matmul(kv_in, self.wk), s_kv)
        v = split(ad.matmul(kv_in, self.wv), s_kv)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = ad.softmax(scores, axis=-1)  # (B, K, S, S_kv)
        out = ad.matmul(attn, v)
        out = ad.transpose(out, (0, 2, 1, 3)).reshape((b, s, self.dim))
        return ad.matmul(out, self.wo), attn


class _Ln:
    def __init__(self, dim, prefix):
        self.gain = ad.ones((dim,))
        self.bias = ad.zeros((dim,))
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.gain": self.gain, f"{self.prefix}.bias": self.bias}

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class _Ff:
    def __init__(self, dim, ff_dim, rng, prefix):
        self.w1 = ad.glorot(rng, (dim, ff_dim))
        self.b1 = ad.zeros((ff_dim,))
        self.w2 = ad.glorot(rng, (ff_dim, dim))
        self.b2 = ad.zeros((dim,))
        self.prefix = prefix

    def parameters(self):
        return {
            f"{self.prefix}.w1": self.w1,
            f"{self.prefix}.b1": self.b1,
            f"{self.prefix}.w2": self.w2,
            f"{self.prefix}.b2": self.b2,
        }

    def __call__(self, x):
        return ad.matmul(ad.relu(ad.matmul(x, self.w1) + self.b1), self.w2) + self.b2


class _EncoderBlock:
    def __init__(self, dim, n_heads, ff_dim, rng, prefix):
        self.ln1 = _Ln(dim, f"{prefix}.ln1")
        self.mha = _Mha(dim, n_heads, rng, f"{prefix}.self")
        self.ln2 = _Ln(dim, f"{prefix}.ln2")
        self.ff = _Ff(dim, ff_dim, rng, f"{prefix}.ff")

    def parameters(self):
        out = {}
        for part in (self.ln1, self.mha, self.ln2, self.ff):
            out.update(part.parameters())
        return out

    def __call__(self, x, dropout_rate, rng, training):
        normed = self.ln1(x)
        attn_out, attn = self.mha(normed, normed)
        attn_out = ad.dropout(attn_out, dropout_rate, rng=rng, training=training)
        x = x + attn_out
        ff_out = ad.dropout(self.ff(self.ln2(x)), dropout_rate, rng=rng, training=training)
        return x + ff_out, attn


class _DecoderBlock:
    def __init__(self, dim, n_heads, ff_dim, rng, prefix):
        self.ln1 = _Ln(dim, f"{prefix}.ln1")
        self.self_mha = _Mha(dim, n_heads, rng, f"{prefix}.self")
        self.ln2 = _Ln(dim, f"{prefix}.ln2")
        self.cross_mha = _Mha(dim, n_heads, rng, f"{prefix}.cross")
        self.ln3 = _Ln(dim, f"{prefix}.ln3")
        self.ff = _Ff(dim, ff_dim, rng, f"{prefix}.ff")

    def parameters(self):
        out = {}
        for part in (self.ln1, self.self_mha, self.ln2, self.cross_mha, self.ln3, self.ff):
            out.update(part.parameters())
        return out

    def __call__(self, x, memory, causal_mask, dropout_rate, rng, training):
        normed = self.ln1(x)
        self_out, self_attn = self.self_mha(normed, normed, mask=causal_mask)
        x = x + ad.dropout(self_out, dropout_rate, rng=rng, training=training)
        cross_out, cross_attn = self.cross_mha(self.ln2(x), memory)
        x = x + ad.dropout(cross_out, dropout_rate, rng=rng, training=training)
        ff_out = ad.dropout(self.ff(self.ln3(x)), dropout_rate, rng=rng, training=training)
        return x + ff_out, self_attn, cross_attn


def _causal_mask(length):
    m = np.triu(np.full((length, length), -1e9), k=1)
    return m  # broadcast over (B, K, S, S)


class SeqTransformer:
    """Encoder-decoder over (B, T, d) sequences with recursive H-step rollout."""

    def __init__(self, dim, n_heads, n_blocks, ff_dim, seq_len, out_dim, rng, dropout_rate=0.2):
        self.dim = dim
        self.seq_len = seq_len
        self.out_dim = out_dim
        self.dropout_rate = dropout_rate
        self.pos_enc = sinusoidal_table(seq_len, dim)
        self.encoder_blocks = [
            _EncoderBlock(dim, n_heads, ff_dim, rng, f"transformer.enc.{i}") for i in range(n_blocks)
        ]
        self.enc_final_ln = _Ln(dim, "transformer.enc.final_ln")
        self.decoder_blocks = [
            _DecoderBlock(dim, n_heads, ff_dim, rng, f"transformer.dec.{i}") for i in range(n_blocks)
        ]
        self.dec_final_ln = _Ln(dim, "transformer.dec.final_ln")
        self.start_token = Tensor(rng.normal(0, 0.1, size=(dim,)), requires_grad=True)
        self.out_proj = ad.glorot(rng, (dim, out_dim))
        self.w_d = ad.glorot(rng, (out_dim, 1))

    def parameters(self):
        out = {"transformer.start_token": self.start_token}
        for block in self.encoder_blocks + self.decoder_blocks:
            out.update(block.parameters())
        out.update(self.enc_final_ln.parameters())
        out.update(self.dec_final_ln.parameters())
        out["transformer.out_proj"] = self.out_proj
        out["transformer.w_d"] = self.w_d
        return out

    def encode_sequence(self, x, rng=None, training=False, collect_attention=False):
        """(B, T, d) adjusted embeddings -> (B, T, d) memory."""
        if x.shape[1] != self.seq_len:
            raise ShapeError(f"expected sequence length {self.seq_len}, got {x.shape[1]}")
        out = x + Tensor(self.pos_enc)
        attns = []
        for block in self.encoder_blocks:
            out, attn = block(out, self.dropout_rate, rng, training)
            if collect_attention:
                attns.append(attn)
        return self.enc_final_ln(out), attns

    def decode_rollout(
        self,
        memory,
        steps,
        rng=None,
        training=False,
        collect_attention=False,
        injected_states=None,
    ):
        """Recursive horizon rollout from the encoder memory.

        Step 1 feeds the learned start token; step k > 1 feeds the previous
        latent state. ``injected_states`` (list of (B, d) arrays) overrides
        the fed states for causality testing. Returns predictions (B, steps),
        latent states (B, steps, d), and optional cross-attention tensors.
        """
        if steps < 1:
            raise ShapeError(f"rollout needs steps >= 1, got {steps}")
        b = memory.shape[0]
        dec_pos = sinusoidal_table(steps, self.dim)
        start = ad.stack([self.start_token] * b, axis=0).reshape((b, 1, self.dim))

        fed = [start]
        states = []
        preds = []
        cross_attns = []
        for k in range(steps):
            seq = fed[0] if len(fed) == 1 else ad.concat(fed, axis=1)
            seq = seq + Tensor(dec_pos[: k + 1])
            mask = _causal_mask(k + 1)
            out = seq
            step_cross = []
            for block in self.decoder_blocks:
                out, _, cross = block(out, memory, mask, self.dropout_rate, rng, training)
                if collect_attention:
                    step_cross.append(cross)
            out = self.dec_final_ln(out)
            z = out[:, k, :]  # (B, d) latent state for this step
            states.append(z)
            preds.append(ad.matmul(ad.matmul(z, self.out_proj), self.w_d))  # (B, 1)
            if collect_attention:
                cross_attns.append(step_cross)
            if k + 1 < steps:
                if injected_states is not None:
                    nxt = Tensor(np.asarray(injected_states[k]))
                else:
                    nxt = z.detach() if not z.requires_grad else z
                fed.append(nxt.reshape((b, 1, self.dim)))
        pred = ad.concat(preds, axis=1)  # (B, steps)
        z_all = ad.stack(states, axis=1)  # (B, steps, d)
        return pred, z_all, cross_attns


def export_temporal_attention(path, node_ids, encoder_attns):
    """Write encoder self-attention: reservoir, layer, head, query_step, key_step, beta.

    ``encoder_attns`` is a list (per layer) of (N, K, T, T) arrays.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["reservoir", "layer", "head", "query_step", "key_step", "beta"])
        for layer, attn in enumerate(encoder_attns):
            arr = np.asarray(attn)
            for n, rid in enumerate(node_ids):
                for h in range(arr.shape[1]):
                    for qi in range(arr.shape[2]):
                        for ki in range(arr.shape[3]):
                            writer.writerow([rid, layer, h, qi, ki, f"{arr[n, h, qi, ki]:.6f}"])
