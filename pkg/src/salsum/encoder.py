"""Bidirectional GRU encoder, self-attention, and the word-salience head.

The GRU update keeps the previous state weighted by the update gate:
h' = z * h_prev + (1 - z) * g.  The salience head maps each position to a
probability in (0, 1); normalizing those scores yields the supervised
attention vector, whose weighted combination of the raw encoder states is
the supervised context fed to the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def gru_cell(x: Tensor, h_prev: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """One GRU step for 1-D input x and state h_prev."""
    r = ad.sigmoid(ad.matmul(params[f"{prefix}.w_xr"], x) + ad.matmul(params[f"{prefix}.w_hr"], h_prev) + params[f"{prefix}.b_r"])
    z = ad.sigmoid(ad.matmul(params[f"{prefix}.w_xz"], x) + ad.matmul(params[f"{prefix}.w_hz"], h_prev) + params[f"{prefix}.b_z"])
    g = ad.tanh(ad.matmul(params[f"{prefix}.w_xh"], x) + ad.matmul(params[f"{prefix}.w_hh"], r * h_prev) + params[f"{prefix}.b_h"])
    return z * h_prev + (1.0 - z) * g


def encode_bidirectional(embeddings: Tensor, params: ParamStore, prefix: str = "enc") -> Tensor:
    """Run both GRU directions from zero states; row t is fwd_t || bwd_t."""
    t_len = embeddings.shape[0]
    if t_len == 0:
        raise ValueError("cannot encode an empty token sequence")
    k_h = params[f"{prefix}.fwd.b_r"].shape[0]
    dtype = embeddings.dtype

    rows = [ad.reshape(ad.take_rows(embeddings, [t]), (embeddings.shape[1],)) for t in range(t_len)]
    fwd = []
    h = ad.zeros(k_h, dtype=dtype)
    for t in range(t_len):
        h = gru_cell(rows[t], h, params, f"{prefix}.fwd")
        fwd.append(h)
    bwd = [None] * t_len
    h = ad.zeros(k_h, dtype=dtype)
    for t in range(t_len - 1, -1, -1):
        h = gru_cell(rows[t], h, params, f"{prefix}.bwd")
        bwd[t] = h
    return ad.stack_rows([ad.concat([fwd[t], bwd[t]]) for t in range(t_len)])


def self_attention(h_states: Tensor, params: ParamStore) -> tuple[Tensor, Tensor, Tensor]:
    """All-pairs additive attention over encoder states.

    Returns (A, C_self, H_bar): A[i, j] is the weight position i puts on
    position j (each row a softmax over all positions, self included),
    C_self = A @ H, and H_bar the tanh fusion of state and context.
    """
    t_len = h_states.shape[0]
    k = params["enc.attn.bias"].shape[0]
    queries = ad.matmul(h_states, ad.transpose(params["enc.attn.w_query"]))
    keys = ad.matmul(h_states, ad.transpose(params["enc.attn.w_key"]))
    pre = ad.tanh(ad.reshape(queries, (t_len, 1, k)) + ad.reshape(keys, (1, t_len, k)) + params["enc.attn.bias"])
    scores = ad.tensor_sum(pre * params["enc.attn.v"], axis=2)
    attn = ad.softmax(scores)
    c_self = ad.matmul(attn, h_states)
    h_bar = ad.tanh(
        ad.matmul(h_states, ad.transpose(params["enc.fuse.w_state"]))
        + ad.matmul(c_self, ad.transpose(params["enc.fuse.w_ctx"]))
        + params["enc.fuse.bias"]
    )
    return attn, c_self, h_bar


def predict_salience(x_emb: Tensor, h_states: Tensor, c_self: Tensor, h_bar: Tensor, params: ParamStore) -> Tensor:
    """Per-position inclusion probability in (0, 1), vectorized over T.

    This head's input-and-state weights are separate parameters from the
    GRU gates even though both are per-position linear maps.
    """
    pre = (
        ad.matmul(x_emb, params["sal.w_emb"])
        + ad.matmul(h_states, params["sal.w_state"])
        + ad.matmul(c_self, params["sal.w_ctx"])
        + ad.matmul(h_bar, params["sal.w_fused"])
        + params["sal.bias"]
    )
    return ad.sigmoid(pre)


def supervised_attention(r_hat: Tensor, pad_mask=None) -> Tensor:
    """Normalize salience scores into an attention distribution."""
    return ad.softmax(r_hat, mask=pad_mask)


def supervised_context(a_s: Tensor, h_states: Tensor) -> Tensor:
    """Weighted combination of the raw encoder states: H^T a_s."""
    return ad.matmul(ad.transpose(h_states), a_s)


@dataclass
class EncoderOutput:
    """Everything the salience branch produces for one source sequence."""

    H: Tensor        # [T, 2k_h] bidirectional states
    C_self: Tensor   # [T, 2k_h] self-attention contexts
    H_bar: Tensor    # [T, k_h] fused representations
    r_hat: Tensor    # [T] salience probabilities
    a_s: Tensor      # [T] normalized attention
    c_s: Tensor      # [2k_h] supervised context
    T: int


def encode_with_salience(x_emb: Tensor, params: ParamStore, pad_mask=None) -> EncoderOutput:
    """Full left branch: encode, self-attend, score, normalize, mix."""
    h_states = encode_bidirectional(x_emb, params)
    attn, c_self, h_bar = self_attention(h_states, params)
    r_hat = predict_salience(x_emb, h_states, c_self, h_bar, params)
    a_s = supervised_attention(r_hat, pad_mask)
    c_s = supervised_context(a_s, h_states)
    return EncoderOutput(H=h_states, C_self=c_self, H_bar=h_bar, r_hat=r_hat, a_s=a_s, c_s=c_s, T=x_emb.shape[0])
