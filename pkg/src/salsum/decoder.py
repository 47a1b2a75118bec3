"""Two-layer GRU decoder with per-step attention and multi-context fusion.

Layer 1 advances on the previous token's embedding; its new state queries
an additive attention over the encoder states; layer 2 advances on the
embedding concatenated with that attention context.  The output state is
fused with whichever of the supervised/unsupervised contexts are enabled
before the vocabulary softmax.  Generation is length-synchronous beam
search ranked by average per-token log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .corpus import BOS_ID, EOS_ID
from .encoder import gru_cell


@dataclass
class DecoderState:
    h1: Tensor  # [k_h] layer-1 GRU state
    h2: Tensor  # [k_h] layer-2 GRU state


@dataclass
class Hypothesis:
    """Beam-search bookkeeping: a partial sequence starting with BOS."""

    tokens: list[int]
    logprob: float
    state: DecoderState
    finished: bool = False

    def score(self) -> float:
        """Average per-token log-probability (BOS excluded)."""
        generated = len(self.tokens) - 1
        return self.logprob / generated if generated else -np.inf


def init_decoder_state(h_states: Tensor, params: ParamStore) -> DecoderState:
    """Mean of the encoder states, bridged to decoder width by tanh-affine."""
    mean = ad.mean_rows(h_states)
    bridged = ad.tanh(ad.matmul(params["dec.bridge.w"], mean) + params["dec.bridge.b"])
    return DecoderState(h1=bridged, h2=bridged)


def decoder_attention(h1: Tensor, h_states: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Additive attention of the layer-1 state over encoder states."""
    query = ad.matmul(params["dec.attn.w_state"], h1)
    keys = ad.matmul(h_states, ad.transpose(params["dec.attn.w_mem"]))
    pre = ad.tanh(keys + query + params["dec.attn.bias"])
    a_d = ad.softmax(ad.matmul(pre, params["dec.attn.v"]))
    c_d = ad.matmul(ad.transpose(h_states), a_d)
    return a_d, c_d


def decode_step(
    y_prev_id: int,
    state: DecoderState,
    h_states: Tensor,
    c_s: Optional[Tensor],
    c_u: Optional[Tensor],
    params: ParamStore,
) -> tuple[Tensor, DecoderState, Tensor]:
    """One decoder step; returns (vocabulary distribution, new state, a_d).

    Absent contexts simply drop their fusion terms, which is how the
    ablation configurations reduce to a plain attentional model.
    """
    table = params["dec.embed"]
    emb = ad.reshape(ad.take_rows(table, [y_prev_id]), (table.shape[1],))
    h1 = gru_cell(emb, state.h1, params, "dec.gru1")
    a_d, c_d = decoder_attention(h1, h_states, params)
    h2 = gru_cell(ad.concat([emb, c_d]), state.h2, params, "dec.gru2")
    pre = ad.matmul(params["dec.fuse.w_state"], h2) + params["dec.fuse.bias"]
    if c_s is not None:
        pre = pre + ad.matmul(params["dec.fuse.w_sup"], c_s)
    if c_u is not None:
        pre = pre + ad.matmul(params["dec.fuse.w_unsup"], c_u)
    h_a = ad.tanh(pre)
    dist = ad.softmax(ad.matmul(params["dec.out.w"], h_a) + params["dec.out.b"])
    return dist, DecoderState(h1=h1, h2=h2), a_d


def _strip(tokens: list[int]) -> list[int]:
    out = tokens[1:]
    if out and out[-1] == EOS_ID:
        out = out[:-1]
    return out


def greedy_decode(
    h_states: Tensor,
    c_s: Optional[Tensor],
    c_u: Optional[Tensor],
    params: ParamStore,
    max_len: int,
) -> list[int]:
    """Argmax chain until EOS or max_len; BOS/EOS stripped from the result."""
    with ad.no_grad():
        state = init_decoder_state(h_states, params)
        tokens = [BOS_ID]
        for _ in range(max_len):
            dist, state, _ = decode_step(tokens[-1], state, h_states, c_s, c_u, params)
            nxt = int(np.argmax(dist.data))
            tokens.append(nxt)
            if nxt == EOS_ID:
                break
    return _strip(tokens)


def beam_search(
    h_states: Tensor,
    c_s: Optional[Tensor],
    c_u: Optional[Tensor],
    params: ParamStore,
    beam: int,
    max_len: int,
) -> list[int]:
    """Length-synchronous beam search; returns the stripped best sequence.

    Each round expands every live hypothesis over the whole vocabulary and
    keeps the top `beam` by cumulative log-probability (ties broken by
    token sequence).  Hypotheses that emit EOS move to the finished pool;
    search stops once `beam` are finished or max_len is reached.  The final
    ranking is by average per-token log-probability, finished preferred.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    with ad.no_grad():
        init = init_decoder_state(h_states, params)
        live = [Hypothesis(tokens=[BOS_ID], logprob=0.0, state=init)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            candidates: list[Hypothesis] = []
            for hyp in live:
                dist, new_state, _ = decode_step(hyp.tokens[-1], hyp.state, h_states, c_s, c_u, params)
                logp = np.log(np.maximum(dist.data, 1e-38))
                for tok in range(logp.shape[0]):
                    candidates.append(
                        Hypothesis(
                            tokens=hyp.tokens + [tok],
                            logprob=hyp.logprob + float(logp[tok]),
                            state=new_state,
                            finished=tok == EOS_ID,
                        )
                    )
            candidates.sort(key=lambda h: (-h.logprob, h.tokens))
            live = []
            for hyp in candidates[:beam]:
                (finished if hyp.finished else live).append(hyp)
            if len(finished) >= beam or not live:
                break
        pool = finished if finished else live
        best = min(pool, key=lambda h: (-h.score(), h.tokens))
    return _strip(best.tokens)
