"""Model assembly: configuration, parameter initialization, source encoding.

Every parameter is always created regardless of the ablation switches; the
switches only change which branches the forward pass wires up.  That keeps
checkpoints shape-compatible across configurations and makes "disabled
branch gets zero gradient" a checkable property rather than an absence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .corpus import TrainingPair
from .encoder import EncoderOutput, encode_bidirectional, encode_with_salience
from .wordgraph import GraphSalience, graph_salience


@dataclass
class ModelConfig:
    vocab_size: int
    k_e: int = 64
    k_h: int = 64
    damping: float = 0.9
    use_sup_context: bool = True     # feed c_s into the decoder fusion
    use_unsup_context: bool = True   # feed c_u into the decoder fusion
    use_salience_loss: bool = True   # train the salience head directly
    detach_sup_context: bool = False  # stop generation gradients at c_s

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must cover the 4 reserved ids, got {self.vocab_size}")
        if self.k_e < 1 or self.k_h < 1:
            raise ValueError("k_e and k_h must be positive")
        if not 0.0 < self.damping < 1.0:
            raise ValueError(f"damping must lie in (0, 1), got {self.damping}")

    @property
    def wants_salience_branch(self) -> bool:
        return self.use_salience_loss or self.use_sup_context

    @property
    def wants_graph_branch(self) -> bool:
        return self.use_unsup_context


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Every parameter with its shape, in canonical insertion order."""
    v, k_e, k_h = cfg.vocab_size, cfg.k_e, cfg.k_h

    def gru(prefix: str, k_in: int) -> list[tuple[str, tuple]]:
        out = []
        for gate in ("r", "z", "h"):
            out.append((f"{prefix}.w_x{gate}", (k_h, k_in)))
            out.append((f"{prefix}.w_h{gate}", (k_h, k_h)))
            out.append((f"{prefix}.b_{gate}", (k_h,)))
        return out

    shapes: list[tuple[str, tuple]] = [("enc.embed", (v, k_e))]
    shapes += gru("enc.fwd", k_e)
    shapes += gru("enc.bwd", k_e)
    shapes += [
        ("enc.attn.w_query", (k_h, 2 * k_h)),
        ("enc.attn.w_key", (k_h, 2 * k_h)),
        ("enc.attn.bias", (k_h,)),
        ("enc.attn.v", (k_h,)),
        ("enc.fuse.w_state", (k_h, 2 * k_h)),
        ("enc.fuse.w_ctx", (k_h, 2 * k_h)),
        ("enc.fuse.bias", (k_h,)),
        ("sal.w_emb", (k_e,)),
        ("sal.w_state", (2 * k_h,)),
        ("sal.w_ctx", (2 * k_h,)),
        ("sal.w_fused", (k_h,)),
        ("sal.bias", (1,)),
        ("graph.w_edge", (k_e, k_e)),
        ("dec.embed", (v, k_e)),
        ("dec.bridge.w", (k_h, 2 * k_h)),
        ("dec.bridge.b", (k_h,)),
    ]
    shapes += gru("dec.gru1", k_e)
    shapes += gru("dec.gru2", k_e + 2 * k_h)
    shapes += [
        ("dec.attn.w_state", (k_h, k_h)),
        ("dec.attn.w_mem", (k_h, 2 * k_h)),
        ("dec.attn.bias", (k_h,)),
        ("dec.attn.v", (k_h,)),
        ("dec.fuse.w_state", (k_h, k_h)),
        ("dec.fuse.w_sup", (k_h, 2 * k_h)),
        ("dec.fuse.w_unsup", (k_h, k_e)),
        ("dec.fuse.bias", (k_h,)),
        ("dec.out.w", (v, k_h)),
        ("dec.out.b", (v,)),
    ]
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Uniform +/- sqrt(6 / (fan_in + fan_out)) weights, zero biases.

    Score vectors and per-position weight vectors are treated as 1 x k
    maps.  Draw order is the canonical parameter order, so a seed pins
    every value.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for name, shape in _param_shapes(cfg):
        base = name.rsplit(".", 1)[-1]
        if base.startswith("b") or base == "bias":
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[-1]
            fan_out = shape[0] if len(shape) > 1 else 1
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.add(name, Tensor(data))
    return params


def config_from_params(arrays: dict) -> tuple[int, int, int]:
    """Recover (vocab_size, k_e, k_h) from checkpoint array shapes."""
    try:
        v, k_e = arrays["dec.embed"].shape
        k_h = arrays["dec.bridge.b"].shape[0]
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing parameter {exc}") from exc
    return v, k_e, k_h


@dataclass
class SourceContext:
    """Everything decoding needs about one encoded source sequence."""

    X: Tensor                               # [T, k_e] source embeddings
    H: Tensor                               # [T, 2k_h] encoder states
    salience: Optional[EncoderOutput]       # left branch, when wired
    graph: Optional[GraphSalience]          # word-graph branch, when wired
    c_s: Optional[Tensor]                   # fusion input, None when disabled
    c_u: Optional[Tensor]


def source_representations(pair: TrainingPair, params: ParamStore, cfg: ModelConfig,
                           force_all: bool = False) -> SourceContext:
    """Encode one source and run whichever salience branches are enabled.

    force_all computes both branches regardless of the decoder wiring
    switches (used by the inspection/evaluation paths); c_s/c_u still honor
    the switches so decoding is unaffected.
    """
    x_emb = ad.take_rows(params["enc.embed"], pair.source_ids)
    salience = None
    if cfg.wants_salience_branch or force_all:
        salience = encode_with_salience(x_emb, params)
        h_states = salience.H
    else:
        h_states = encode_bidirectional(x_emb, params)
    graph = None
    if (cfg.wants_graph_branch or force_all) and any(pair.content_mask):
        graph = graph_salience(x_emb, params, pair.content_mask, cfg.damping)
    c_s = None
    if cfg.use_sup_context and salience is not None:
        c_s = salience.c_s.detach() if cfg.detach_sup_context else salience.c_s
    c_u = graph.c_u if (cfg.use_unsup_context and graph is not None) else None
    return SourceContext(X=x_emb, H=h_states, salience=salience, graph=graph, c_s=c_s, c_u=c_u)
