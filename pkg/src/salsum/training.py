"""Joint objective and Adadelta training loop.

The loss is the unweighted sum of a mean binary cross-entropy over the
per-word salience predictions and a summed NLL over teacher-forced decoder
steps.  Updates are per example (batch size 1) with optional global-norm
gradient clipping before each Adadelta step.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .checkpoint import save_checkpoint
from .corpus import BOS_ID, TrainingPair
from .decoder import decode_step, init_decoder_state
from .model import ModelConfig, source_representations

# Probability floors keeping both loss terms differentiable and finite.
BCE_CLAMP = 1e-7
NLL_FLOOR = 1e-12


def clip_global_norm(params: ParamStore, max_norm: float) -> float:
    """Scale factor that caps the all-parameter gradient norm at max_norm."""
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    return max_norm / norm if norm > max_norm else 1.0


def salience_loss(r_hat: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean binary cross-entropy; predictions clamped away from {0, 1}."""
    n = len(labels)
    if r_hat.shape != (n,):
        raise ad.ShapeMismatchError(f"salience shapes disagree: {r_hat.shape} vs {n} labels")
    lab = np.asarray(labels, dtype=r_hat.dtype)
    if not np.isin(lab, (0.0, 1.0)).all():
        raise ValueError("salience labels must be 0 or 1")
    clamped = ad.clamp(r_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pos = ad.tensor(lab) * ad.log(clamped) + ad.tensor(1.0 - lab) * ad.log(1.0 - clamped)
    return ad.tensor_sum(per_pos) * (-1.0 / n)


def nll_loss(dists, target_ids: Sequence[int]) -> Tensor:
    """Summed negative log-likelihood of the target ids under the dists."""
    stacked = ad.stack_rows(list(dists)) if isinstance(dists, (list, tuple)) else dists
    if stacked.shape[0] != len(target_ids):
        raise ad.ShapeMismatchError(f"{stacked.shape[0]} distributions vs {len(target_ids)} targets")
    picked = ad.gather(stacked, list(target_ids))
    return -ad.tensor_sum(ad.log(ad.clamp(picked, NLL_FLOOR, 1.0 + 1e-6)))


def total_loss(pair: TrainingPair, params: ParamStore, cfg: ModelConfig) -> tuple[Tensor, dict]:
    """Full teacher-forced forward pass; returns (loss, float components)."""
    ctx = source_representations(pair, params, cfg)
    state = init_decoder_state(ctx.H, params)
    dists = []
    prev = BOS_ID
    for target in pair.target_ids:
        dist, state, _ = decode_step(prev, state, ctx.H, ctx.c_s, ctx.c_u, params)
        dists.append(dist)
        prev = target
    l_nll = nll_loss(dists, pair.target_ids)
    if cfg.use_salience_loss and ctx.salience is not None:
        l_s = salience_loss(ctx.salience.r_hat, pair.salience_labels)
        loss = l_s + l_nll
        ls_value = l_s.item()
    else:
        loss = l_nll
        ls_value = 0.0
    stats = {"l_s": ls_value, "l_nll": l_nll.item(), "total": loss.item(), "n_tokens": len(pair.target_ids)}
    return loss, stats


class AdadeltaState:
    """Per-parameter running averages of squared gradients and updates."""

    def __init__(self, params: ParamStore, rho: float = 0.95, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self.e_g2 = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.e_dx2 = {name: np.zeros_like(t.data) for name, t in params.items()}


def adadelta_step(params: ParamStore, state: AdadeltaState, clip_norm: Optional[float] = None) -> None:
    """One accumulated-gradient update; parameters without grads are untouched."""
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name}")
    scale = 1.0 if clip_norm is None else clip_global_norm(params, clip_norm)
    rho, eps = state.rho, state.eps
    for name, t in params.items():
        if t.grad is None:
            continue
        g = t.grad if scale == 1.0 else t.grad * np.asarray(scale, dtype=t.grad.dtype)
        e_g2 = state.e_g2[name]
        e_g2 *= rho
        e_g2 += (1.0 - rho) * g * g
        delta = -np.sqrt((state.e_dx2[name] + eps) / (e_g2 + eps)) * g
        e_dx2 = state.e_dx2[name]
        e_dx2 *= rho
        e_dx2 += (1.0 - rho) * delta * delta
        t.data += delta


@dataclass
class TrainConfig:
    epochs: int
    seed: int = 0
    shuffle: bool = True
    clip_norm: Optional[float] = 5.0
    checkpoint_interval: int = 0          # epochs between mid-run snapshots; 0 = off
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")


@dataclass
class TrainResult:
    params: ParamStore
    log_lines: list[str] = field(default_factory=list)
    per_token_nll: float = float("nan")
    skipped: int = 0


def mean_per_token_nll(pairs: Sequence[TrainingPair], params: ParamStore, cfg: ModelConfig) -> float:
    """Corpus NLL divided by corpus target-token count, forward-only."""
    total = 0.0
    tokens = 0
    with ad.no_grad():
        for pair in pairs:
            _, stats = total_loss(pair, params, cfg)
            total += stats["l_nll"]
            tokens += stats["n_tokens"]
    return total / tokens if tokens else float("nan")


def train(
    pairs: Sequence[TrainingPair],
    params: ParamStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val_pairs: Optional[Sequence[TrainingPair]] = None,
    log_stream=None,
) -> TrainResult:
    """Per-example Adadelta training with a tab-separated per-epoch loss log.

    With a validation split the returned parameters are the epoch snapshot
    with the lowest validation NLL; otherwise the final parameters.  A
    record whose step fails on non-finite values is skipped, not fatal.
    """
    if not pairs:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdadeltaState(params)
    result = TrainResult(params=params)
    best_val = float("inf")
    best: Optional[ParamStore] = None
    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(len(pairs))
        if cfg.shuffle:
            rng.shuffle(order)
        sums = {"l_s": 0.0, "l_nll": 0.0, "total": 0.0}
        seen = 0
        for idx in order:
            params.zero_grad()
            try:
                loss, stats = total_loss(pairs[idx], params, model_cfg)
                loss.backward()
                adadelta_step(params, opt, cfg.clip_norm)
            except ad.NonFiniteError as exc:
                result.skipped += 1
                print(f"skipping record {idx} in epoch {epoch}: {exc}", file=sys.stderr)
                continue
            seen += 1
            for key in sums:
                sums[key] += stats[key]
        n = max(seen, 1)
        line = f"{epoch}\t{sums['l_s'] / n:.6f}\t{sums['l_nll'] / n:.6f}\t{sums['total'] / n:.6f}"
        result.log_lines.append(line)
        if log_stream is not None:
            print(line, file=log_stream, flush=True)
        if val_pairs:
            val = mean_per_token_nll(val_pairs, params, model_cfg)
            if val < best_val:
                best_val = val
                best = params.copy()
        if cfg.checkpoint_path and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
            save_checkpoint(cfg.checkpoint_path, params)
    if best is not None:
        result.params = best
    result.per_token_nll = mean_per_token_nll(pairs, result.params, model_cfg)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, result.params)
    return result
