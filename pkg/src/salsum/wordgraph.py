"""Word-graph salience: parameterized edge weights and closed-form PageRank.

Source tokens are graph vertices; stopwords and punctuation are excluded
from the vertex set.  Edge weights come from a learned bilinear form over
word embeddings, made strictly positive so the column-normalized matrix is
stochastic.  The stationary distribution is obtained in closed form by a
differentiable linear solve, then normalized into an attention vector over
the content positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

# Additive floor keeping every content-block edge strictly positive.
EDGE_FLOOR = 1e-6


class EmptyGraphError(ValueError):
    """No content vertex survives the stopword/punctuation filter."""


class DegenerateGraphError(ArithmeticError):
    """A content column of the edge matrix sums to zero (floor violated)."""


def edge_weights(embeddings: Tensor, w_edge: Tensor, content_mask) -> Tensor:
    """Positive bilinear edge weights on the content block, zero elsewhere.

    Raw scores x_i^T W x_j can be negative, so they pass through softplus
    plus a small floor before use.
    """
    mask = np.asarray(content_mask, dtype=bool)
    if mask.shape != (embeddings.shape[0],):
        raise ad.ShapeMismatchError(f"content mask shape {mask.shape} does not match {embeddings.shape[0]} vertices")
    if not mask.any():
        raise EmptyGraphError("word graph has no content vertices")
    raw = ad.matmul(ad.matmul(embeddings, w_edge), ad.transpose(embeddings))
    block = np.outer(mask, mask).astype(embeddings.dtype)
    return (ad.softplus(raw) + EDGE_FLOOR) * ad.tensor(block)


def pagerank_closed_form(m_edges: Tensor, damping: float, content_mask) -> Tensor:
    """Stationary salience p solving (I - d A) p = (1 - d) q on the content block.

    A is the column-normalized content submatrix and q is uniform over the
    n_c content vertices.  Non-content positions get exactly 0.  The solve
    keeps the whole computation differentiable in the edge weights.
    """
    if not 0.0 < damping < 1.0:
        raise ValueError(f"damping must lie in (0, 1), got {damping}")
    mask = np.asarray(content_mask, dtype=bool)
    if not mask.any():
        raise EmptyGraphError("word graph has no content vertices")
    idx = np.flatnonzero(mask)
    n_c = idx.size
    sub = ad.transpose(ad.take_rows(ad.transpose(ad.take_rows(m_edges, idx)), idx))
    col_sums = ad.tensor_sum(sub, axis=0)
    if (col_sums.data <= 0.0).any():
        raise DegenerateGraphError("zero column sum in the content block")
    stochastic = sub / col_sums
    dtype = m_edges.dtype
    lhs = ad.tensor(np.eye(n_c, dtype=dtype)) - damping * stochastic
    rhs = ad.tensor(np.full(n_c, (1.0 - damping) / n_c, dtype=dtype))
    p_content = ad.linear_solve(lhs, rhs)
    return ad.scatter(p_content, idx, m_edges.shape[0])


def unsupervised_attention(p: Tensor, content_mask) -> Tensor:
    """Softmax of the PageRank scores over content positions only."""
    return ad.softmax(p, mask=np.asarray(content_mask, dtype=bool))


def unsupervised_context(a_u: Tensor, embeddings: Tensor) -> Tensor:
    """Weighted combination of the word embeddings (not hidden states)."""
    return ad.matmul(ad.transpose(embeddings), a_u)


@dataclass
class GraphSalience:
    """Word-graph branch outputs for one source sequence."""

    M: Tensor             # [m, m] edge weights
    p: Tensor             # [m] PageRank scores, zero off-content
    a_u: Tensor           # [m] normalized attention, zero off-content
    c_u: Tensor           # [k_e] unsupervised context
    content_mask: np.ndarray


def graph_salience(embeddings: Tensor, params: ParamStore, content_mask, damping: float) -> GraphSalience:
    """Full word-graph branch: edges, PageRank, normalization, context."""
    mask = np.asarray(content_mask, dtype=bool)
    m_edges = edge_weights(embeddings, params["graph.w_edge"], mask)
    p = pagerank_closed_form(m_edges, damping, mask)
    a_u = unsupervised_attention(p, mask)
    c_u = unsupervised_context(a_u, embeddings)
    return GraphSalience(M=m_edges, p=p, a_u=a_u, c_u=c_u, content_mask=mask)
