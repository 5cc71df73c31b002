"""Relationship-dependent content masking.

Each description word gets the maximum cosine similarity between its
embedding and the relationship-name word embeddings (max word-relationship
weight). Context re-weighting then takes a trailing-window max so the
words that *follow* an indicator word inherit its weight, and the
description matrix is rescaled row-wise by the result. Rows with zero
norm (OOV/padding) get weight 0.
"""

from __future__ import annotations

from dataclasses import dataclass

from conmask import numkit as nk
from conmask.errors import ShapeError
from conmask.numkit.tensor import Tensor


@dataclass
class MaskedContent:
    """Per-word weights plus the re-weighted description matrix."""

    weights: Tensor        # (L,) the weights actually applied
    masked_matrix: Tensor  # (L, k) = weights[i] * desc[i, :]
    mwrw: Tensor           # (L,) max word-relationship weights
    mcrw: Tensor           # (L,) context-adjusted weights


def mwrw_weights(desc: Tensor, rel: Tensor) -> Tensor:
    """weight[i] = max_j cosine(desc[i], rel[j]); zero rows score 0."""
    desc, rel = nk.as_tensor(desc), nk.as_tensor(rel)
    if desc.data.ndim != 2 or rel.data.ndim != 2:
        raise ShapeError(f"expected matrices, got {desc.data.shape} and {rel.data.shape}")
    if desc.data.shape[0] < 1 or rel.data.shape[0] < 1:
        raise ShapeError("description and relationship matrices must be non-empty")
    if desc.data.shape[1] != rel.data.shape[1]:
        raise ShapeError(f"embedding width mismatch: {desc.data.shape} vs {rel.data.shape}")
    sims = nk.matmul(nk.l2_normalize_rows(desc), nk.transpose(nk.l2_normalize_rows(rel)))
    return nk.rowmax(sims)


def mcrw_weights(mwrw: Tensor, window: int) -> Tensor:
    """Trailing max over each word and its previous ``window`` words."""
    return nk.trailing_window_max(mwrw, window)


def apply_mask(desc: Tensor, rel: Tensor, window: int, mode: str = "mcrw") -> MaskedContent:
    """Re-weight a description matrix against a relationship name.

    ``mode`` selects the applied weights: the context-adjusted weights by
    default, or the raw word-relationship weights as a diagnostic.
    Padding must already be sliced off; callers pass valid rows only.
    """
    if mode not in ("mcrw", "mwrw"):
        raise ValueError(f"mask mode must be 'mcrw' or 'mwrw', got {mode!r}")
    word_w = mwrw_weights(desc, rel)
    ctx_w = mcrw_weights(word_w, window)
    weights = ctx_w if mode == "mcrw" else word_w
    return MaskedContent(weights=weights,
                         masked_matrix=nk.scale_rows(nk.as_tensor(desc), weights),
                         mwrw=word_w, mcrw=ctx_w)
