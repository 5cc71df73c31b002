"""Target fusion encoder and semantic averaging.

Target fusion distills a masked description matrix into one k-dim
embedding through three FCN layers: two same-padded 1-D convolutions,
sigmoid, batch norm, dropout, then max-pooling with pool/stride 2. The
final layer mean-pools over rows instead, so the output is always a
single embedding. Channel count stays at k throughout; lengths halve
per layer, so inputs shorter than 4 rows are zero-padded up to 4.

Batch-norm statistics in train mode are taken over every fusion input
of the current forward build (``fuse_batch``), not over one example's
rows: normalizing a single example and then mean-pooling the very same
rows would make the output identically beta and kill all upstream
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from conmask import numkit as nk
from conmask.errors import NumericalError, ShapeError
from conmask.masking import MaskedContent
from conmask.numkit.tensor import Tensor


@dataclass
class FcnLayer:
    conv1_kernels: Tensor
    conv1_bias: Tensor
    conv2_kernels: Tensor
    conv2_bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn_state: nk.BatchNormState = field(default_factory=lambda: nk.BatchNormState(1))


@dataclass
class FcnParams:
    """Kernels, biases, and batch-norm parameters for the fusion stack."""

    layers: list[FcnLayer]
    conv_width: int
    channels: int

    @classmethod
    def init(cls, channels: int, conv_width: int = 3, n_layers: int = 3,
             rng: np.random.Generator | None = None) -> "FcnParams":
        if conv_width % 2 == 0 or conv_width < 1:
            raise ShapeError(f"conv width must be odd and positive, got {conv_width}")
        rng = rng or np.random.default_rng(0)
        limit = math.sqrt(6.0 / (2 * conv_width * channels))  # glorot uniform
        layers = []
        for i in range(n_layers):
            def kern():
                return rng.uniform(-limit, limit, size=(conv_width, channels, channels))
            layer = FcnLayer(
                conv1_kernels=nk.parameter(kern(), f"fcn.l{i}.conv1.kernels"),
                conv1_bias=nk.parameter(np.zeros(channels), f"fcn.l{i}.conv1.bias"),
                conv2_kernels=nk.parameter(kern(), f"fcn.l{i}.conv2.kernels"),
                conv2_bias=nk.parameter(np.zeros(channels), f"fcn.l{i}.conv2.bias"),
                gamma=nk.parameter(np.ones(channels), f"fcn.l{i}.bn.gamma"),
                beta=nk.parameter(np.zeros(channels), f"fcn.l{i}.bn.beta"),
                bn_state=nk.BatchNormState(channels),
            )
            layers.append(layer)
        return cls(layers=layers, conv_width=conv_width, channels=channels)

    def trainable(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.conv1_kernels, layer.conv1_bias, layer.conv2_kernels,
                    layer.conv2_bias, layer.gamma, layer.beta]
        return out


MIN_FUSION_ROWS = 4  # two halvings must be well-defined


def _as_matrix(mc: MaskedContent | Tensor, params: FcnParams) -> Tensor:
    x = mc.masked_matrix if isinstance(mc, MaskedContent) else nk.as_tensor(mc)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"target_fusion input must be non-empty (L, k), got {x.data.shape}")
    if x.data.shape[1] != params.channels:
        raise ShapeError(f"target_fusion channels {x.data.shape[1]} != params {params.channels}")
    if x.data.shape[0] < MIN_FUSION_ROWS:
        x = nk.pad_rows(x, MIN_FUSION_ROWS)
    return x


def fuse_batch(items: list[MaskedContent | Tensor], params: FcnParams, mode: str,
               keep_p: float = 0.5, rng: np.random.Generator | None = None,
               collect: list | None = None) -> list[Tensor]:
    """Run target fusion over several masked matrices in one build.

    Convolutions and pooling act per example; batch-norm (and dropout)
    act on the row-concatenation of all examples. Returns one (1, k)
    embedding per input, in order.
    """
    xs = [_as_matrix(item, params) for item in items]
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        xs = [nk.sigmoid(nk.conv1d(nk.conv1d(x, layer.conv1_kernels, layer.conv1_bias),
                                   layer.conv2_kernels, layer.conv2_bias)) for x in xs]
        if len(xs) == 1:
            normed = nk.dropout(nk.batch_norm(xs[0], layer.gamma, layer.beta,
                                              layer.bn_state, mode), keep_p, mode, rng)
            xs = [normed]
        else:
            cat = nk.concat_rows(xs)
            cat = nk.batch_norm(cat, layer.gamma, layer.beta, layer.bn_state, mode)
            cat = nk.dropout(cat, keep_p, mode, rng)
            offsets = np.cumsum([0] + [x.data.shape[0] for x in xs])
            xs = [nk.slice_rows(cat, int(a), int(b))
                  for a, b in zip(offsets[:-1], offsets[1:])]
        xs = [nk.meanpool_rows(x) if i == last else nk.maxpool1d(x, 2, 2) for x in xs]
        if collect is not None:
            collect.append(xs)
    for x in xs:
        if np.isnan(x.data).any():
            raise NumericalError("target_fusion produced NaN activations")
    return xs


def target_fusion(mc: MaskedContent | Tensor, params: FcnParams, mode: str,
                  keep_p: float = 0.5, rng: np.random.Generator | None = None,
                  collect: list | None = None) -> Tensor:
    """Fuse one masked content matrix into a single (1, k) embedding.

    ``collect``, when given, receives each layer's pooled outputs (for
    shape inspection). Train mode updates batch-norm moving stats and
    applies dropout; infer mode is deterministic.
    """
    inner: list | None = [] if collect is not None else None
    out = fuse_batch([mc], params, mode, keep_p=keep_p, rng=rng, collect=inner)[0]
    if collect is not None and inner is not None:
        collect.extend(layer_outs[0] for layer_outs in inner)
    return out


def semantic_avg(matrix: Tensor, valid_length: int) -> tuple[Tensor, bool]:
    """Mean of the first ``valid_length`` rows; padding rows never count.

    A valid length of 0 yields a zero vector and a False flag instead of
    an error (entity with no usable tokens).
    """
    matrix = nk.as_tensor(matrix)
    if matrix.data.ndim != 2:
        raise ShapeError(f"semantic_avg expects (L, k), got {matrix.data.shape}")
    if valid_length < 0 or valid_length > matrix.data.shape[0]:
        raise ShapeError(f"valid_length {valid_length} out of range for {matrix.data.shape}")
    if valid_length == 0:
        return nk.constant(np.zeros((1, matrix.data.shape[1]))), False
    if valid_length == matrix.data.shape[0]:
        return nk.meanpool_rows(matrix), True
    rows = nk.embed_rows(matrix, np.arange(valid_length))
    return nk.meanpool_rows(rows), True
