"""Neural-net ops over 2-D (length x channels) tensors.

Forward math is vectorized numpy; every op installs its own backward
rule. Max-style ops (pooling, row max, trailing-window max) route the
gradient to the argmax, first index on ties, so results are
deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from conmask.errors import ShapeError, StateError
from conmask.numkit.tensor import Tensor, _node, as_tensor


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation along rows.

    x: (L, C_in), kernels: (w, C_in, C_out) with w odd, bias: (C_out,).
    Output is (L, C_out).
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"conv1d input must be non-empty (L, C), got {x.data.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (w, C_in, C_out), got {kernels.data.shape}")
    w, c_in, c_out = kernels.data.shape
    if w % 2 == 0:
        raise ShapeError(f"conv1d kernel width must be odd, got {w}")
    if stride != 1:
        raise ShapeError("conv1d supports stride 1 only")
    length, c = x.data.shape
    if c != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.data.shape} vs kernels {kernels.data.shape}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be ({c_out},), got {bias.data.shape}")

    pad = (w - 1) // 2
    xp = np.zeros((length + 2 * pad, c_in))
    xp[pad:pad + length] = x.data
    # (L, w, C_in): row i holds the window centered at i
    cols = np.stack([xp[j:j + length] for j in range(w)], axis=1)
    cols2 = cols.reshape(length, w * c_in)
    w_col = kernels.data.reshape(w * c_in, c_out)
    out = cols2 @ w_col + bias.data

    def bwd(g):
        if kernels.requires_grad:
            kernels.accumulate_grad((cols2.T @ g).reshape(w, c_in, c_out))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            g_cols = (g @ w_col.T).reshape(length, w, c_in)
            gxp = np.zeros_like(xp)
            for j in range(w):
                gxp[j:j + length] += g_cols[:, j, :]
            x.accumulate_grad(gxp[pad:pad + length])

    return _node(out, "conv1d", (x, kernels, bias), bwd)


def maxpool1d(x: Tensor, pool: int = 2, stride: int = 2) -> Tensor:
    """Column-wise max over non-overlapping windows; short final window kept."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"maxpool1d input must be non-empty (L, C), got {x.data.shape}")
    if pool != stride:
        raise ShapeError("maxpool1d supports pool == stride only")
    if pool < 1:
        raise ShapeError(f"pool size must be >= 1, got {pool}")
    length, c = x.data.shape
    n_out = math.ceil(length / pool)
    padded = n_out * pool
    xp = np.full((padded, c), -np.inf)
    xp[:length] = x.data
    win = xp.reshape(n_out, pool, c)
    arg = win.argmax(axis=1)  # first index on ties
    out = np.take_along_axis(win, arg[:, None, :], axis=1)[:, 0, :]

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros((n_out, pool, c))
            np.put_along_axis(gxp, arg[:, None, :], g[:, None, :], axis=1)
            x.accumulate_grad(gxp.reshape(padded, c)[:length])

    return _node(out, "maxpool1d", (x,), bwd)


def meanpool_rows(x: Tensor) -> Tensor:
    """Mean over rows: (L, C) -> (1, C)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"meanpool_rows input must be non-empty (L, C), got {x.data.shape}")
    length = x.data.shape[0]

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.repeat(g, length, axis=0) / length)

    return _node(x.data.mean(axis=0, keepdims=True), "meanpool_rows", (x,), bwd)


class BatchNormState:
    """Moving per-channel statistics, updated by train-mode calls."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.steps = 0

    @property
    def initialized(self) -> bool:
        return self.steps > 0


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str, decay: float = 0.9) -> Tensor:
    """Per-channel normalization over rows.

    Train mode uses batch statistics and updates the moving stats as
    m <- decay*m + (1-decay)*batch. Infer mode uses moving stats only and
    errors if no train-mode call has happened yet.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects (L, C), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm gamma/beta must be ({c},)")

    if mode == "train":
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.mean = decay * state.mean + (1.0 - decay) * mu
        state.var = decay * state.var + (1.0 - decay) * var
        state.steps += 1
    elif mode == "infer":
        if not state.initialized:
            raise StateError("batch_norm infer mode before any train-mode call")
        mu = state.mean
        var = state.var
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            if mode == "train":
                # batch statistics are functions of x
                gx = inv_std * (gh - gh.mean(axis=0)
                                - xhat * (gh * xhat).mean(axis=0))
            else:
                gx = gh * inv_std
            x.accumulate_grad(gx)

    return _node(out, "batch_norm", (x, gamma, beta), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return _node(out, "sigmoid", (x,), bwd)


def softmax_row(x: Tensor) -> Tensor:
    """Row-wise stable softmax; also accepts a 1-D tensor."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("softmax_row on an empty tensor")
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - inner))

    return _node(out, "softmax_row", (x,), bwd)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) of a 1-D tensor, max-stabilized."""
    x = as_tensor(x)
    if x.data.ndim != 1 or x.data.size == 0:
        raise ShapeError(f"logsumexp expects a non-empty vector, got {x.data.shape}")
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    out = m + np.log(s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(float(g) * e / s)

    return _node(out, "logsumexp", (x,), bwd)


def dropout(x: Tensor, keep_p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in infer mode or when keep_p == 1."""
    if not 0.0 < keep_p <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_p}")
    x = as_tensor(x)
    if mode == "infer" or keep_p == 1.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) < keep_p) / keep_p

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _node(x.data * mask, "dropout", (x,), bwd)


def embed_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a (V, k) table: out[i] = table[indices[i]]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embed_rows table must be (V, k), got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embed_rows index out of range for V={table.data.shape[0]}")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table.accumulate_grad(gt)

    return _node(table.data[idx], "embed_rows", (table,), bwd)


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Row-wise rescale: out[i, :] = weights[i] * x[i, :]."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.data.ndim != 2 or weights.data.shape != (x.data.shape[0],):
        raise ShapeError(f"scale_rows: x {x.data.shape} vs weights {weights.data.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * weights.data[:, None])
        if weights.requires_grad:
            weights.accumulate_grad((g * x.data).sum(axis=1))

    return _node(x.data * weights.data[:, None], "scale_rows", (x, weights), bwd)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Unit-normalize each row; zero rows stay zero (zero gradient there)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects (L, k), got {x.data.shape}")
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    out = x.data / safe[:, None]

    def bwd(g):
        if x.requires_grad:
            dot = (out * g).sum(axis=1, keepdims=True)
            gx = (g - out * dot) / safe[:, None]
            gx[norms == 0.0] = 0.0
            x.accumulate_grad(gx)

    return _node(out, "l2_normalize_rows", (x,), bwd)


def rowmax(x: Tensor) -> Tensor:
    """Max over each row: (L, R) -> (L,), gradient to first argmax."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] < 1:
        raise ShapeError(f"rowmax expects (L, R) with R >= 1, got {x.data.shape}")
    arg = x.data.argmax(axis=1)
    out = x.data[np.arange(x.data.shape[0]), arg]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[np.arange(x.data.shape[0]), arg] = g
            x.accumulate_grad(gx)

    return _node(out, "rowmax", (x,), bwd)


def trailing_window_max(v: Tensor, window: int) -> Tensor:
    """out[i] = max(v[max(0, i-window) .. i]); gradient to the first argmax."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"trailing_window_max expects a vector, got {v.data.shape}")
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    n = v.data.size
    if n == 0:
        raise ShapeError("trailing_window_max on an empty vector")
    vp = np.concatenate([np.full(window, -np.inf), v.data])
    wins = np.lib.stride_tricks.sliding_window_view(vp, window + 1)  # (n, window+1)
    arg = wins.argmax(axis=1)
    src = np.arange(n) - window + arg  # source index in v, first on ties
    out = v.data[src]

    def bwd(g):
        if v.requires_grad:
            gv = np.zeros_like(v.data)
            np.add.at(gv, src, g)
            v.accumulate_grad(gv)

    return _node(out, "trailing_window_max", (v,), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack matrices with equal column counts along the row axis."""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    parts = [as_tensor(p) for p in parts]
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {[q.data.shape for q in parts]}")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[start:stop])

    return _node(np.concatenate([p.data for p in parts], axis=0), "concat_rows",
                 tuple(parts), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice with scatter backward."""
    x = as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start <= stop <= x.data.shape[0]:
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            x.accumulate_grad(gx)

    return _node(x.data[start:stop].copy(), "slice_rows", (x,), bwd)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two same-size tensors (flattened) -> scalar.

    If either operand has zero norm the similarity is 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != b.data.size:
        raise ShapeError(f"cosine size mismatch: {a.data.shape} vs {b.data.shape}")
    av = a.data.reshape(-1)
    bv = b.data.reshape(-1)
    na = np.sqrt((av ** 2).sum())
    nb = np.sqrt((bv ** 2).sum())
    if na == 0.0 or nb == 0.0:
        return _node(np.asarray(0.0), "cosine", (a, b), lambda g: None)
    c = float(av @ bv) / (na * nb)

    def bwd(g):
        gf = float(g)
        if a.requires_grad:
            ga = gf * (bv / (na * nb) - c * av / (na * na))
            a.accumulate_grad(ga.reshape(a.data.shape))
        if b.requires_grad:
            gb = gf * (av / (na * nb) - c * bv / (nb * nb))
            b.accumulate_grad(gb.reshape(b.data.shape))

    return _node(np.asarray(c), "cosine", (a, b), bwd)
