"""Dense channels-last (N, H, W, C) arrays with the handful of forward ops the view classifier needs,
plus a tape that replays them backwards for reverse-mode gradients.

Every op takes an optional ``tape``. When one is given the op appends a
closure that reads ``out.grad`` and adds into the gradients of its inputs, so a
value feeding several consumers accumulates additively. Ops are dtype-generic:
parameters live in float32, but the same code runs in float64 for gradient
checks.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg.blas import get_blas_funcs

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # backward closures always hand over freshly allocated arrays
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=False).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of executed ops.

    ``guided`` switches every recorded ReLU to the guided-backprop rule while
    the tape is being replayed.
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, Callable[[], None]]] = []
        self.guided = False

    def record(self, op: str, out: Tensor, backward_fn: Callable[[], None]) -> None:
        self.records.append((op, out, backward_fn))

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        """Drop the records (and the activations they hold)."""
        self.records.clear()


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _colsum(m: np.ndarray) -> np.ndarray:
    """Column sums of a 2-d array through BLAS (much faster than axis-0 reduce)."""
    return np.ones(m.shape[0], dtype=m.dtype) @ m


def backward(tape: Tape, out: Tensor, seed: np.ndarray | None = None, guided: bool = False) -> None:
    """Replay ``tape`` in reverse, starting from ``out``.

    ``seed`` defaults to ones (so a scalar loss gets d loss/d loss = 1).
    Gradients land in ``.grad`` of every tensor created with
    ``requires_grad=True``.
    """
    if tape is None or not tape.records:
        raise RuntimeError("backward called without a recorded forward pass")
    if seed is None:
        seed = np.ones_like(out.data)
    seed = np.asarray(seed, dtype=out.data.dtype)
    if seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {out.shape}")
    out.grad = seed.copy()
    tape.guided = guided
    try:
        for _, node, fn in reversed(tape.records):
            if node.grad is not None:
                fn()
    finally:
        tape.guided = False


# ---------------------------------------------------------------- convolution

# patch matrices are built a few images at a time so they stay cache resident
_CHUNK_BYTES = 4 << 20


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) patches of the zero-padded 3x3 neighbourhood."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w] += d[:, :, :, i, j]
    return dxp[:, 1:-1, 1:-1]


def _chunks(n: int, h: int, w: int, c: int, itemsize: int):
    step = max(1, _CHUNK_BYTES // max(1, h * w * 9 * c * itemsize))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def _conv_im2col(x: Tensor, kernels: Tensor, bias: Tensor):
    n, h, w, c = x.shape
    f = kernels.shape[3]
    wmat = kernels.data.reshape(9 * c, f)
    y = np.empty((n, h, w, f), dtype=np.result_type(x.data, kernels.data))
    for sl in _chunks(n, h, w, c, x.data.itemsize):
        y[sl] = (_im2col(x.data[sl]) @ wmat).reshape(-1, h, w, f)
    y += bias.data
    out = Tensor(y)

    def _backward():
        g = out.grad
        gw = np.zeros((9 * c, f), dtype=g.dtype) if kernels.requires_grad else None
        dx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        for sl in _chunks(n, h, w, c, x.data.itemsize):
            gk = g[sl].reshape(-1, f)
            if gw is not None:
                gw += _im2col(x.data[sl]).T @ gk
            if dx is not None:
                dx[sl] = _col2im(gk @ wmat.T, x.data[sl].shape)
        if gw is not None:
            kernels._accumulate(gw.reshape(kernels.shape))
        if bias.requires_grad:
            bias._accumulate(_colsum(g.reshape(-1, f)))
        if dx is not None:
            x._accumulate(dx)

    return out, _backward


def _conv_shifted(x: Tensor, kernels: Tensor, bias: Tensor):
    """Same result as the im2col path without building patch matrices.

    The zero-padded input is flattened to rows of C values. Output pixel (r, s)
    of image i sits at row q = i*(H+2)*(W+2) + r*(W+2) + s, and kernel tap
    (a, b) reads row q + a*(W+2) + b, so each tap is one GEMM on a contiguous
    row block. Rows with r >= H or s >= W are junk and get sliced away.
    """
    n, h, w, c = x.shape
    f = kernels.shape[3]
    dtype = np.result_type(x.data, kernels.data)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=dtype)
    xp[:, 1:-1, 1:-1] = x.data
    rows = xp.reshape(-1, c)
    span = len(rows) - (2 * (w + 2) + 2)
    offsets = [a * (w + 2) + b for a in range(3) for b in range(3)]
    taps = np.ascontiguousarray(kernels.data.reshape(9, c, f), dtype=dtype)
    gemm = get_blas_funcs("gemm", (rows, taps))

    full = np.zeros((len(rows), f), dtype=dtype)
    for t, off in enumerate(offsets):
        # full[:span] += rows[off:off+span] @ taps[t], in place (BLAS sees the transposes)
        gemm(1.0, taps[t].T, rows[off:off + span].T, beta=1.0, c=full[:span].T, overwrite_c=1)
    y = full.reshape(n, h + 2, w + 2, f)[:, :h, :w] + bias.data
    out = Tensor(y)

    def _backward():
        g = out.grad.astype(dtype, copy=False)
        gp = np.zeros((n, h + 2, w + 2, f), dtype=dtype)
        gp[:, :h, :w] = g
        gq = gp.reshape(-1, f)[:span]
        if kernels.requires_grad:
            gk = np.empty((9, c, f), dtype=dtype)
            for t, off in enumerate(offsets):
                gk[t] = rows[off:off + span].T @ gq
            kernels._accumulate(gk.reshape(kernels.shape))
        if bias.requires_grad:
            bias._accumulate(_colsum(g.reshape(-1, f)))
        if x.requires_grad:
            dxp = np.zeros_like(rows)
            for t, off in enumerate(offsets):
                gemm(1.0, taps[t], gq.T, beta=1.0, c=dxp[off:off + span].T, overwrite_c=1)
            x._accumulate(dxp.reshape(n, h + 2, w + 2, c)[:, 1:-1, 1:-1])

    return out, _backward


# the shifted form wins on wide, high-resolution inputs; im2col elsewhere
_SHIFT_MIN_CHANNELS = 8
_SHIFT_MIN_PIXELS = 2000


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """3x3, stride 1, zero "same" padding cross-correlation.

    x: (N, H, W, C); kernels: (3, 3, C, F); bias: (F,). Output (N, H, W, F).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d (N, H, W, C) input, got shape {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernels must be (3, 3, C, F), got {kernels.shape}")
    if kernels.shape[2] != x.shape[3]:
        raise ShapeError(
            f"kernel input channels do not match input: kernels {kernels.shape} vs input {x.shape}")
    if bias.shape != (kernels.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernels {kernels.shape}")
    n, h, w, c = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d input has empty spatial size {x.shape}")

    if c >= _SHIFT_MIN_CHANNELS and h * w >= _SHIFT_MIN_PIXELS:
        out, _backward = _conv_shifted(x, kernels, bias)
    else:
        out, _backward = _conv_im2col(x, kernels, bias)

    if tape is not None and _needs(x, kernels, bias):
        out.requires_grad = True
        tape.record("conv2d", out, _backward)
    return out


def maxpool2x2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Disjoint 2x2 max pooling over (N, H, W, C); an odd trailing row/column
    is dropped."""
    if x.data.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool2x2 needs spatial size >= 2x2, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    quads = [x.data[:, i:2 * h2:2, j:2 * w2:2] for i in (0, 1) for j in (0, 1)]
    out = Tensor(np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3])))

    if tape is not None and _needs(x):
        def _backward():
            # ties route to the first maximum in window order only
            dx = np.zeros(x.shape, dtype=out.grad.dtype)
            taken = np.zeros(out.shape, dtype=bool)
            for k, q in enumerate(quads):
                hit = (q == out.data) & ~taken
                taken |= hit
                i, j = divmod(k, 2)
                dx[:, i:2 * h2:2, j:2 * w2:2] = out.grad * hit
            x._accumulate(dx)

        out.requires_grad = True
        tape.record("maxpool2x2", out, _backward)
    return out


# ---------------------------------------------------------------- dense & shape

def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.reshape(x.shape[0], -1))
    if tape is not None and _needs(x):
        def _backward():
            x._accumulate(out.grad.reshape(x.shape))

        out.requires_grad = True
        tape.record("flatten", out, _backward)
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with W stored as (out_features, in_features)."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense expects a flattened (N, D) input, got {x.shape}")
    if weights.data.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"dense weights {weights.shape} do not match input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weights.shape}")
    out = Tensor(x.data @ weights.data.T + bias.data)

    if tape is not None and _needs(x, weights, bias):
        def _backward():
            g = out.grad
            if weights.requires_grad:
                weights._accumulate(g.T @ x.data)
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if x.requires_grad:
                x._accumulate(g @ weights.data)

        out.requires_grad = True
        tape.record("dense", out, _backward)
    return out


# ---------------------------------------------------------------- normalization

class RunningStats:
    """Exponential moving averages of batch mean/variance, bias-corrected so the
    first few hundred steps are not dragged toward the zero initial state."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.momentum = momentum
        self._mean = np.zeros(channels, dtype=np.float64)
        self._var = np.zeros(channels, dtype=np.float64)
        self.steps = 0
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self._mean = m * self._mean + (1 - m) * mean
        self._var = m * self._var + (1 - m) * var
        self.steps += 1
        correction = 1.0 - m ** self.steps
        self.mean = (self._mean / correction).astype(np.float32)
        self.var = (self._var / correction).astype(np.float32)

    def set(self, mean: np.ndarray, var: np.ndarray) -> None:
        """Install final statistics directly (used when loading weights)."""
        self.mean = np.asarray(mean, dtype=np.float32).copy()
        self.var = np.asarray(var, dtype=np.float32).copy()
        self._mean = self.mean.astype(np.float64)
        self._var = self.var.astype(np.float64)
        self.steps = max(self.steps, 10_000)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats | None,
              train: bool, tape: Tape | None = None, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization for (N, C) or (N, H, W, C) inputs.

    Train mode normalizes with the batch statistics (over N and, for images,
    H and W) and folds them into ``stats``; infer mode uses ``stats`` only.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params {gamma.shape}/{beta.shape} do not match {c} channels")
    dtype = x.data.dtype
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]

    if train:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 samples")
        mean = _colsum(flat) / m
        xhat = flat - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        if stats is not None and update_stats:
            stats.update(mean.astype(np.float64), var.astype(np.float64) * m / (m - 1))
        inv_std = (1.0 / np.sqrt(var.astype(np.float64) + BN_EPS)).astype(dtype)
        xhat *= inv_std
    else:
        if stats is None:
            raise RuntimeError("batchnorm in infer mode needs stored running statistics")
        inv_std = (1.0 / np.sqrt(stats.var.astype(np.float64) + BN_EPS)).astype(dtype)
        xhat = (flat - stats.mean.astype(dtype)) * inv_std

    y = xhat * gamma.data
    y += beta.data
    out = Tensor(y.reshape(x.shape))

    if tape is not None and _needs(x, gamma, beta):
        def _backward():
            g = out.grad.reshape(-1, c)
            sum_g = _colsum(g)
            sum_gx = np.einsum("ij,ij->j", g, xhat) if gamma.requires_grad or train else None
            if gamma.requires_grad:
                gamma._accumulate(sum_gx)
            if beta.requires_grad:
                beta._accumulate(sum_g)
            if x.requires_grad:
                if train:
                    dx = xhat * (-sum_gx / m)
                    dx += g
                    dx -= sum_g / m
                    dx *= gamma.data * inv_std
                else:
                    dx = g * (gamma.data * inv_std)
                x._accumulate(dx.reshape(x.shape))

        out.requires_grad = True
        tape.record("batchnorm", out, _backward)
    return out


# ---------------------------------------------------------------- activations

def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    if tape is not None and _needs(x):
        def _backward():
            g = out.grad
            active = out.data > 0
            if tape.guided:
                active &= g > 0
            x._accumulate(g * active)

        out.requires_grad = True
        tape.record("relu", out, _backward)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            train: bool, tape: Tape | None = None) -> Tensor:
    """Inverted dropout: surviving units are scaled by 1/(1-rate) in training,
    so inference is the identity."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.data.dtype)
    keep *= 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep)
    if tape is not None and _needs(x):
        def _backward():
            x._accumulate(out.grad * keep)

        out.requires_grad = True
        tape.record("dropout", out, _backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits: Tensor, labels, tape: Tape | None = None) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch. Returns (scalar loss, probabilities)."""
    z = logits.data
    if z.ndim == 1:
        raise ShapeError("softmax_crossentropy expects (N, K) logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = z.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    probs = np.exp(logp)
    loss = Tensor(np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype))

    if tape is not None and _needs(logits):
        def _backward():
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits._accumulate(d * (loss.grad / n))

        loss.requires_grad = True
        tape.record("softmax_crossentropy", loss, _backward)
    return loss, probs
