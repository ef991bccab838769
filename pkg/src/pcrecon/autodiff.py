"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A Graph is an append-only tape of operation nodes. Ops take the graph as
their first argument; passing ``graph=None`` runs the forward computation
without recording, which is the eval-mode fast path. Gradients accumulate
into ``Tensor.grad`` until explicitly zeroed, so multi-term losses and
repeated backward calls compose additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tensor:
    """Dense n-d float64 value plus an accumulated gradient of the same shape.

    The gradient buffer is allocated lazily on first access, so pure forward
    (eval) computations never pay for it.
    """

    __slots__ = ("data", "_grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        # releasing the buffer lets the next accumulation store its first
        # contribution directly instead of adding into zeros
        self._grad = None

    def accum_grad(self, value):
        """Accumulate into grad; the first contribution is stored as a copy."""
        if self._grad is None:
            self._grad = np.array(value, dtype=np.float64)
        else:
            self._grad += value

    def accum_grad_owned(self, value):
        """Accumulate a freshly-allocated, unaliased array (taken by reference)."""
        if self._grad is None:
            self._grad = value
        else:
            self._grad += value

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, name: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data.ravel()))[0])
            raise FloatingPointError(f"non-finite value in {name} at flat index {bad}")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape; construction order is a topological order by design."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def __len__(self):
        return len(self.nodes)


def _make_output(graph, op, inputs, data, backward_fn):
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        graph.record(op, inputs, out, backward_fn(out))
    return out


def _check_2d(name, t, ndim=2):
    if t.data.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(graph, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(out):
        def run():
            if a.requires_grad:
                a.accum_grad(out.grad)
            if b.requires_grad:
                b.accum_grad(out.grad)
        return run

    return _make_output(graph, "add", (a, b), a.data + b.data, bwd)


def sub(graph, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bwd(out):
        def run():
            if a.requires_grad:
                a.accum_grad(out.grad)
            if b.requires_grad:
                b.accum_grad_owned(-out.grad)
        return run

    return _make_output(graph, "sub", (a, b), a.data - b.data, bwd)


def mul(graph, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(out):
        def run():
            if a.requires_grad:
                a.accum_grad_owned(out.grad * b.data)
            if b.requires_grad:
                b.accum_grad_owned(out.grad * a.data)
        return run

    return _make_output(graph, "mul", (a, b), a.data * b.data, bwd)


def scale(graph, x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(c * out.grad)
        return run

    return _make_output(graph, "scale", (x,), c * x.data, bwd)


def add_n(graph, tensors) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"add_n: mixed shapes {sorted(shapes)}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def bwd(out):
        def run():
            for t in tensors:
                if t.requires_grad:
                    t.accum_grad(out.grad)
        return run

    return _make_output(graph, "add_n", tensors, total, bwd)


def relu(graph, x: Tensor) -> Tensor:
    # gradient is 0 at exactly 0
    def bwd(out):
        mask = x.data > 0.0

        def run():
            if x.requires_grad:
                x.accum_grad_owned(out.grad * mask)
        return run

    return _make_output(graph, "relu", (x,), np.maximum(x.data, 0.0), bwd)


def softplus(graph, x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(out.grad * np.exp(x.data - np.logaddexp(0.0, x.data)))
        return run

    return _make_output(graph, "softplus", (x,), y, bwd)


def absolute(graph, x: Tensor) -> Tensor:
    # subgradient 0 at exact zeros
    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(out.grad * np.sign(x.data))
        return run

    return _make_output(graph, "absolute", (x,), np.abs(x.data), bwd)


def sum_all(graph, x: Tensor) -> Tensor:
    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(np.full_like(x.data, float(out.grad)))
        return run

    return _make_output(graph, "sum_all", (x,), np.float64(x.data.sum()), bwd)


def mean_all(graph, x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(np.full_like(x.data, float(out.grad) / n))
        return run

    return _make_output(graph, "mean_all", (x,), np.float64(x.data.mean()), bwd)


def reshape(graph, x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad(out.grad.reshape(x.data.shape))
        return run

    return _make_output(graph, "reshape", (x,), x.data.reshape(shape), bwd)


def slice_rows(graph, x: Tensor, start: int, stop: int) -> Tensor:
    def bwd(out):
        def run():
            if x.requires_grad:
                x.grad[start:stop] += out.grad
        return run

    return _make_output(graph, "slice_rows", (x,), x.data[start:stop].copy(), bwd)


def slice_cols(graph, x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_cols", x)

    def bwd(out):
        def run():
            if x.requires_grad:
                x.grad[:, start:stop] += out.grad
        return run

    return _make_output(graph, "slice_cols", (x,), x.data[:, start:stop].copy(), bwd)


def gather_rows(graph, x: Tensor, indices) -> Tensor:
    """Select rows by index (duplicates allowed); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(out):
        def run():
            if not x.requires_grad:
                return
            g = x.grad
            dy = out.grad
            if dy.ndim == 2 and dy.shape[1] <= 8:
                # np.add.at is unbuffered and slow; per-column bincount is far faster
                for c in range(dy.shape[1]):
                    g[:, c] += np.bincount(idx, weights=dy[:, c], minlength=g.shape[0])
            else:
                np.add.at(g, idx, dy)
        return run

    return _make_output(graph, "gather_rows", (x,), x.data[idx].copy(), bwd)


def add_row_bias(graph, x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a length-C bias to every row of an R-by-C matrix."""
    _check_2d("add_row_bias", x)
    if bias.data.shape != (x.data.shape[1],):
        raise ValueError(
            f"add_row_bias: bias shape {bias.shape} does not match columns of {x.shape}")

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad(out.grad)
            if bias.requires_grad:
                bias.accum_grad_owned(out.grad.sum(axis=0))
        return run

    return _make_output(graph, "add_row_bias", (x, bias), x.data + bias.data, bwd)


# ---------------------------------------------------------------------------
# dense / conv / pooling layers

def linear(graph, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,Din] @ weight[Din,Dout] + bias[Dout], exact analytic backward."""
    _check_2d("linear input", x)
    _check_2d("linear weight", weight)
    if x.data.shape[1] != weight.data.shape[0] or bias.data.shape != (weight.data.shape[1],):
        raise ValueError(
            f"linear: incompatible shapes input={x.shape} weight={weight.shape} "
            f"bias={bias.shape}")
    y = x.data @ weight.data + bias.data

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accum_grad_owned(out.grad @ weight.data.T)
            if weight.requires_grad:
                weight.accum_grad_owned(x.data.T @ out.grad)
            if bias.requires_grad:
                bias.accum_grad_owned(out.grad.sum(axis=0))
        return run

    return _make_output(graph, "linear", (x, weight, bias), y, bwd)


def maxpool_over_points(graph, x: Tensor) -> Tensor:
    """Column-wise max over an N-by-D matrix; ties route to the lowest row."""
    _check_2d("maxpool_over_points", x)
    if x.data.shape[0] == 0:
        raise ValueError("maxpool_over_points: empty input")
    argmax = x.data.argmax(axis=0)  # first occurrence = lowest row index
    y = x.data[argmax, np.arange(x.data.shape[1])]

    def bwd(out):
        cols = np.arange(x.data.shape[1])

        def run():
            if x.requires_grad:
                np.add.at(x.grad, (argmax, cols), out.grad)
        return run

    return _make_output(graph, "maxpool_over_points", (x,), y, bwd)


def maxpool_rows(graph, x: Tensor, group_size: int) -> Tensor:
    """Max over consecutive row groups: [B*n, D] -> [B, D]; batched maxpool."""
    _check_2d("maxpool_rows", x)
    rows, dim = x.data.shape
    if group_size < 1 or rows % group_size != 0:
        raise ValueError(f"maxpool_rows: {rows} rows not divisible by group {group_size}")
    b = rows // group_size
    x3 = x.data.reshape(b, group_size, dim)
    argmax = x3.argmax(axis=1)
    y = np.take_along_axis(x3, argmax[:, None, :], axis=1)[:, 0, :]

    def bwd(out):
        bi = np.arange(b)[:, None]
        ci = np.arange(dim)[None, :]

        def run():
            if x.requires_grad:
                g3 = x.grad.reshape(b, group_size, dim)
                np.add.at(g3, (bi, argmax, ci), out.grad)
        return run

    return _make_output(graph, "maxpool_rows", (x,), y, bwd)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (updated in train mode)."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def for_dim(cls, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)


def batch_norm(graph, x: Tensor, gamma: Tensor, beta: Tensor,
               state: BatchNormState, training: bool) -> Tensor:
    """Per-column normalization of an R-by-C matrix.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running statistics in place; eval mode normalizes by the stored
    running statistics. Train mode requires at least two rows.
    """
    _check_2d("batch_norm", x)
    rows, dim = x.data.shape
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({dim},)")

    if training:
        if rows < 2:
            raise ValueError(f"batch_norm: train mode needs >= 2 rows, got {rows}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean) * inv_std
    y = gamma.data * x_hat + beta.data

    def bwd(out):
        def run():
            dy = out.grad
            if gamma.requires_grad:
                gamma.accum_grad_owned((dy * x_hat).sum(axis=0))
            if beta.requires_grad:
                beta.accum_grad_owned(dy.sum(axis=0))
            if x.requires_grad:
                if training:
                    # full backward through batch statistics, fused in place
                    dxhat = dy * gamma.data
                    m1 = dxhat.mean(axis=0)
                    m2 = (dxhat * x_hat).mean(axis=0)
                    dxhat -= m1
                    dxhat -= x_hat * m2
                    dxhat *= inv_std
                    x.accum_grad_owned(dxhat)
                else:
                    x.accum_grad_owned(dy * (gamma.data * inv_std))
        return run

    return _make_output(graph, "batch_norm", (x, gamma, beta), y, bwd)


def _same_pad(extent: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-extent // stride)  # ceil division
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2, total - total // 2


def conv2d(graph, x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' zero padding.

    x is [B,H,W,Cin], kernel is [kh,kw,Cin,Cout] with odd kh/kw, stride 1 or 2;
    output is [B, ceil(H/stride), ceil(W/stride), Cout]. Backward is exact for
    both input and kernel. Forward is im2col + one matmul.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input/kernel, got {x.shape} / {kernel.shape}")
    kh, kw, cin, cout = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    b, h, w, cx = x.data.shape
    if cx != cin:
        raise ValueError(f"conv2d: input channels {cx} != kernel channels {cin}")

    ho, ph0, ph1 = _same_pad(h, kh, stride)
    wo, pw0, pw1 = _same_pad(w, kw, stride)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]              # [B,Ho,Wo,Cin,kh,kw]
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    patches = patches.reshape(b * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    y = (patches @ kmat).reshape(b, ho, wo, cout)

    def bwd(out):
        def run():
            dy = out.grad.reshape(b * ho * wo, cout)
            if kernel.requires_grad:
                kernel.accum_grad_owned((patches.T @ dy).reshape(kh, kw, cin, cout))
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                dy4 = out.grad
                for di in range(kh):
                    for dj in range(kw):
                        contrib = dy4 @ kernel.data[di, dj].T  # [B,Ho,Wo,Cin]
                        dxp[:,
                            di:di + (ho - 1) * stride + 1:stride,
                            dj:dj + (wo - 1) * stride + 1:stride] += contrib
                x.accum_grad(dxp[:, ph0:ph0 + h, pw0:pw0 + w])
        return run

    return _make_output(graph, "conv2d", (x, kernel), y, bwd)


# ---------------------------------------------------------------------------
# backward pass and optimizer

def backward(graph: Graph, loss: Tensor):
    """Propagate d(loss)/d(tensor) into .grad for everything reaching loss.

    The loss must be scalar. Gradients accumulate across calls; callers zero
    them explicitly between optimization steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad[...] += 1.0
    for node in reversed(graph.nodes):
        node.backward_fn()


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one flat parameter vector."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, n: int, learning_rate: float = 5e-5, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One in-place bias-corrected Adam update on a flat parameter vector."""
    if params.shape != grads.shape:
        raise ValueError(f"adam_step: params {params.shape} vs grads {grads.shape}")
    if params.shape != state.first_moment.shape:
        raise ValueError("adam_step: state tracks a different parameter length")
    finite = np.isfinite(grads)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FloatingPointError(f"adam_step: non-finite gradient at index {bad}")

    state.step_count += 1
    t = state.step_count
    np.multiply(state.first_moment, state.beta1, out=state.first_moment)
    state.first_moment += (1 - state.beta1) * grads
    np.multiply(state.second_moment, state.beta2, out=state.second_moment)
    state.second_moment += (1 - state.beta2) * (grads * grads)
    denom = state.second_moment / (1 - state.beta2**t)
    np.sqrt(denom, out=denom)
    denom += state.epsilon
    update = state.first_moment / (1 - state.beta1**t)
    update /= denom
    update *= state.learning_rate
    params -= update
    return params


class Adam:
    """Adam over a list of Tensors, one moment state per tensor."""

    def __init__(self, tensors, learning_rate: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.tensors = list(tensors)
        self.states = [
            AdamState.for_params(t.data.size, learning_rate, beta1, beta2, epsilon)
            for t in self.tensors
        ]

    def step(self):
        for t, st in zip(self.tensors, self.states):
            flat = t.data.reshape(-1)
            adam_step(flat, t.grad.reshape(-1), st)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()
