"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in float32 (runtime) or float64 (verification
mode, used by the finite-difference checks). The computation graph is
implicit: every op returns a new Tensor holding references to its
parents and a closure that propagates the incoming gradient; calling
``backward`` on a scalar topologically sorts that graph and runs the
closures in reverse. Gradients accumulate additively when a value fans
out to several consumers.

Tensors are immutable after construction (the optimizer swaps ``.data``
wholesale between steps, never in place during a step), so sharing them
across threads for read-only evaluation is safe. Graph construction and
backward are single-threaded per training step.

Broadcasting is deliberately restricted: ``mul_broadcast`` accepts equal
shapes plus the two gating patterns (N,C,1,1)x(N,C,H,W) and
(N,1,H,W)x(N,C,H,W); everything else is a shape error.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "add",
    "scale",
    "mul_broadcast",
    "relu",
    "sigmoid",
    "softmax_lastaxis",
    "dropout",
    "linear",
    "conv2d",
    "conv1d_causal",
    "global_avgpool_spatial",
    "global_maxpool_spatial",
    "channel_pool",
    "collapse_height_mean",
    "concat_channels",
    "reshape",
    "permute",
    "sum_all",
    "mean_all",
    "finite_diff_check",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


class Tensor:
    """A dense n-d array plus the bookkeeping needed for backward."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_broadcast(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


# --- graph machinery -------------------------------------------------------

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (cheap inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {op}")


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str,
          check_finite: bool = True) -> Tensor:
    if check_finite:
        _assert_finite(out_data, op)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never mutate gradient arrays in place; aliasing across fan-out is fine
    t.grad = g if t.grad is None else t.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``.grad`` on every
    tensor that requires grad and is reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"dtype mismatch: {[str(t.data.dtype) for t in tensors]}")
    return dt


# --- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(out_data, (a, b), _bwd, "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out_data = x.data * c

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g * c)

    return _make(out_data, (x,), _bwd, "scale")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape))
                 if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with restricted broadcasting: equal shapes, or
    one operand has extent 1 on some axes (same rank). Covers the channel
    gate (N,C,1,1) and the spatial gate (N,1,H,W) against (N,C,H,W)."""
    _same_dtype(a, b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"mul_broadcast rank mismatch: {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and 1 not in (da, db):
            raise ShapeError(f"mul_broadcast shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def _bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), _bwd, "mul_broadcast")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _make(out_data, (x,), _bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), _bwd, "sigmoid")


def softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def _bwd(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(x, out_data * (g - inner))

    return _make(out_data, (x,), _bwd, "softmax_lastaxis")


def dropout(x: Tensor, rate: float, training: bool, seed=0) -> Tensor:
    """Inverted dropout: identity in eval mode; in training mode zeroes
    each element with probability ``rate`` and scales survivors by
    1/(1-rate). The mask is a pure function of ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - rate))
    out_data = x.data * mask

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _make(out_data, (x,), _bwd, "dropout")


# --- linear algebra --------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of rows: (N, inF) @ (outF, inF)^T + (outF,)."""
    _same_dtype(x, weight, bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape}, expected ({weight.shape[0]},)")
    out_data = x.data @ weight.data.T + bias.data

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g @ weight.data)
        if weight.requires_grad:
            _accum(weight, g.T @ x.data)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _make(out_data, (x, weight, bias), _bwd, "linear")


def _window_view_2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                    ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, srow, scol = xp.strides
    shape = (n, ho, wo, c, kh, kw)
    strides = (sn, srow * sh, scol * sw, sc, srow, scol)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: tuple[int, int] = (1, 1), pad: tuple[int, int] = (0, 0)) -> Tensor:
    """2-d cross-correlation over (N, C, H, W) with symmetric zero padding.

    Output extents follow floor((in + 2*pad - k)/stride) + 1.
    """
    _same_dtype(x, weight, bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (out_c,):
        raise ShapeError(f"conv2d bias shape {bias.shape}, expected ({out_c},)")
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output empty for input {x.shape}, kernel {weight.shape}, "
                         f"stride {stride}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _window_view_2d(xp, kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(out_c, -1)
    out = cols @ wmat.T
    out += bias.data
    out_data = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))

    def _bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, out_c)
        if weight.requires_grad:
            _accum(weight, (g2.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
            _accum(x, dx)

    return _make(out_data, (x, weight, bias), _bwd, "conv2d")


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated 1-d convolution over (N, C, T).

    Output at time t is sum_i K_i * x[t - dilation*i], with x at negative
    times taken as zero (left padding of (n-1)*dilation), so the output
    time length equals the input time length and no output element depends
    on any later input.
    """
    _same_dtype(x, weight, bias)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input/weight, got {x.shape}, {weight.shape}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    n, c, t = x.shape
    out_c, in_c, taps = weight.shape
    if in_c != c:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (out_c,):
        raise ShapeError(f"conv1d bias shape {bias.shape}, expected ({out_c},)")
    pad_left = (taps - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, 0))) if pad_left else x.data
    sn, sc, st = xp.strides
    # window tap j at output t reads xp[..., t + j*dilation]; tap j pairs
    # with kernel index taps-1-j, hence the flipped weight matrix
    view = np.lib.stride_tricks.as_strided(
        xp, (n, t, c, taps), (sn, st, sc, st * dilation), writeable=False)
    cols = view.reshape(n * t, c * taps)
    wflip = np.ascontiguousarray(weight.data[:, :, ::-1]).reshape(out_c, c * taps)
    out = cols @ wflip.T
    out += bias.data
    out_data = np.ascontiguousarray(out.reshape(n, t, out_c).transpose(0, 2, 1))

    def _bwd(g):
        g2 = g.transpose(0, 2, 1).reshape(n * t, out_c)
        if weight.requires_grad:
            dwflip = (g2.T @ cols).reshape(out_c, c, taps)
            _accum(weight, dwflip[:, :, ::-1].copy())
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wflip).reshape(n, t, c, taps)
            dxp = np.zeros_like(xp)
            for j in range(taps):
                dxp[:, :, j * dilation:j * dilation + t] += dcols[:, :, :, j].transpose(0, 2, 1)
            dx = dxp[:, :, pad_left:] if pad_left else dxp
            _accum(x, dx)

    return _make(out_data, (x, weight, bias), _bwd, "conv1d_causal")


# --- pooling and layout ----------------------------------------------------

def global_avgpool_spatial(x: Tensor) -> Tensor:
    """Mean over H and W per channel: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / (h * w), x.shape))

    return _make(out_data, (x,), _bwd, "global_avgpool_spatial")


def global_maxpool_spatial(x: Tensor) -> Tensor:
    """Max over H and W per channel; the gradient routes to the first
    maximal position in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out_data = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def _bwd(g):
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[:, :, None], g.reshape(n, c, 1), axis=2)
            _accum(x, dflat.reshape(x.shape))

    return _make(out_data, (x,), _bwd, "global_maxpool_spatial")


def channel_pool(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel mean and max across channels: (N,C,H,W) -> two (N,1,H,W).

    Returns (avg, max). Max gradient routes to the first maximal channel.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {x.shape}")
    c = x.shape[1]
    avg_data = x.data.mean(axis=1, keepdims=True)

    def _bwd_avg(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / c, x.shape))

    avg = _make(avg_data, (x,), _bwd_avg, "channel_pool.avg")

    idx = x.data.argmax(axis=1)
    max_data = np.take_along_axis(x.data, idx[:, None], axis=1)

    def _bwd_max(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx[:, None], g, axis=1)
            _accum(x, dx)

    mx = _make(max_data, (x,), _bwd_max, "channel_pool.max")
    return avg, mx


def collapse_height_mean(x: Tensor) -> Tensor:
    """Average out the height axis: (N, C, H, W) -> (N, C, W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {x.shape}")
    h = x.shape[2]
    out_data = x.data.mean(axis=2)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g[:, :, None, :] / h, x.shape))

    return _make(out_data, (x,), _bwd, "collapse_height_mean")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 4 or b.data.ndim != 4 or \
            a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _make(out_data, (a, b), _bwd, "concat_channels")


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), _bwd, "reshape", check_finite=False)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.transpose(g, inverse))

    return _make(out_data, (x,), _bwd, "permute", check_finite=False)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g, x.shape))

    return _make(out_data, (x,), _bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / size, x.shape))

    return _make(out_data, (x,), _bwd, "mean_all")


# --- verification ----------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-4) -> float:
    """Compare the reverse-mode gradient of a scalar function against
    central finite differences, coordinate by coordinate.

    Returns the largest deviation relative to the gradient's dominant
    magnitude: max|a - n| / max(||a||_inf, ||n||_inf). Zero when both
    gradients vanish identically (constant f). ``f`` must be
    deterministic; fix dropout seeds before probing.
    """
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar f, got shape {out.shape}")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)

    scale_ref = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale_ref == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale_ref)
