"""Dense FP64 reference executor, plus pruning and dropout.

Arrays are channels-last. Single samples are ``(H, W, C)``; batches carry a
leading sample axis ``(N, H, W, C)``. Conv filters are ``(kh, kw, C_in, C_out)``
and fully connected weights ``(n_in, n_out)`` with ``n_in`` flattened in
row-major ``(H, W, C)`` order, so ``W.reshape(H, W, C, n_out)`` is the
equivalent convolution filter bank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import LayerSpec, NetworkModel, Shape, infer_layer, same_padding, shape_infer


@dataclass(frozen=True)
class TensorData:
    shape: Shape
    values: np.ndarray

    def __post_init__(self):
        h, w, c = self.shape
        if self.values.size != h * w * c:
            raise ValueError(f"value count {self.values.size} != {h}*{w}*{c}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorData":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(arr.shape), arr.reshape(-1))

    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H,W,C) or (N,H,W,C), got shape {x.shape}")
    return x, False


def _pads(h: int, w: int, kh: int, kw: int, s: int, padding: str):
    if padding == "same":
        return same_padding(h, kh, s), same_padding(w, kw, s)
    return (0, 0), (0, 0)


def _pad(x: np.ndarray, ph, pw, value: float = 0.0) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    # (N, Ho, Wo, C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _out_hw(h, w, kh, kw, s, padding):
    if padding == "same":
        return -(-h // s), -(-w // s)
    if h < kh or w < kw:
        raise ValueError(f"kernel {(kh, kw)} larger than input {(h, w)}")
    return (h - kh) // s + 1, (w - kw) // s + 1


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(dout: np.ndarray, z: np.ndarray) -> np.ndarray:
    return dout * (z > 0)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "ReLU":
        return relu(z)
    if activation == "Softmax":
        return softmax(z.reshape(z.shape[0], -1)).reshape(z.shape)
    return z


def conv_forward(
    x: np.ndarray,
    filters: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: str = "same",
    activation: str = "Identity",
) -> np.ndarray:
    """Cross-correlation over channels-last input, optional ReLU."""
    xb, single = _batched(x)
    filters = np.asarray(filters, dtype=np.float64)
    kh, kw, cin, cout = filters.shape
    n, h, w, c = xb.shape
    if c != cin:
        raise ValueError(f"filter depth {cin} != input channels {c}")
    ho, wo = _out_hw(h, w, kh, kw, stride, padding)
    ph, pw = _pads(h, w, kh, kw, stride, padding)
    win = _windows(_pad(xb, ph, pw), kh, kw, stride, ho, wo)
    z = np.einsum("nhwcij,ijco->nhwo", win, filters, optimize=True)
    if bias is not None:
        z = z + bias
    out = relu(z) if activation == "ReLU" else z
    return out[0] if single else out


def conv_macs(in_shape: Shape, f: int, stride: int, padding: str, out_channels: int) -> int:
    h, w, c = in_shape
    ho, wo = _out_hw(h, w, f, f, stride, padding)
    return ho * wo * out_channels * f * f * c


def conv_backward(
    dz: np.ndarray, x: np.ndarray, filters: np.ndarray, stride: int = 1, padding: str = "same"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, filters and bias given the pre-activation gradient ``dz``."""
    xb, single = _batched(x)
    dzb, _ = _batched(dz)
    kh, kw, cin, cout = filters.shape
    n, h, w, c = xb.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, padding)
    if dzb.shape != (n, ho, wo, cout):
        raise ValueError(f"gradient shape {dzb.shape} != output shape {(n, ho, wo, cout)}")
    ph, pw = _pads(h, w, kh, kw, stride, padding)
    xp = _pad(xb, ph, pw)
    win = _windows(xp, kh, kw, stride, ho, wo)
    dw = np.einsum("nhwcij,nhwo->ijco", win, dzb, optimize=True)
    db = dzb.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + span_h : stride, j : j + span_w : stride, :] += dzb @ filters[i, j].T
    dx = dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :]
    return (dx[0] if single else dx), dw, db


def maxpool_forward(x: np.ndarray, f: int = 2, stride: int = 2, padding: str = "valid") -> np.ndarray:
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    ho, wo = _out_hw(h, w, f, f, stride, padding)
    ph, pw = _pads(h, w, f, f, stride, padding)
    win = _windows(_pad(xb, ph, pw, -np.inf), f, f, stride, ho, wo)
    out = win.max(axis=(4, 5))
    return out[0] if single else out


def maxpool_backward(
    dout: np.ndarray, x: np.ndarray, f: int = 2, stride: int = 2, padding: str = "valid"
) -> np.ndarray:
    """Route each output gradient to its window maximum; ties go to the first
    element in row-major window order."""
    xb, single = _batched(x)
    db, _ = _batched(dout)
    n, h, w, c = xb.shape
    ho, wo = _out_hw(h, w, f, f, stride, padding)
    ph, pw = _pads(h, w, f, f, stride, padding)
    xp = _pad(xb, ph, pw, -np.inf)
    win = _windows(xp, f, f, stride, ho, wo).reshape(n, ho, wo, c, f * f)
    arg = win.argmax(axis=-1)
    di, dj = np.divmod(arg, f)
    rows = np.arange(ho)[None, :, None, None] * stride + di
    cols = np.arange(wo)[None, None, :, None] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    dxp = np.zeros_like(xp)
    np.add.at(dxp, (nn, rows, cols, cc), db)
    dx = dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :]
    return dx[0] if single else dx


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, activation: str = "Identity") -> np.ndarray:
    """Dense product on the row-major flattened input."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim in (2, 4)
    flat = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    z = flat @ weights
    if bias is not None:
        z = z + bias
    z = activate(z, activation)
    return z if batched else z[0]


def fc_forward_lowered(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, activation: str = "Identity"
) -> np.ndarray:
    """Fully connected layer evaluated as a valid convolution whose kernel spans the input."""
    xb, single = _batched(x)
    _, h, w, c = xb.shape
    filters = weights.reshape(h, w, c, weights.shape[1])
    z = conv_forward(xb, filters, bias, 1, "valid").reshape(xb.shape[0], -1)
    z = activate(z, activation)
    return z[0] if single else z


def fc_backward(dz: np.ndarray, x: np.ndarray, weights: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    dx = (dz @ weights.T).reshape(x.shape)
    return dx, flat.T @ dz, dz.sum(axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def one_hot(labels: Sequence[int], n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), np.asarray(labels)] = 1.0
    return out


def cross_entropy_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of probabilities ``p`` against one-hot ``y``."""
    return float(-np.sum(y * np.log(np.clip(p, 1e-300, None))) / p.shape[0])


def softmax_cross_entropy_backward(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the logits."""
    return (p - y) / p.shape[0]


# -- pruning and dropout -------------------------------------------------------


@dataclass
class PruneStats:
    epsilon: float
    zero_counts: np.ndarray
    passes: int = 0

    @classmethod
    def empty(cls, shape, epsilon: float) -> "PruneStats":
        return cls(epsilon, np.zeros(shape, dtype=np.int64), 0)

    def observe(self, activations: np.ndarray) -> None:
        """Count near-zero outputs over a batch of validation activations."""
        a = np.asarray(activations)
        if a.shape == self.zero_counts.shape:
            a = a[None]
        self.zero_counts += (np.abs(a) <= self.epsilon).sum(axis=0)
        self.passes += a.shape[0]


def prune(stats: PruneStats, fraction: float) -> np.ndarray:
    """Keep-mask (1.0 keep, 0.0 pruned) for nodes near zero on at least ``fraction`` of passes."""
    if stats.passes == 0:
        raise ValueError("no validation passes recorded")
    dead = stats.zero_counts / stats.passes >= fraction
    return np.where(dead, 0.0, 1.0)


def filter_prune_mask(node_mask: np.ndarray) -> np.ndarray:
    """Per-channel mask: a filter is pruned only when every node of its map is pruned."""
    m = np.asarray(node_mask).reshape(-1, node_mask.shape[-1])
    return np.where((m == 0).all(axis=0), 0.0, 1.0)


def dropout_mask(shape, p: float, seed) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= p).astype(np.float64)


def dropout(activations: np.ndarray, p: float, seed=None, training: bool = True) -> np.ndarray:
    """Inverted dropout: zero with probability p, survivors divided by (1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    a = np.asarray(activations, dtype=np.float64)
    if not training or p == 0.0:
        return a
    return a * dropout_mask(a.shape, p, seed) / (1.0 - p)


# -- whole-network reference -------------------------------------------------------


def init_params(model: NetworkModel, seed: int = 0) -> list:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    shapes = shape_infer(model)

    def conv_param(f, cin, cout):
        lim = np.sqrt(6.0 / (f * f * cin + f * f * cout))
        return {"w": rng.uniform(-lim, lim, (f, f, cin, cout)), "b": np.zeros(cout)}

    params: list = []
    prev = tuple(model.input_shape)
    for layer, shape in zip(model.layers, shapes):
        if layer.kind == "Conv":
            params.append(conv_param(layer.filter_size, prev[2], shape[2]))
        elif layer.kind in ("FullyConnected", "Output"):
            n_in, n_out = prev[0] * prev[1] * prev[2], shape[2]
            lim = np.sqrt(6.0 / (n_in + n_out))
            params.append({"w": rng.uniform(-lim, lim, (n_in, n_out)), "b": np.zeros(n_out)})
        elif layer.kind == "InceptionModule":
            branch_params = []
            for chain in layer.branches:
                s, ps = prev, []
                for b in chain:
                    out = infer_layer(b, s)
                    ps.append(conv_param(b.filter_size, s[2], out[2]) if b.kind == "Conv" else None)
                    s = out
                branch_params.append(ps)
            params.append({"branches": branch_params})
        else:
            params.append(None)
        prev = shape
    return params


def copy_params(params: list) -> list:
    def cp(p):
        if p is None:
            return None
        if isinstance(p, dict):
            return {k: cp(v) for k, v in p.items()}
        if isinstance(p, list):
            return [cp(v) for v in p]
        return np.array(p, copy=True)

    return cp(params)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    extra: list = field(default_factory=list)


def _layer_forward(layer: LayerSpec, p, x: np.ndarray):
    """Returns (z, a, extra) for one non-Input layer on a batch."""
    kind = layer.kind
    if kind == "Conv":
        z = conv_forward(x, p["w"], p["b"], layer.stride, layer.padding)
        return z, activate(z, layer.activation), None
    if kind == "MaxPool":
        a = maxpool_forward(x, layer.filter_size, layer.stride, layer.padding)
        return a, a, None
    if kind in ("FullyConnected", "Output"):
        z = fc_forward(x, p["w"], p["b"])
        a = activate(z, layer.activation)
        return z.reshape(x.shape[0], 1, 1, -1), a.reshape(x.shape[0], 1, 1, -1), None
    if kind == "InceptionModule":
        outs, trace = [], []
        for chain, ps in zip(layer.branches, p["branches"]):
            h, steps = x, []
            for b, bp in zip(chain, ps):
                z, a, _ = _layer_forward(b, bp, h)
                steps.append((h, z))
                h = a
            outs.append(h)
            trace.append(steps)
        a = np.concatenate(outs, axis=-1)
        return a, a, trace
    if kind == "EnhancementUnit":
        from .enhancement import coincidence_sums, normalize

        coeffs = []
        a = np.empty_like(x)
        for n in range(x.shape[0]):
            mat = normalize(coincidence_sums(x[n], layer.mask_size, layer.use_magnitude))
            coeffs.append(mat)
            a[n] = mat.expand(x.shape[1:3])[..., None] * x[n]
        return a, a, coeffs
    raise ValueError(f"unsupported layer kind {kind}")


def dense_forward(
    model: NetworkModel,
    params: list,
    x: np.ndarray,
    masks: Sequence[np.ndarray | None] | None = None,
) -> ForwardCache:
    """Evaluate the network on a batch ``x`` of shape (N, H, W, C).

    ``masks`` optionally multiplies each layer's output (pruning keep-masks or
    pre-scaled dropout masks).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    cache = ForwardCache()
    h = x
    for i, layer in enumerate(model.layers):
        if layer.kind == "Input":
            z = a = h
            extra = None
        else:
            z, a, extra = _layer_forward(layer, params[i], h)
        if masks is not None and masks[i] is not None:
            a = a * masks[i]
        cache.inputs.append(h)
        cache.preacts.append(z)
        cache.outputs.append(a)
        cache.extra.append(extra)
        h = a
    return cache


def _layer_backward(layer: LayerSpec, p, x, z, a, extra, da):
    """Returns (dx, grads) given dL/da for one layer."""
    kind = layer.kind
    if kind == "Conv":
        dz = relu_backward(da, z) if layer.activation == "ReLU" else da
        dx, dw, db = conv_backward(dz, x, p["w"], layer.stride, layer.padding)
        return dx, {"w": dw, "b": db}
    if kind == "MaxPool":
        return maxpool_backward(da, x, layer.filter_size, layer.stride, layer.padding), None
    if kind in ("FullyConnected", "Output"):
        n = x.shape[0]
        da2 = da.reshape(n, -1)
        z2 = z.reshape(n, -1)
        if layer.activation == "ReLU":
            dz = relu_backward(da2, z2)
        elif layer.activation == "Softmax":
            dz = softmax_backward(da2, a.reshape(n, -1))
        else:
            dz = da2
        dx, dw, db = fc_backward(dz, x, p["w"])
        return dx, {"w": dw, "b": db}
    if kind == "InceptionModule":
        dx = np.zeros_like(x)
        grads, start = [], 0
        for chain, ps, steps in zip(layer.branches, p["branches"], extra):
            width = steps[-1][1].shape[-1]
            d = da[..., start : start + width]
            start += width
            g_chain = [None] * len(chain)
            for j in reversed(range(len(chain))):
                hin, zj = steps[j]
                aj = activate(zj, chain[j].activation) if chain[j].kind == "Conv" else zj
                d, g_chain[j] = _layer_backward(chain[j], ps[j], hin, zj, aj, None, d)
            dx += d
            grads.append(g_chain)
        return dx, {"branches": grads}
    if kind == "EnhancementUnit":
        # coefficients are treated as constants of the forward pass
        dx = np.empty_like(x)
        for n, mat in enumerate(extra):
            dx[n] = mat.expand(x.shape[1:3])[..., None] * da[n]
        return dx, None
    raise ValueError(f"unsupported layer kind {kind}")


@dataclass
class BackwardResult:
    grads: list
    # dL/d(output of layer i) for every layer, the quantity a backward systolic
    # pass accumulates at each node of layer i
    activation_grads: list
    # dL/d(pre-activation) for weighted layers
    deltas: list


def dense_backward(
    model: NetworkModel,
    params: list,
    cache: ForwardCache,
    y: np.ndarray,
    masks: Sequence[np.ndarray | None] | None = None,
) -> BackwardResult:
    """Backpropagate mean softmax cross-entropy (or squared error for an Identity output)."""
    L = len(model.layers)
    grads: list = [None] * L
    act_grads: list = [None] * L
    deltas: list = [None] * L
    last = model.layers[-1]
    n = cache.outputs[-1].shape[0]
    out = cache.outputs[-1].reshape(n, -1)
    y = np.asarray(y, dtype=np.float64).reshape(n, -1)
    if last.activation == "Softmax":
        dz = softmax_cross_entropy_backward(out, y)
    else:
        dz = (out - y) / n
    x_last = cache.inputs[-1]
    dx, dw, db = fc_backward(dz, x_last, params[-1]["w"])
    grads[-1] = {"w": dw, "b": db}
    deltas[-1] = dz
    da = dx
    for i in range(L - 2, 0, -1):
        act_grads[i] = da
        if masks is not None and masks[i] is not None:
            da = da * masks[i]
        layer = model.layers[i]
        if layer.kind in ("Conv", "FullyConnected"):
            z = cache.preacts[i]
            deltas[i] = (relu_backward(da.reshape(z.shape), z) if layer.activation == "ReLU" else da).reshape(da.shape)
        da, grads[i] = _layer_backward(
            layer, params[i], cache.inputs[i], cache.preacts[i], cache.outputs[i], cache.extra[i], da
        )
    act_grads[0] = da
    return BackwardResult(grads, act_grads, deltas)


def gd_update(params: list, grads: list, lr: float) -> list:
    """Plain gradient-descent step; returns new parameter list."""

    def upd(p, g):
        if p is None or g is None:
            return p
        if isinstance(p, dict):
            return {k: upd(p[k], g.get(k)) for k in p}
        if isinstance(p, list):
            return [upd(a, b) for a, b in zip(p, g)]
        return p - lr * g

    return [upd(p, g) for p, g in zip(params, grads)]


def predict(model: NetworkModel, params: list, x: np.ndarray) -> np.ndarray:
    out = dense_forward(model, params, x).outputs[-1]
    return out.reshape(out.shape[0], -1)


def max_rel_error(value, reference) -> float:
    """max |value - reference| scaled by max |reference| (absolute when the reference is all zero)."""
    v = np.asarray(value, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = float(np.max(np.abs(r))) if r.size else 0.0
    diff = float(np.max(np.abs(v - r))) if r.size else 0.0
    return diff / scale if scale > 0 else diff
