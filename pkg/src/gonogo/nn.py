"""Layer primitives: conv, transposed conv, batch norm, dense, activations.

Convolutions use an im2col/col2im pair so that the transposed convolution is
the exact adjoint of the forward convolution (the inner-product identity
<conv(x, w), y> == <x, deconv(y, w)> holds up to float rounding).  All layers
route gradients through `gonogo.autodiff`.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_op

ACTIVATIONS = ("relu", "elu", "sigmoid", "softmax", "linear")
LAYER_KINDS = ("conv", "deconv", "fully-connected", "batch-norm")


class ShapeError(ValueError):
    """Shape mismatch between an input and a layer's weights."""


class LayerSpec:
    """Static description of one layer: kind, filter, stride, channels, activation."""

    def __init__(self, kind, filter_hw=None, stride=1, in_channels=None,
                 out_channels=None, activation="linear"):
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if filter_hw is not None and (filter_hw[0] < 1 or filter_hw[1] < 1):
            raise ValueError(f"filter size must be positive, got {filter_hw}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        self.kind = kind
        self.filter_hw = filter_hw
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation

    def as_dict(self):
        return {
            "kind": self.kind,
            "filter_hw": list(self.filter_hw) if self.filter_hw else None,
            "stride": self.stride,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "activation": self.activation,
        }


def activate(x, kind):
    """Apply one of the closed activation set; softmax acts on the last axis."""
    if kind == "relu":
        return ad.relu(x)
    if kind == "elu":
        return ad.elu(x, alpha=1.0)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    if kind == "softmax":
        return ad.softmax(x, axis=-1)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# -- im2col / col2im ----------------------------------------------------------


def _conv_out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return ho, wo


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> (N, C, kh, kw, Ho, Wo) patch view, zero-padded."""
    n, c, h, w = x.shape
    ho, wo = _conv_out_hw(h, w, kh, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {kh}x{kw} stride {stride} pad {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols, h, w, stride, pad):
    """Adjoint of `_im2col`: scatter-add patches back to (N,C,H,W)."""
    n, c, kh, kw, ho, wo = cols.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    x = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        x = x[:, :, pad:hp - pad, pad:wp - pad]
    return x


def _conv_forward(x, w, stride, pad):
    n = x.shape[0]
    f, c, kh, kw = w.shape
    ho, wo = _conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
    out = cols2 @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols2


def _conv_input_grad(g, w, x_shape, stride, pad):
    n, c, h, w_in = x_shape
    f = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dcols = (g2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    return _col2im(dcols, h, w_in, stride, pad)


def conv2d(x, weights, bias, stride=1, pad=0):
    """Cross-correlation of (N,C,H,W) with weights (F,C,kh,kw) plus bias (F)."""
    x, weights = ad.as_tensor(x), ad.as_tensor(weights)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got {x.data.shape}")
    f, c, kh, kw = weights.data.shape
    if x.data.shape[1] != c:
        raise ShapeError(f"conv2d input channels {x.data.shape[1]} != weight channels {c}")
    out_data, cols2 = _conv_forward(x.data, weights.data, stride, pad)
    n, _, ho, wo = out_data.shape

    inputs = [x, weights]
    if bias is not None:
        bias = ad.as_tensor(bias)
        if bias.data.shape != (f,):
            raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({f},)")
        out_data = out_data + bias.data.reshape(1, f, 1, 1)
        inputs.append(bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_conv_input_grad(g, weights.data, x.data.shape, stride, pad))
        if weights.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
            weights._accumulate((g2.T @ cols2).reshape(weights.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_op(out_data, inputs, bw)


def deconv2d(x, weights, bias, stride=1, pad=0):
    """Transposed convolution, the exact adjoint of `conv2d` with the same weights.

    Weights are (C_in, C_out, kh, kw); output spatial size is
    (H-1)*stride - 2*pad + kh, which doubles H for the 4x4/stride-2/pad-1
    geometry used by the generator.
    """
    x, weights = ad.as_tensor(x), ad.as_tensor(weights)
    if x.data.ndim != 4:
        raise ShapeError(f"deconv2d input must be 4-d (N,C,H,W), got {x.data.shape}")
    c_in, c_out, kh, kw = weights.data.shape
    if x.data.shape[1] != c_in:
        raise ShapeError(f"deconv2d input channels {x.data.shape[1]} != weight channels {c_in}")
    n, _, h, w_in = x.data.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w_in - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d output {ho}x{wo} collapsed; check stride/pad")
    out_data = _conv_input_grad(x.data, weights.data, (n, c_out, ho, wo), stride, pad)

    inputs = [x, weights]
    if bias is not None:
        bias = ad.as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError(f"deconv2d bias shape {bias.data.shape} != ({c_out},)")
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
        inputs.append(bias)

    def bw(g):
        if x.requires_grad:
            dx, _ = _conv_forward(g, weights.data, stride, pad)
            x._accumulate(dx)
        if weights.requires_grad:
            gcols = _im2col(g, kh, kw, stride, pad)
            gcols2 = gcols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w_in, c_out * kh * kw)
            x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w_in, c_in)
            weights._accumulate((x2.T @ gcols2).reshape(weights.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_op(out_data, inputs, bw)


# -- layers ---------------------------------------------------------------------


class Dense:
    def __init__(self, in_features, out_features, rng, name="fc"):
        self.w = Tensor(rng.normal(0.0, 0.02, (in_features, out_features)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.b")
        self.name = name

    def __call__(self, x):
        if x.data.shape[1] != self.w.data.shape[0]:
            raise ShapeError(f"{self.name}: input features {x.data.shape[1]} "
                             f"!= weight rows {self.w.data.shape[0]}")
        return ad.matmul(x, self.w) + self.b

    def parameters(self):
        return [self.w, self.b]


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel, stride, pad, rng, name="conv"):
        self.w = Tensor(rng.normal(0.0, 0.02, (out_channels, in_channels, kernel, kernel)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.b")
        self.stride, self.pad, self.name = stride, pad, name

    def __call__(self, x):
        return conv2d(x, self.w, self.b, self.stride, self.pad)

    def parameters(self):
        return [self.w, self.b]


class ConvTranspose2d:
    def __init__(self, in_channels, out_channels, kernel, stride, pad, rng, name="deconv"):
        self.w = Tensor(rng.normal(0.0, 0.02, (in_channels, out_channels, kernel, kernel)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.b")
        self.stride, self.pad, self.name = stride, pad, name

    def __call__(self, x):
        return deconv2d(x, self.w, self.b, self.stride, self.pad)

    def parameters(self):
        return [self.w, self.b]


class BatchNorm:
    """Channel-wise batch norm for (N,C,H,W) or feature-wise for (N,D).

    Train mode normalizes by batch statistics and updates running stats with
    an exponential moving average (momentum on the old value); eval mode uses
    the running stats and errors if they were never populated.
    """

    def __init__(self, channels, rng, eps=1e-5, momentum=0.9, name="bn"):
        self.gamma = Tensor(rng.normal(1.0, 0.02, channels), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.stats_ready = False
        self.eps = eps
        self.momentum = momentum
        self.name = name

    def __call__(self, x, training):
        c = self.gamma.data.shape[0]
        if x.data.ndim == 4:
            if x.data.shape[1] != c:
                raise ShapeError(f"{self.name}: input channels {x.data.shape[1]} != {c}")
            axes, view = (0, 2, 3), (1, c, 1, 1)
        elif x.data.ndim == 2:
            if x.data.shape[1] != c:
                raise ShapeError(f"{self.name}: input features {x.data.shape[1]} != {c}")
            axes, view = (0,), (1, c)
        else:
            raise ShapeError(f"{self.name}: expected 2-d or 4-d input, got {x.data.shape}")

        if training:
            mu = ad.tmean(x, axis=axes, keepdims=True)
            var = ad.tmean(ad.square(x - mu), axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data.reshape(c)
            self.running_var = m * self.running_var + (1 - m) * var.data.reshape(c)
            self.stats_ready = True
            xhat = (x - mu) / ad.sqrt(var + self.eps)
        else:
            if not self.stats_ready:
                raise RuntimeError(f"{self.name}: eval mode before running stats exist")
            mu = self.running_mean.reshape(view)
            std = np.sqrt(self.running_var.reshape(view) + np.float32(self.eps))
            xhat = (x - Tensor(mu)) / Tensor(std)
        return ad.reshape(self.gamma, view) * xhat + ad.reshape(self.beta, view)

    def parameters(self):
        return [self.gamma, self.beta]

    def stats(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_stats(self, mean, var):
        self.running_mean = np.asarray(mean, dtype=np.float32).copy()
        self.running_var = np.asarray(var, dtype=np.float32).copy()
        self.stats_ready = True


class Network:
    """Base for the models: ordered layers, parameter listing, train/eval/freeze."""

    def __init__(self):
        self._layers = []       # (name, layer) in forward order
        self.training = True
        self.frozen = False
        self.layer_specs = []

    def _add(self, name, layer):
        self._layers.append((name, layer))
        return layer

    def parameters(self):
        out = []
        for _, layer in self._layers:
            out.extend(layer.parameters())
        return out

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        if self.frozen:
            raise RuntimeError("model is frozen; cannot re-enter train mode")
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def freeze(self):
        """Eval mode plus a marker that trainers must not touch the parameters."""
        self.training = False
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
        return self

    def batch_norms(self):
        return [(name, layer) for name, layer in self._layers if isinstance(layer, BatchNorm)]

    def state(self):
        """Ordered name -> array mapping of parameters and running stats."""
        out = {}
        for p in self.parameters():
            out[p.name] = p.data
        for name, bn in self.batch_norms():
            out[f"{bn.name}.running_mean"] = bn.running_mean
            out[f"{bn.name}.running_var"] = bn.running_var
        return out

    def load_state(self, arrays):
        state = self.state()
        missing = [k for k in state if k not in arrays]
        if missing:
            raise KeyError(f"checkpoint missing arrays: {missing}")
        for p in self.parameters():
            src = np.asarray(arrays[p.name], dtype=np.float32)
            if src.shape != p.data.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {src.shape} != {p.data.shape}")
            p.data = src.copy()
        for _, bn in self.batch_norms():
            bn.load_stats(arrays[f"{bn.name}.running_mean"], arrays[f"{bn.name}.running_var"])

    def param_fingerprint(self):
        """Order-stable hash of all parameter bytes; used by frozen-contract tests."""
        import hashlib
        h = hashlib.sha256()
        for key, arr in sorted(self.state().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
