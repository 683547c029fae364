"""Dense and bidirectional-LSTM layers with exact backpropagation.

Every layer works on a frame sequence: a float64 array of shape
``(n_frames, width)``. Layers expose the same small protocol so the model,
the optimizer and the gradient checker can treat them uniformly:

``params()``
    ordered ``{name: array}`` of live parameter arrays.
``forward(x)``
    output sequence.
``forward_cache(x)``
    ``(output, cache)`` where ``cache`` feeds ``backward``.
``backward(x, dy, cache=None)``
    ``(dx, {name: grad})``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "linear")


def as_frames(x, width=None, what="input"):
    """Coerce ``x`` to a 2-D float64 frame sequence and check its width."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and width is not None and x.size == 0:
        x = x.reshape(0, width)
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D (frames, dims), got shape {x.shape}")
    if width is not None and x.shape[1] != width:
        raise ShapeError(f"{what} width {x.shape[1]} does not match expected width {width}")
    return x


def uniform_init(rng, shape, fan_in):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class DenseLayer:
    """Affine map followed by an optional tanh: ``act(x @ W.T + b)``."""

    kind = "dense"

    def __init__(self, weight, bias, activation="linear"):
        weight = np.array(weight, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64)
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} are inconsistent")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, in_dim, out_dim, rng, activation="linear"):
        return cls(
            uniform_init(rng, (out_dim, in_dim), in_dim),
            uniform_init(rng, (out_dim,), in_dim),
            activation,
        )

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        x = as_frames(x, self.in_dim)
        y = x @ self.weight.T + self.bias
        if self.activation == "tanh":
            y = np.tanh(y)
        return y

    def forward_cache(self, x):
        y = self.forward(x)
        return y, y

    def backward(self, x, dy, cache=None):
        x = as_frames(x, self.in_dim)
        dy = as_frames(dy, self.out_dim, "upstream gradient")
        if dy.shape[0] != x.shape[0]:
            raise ShapeError(f"upstream has {dy.shape[0]} frames, input has {x.shape[0]}")
        if self.activation == "tanh":
            y = self.forward(x) if cache is None else cache
            dy = dy * (1.0 - y * y)
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ self.weight, grads


class LstmCell:
    """Unidirectional LSTM scanning left to right from a zero state.

    Gate rows of ``wx``, ``wh`` and ``b`` are stacked as
    ``[input, forget, output, candidate]``, each block ``hidden`` rows tall.
    """

    kind = "lstm"

    def __init__(self, wx, wh, b):
        self.wx = np.array(wx, dtype=np.float64)
        self.wh = np.ascontiguousarray(wh, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        G = self.wx.shape[0]
        if G % 4 or self.wh.shape != (G, G // 4) or self.b.shape != (G,):
            raise ShapeError(
                f"inconsistent LSTM blocks: wx {self.wx.shape}, wh {self.wh.shape}, b {self.b.shape}"
            )

    @classmethod
    def init(cls, in_dim, hidden, rng):
        fan_in = in_dim + hidden
        return cls(
            uniform_init(rng, (4 * hidden, in_dim), fan_in),
            uniform_init(rng, (4 * hidden, hidden), fan_in),
            uniform_init(rng, (4 * hidden,), fan_in),
        )

    @property
    def in_dim(self):
        return self.wx.shape[1]

    @property
    def hidden(self):
        return self.wh.shape[1]

    @property
    def out_dim(self):
        return self.hidden

    def params(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    def forward_cache(self, x):
        x = np.ascontiguousarray(as_frames(x, self.in_dim))
        xproj = x @ self.wx.T + self.b
        hs, cs, acts = kernels.lstm_scan_forward(xproj, self.wh)
        return hs, (hs, cs, acts)

    def forward(self, x):
        return self.forward_cache(x)[0]

    def backward(self, x, dy, cache=None):
        x = np.ascontiguousarray(as_frames(x, self.in_dim))
        dy = as_frames(dy, self.hidden, "upstream gradient")
        if dy.shape[0] != x.shape[0]:
            raise ShapeError(f"upstream has {dy.shape[0]} frames, input has {x.shape[0]}")
        if cache is None:
            cache = self.forward_cache(x)[1]
        hs, cs, acts = cache
        dz = kernels.lstm_scan_backward(np.ascontiguousarray(dy), acts, cs, self.wh)
        grads = {
            "wx": dz.T @ x,
            "wh": dz[1:].T @ hs[:-1],
            "b": dz.sum(axis=0),
        }
        return dz @ self.wx, grads


class BlstmLayer:
    """Two LSTM cells over the same input, one per direction.

    Output frame ``t`` is ``[forward_h_t ; backward_h_t]``.
    """

    kind = "blstm"

    def __init__(self, forward_cell, backward_cell):
        if forward_cell.in_dim != backward_cell.in_dim:
            raise ShapeError(
                f"cell input widths differ: {forward_cell.in_dim} vs {backward_cell.in_dim}"
            )
        self.fwd = forward_cell
        self.bwd = backward_cell

    @classmethod
    def init(cls, in_dim, out_dim, rng):
        if out_dim % 2 or out_dim < 2:
            raise ConfigError(f"BLSTM width must be even and >= 2, got {out_dim}")
        return cls(LstmCell.init(in_dim, out_dim // 2, rng), LstmCell.init(in_dim, out_dim // 2, rng))

    @property
    def in_dim(self):
        return self.fwd.in_dim

    @property
    def out_dim(self):
        return self.fwd.hidden + self.bwd.hidden

    def params(self):
        p = {f"fwd.{k}": v for k, v in self.fwd.params().items()}
        p.update({f"bwd.{k}": v for k, v in self.bwd.params().items()})
        return p

    def forward_cache(self, x):
        x = as_frames(x, self.in_dim)
        # reversed views fall off the BLAS fast path, so copy once
        xr = np.ascontiguousarray(x[::-1])
        yf, cf = self.fwd.forward_cache(x)
        yb, cb = self.bwd.forward_cache(xr)
        return np.concatenate([yf, yb[::-1]], axis=1), (cf, cb, xr)

    def forward(self, x):
        return self.forward_cache(x)[0]

    def backward(self, x, dy, cache=None):
        x = as_frames(x, self.in_dim)
        dy = as_frames(dy, self.out_dim, "upstream gradient")
        if dy.shape[0] != x.shape[0]:
            raise ShapeError(f"upstream has {dy.shape[0]} frames, input has {x.shape[0]}")
        if cache is None:
            cache = self.forward_cache(x)[1]
        cf, cb, xr = cache
        hf = self.fwd.hidden
        dxf, gf = self.fwd.backward(x, dy[:, :hf], cf)
        dxb, gb = self.bwd.backward(xr, dy[::-1, hf:], cb)
        grads = {f"fwd.{k}": v for k, v in gf.items()}
        grads.update({f"bwd.{k}": v for k, v in gb.items()})
        return dxf + dxb[::-1], grads


@dataclass
class GradCheckReport:
    """Per-block relative error of analytic vs central-difference gradients.

    A block's error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    The block named ``"input"`` covers the gradient w.r.t. the input sequence.
    """

    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def worst_block(self):
        if not self.errors:
            return ""
        return max(self.errors, key=self.errors.get)


def _block_rel_error(a, n):
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(block, x, eps=1e-5):
    """Compare ``block.backward`` against central differences.

    The probe loss is the sum of squared outputs. Every parameter array
    returned by ``block.params()`` is perturbed in place and restored.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)

    def loss(inp):
        val = float(np.sum(block.forward(inp) ** 2))
        if not np.isfinite(val):
            raise NumericError("probe loss is not finite")
        return val

    y = block.forward(x)
    loss(x)
    dx, grads = block.backward(x, 2.0 * y)
    report = GradCheckReport()
    targets = list(block.params().items()) + [("input", x)]
    analytic = dict(grads, input=dx)
    for name, arr in targets:
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(x)
            flat[i] = orig - eps
            down = loss(x)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        report.errors[name] = _block_rel_error(analytic[name], num)
    return report
