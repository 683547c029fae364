"""Speaker-specific linear-network adapters.

Two flavours are provided. ``FullLnAdapter`` is an unconstrained affine map
``W h + b``. ``LrpdAdapter`` restricts the matrix to ``U V + I``: a rank-``r``
term plus a fixed identity diagonal that is implicit (never stored, never
trained).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import as_frames

LRPD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class AdapterKind:
    """``AdapterKind("full")`` or ``AdapterKind("lrpd", rank)``."""

    name: str
    rank: int = 0

    def __post_init__(self):
        if self.name not in ("full", "lrpd"):
            raise ConfigError(f"unknown adapter kind {self.name!r}")
        if self.name == "lrpd" and self.rank < 1:
            raise ConfigError(f"lrpd rank must be >= 1, got {self.rank}")
        if self.name == "full" and self.rank != 0:
            raise ConfigError("full adapters take no rank")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def lrpd(cls, rank):
        return cls("lrpd", int(rank))

    def __str__(self):
        return "full" if self.name == "full" else f"lrpd({self.rank})"


class FullLnAdapter:
    kind = "full"

    def __init__(self, w, b):
        self.w = np.array(w, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        k = self.w.shape[0]
        if self.w.shape != (k, k) or self.b.shape != (k,):
            raise ShapeError(f"full adapter needs square W and matching b, got {self.w.shape}, {self.b.shape}")

    @property
    def width(self):
        return self.w.shape[0]

    in_dim = out_dim = width

    @property
    def adapter_kind(self):
        return AdapterKind.full()

    def params(self):
        return {"W": self.w, "b": self.b}

    def forward(self, h):
        h = as_frames(h, self.width)
        return h @ self.w.T + self.b

    def forward_cache(self, h):
        return self.forward(h), None

    def backward(self, h, dy, cache=None):
        h = as_frames(h, self.width)
        dy = as_frames(dy, self.width, "upstream gradient")
        if dy.shape[0] != h.shape[0]:
            raise ShapeError(f"upstream has {dy.shape[0]} frames, input has {h.shape[0]}")
        return dy @ self.w, {"W": dy.T @ h, "b": dy.sum(axis=0)}


class LrpdAdapter:
    kind = "lrpd"

    def __init__(self, u, v, b):
        self.u = np.array(u, dtype=np.float64)
        self.v = np.array(v, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        k, r = self.u.shape
        if self.v.shape != (r, k) or self.b.shape != (k,):
            raise ShapeError(
                f"lrpd blocks inconsistent: U {self.u.shape}, V {self.v.shape}, b {self.b.shape}"
            )
        if r >= k:
            raise ConfigError(f"lrpd rank {r} must be smaller than width {k}")

    @property
    def width(self):
        return self.u.shape[0]

    in_dim = out_dim = width

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def adapter_kind(self):
        return AdapterKind.lrpd(self.rank)

    def params(self):
        return {"U": self.u, "V": self.v, "b": self.b}

    def materialize(self):
        """The equivalent full matrix ``U V + I``."""
        return self.u @ self.v + np.eye(self.width)

    def forward_cache(self, h):
        h = as_frames(h, self.width)
        z = h @ self.v.T
        return z @ self.u.T + h + self.b, z

    def forward(self, h):
        return self.forward_cache(h)[0]

    def backward(self, h, dy, cache=None):
        h = as_frames(h, self.width)
        dy = as_frames(dy, self.width, "upstream gradient")
        if dy.shape[0] != h.shape[0]:
            raise ShapeError(f"upstream has {dy.shape[0]} frames, input has {h.shape[0]}")
        z = h @ self.v.T if cache is None else cache
        dz = dy @ self.u
        grads = {"U": dy.T @ z, "V": dz.T @ h, "b": dy.sum(axis=0)}
        return dy + dz @ self.v, grads


def init_adapter(kind, k, seed=0):
    """Fresh adapter of width ``k``.

    Full adapters start as the exact identity. LRPD adapters draw ``U`` and
    ``V`` from uniform(-0.01, 0.01) so the inserted layer is near-identity.
    """
    if k < 1:
        raise ConfigError(f"adapter width must be >= 1, got {k}")
    if kind.name == "full":
        return FullLnAdapter(np.eye(k), np.zeros(k))
    if kind.rank >= k:
        raise ConfigError(f"lrpd rank {kind.rank} must be smaller than width {k}")
    rng = np.random.default_rng(seed)
    s = LRPD_INIT_SCALE
    u = rng.uniform(-s, s, size=(k, kind.rank))
    v = rng.uniform(-s, s, size=(kind.rank, k))
    return LrpdAdapter(u, v, np.zeros(k))


def param_count(kind, k):
    """Adapter size as usually reported: ``k**2`` for full, ``k(2r+1)`` for LRPD.

    The full count leaves out the bias; see ``trainable_count``.
    """
    if kind.name == "full":
        return k * k
    return k * (2 * kind.rank + 1)


def trainable_count(kind, k):
    """Number of scalars actually updated during adaptation."""
    if kind.name == "full":
        return k * k + k
    return k * (2 * kind.rank + 1)
