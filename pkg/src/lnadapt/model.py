"""Multi-task trunk-plus-heads model with adapter slots.

Topology: one tanh dense layer, a stack of BLSTM layers, then one linear
head per acoustic stream, all heads reading the same final trunk
activation. With ``L`` trunk layers there are ``L`` slot boundaries;
boundary ``b`` (1-based) sits on the output of trunk layer ``b - 1`` and
boundary ``L`` is the one feeding the heads.
"""
import copy
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterKind, init_adapter
from .errors import ConfigError, ParseError, StateError
from .nn import BlstmLayer, DenseLayer, as_frames

STREAMS = ("mcep", "lf0", "bap", "uv")
DEFAULT_POLICY = ("before_last_hidden", "before_output")
TRAIN_MODES = ("sd", "ol", "ol_plus_adapters")

MAGIC = b"LTM1"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 24
    dense_width: int = 32
    blstm_widths: tuple = (32, 32)
    head_dims: dict = field(default_factory=lambda: {"mcep": 12, "lf0": 3, "bap": 4, "uv": 1})

    def __post_init__(self):
        self.blstm_widths = tuple(int(w) for w in self.blstm_widths)
        self.head_dims = {s: int(self.head_dims[s]) for s in STREAMS if s in self.head_dims}

    @classmethod
    def full_scale(cls):
        return cls(753, 1024, (1024, 1024, 1024), {"mcep": 60, "lf0": 3, "bap": 11, "uv": 1})

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.dense_width < 2:
            raise ConfigError(f"dense_width must be >= 2, got {self.dense_width}")
        if not self.blstm_widths:
            raise ConfigError("at least one BLSTM layer is required")
        for w in self.blstm_widths:
            if w < 2 or w % 2:
                raise ConfigError(f"BLSTM widths must be even and >= 2, got {w}")
        if set(self.head_dims) != set(STREAMS):
            raise ConfigError(f"head_dims must cover exactly {STREAMS}, got {sorted(self.head_dims)}")
        for s, d in self.head_dims.items():
            if d < 1:
                raise ConfigError(f"head {s} width must be >= 1, got {d}")
        return self

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "dense_width": self.dense_width,
            "blstm_widths": list(self.blstm_widths),
            "head_dims": dict(self.head_dims),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_dim"], d["dense_width"], tuple(d["blstm_widths"]), dict(d["head_dims"]))


class MultiTaskModel:
    def __init__(self, cfg, trunk, heads, slots=None, norm_stats_ref=None):
        self.cfg = cfg
        self.trunk = list(trunk)
        self.heads = dict(heads)
        self.slots = {b: None for b in range(1, len(self.trunk) + 1)}
        if slots:
            self.slots.update(slots)
        self.norm_stats_ref = norm_stats_ref

    # -- structure -------------------------------------------------------

    @property
    def n_boundaries(self):
        return len(self.trunk)

    def slot_width(self, b):
        return self.trunk[b - 1].out_dim

    def resolve_position(self, pos):
        """Map a named insertion position onto a slot boundary."""
        L = self.n_boundaries
        n_blstm = L - 1
        if isinstance(pos, int):
            b = pos
        elif pos == "after_dense":
            b = 1
        elif pos == "before_output":
            b = L
        elif pos == "before_last_hidden":
            b = L - 1
        else:
            m = re.fullmatch(r"between_blstm\((\d+)\)", str(pos))
            if not m:
                raise ConfigError(f"unknown insertion position {pos!r}")
            i = int(m.group(1))
            if i > n_blstm - 2:
                raise ConfigError(f"{pos} is invalid for a trunk with {n_blstm} BLSTM layers")
            b = i + 2
        if not 1 <= b <= L:
            raise ConfigError(f"position {pos!r} resolves to boundary {b}, outside 1..{L}")
        return b

    def stages(self):
        """Ordered ``(prefix, layer)`` pairs of the shared path, empty slots skipped."""
        out = []
        for j, layer in enumerate(self.trunk):
            out.append((f"trunk.{j}", layer))
            a = self.slots[j + 1]
            if a is not None:
                out.append((f"slot{j + 1}", a))
        return out

    def adapters(self):
        return {b: a for b, a in self.slots.items() if a is not None}

    def blocks(self):
        """Ordered ``{block name: live array}`` over the whole model."""
        out = {}
        for prefix, layer in self.stages():
            for k, v in layer.params().items():
                out[f"{prefix}.{k}"] = v
        for s in STREAMS:
            for k, v in self.heads[s].params().items():
                out[f"head.{s}.{k}"] = v
        return out

    def trunk_blocks(self):
        return {k: v for k, v in self.blocks().items() if k.startswith("trunk.")}

    def param_count(self):
        return sum(a.size for a in self.blocks().values())

    def copy(self):
        return copy.deepcopy(self)

    # -- computation -----------------------------------------------------

    def run_stages(self, h, lo, hi, stages=None):
        stages = self.stages() if stages is None else stages
        for _, layer in stages[lo:hi]:
            h = layer.forward(h)
        return h

    def _heads(self, h):
        return {s: self.heads[s].forward(h) for s in STREAMS}

    def forward(self, x):
        """Per-stream predictions for one utterance's input frames."""
        x = as_frames(x, self.cfg.input_dim)
        return self._heads(self.run_stages(x, 0, None))

    def forward_from(self, h, lo, stages=None):
        """Forward from stage ``lo`` keeping everything ``backward_to`` needs."""
        stages = self.stages() if stages is None else stages
        caches = []
        for _, layer in stages[lo:]:
            y, c = layer.forward_cache(h)
            caches.append((h, c))
            h = y
        return self._heads(h), (lo, caches, h)

    def backward_to(self, cache, douts, stages=None):
        """Gradients of every block in stages ``>= lo`` and in the heads."""
        stages = self.stages() if stages is None else stages
        lo, caches, top = cache
        grads = {}
        dh = None
        for s in STREAMS:
            dx, g = self.heads[s].backward(top, douts[s])
            for k, v in g.items():
                grads[f"head.{s}.{k}"] = v
            dh = dx if dh is None else dh + dx
        for idx in range(len(caches) - 1, -1, -1):
            prefix, layer = stages[lo + idx]
            h_in, c = caches[idx]
            dh, g = layer.backward(h_in, dh, c)
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v
        return grads


def _build_trunk(cfg, rng):
    trunk = [DenseLayer.init(cfg.input_dim, cfg.dense_width, rng, "tanh")]
    width = cfg.dense_width
    for w in cfg.blstm_widths:
        trunk.append(BlstmLayer.init(width, w, rng))
        width = w
    heads = {s: DenseLayer.init(width, cfg.head_dims[s], rng, "linear") for s in STREAMS}
    return trunk, heads


def build_model(cfg=None, seed=0):
    """Seeded multi-task model with all adapter slots empty."""
    cfg = (cfg or ModelConfig()).validate()
    trunk, heads = _build_trunk(cfg, np.random.default_rng(seed))
    return MultiTaskModel(cfg, trunk, heads)


def expected_param_count(cfg):
    """Closed-form parameter count of a slot-free model."""
    n = cfg.dense_width * (cfg.input_dim + 1)
    width = cfg.dense_width
    for w in cfg.blstm_widths:
        h = w // 2
        n += 2 * (4 * h * (width + h) + 4 * h)
        width = w
    n += sum(d * (width + 1) for d in cfg.head_dims.values())
    return n


def insert_adapters(m, policy=DEFAULT_POLICY, kind=AdapterKind.lrpd(10), seed=0):
    """Copy of ``m`` with fresh adapters at each policy position."""
    out = m.copy()
    boundaries = []
    for pos in policy:
        b = out.resolve_position(pos)
        if out.slots[b] is not None or b in boundaries:
            raise StateError(f"slot at boundary {b} ({pos}) is already occupied")
        boundaries.append(b)
    for b in boundaries:
        a = init_adapter(kind, out.slot_width(b), seed=[seed, b])
        if a.width != out.slot_width(b):
            raise StateError(f"adapter width {a.width} != activation width {out.slot_width(b)}")
        out.slots[b] = a
    return out


def trainable_mask(m, mode):
    """``{block name: bool}`` for the given training mode."""
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    names = m.blocks()
    if mode == "sd":
        return {k: True for k in names}
    if mode == "ol_plus_adapters" and not m.adapters():
        raise ConfigError("ol_plus_adapters mode needs at least one inserted adapter")
    mask = {}
    for k in names:
        if k.startswith("head."):
            mask[k] = True
        elif k.startswith("slot"):
            mask[k] = mode == "ol_plus_adapters"
        else:
            mask[k] = False
    return mask


# -- serialization -------------------------------------------------------


def model_to_bytes(m):
    header = {
        "config": m.cfg.to_dict(),
        "slots": {
            str(b): {"kind": a.kind, "rank": getattr(a, "rank", 0)} for b, a in m.adapters().items()
        },
        "norm_stats_ref": m.norm_stats_ref,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = m.blocks()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated model file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(data):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic header, not an .ltm model file", 0)
    version, hlen = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", 4)
    at = r.pos
    try:
        header = json.loads(r.take(hlen, "header json").decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"]).validate()
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"invalid model header: {e}", at) from None
    m = build_model(cfg, seed=0)
    for b, spec in header["slots"].items():
        k = int(b)
        kind = AdapterKind.full() if spec["kind"] == "full" else AdapterKind.lrpd(spec["rank"])
        m.slots[k] = init_adapter(kind, m.slot_width(k), seed=0)
    m.norm_stats_ref = header.get("norm_stats_ref")
    expected = m.blocks()
    (n_blocks,) = r.unpack("<I", "block count")
    if n_blocks != len(expected):
        raise ParseError(f"expected {len(expected)} blocks, file declares {n_blocks}", r.pos - 4)
    seen = set()
    for _ in range(n_blocks):
        at = r.pos
        (nlen,) = r.unpack("<H", "block name length")
        name = r.take(nlen, "block name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "block rank")
        shape = r.unpack(f"<{ndim}I", "block shape")
        if name not in expected or name in seen:
            raise ParseError(f"unexpected or duplicate block {name!r}", at)
        seen.add(name)
        if tuple(shape) != expected[name].shape:
            raise ParseError(f"block {name} has shape {shape}, expected {expected[name].shape}", at)
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take(8 * n, f"data of block {name}")
        expected[name][...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if r.pos != len(data):
        raise ParseError("trailing bytes after last block", r.pos)
    return m


def save_model(m, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(m))


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
