"""Synthetic teacher-speaker corpora.

A speaker is a frozen random multi-task network (the *teacher*) plus a
per-stream affine warp. All speakers derive from one shared base teacher;
``distance`` scales a seeded perturbation of the base parameters, so
distance 0 reproduces the base teacher exactly.

Utterances are sequences of linguistic-like inputs (piecewise-constant
binary dims over phone-like segments, plus smoothed numeric dims). Targets
are the teacher's outputs with observation noise; the voicing flag of each
segment is decided by the teacher's U/V output, and log F0 on unvoiced
frames is replaced by linear interpolation.
"""
import functools
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, LoadError, ParseError
from .model import STREAMS, ModelConfig, build_model, model_to_bytes

log = logging.getLogger(__name__)

BASE_TEACHER_SEED = 1729
TEACHER_GAIN = 2.0
HEAD_GAIN = 4.0
PERTURB_SCALE = 1.0
LF0_BASE = math.log(200.0)
LF0_SPREAD = 0.25
LF0_SHIFT = 0.3
OBS_NOISE = 0.01
VOICED_QUANTILE = 0.4
N_BINARY = 20
N_NUMERIC = 4
MIN_FRAMES, MAX_FRAMES = 40, 80
MIN_SEG, MAX_SEG = 4, 12
STD_FLOOR = 1e-6

UTT_MAGIC = b"LNUT"
UTT_VERSION = 1
MANIFEST_NAME = "manifest"


# -- F0 interpolation ------------------------------------------------------


def interpolate_f0(lf0, uv):
    """Fill unvoiced frames of a static log-F0 track by linear interpolation.

    Values on voiced frames are returned unchanged; leading and trailing
    unvoiced runs take the nearest voiced value.
    """
    lf0 = np.asarray(lf0, dtype=np.float64).reshape(-1)
    v = np.asarray(uv).reshape(-1) > 0.5
    if len(v) != len(lf0):
        raise DataError(f"lf0 has {len(lf0)} frames but uv has {len(v)}")
    if not v.any():
        raise DataError("cannot interpolate F0: utterance has no voiced frame")
    idx = np.flatnonzero(v)
    out = np.interp(np.arange(len(lf0)), idx, lf0[idx])
    out[idx] = lf0[idx]
    return out


def add_deltas(x):
    """Stack a static track with its first and second differences."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    p = np.concatenate([x[:1], x, x[-1:]])
    d1 = 0.5 * (p[2:] - p[:-2])
    d2 = p[2:] - 2.0 * p[1:-1] + p[:-2]
    return np.stack([x, d1, d2], axis=1)


# -- normalization ---------------------------------------------------------


@dataclass
class NormStats:
    """Per-dim mean/std for the inputs and each target stream."""

    mean: dict
    std: dict
    warnings: list = field(default_factory=list)

    def normalize_inputs(self, x):
        return (x - self.mean["inputs"]) / self.std["inputs"]

    def normalize_streams(self, streams):
        return {s: (np.asarray(v).reshape(len(v), -1) - self.mean[s]) / self.std[s] for s, v in streams.items()}

    def denormalize_streams(self, streams):
        return {s: np.asarray(v) * self.std[s] + self.mean[s] for s, v in streams.items()}

    def normalize(self, utt):
        return self.normalize_inputs(utt.inputs), self.normalize_streams(utt.targets)

    def to_dict(self):
        return {
            "mean": {k: [float(x) for x in v] for k, v in self.mean.items()},
            "std": {k: [float(x) for x in v] for k, v in self.std.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            {k: np.array(v, dtype=np.float64) for k, v in d["mean"].items()},
            {k: np.array(v, dtype=np.float64) for k, v in d["std"].items()},
            list(d.get("warnings", [])),
        )


def compute_norm_stats(utts):
    if not utts:
        raise ConfigError("cannot compute normalization stats from an empty split")
    mean, std, warnings = {}, {}, []
    keys = ["inputs", *STREAMS]
    for k in keys:
        data = np.concatenate([u.inputs if k == "inputs" else u.targets[k] for u in utts], axis=0)
        mu = data.mean(axis=0)
        sd = data.std(axis=0)
        low = sd < STD_FLOOR
        if low.any():
            msg = f"{k}: dims {np.flatnonzero(low).tolist()} are constant, std floored at {STD_FLOOR}"
            warnings.append(msg)
            log.warning(msg)
            sd = np.where(low, STD_FLOOR, sd)
        mean[k] = mu
        std[k] = sd
    return NormStats(mean, std, warnings)


def normalize(utt, stats):
    return stats.normalize(utt)


def denormalize(streams, stats):
    return stats.denormalize_streams(streams)


# -- speakers --------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    inputs: np.ndarray
    targets: dict

    @property
    def n_frames(self):
        return self.inputs.shape[0]

    @property
    def uv(self):
        return self.targets["uv"][:, 0]


@functools.lru_cache(maxsize=4)
def _base_teacher_cached(cfg_key):
    cfg = ModelConfig.from_dict(json.loads(cfg_key))
    teacher = build_model(cfg, seed=BASE_TEACHER_SEED)
    for name, arr in teacher.blocks().items():
        arr *= TEACHER_GAIN if name.startswith("trunk.") else HEAD_GAIN
    return teacher


def base_teacher(cfg=None):
    cfg = cfg or ModelConfig()
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    return _base_teacher_cached(key).copy()


@dataclass
class SpeakerSpec:
    seed: int
    distance: float
    teacher: object
    warp_scale: dict
    warp_shift: dict
    lf0_shift: float
    uv_threshold: float

    def fingerprint(self):
        h = hashlib.sha256(model_to_bytes(self.teacher))
        for s in ("mcep", "bap"):
            h.update(np.ascontiguousarray(self.warp_scale[s], dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(self.warp_shift[s], dtype="<f8").tobytes())
        h.update(struct.pack("<dd", self.lf0_shift, self.uv_threshold))
        return h.hexdigest()


def make_speaker(seed, distance, cfg=None):
    """Teacher speaker at ``distance`` in [0, 1] from the shared base teacher."""
    if not 0.0 <= distance <= 1.0:
        raise ConfigError(f"speaker distance must be in [0, 1], got {distance}")
    cfg = cfg or ModelConfig()
    teacher = base_teacher(cfg)
    rng = np.random.default_rng([int(seed), 101])
    for arr in teacher.blocks().values():
        noise = rng.standard_normal(arr.shape)
        if distance > 0:
            arr += (distance * PERTURB_SCALE * np.sqrt(np.mean(arr * arr))) * noise
    wrng = np.random.default_rng([int(seed), 202])
    warp_scale, warp_shift = {}, {}
    for s in ("mcep", "bap"):
        d = cfg.head_dims[s]
        warp_scale[s] = 1.0 + 0.2 * distance * wrng.uniform(-1.0, 1.0, size=d)
        warp_shift[s] = 0.5 * distance * wrng.standard_normal(d)
    sign = 1.0 if wrng.random() < 0.5 else -1.0
    lf0_shift = math.log1p(sign * LF0_SHIFT * distance)
    spk = SpeakerSpec(int(seed), float(distance), teacher, warp_scale, warp_shift, lf0_shift, 0.0)
    spk.uv_threshold = _calibrate_uv(spk)
    return spk


def _segments(rng, T):
    bounds = [0]
    while bounds[-1] < T:
        bounds.append(min(T, bounds[-1] + int(rng.integers(MIN_SEG, MAX_SEG + 1))))
    return list(zip(bounds[:-1], bounds[1:]))


def _smooth_noise(rng, T, dims, width=9):
    raw = rng.standard_normal((T + width - 1, dims))
    kernel = np.ones(width) / math.sqrt(width)
    return np.stack([np.convolve(raw[:, j], kernel, mode="valid") for j in range(dims)], axis=1)


def make_inputs(rng, n_binary=N_BINARY, n_numeric=N_NUMERIC):
    """One utterance of inputs and its segment boundaries."""
    T = int(rng.integers(MIN_FRAMES, MAX_FRAMES + 1))
    segs = _segments(rng, T)
    binary = np.zeros((T, n_binary))
    for a, b in segs:
        binary[a:b] = rng.random(n_binary) < 0.5
    return np.concatenate([binary, _smooth_noise(rng, T, n_numeric)], axis=1), segs


def _segment_voicing(uv_out, segs):
    return np.array([uv_out[a:b].mean() for a, b in segs])


def _calibrate_uv(spk, n=20):
    rng = np.random.default_rng([BASE_TEACHER_SEED, 303])
    means = []
    for _ in range(n):
        x, segs = make_inputs(rng)
        means.append(_segment_voicing(spk.teacher.forward(x)["uv"][:, 0], segs))
    return float(np.quantile(np.concatenate(means), VOICED_QUANTILE))


def synthesize_utterance(spk, rng, utt_id, lf0_dims=3):
    x, segs = make_inputs(rng)
    T = x.shape[0]
    out = spk.teacher.forward(x)
    seg_v = _segment_voicing(out["uv"][:, 0], segs) > spk.uv_threshold
    if not seg_v.any():
        # guarantee one voiced segment so F0 interpolation is defined
        seg_v[int(np.argmax(_segment_voicing(out["uv"][:, 0], segs)))] = True
    uv = np.zeros(T)
    for (a, b), v in zip(segs, seg_v):
        uv[a:b] = float(v)
    targets = {}
    for s in ("mcep", "bap"):
        raw = out[s] * spk.warp_scale[s] + spk.warp_shift[s]
        targets[s] = raw + OBS_NOISE * rng.standard_normal(raw.shape)
    lf0 = LF0_BASE + spk.lf0_shift + LF0_SPREAD * out["lf0"][:, 0]
    lf0 = lf0 + OBS_NOISE * rng.standard_normal(T)
    lf0 = interpolate_f0(lf0, uv)
    targets["lf0"] = add_deltas(lf0) if lf0_dims == 3 else lf0.reshape(-1, 1)
    targets["uv"] = uv.reshape(-1, 1)
    return Utterance(utt_id, x, {s: targets[s] for s in STREAMS})


# -- corpus ----------------------------------------------------------------


@dataclass
class CorpusManifest:
    speaker_seed: int
    distance: float
    corpus_seed: int
    lf0_dims: int
    splits: dict
    stats: NormStats
    utterances: dict

    def split(self, name):
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return [self.utterances[i] for i in self.splits[name]]

    def normalized(self, name, limit=None):
        utts = self.split(name)
        if limit is not None:
            utts = utts[:limit]
        return [self.stats.normalize(u) for u in utts]

    def manifest_dict(self):
        return {
            "format": "lnadapt-corpus/1",
            "speaker": {"seed": self.speaker_seed, "distance": self.distance},
            "corpus_seed": self.corpus_seed,
            "lf0_dims": self.lf0_dims,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "stats": self.stats.to_dict(),
        }

    def manifest_bytes(self):
        return (json.dumps(self.manifest_dict(), sort_keys=True, indent=1) + "\n").encode("utf-8")

    def manifest_hash(self):
        return hashlib.sha256(self.manifest_bytes()).hexdigest()


def synthesize_corpus(spk, n_utts, seed, n_valid=40, n_test=20, lf0_dims=3):
    """Generate ``n_utts`` utterances split train / valid / test in that order."""
    if n_utts < n_valid + n_test + 1 or n_valid < 1 or n_test < 0:
        raise ConfigError(
            f"n_utts={n_utts} too small for {n_valid} valid + {n_test} test + at least 1 train"
        )
    if lf0_dims not in (1, 3):
        raise ConfigError(f"lf0_dims must be 1 or 3, got {lf0_dims}")
    utts = {}
    ids = []
    for i in range(n_utts):
        uid = f"u{i:05d}"
        rng = np.random.default_rng([int(seed), i])
        utts[uid] = synthesize_utterance(spk, rng, uid, lf0_dims)
        ids.append(uid)
    n_train = n_utts - n_valid - n_test
    splits = {
        "train": ids[:n_train],
        "valid": ids[n_train : n_train + n_valid],
        "test": ids[n_train + n_valid :],
    }
    stats = compute_norm_stats([utts[i] for i in splits["train"]])
    return CorpusManifest(spk.seed, spk.distance, int(seed), lf0_dims, splits, stats, utts)


# -- serialization ---------------------------------------------------------

_BLOCKS = ("inputs", *STREAMS)


def utterance_to_bytes(u):
    T = u.n_frames
    arrays = [u.inputs] + [u.targets[s] for s in STREAMS]
    parts = [UTT_MAGIC, struct.pack("<III", UTT_VERSION, T, len(arrays))]
    for name, a in zip(_BLOCKS, arrays):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", a.shape[1]))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def utterance_from_bytes(data, uid):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"utterance {uid}: truncated while reading {what}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != UTT_MAGIC:
        raise ParseError(f"utterance {uid}: bad magic", 0)
    version, T, nb = struct.unpack("<III", take(12, "header"))
    if version != UTT_VERSION:
        raise ParseError(f"utterance {uid}: unsupported version {version}", 4)
    layout = []
    for _ in range(nb):
        (n,) = struct.unpack("<H", take(2, "block name length"))
        name = take(n, "block name").decode()
        (d,) = struct.unpack("<I", take(4, "block dims"))
        layout.append((name, d))
    arrays = {}
    for name, d in layout:
        arrays[name] = np.frombuffer(take(8 * T * d, f"block {name}"), dtype="<f8").reshape(T, d).astype(np.float64)
    if pos != len(data):
        raise ParseError(f"utterance {uid}: trailing bytes", pos)
    missing = [b for b in _BLOCKS if b not in arrays]
    if missing:
        raise ParseError(f"utterance {uid}: missing blocks {missing}", pos)
    return Utterance(uid, arrays["inputs"], {s: arrays[s] for s in STREAMS})


def save_corpus(manifest, directory):
    os.makedirs(os.path.join(directory, "utt"), exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), "wb") as f:
        f.write(manifest.manifest_bytes())
    for uid, u in manifest.utterances.items():
        with open(os.path.join(directory, "utt", f"{uid}.bin"), "wb") as f:
            f.write(utterance_to_bytes(u))


def load_corpus(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "rb") as f:
            d = json.loads(f.read().decode("utf-8"))
    except FileNotFoundError:
        raise LoadError(f"no corpus manifest at {path}") from None
    except ValueError as e:
        raise LoadError(f"corpus manifest {path} is not valid JSON: {e}") from None
    utts = {}
    for name in ("train", "valid", "test"):
        for uid in d["splits"][name]:
            upath = os.path.join(directory, "utt", f"{uid}.bin")
            try:
                with open(upath, "rb") as f:
                    utts[uid] = utterance_from_bytes(f.read(), uid)
            except FileNotFoundError:
                raise LoadError(f"missing utterance file for id {uid}: {upath}") from None
    return CorpusManifest(
        d["speaker"]["seed"],
        d["speaker"]["distance"],
        d["corpus_seed"],
        d["lf0_dims"],
        {k: list(v) for k, v in d["splits"].items()},
        NormStats.from_dict(d["stats"]),
        utts,
    )
