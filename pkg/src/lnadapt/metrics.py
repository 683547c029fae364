"""Objective measures: MCD, F0 RMSE, U/V error and overall MSE."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MCD_CONST = 10.0 / math.log(10.0)
UV_THRESHOLD = 0.5
CSV_HEADER = "system,n_adapt,mcd,f0_rmse,uv_err,mse,n_frames"


@dataclass
class MetricsReport:
    mcd: float
    f0_rmse: float
    uv_error: float
    overall_mse: float
    n_frames: int
    # frames voiced in both reference and prediction; 0 means f0_rmse is undefined
    f0_frames: int = 0

    def csv_row(self, system, n_adapt):
        return ",".join(
            [
                system,
                str(n_adapt),
                repr(float(self.mcd)),
                repr(float(self.f0_rmse)),
                repr(float(self.uv_error)),
                repr(float(self.overall_mse)),
                str(int(self.n_frames)),
            ]
        )


def _frames(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _column(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, 0] if x.ndim == 2 else x


def _same_length(a, b, what):
    if len(a) != len(b):
        raise ShapeError(f"{what}: reference has {len(a)} frames, hypothesis has {len(b)}")


def mcd(ref, hyp):
    """Mean mel-cepstral distortion in dB, excluding the energy coefficient c0."""
    ref, hyp = _frames(ref), _frames(hyp)
    _same_length(ref, hyp, "mcd")
    if ref.shape != hyp.shape:
        raise ShapeError(f"mcd: dims differ, {ref.shape[1]} vs {hyp.shape[1]}")
    if len(ref) == 0:
        return 0.0
    d = ref[:, 1:] - hyp[:, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(d * d, axis=1))))


def voiced(uv):
    return _column(uv) > UV_THRESHOLD


def f0_rmse(ref_lf0, hyp_lf0, ref_uv, hyp_uv):
    """RMSE in Hz of ``exp(lf0)`` over frames voiced in both streams.

    Only the static (first) column of a multi-column lf0 stream is used.
    Returns 0.0 when no frame is voiced in both.
    """
    ref_lf0, hyp_lf0 = _column(ref_lf0), _column(hyp_lf0)
    ref_uv, hyp_uv = voiced(ref_uv), voiced(hyp_uv)
    for other, name in ((hyp_lf0, "hyp lf0"), (ref_uv, "ref uv"), (hyp_uv, "hyp uv")):
        _same_length(ref_lf0, other, f"f0_rmse ({name})")
    both = ref_uv & hyp_uv
    if not both.any():
        return 0.0
    diff = np.exp(ref_lf0[both]) - np.exp(hyp_lf0[both])
    return float(np.sqrt(np.mean(diff * diff)))


def uv_error(ref_uv, hyp_uv):
    """Fraction of frames whose thresholded prediction disagrees with the flag.

    A prediction is voiced only when strictly greater than 0.5.
    """
    ref, hyp = voiced(ref_uv), voiced(hyp_uv)
    _same_length(ref, hyp, "uv_error")
    if len(ref) == 0:
        return 0.0
    return float(np.mean(ref != hyp))


def mse_per_stream(preds, targets):
    if set(preds) != set(targets):
        raise ShapeError(f"stream sets differ: {sorted(preds)} vs {sorted(targets)}")
    out = {}
    for s, p in preds.items():
        p = _frames(p)
        t = _frames(targets[s])
        if p.shape != t.shape:
            raise ShapeError(f"stream {s}: prediction {p.shape} vs target {t.shape}")
        out[s] = float(np.mean((p - t) ** 2)) if p.size else 0.0
    return out


def overall_mse(preds, targets, stats=None):
    """Equal-weight mean over streams of per-stream MSE in normalized space.

    With ``stats`` the inputs are taken as de-normalized and normalized first.
    """
    if stats is not None:
        preds = stats.normalize_streams(preds)
        targets = stats.normalize_streams(targets)
    per = mse_per_stream(preds, targets)
    return float(sum(per.values()) / len(per)) if per else 0.0
