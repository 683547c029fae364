"""Selects the LSTM recurrence backend at import time.

The compiled extension is preferred. Set ``LNADAPT_PURE_PYTHON=1`` to force
the numpy fallback (useful for benchmarking and for platforms without a
C compiler).
"""
import os

from . import _scan_py

BACKEND = "python"
lstm_scan_forward = _scan_py.lstm_scan_forward
lstm_scan_backward = _scan_py.lstm_scan_backward

if os.environ.get("LNADAPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan
    except ImportError:  # extension not built
        _scan = None
    if _scan is not None:
        BACKEND = "cython"
        lstm_scan_forward = _scan.lstm_scan_forward
        lstm_scan_backward = _scan.lstm_scan_backward

__all__ = ["BACKEND", "lstm_scan_forward", "lstm_scan_backward"]
