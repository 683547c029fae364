"""Pure-numpy LSTM recurrence, used when the compiled kernels are unavailable.

Gate blocks are stacked in the order input, forget, output, candidate.
"""
import numpy as np


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def lstm_scan_forward(xproj, wh):
    """Run the recurrence over precomputed input projections.

    ``xproj`` is (T, 4h) and already includes the gate biases.
    Returns hidden states, cell states and activated gates.
    """
    T, G = xproj.shape
    h = G // 4
    hs = np.zeros((T, h))
    cs = np.zeros((T, h))
    acts = np.zeros((T, G))
    h_prev = np.zeros(h)
    c_prev = np.zeros(h)
    for t in range(T):
        z = xproj[t] + wh @ h_prev
        a = acts[t]
        a[: 3 * h] = _sigmoid(z[: 3 * h])
        a[3 * h :] = np.tanh(z[3 * h :])
        c_prev = a[h : 2 * h] * c_prev + a[:h] * a[3 * h :]
        h_prev = a[2 * h : 3 * h] * np.tanh(c_prev)
        cs[t] = c_prev
        hs[t] = h_prev
    return hs, cs, acts


def lstm_scan_backward(dhs, acts, cs, wh):
    """Backpropagate through time; returns gradients w.r.t. gate pre-activations."""
    T, G = acts.shape
    h = G // 4
    dz = np.zeros((T, G))
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    zero = np.zeros(h)
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i = a[:h]
        f = a[h : 2 * h]
        o = a[2 * h : 3 * h]
        g = a[3 * h :]
        tc = np.tanh(cs[t])
        c_prev = cs[t - 1] if t > 0 else zero
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:h] = dc * g * i * (1.0 - i)
        d[h : 2 * h] = dc * c_prev * f * (1.0 - f)
        d[2 * h : 3 * h] = dh * tc * o * (1.0 - o)
        d[3 * h :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = wh.T @ d
    return dz
