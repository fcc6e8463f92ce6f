"""Hot numeric kernels: squared-L2 scans and LSTM sequence recurrences.

Each kernel exists in two interchangeable flavours:

* a pure-numpy implementation (always available), and
* a numba ``@njit`` compilation of the same loop body.

The active flavour is chosen once at import time: numba is used when it is
importable and the environment variable ``DEEPSEEK_NUMBA`` is not set to
``0``/``off``/``false``. Both flavours compute the same quantities in f64;
cross-flavour agreement is covered by tests and ``benchmarks/bench_kernels.py``
times them against each other.

LSTM layout conventions (fixed; checkpoints depend on them):
  gate weights ``w_g`` have shape (4h, e+h) with rows packed in the order
  i, f, g, o; the per-step input to the gates is ``concat(x_t, h_prev)``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

_FLAG = os.environ.get("DEEPSEEK_NUMBA", "1").strip().lower()
NUMBA_ENABLED = HAS_NUMBA and _FLAG not in ("0", "off", "false")


def backend() -> str:
    """Name of the active kernel flavour: 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# squared-L2 scan
# ---------------------------------------------------------------------------

def numpy_sq_l2_scan(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared L2 distance from q to every row of mat, shape (n,)."""
    diff = mat - q
    return np.einsum("ij,ij->i", diff, diff)


def _loop_sq_l2_scan(mat, q):
    n, d = mat.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            delta = mat[i, j] - q[j]
            acc += delta * delta
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# LSTM sequence forward / backward
# ---------------------------------------------------------------------------

def _lstm_seq_forward(xs, h0, c0, w_g, b_g):
    """Run the recurrence over a whole sequence.

    xs: (T, e) step inputs; h0/c0: (h,) initial state.
    Returns hs (T, h), cs (T, h) and the activated gates (T, 4h) needed by
    the backward pass.
    """
    steps = xs.shape[0]
    e = xs.shape[1]
    h = h0.shape[0]
    hs = np.empty((steps, h))
    cs = np.empty((steps, h))
    gates = np.empty((steps, 4 * h))
    xc = np.empty(e + h)
    h_prev = h0.copy()
    c_prev = c0.copy()
    for t in range(steps):
        xc[:e] = xs[t]
        xc[e:] = h_prev
        a = np.dot(w_g, xc) + b_g
        gi = 1.0 / (1.0 + np.exp(-a[:h]))
        gf = 1.0 / (1.0 + np.exp(-a[h:2 * h]))
        gg = np.tanh(a[2 * h:3 * h])
        go = 1.0 / (1.0 + np.exp(-a[3 * h:]))
        c_prev = gf * c_prev + gi * gg
        h_prev = go * np.tanh(c_prev)
        gates[t, :h] = gi
        gates[t, h:2 * h] = gf
        gates[t, 2 * h:3 * h] = gg
        gates[t, 3 * h:] = go
        cs[t] = c_prev
        hs[t] = h_prev
    return hs, cs, gates


def _lstm_seq_backward(xs, h0, c0, hs, cs, gates, w_g, dhs):
    """Backprop through the recurrence.

    dhs: (T, h) upstream gradient on each step's hidden output.
    Returns dxs (T, e), dw_g (4h, e+h), db_g (4h,).
    """
    steps = xs.shape[0]
    e = xs.shape[1]
    h = h0.shape[0]
    dxs = np.empty((steps, e))
    dw_g = np.zeros_like(w_g)
    db_g = np.zeros(4 * h)
    da = np.empty(4 * h)
    xc = np.empty(e + h)
    dh = np.zeros(h)
    dc = np.zeros(h)
    for t in range(steps - 1, -1, -1):
        dh = dh + dhs[t]
        gi = gates[t, :h]
        gf = gates[t, h:2 * h]
        gg = gates[t, 2 * h:3 * h]
        go = gates[t, 3 * h:]
        tanh_c = np.tanh(cs[t])
        c_prev = cs[t - 1] if t > 0 else c0
        h_prev = hs[t - 1] if t > 0 else h0
        do = dh * tanh_c
        dc = dc + dh * go * (1.0 - tanh_c * tanh_c)
        da[:h] = dc * gg * gi * (1.0 - gi)
        da[h:2 * h] = dc * c_prev * gf * (1.0 - gf)
        da[2 * h:3 * h] = dc * gi * (1.0 - gg * gg)
        da[3 * h:] = do * go * (1.0 - go)
        xc[:e] = xs[t]
        xc[e:] = h_prev
        dw_g += np.outer(da, xc)
        db_g += da
        dxc = np.dot(da, w_g)
        dxs[t] = dxc[:e]
        dh = dxc[e:]
        dc = dc * gf
    return dxs, dw_g, db_g


numpy_lstm_seq_forward = _lstm_seq_forward
numpy_lstm_seq_backward = _lstm_seq_backward

if NUMBA_ENABLED:
    _jit = numba.njit(cache=True, nogil=True)
    sq_l2_scan = _jit(_loop_sq_l2_scan)
    lstm_seq_forward = _jit(_lstm_seq_forward)
    lstm_seq_backward = _jit(_lstm_seq_backward)
else:
    sq_l2_scan = numpy_sq_l2_scan
    lstm_seq_forward = numpy_lstm_seq_forward
    lstm_seq_backward = numpy_lstm_seq_backward
