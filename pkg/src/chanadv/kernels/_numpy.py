"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature;
tests hold both to the same results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n c h w 3 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1. x: [N,C,H,W], w: [O,C,3,3]."""
    n, _, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x)
    y = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(y.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, gy):
    n, c, h, wd = x.shape
    o = w.shape[0]
    gy2 = gy.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
    cols = _im2col(x)
    gw = (gy2.T @ cols).reshape(w.shape)
    gb = gy2.sum(axis=0)
    gcols = (gy2 @ w.reshape(o, -1)).reshape(n, h, wd, c, 3, 3)
    gxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]), gw, gb


def _windows(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    v = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Returns (y, arg) with arg in 0..3, first max wins."""
    win = _windows(x)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg.astype(np.int8)


def maxpool2_backward(gy, arg, in_shape):
    n, c, h, w = in_shape
    ho, wo = h // 2, w // 2
    gwin = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(gwin, arg[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = np.zeros(in_shape)
    gx[:, :, :2 * ho, :2 * wo] = (
        gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return gx


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_forward(xw, wh, h0, c0):
    """Run the recurrence given precomputed input projections.

    xw: [M,T,4H] holds x_t @ W_x + b with gate blocks ordered (i, f, g, o).
    Returns hidden states, cell states and activated gates, all time-major
    inside the batch axis ([M,T,*]).
    """
    m, t_len, h4 = xw.shape
    hd = h4 // 4
    hs = np.empty((m, t_len, hd))
    cs = np.empty((m, t_len, hd))
    gates = np.empty((m, t_len, h4))
    h, c = h0, c0
    for t in range(t_len):
        z = xw[:, t] + h @ wh
        a = np.empty_like(z)
        a[:, :2 * hd] = _sigmoid(z[:, :2 * hd])
        a[:, 2 * hd:3 * hd] = np.tanh(z[:, 2 * hd:3 * hd])
        a[:, 3 * hd:] = _sigmoid(z[:, 3 * hd:])
        c = a[:, hd:2 * hd] * c + a[:, :hd] * a[:, 2 * hd:3 * hd]
        h = a[:, 3 * hd:] * np.tanh(c)
        hs[:, t] = h
        cs[:, t] = c
        gates[:, t] = a
    return hs, cs, gates


def lstm_backward(ghs, hs, cs, gates, wh, h0, c0):
    """Backpropagation through time. Returns (g_xw, g_wh, g_h0, g_c0)."""
    m, t_len, hd = hs.shape
    gxw = np.empty((m, t_len, 4 * hd))
    gwh = np.zeros_like(wh)
    dh_next = np.zeros((m, hd))
    dc_next = np.zeros((m, hd))
    for t in range(t_len - 1, -1, -1):
        a = gates[:, t]
        i, f, g, o = a[:, :hd], a[:, hd:2 * hd], a[:, 2 * hd:3 * hd], a[:, 3 * hd:]
        c_prev = cs[:, t - 1] if t > 0 else c0
        h_prev = hs[:, t - 1] if t > 0 else h0
        tc = np.tanh(cs[:, t])
        dh = ghs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        gxw[:, t] = dz
        gwh += h_prev.T @ dz
        dh_next = dz @ wh.T
        dc_next = dc * f
    return gxw, gwh, dh_next, dc_next
