"""Masked GRU scan with reverse-mode gradients (float64, batched).

Gate layout in the packed weights is [update | reset | candidate]:

    z  = sigmoid(x Wx_z + h Wh_z + b_z)
    r  = sigmoid(x Wx_r + h Wh_r + b_r)
    n  = tanh(x Wx_n + (r * h) Wh_n + b_n)
    h' = (1 - z) * h + z * n

Masked steps (padding) carry the previous state through unchanged, so
trailing padding never touches the states of real positions in either
direction.
"""

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(X, M, Wx, Wh, b, reverse=False):
    """X: (B, T, d), M: (B, T) in {0, 1}. Returns states (B, T, h) and a cache."""
    B, T, _ = X.shape
    H = Wh.shape[0]
    A = X @ Wx + b
    h = np.zeros((B, H))
    Hs = np.empty((B, T, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    cache = []
    Wh_zr = Wh[:, :2 * H]
    Wh_n = Wh[:, 2 * H:]
    for t in steps:
        a = A[:, t]
        zr = sigmoid(a[:, :2 * H] + h @ Wh_zr)
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        n = np.tanh(a[:, 2 * H:] + rh @ Wh_n)
        m = M[:, t:t + 1]
        h_new = m * ((1.0 - z) * h + z * n) + (1.0 - m) * h
        cache.append((t, h, z, r, rh, n, m))
        h = h_new
        Hs[:, t] = h
    return Hs, (X, Wx, Wh, cache)


def gru_backward(dHs, state):
    """Gradients w.r.t. (X, Wx, Wh, b) given upstream dL/dHs."""
    X, Wx, Wh, cache = state
    B, T, _ = X.shape
    H = Wh.shape[0]
    Wh_zr = Wh[:, :2 * H]
    Wh_n = Wh[:, 2 * H:]
    dA = np.zeros((B, T, 3 * H))
    dWh = np.zeros_like(Wh)
    dh_next = np.zeros((B, H))
    for t, h, z, r, rh, n, m in reversed(cache):
        dh = dHs[:, t] + dh_next
        dh_new = m * dh
        dh_prev = (1.0 - m) * dh + dh_new * (1.0 - z)
        dz = dh_new * (n - h)
        dn = dh_new * z
        dan = dn * (1.0 - n * n)
        drh = dan @ Wh_n.T
        dWh[:, 2 * H:] += rh.T @ dan
        dr = drh * h
        dh_prev += drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dazr = np.concatenate([daz, dar], axis=1)
        dWh[:, :2 * H] += h.T @ dazr
        dh_prev += dazr @ Wh_zr.T
        dA[:, t, :2 * H] = dazr
        dA[:, t, 2 * H:] = dan
        dh_next = dh_prev
    flatA = dA.reshape(B * T, 3 * H)
    dWx = X.reshape(B * T, -1).T @ flatA
    db = flatA.sum(axis=0)
    dX = dA @ Wx.T
    return dX, dWx, dWh, db
