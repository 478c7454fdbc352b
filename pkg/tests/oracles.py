"""Reference computations that share no code with the package under test."""
import math

import numpy as np


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def direct_recursion(a, b, u):
    """y[N] = sum a_i u[N-i] + sum b_j y[N-j], zero history."""
    y = []
    for n in range(len(u)):
        acc = 0.0
        for i, ai in enumerate(a):
            if n - i >= 0:
                acc += ai * u[n - i]
        for j, bj in enumerate(b, start=1):
            if n - j >= 0:
                acc += bj * y[n - j]
        y.append(acc)
    return np.array(y)


def scalar_lstm_step(W, U, b, x, h, c):
    """One LSTM step with explicit per-unit loops. Gate blocks i, f, g, o."""
    n = len(h)
    z = []
    for r in range(4 * n):
        acc = b[r]
        for k in range(len(x)):
            acc += W[r][k] * x[k]
        for k in range(n):
            acc += U[r][k] * h[k]
        z.append(acc)
    h_new, c_new = [], []
    for j in range(n):
        i = sigmoid(z[j])
        f = sigmoid(z[n + j])
        g = math.tanh(z[2 * n + j])
        o = sigmoid(z[3 * n + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def scalar_forward(net, seq):
    """Predictions for one sequence (time x in_dim) using nested lists."""
    layers = [(p.W.tolist(), p.U.tolist(), p.b.tolist()) for p in net.lstm]
    hs = [[0.0] * p.units for p in net.lstm]
    cs = [[0.0] * p.units for p in net.lstm]
    Wd, bd = net.dense.W.tolist(), net.dense.b.tolist()
    out = []
    for x in np.asarray(seq).tolist():
        for k, (W, U, b) in enumerate(layers):
            hs[k], cs[k] = scalar_lstm_step(W, U, b, x, hs[k], cs[k])
            x = hs[k]
        out.append([bd[r] + sum(Wd[r][k] * x[k] for k in range(len(x))) for r in range(len(bd))])
    return out


def naive_mse(pred, labels) -> float:
    p = np.asarray(pred).ravel().tolist()
    y = np.asarray(labels).ravel().tolist()
    return math.fsum((a - b) ** 2 for a, b in zip(p, y)) / len(p)


def finite_difference_grads(loss_fn, tensors, h=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``tensors``
    (perturbed in place and restored)."""
    out = []
    for arr in tensors:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_fn()
            arr[idx] = orig - h
            lm = loss_fn()
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ||a - n|| / max(||a||, ||n||); 0 if both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
