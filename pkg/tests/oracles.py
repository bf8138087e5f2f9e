"""Independent slow references, written against the math rather than the package."""
import math

import numpy as np


def reference_loop(s, mask, eta, nu, h=(1.0, 0.0), f=math.sin):
    """Chip-time recurrence on a flat history; zero before t = 0."""
    s = [float(v) for v in s]
    mask = [float(v) for v in mask]
    N = len(mask)
    X = [0.0] * (len(s) * N)

    def J(t):
        return s[t // N] * mask[t % N] if t >= 0 else 0.0

    def past(t):
        return X[t] if t >= 0 else 0.0

    for t in range(len(X)):
        X[t] = sum(h[u] * f(eta * past(t - N + u) + nu * J(t - u)) for u in (0, 1) if h[u])
    return np.array(X[-N:])


def dense_dft_matrix(n, d=1):
    """Columns 0, d, 2d, ... of the 1/n-scaled DFT matrix."""
    rows = np.arange(n)[:, None]
    cols = np.arange(0, n, d)[None, :]
    return np.exp(-2j * np.pi * rows * cols / n) / n


def gd_ridge(X, Y, lam, steps=200000, tol=1e-14):
    """Gradient descent on ||X W - Y||^2 + lam ||W||^2 with a safe fixed step."""
    A = X.T @ X + lam * np.eye(X.shape[1])
    b = X.T @ Y
    step = 1.0 / np.linalg.eigvalsh(A).max()
    W = np.zeros((X.shape[1], Y.shape[1]))
    for _ in range(steps):
        g = A @ W - b
        W -= step * g
        if np.abs(g).max() < tol:
            break
    return W.T


def forward_oracle(branches, merge, head, x):
    """Per-branch loops written out longhand."""
    parts = []
    for W, gamma, beta, eps in branches:
        z = [sum(x[i] * W[i, j] for i in range(len(x))) for j in range(W.shape[1])]
        mu = sum(z) / len(z)
        var = sum((v - mu) ** 2 for v in z) / len(z)
        parts += [gamma[j] * (z[j] - mu) / math.sqrt(var + eps) + beta[j] for j in range(len(z))]
    v = [sum(parts[r] * merge[r, c] for r in range(len(parts))) for c in range(merge.shape[1])]
    if head == "softmax":
        m = max(v)
        e = [math.exp(a - m) for a in v]
        return np.array([a / sum(e) for a in e])
    return np.array([max(a, 0.0) for a in v])
