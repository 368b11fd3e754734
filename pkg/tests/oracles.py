"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from deblurprior import classifier


def conv_matrix(k, shape):
    """Dense periodic convolution matrix, built entry by entry:
    (I * k)[i, j] = sum_{a,b} k[a, b] I[(i - a + r) mod h, (j - b + r) mod w]."""
    h, w = shape
    r = k.shape[0] // 2
    A = np.zeros((h * w, h * w))
    for i in range(h):
        for j in range(w):
            for a in range(k.shape[0]):
                for b in range(k.shape[1]):
                    A[i * w + j, ((i - a + r) % h) * w + (j - b + r) % w] += k[a, b]
    return A


def diff_matrices(shape):
    h, w = shape
    Dh = np.zeros((h * w, h * w))
    Dv = np.zeros((h * w, h * w))
    for i in range(h):
        for j in range(w):
            p = i * w + j
            Dh[p, p] = Dv[p, p] = -1
            Dh[p, i * w + (j + 1) % w] += 1
            Dv[p, ((i + 1) % h) * w + j] += 1
    return Dh, Dv


def dense_quadratic(B, k, g, u, alpha, beta):
    """Normal equations of ||Kx - b||^2 + alpha sum_d ||D_d x - g_d||^2 + beta ||x - u||^2."""
    n = B.size
    K = conv_matrix(k, B.shape)
    Dh, Dv = diff_matrices(B.shape)
    A = K.T @ K + alpha * (Dh.T @ Dh + Dv.T @ Dv) + beta * np.eye(n)
    rhs = K.T @ B.ravel() + alpha * (Dh.T @ g[0].ravel() + Dv.T @ g[1].ravel()) + beta * u.ravel()
    return A, rhs


def random_instance(seed, shape=(16, 16), ks=5):
    rng = np.random.default_rng(seed)
    k = rng.random((ks, ks))
    k /= k.sum()
    B = rng.random(shape)
    g = (rng.normal(0, 0.1, shape), rng.normal(0, 0.1, shape))
    u = rng.random(shape)
    alpha = float(rng.uniform(0.01, 10))
    beta = float(rng.uniform(0.01, 10))
    return B, k, g, u, alpha, beta


def brute_force_l0(gh, gv, alpha, mu):
    """Per pixel, compare the two candidates g = grad I (cost mu) and g = 0."""
    cost_keep = np.full(gh.shape, mu)
    cost_zero = alpha * (gh * gh + gv * gv)
    keep = cost_keep <= cost_zero
    return np.where(keep, gh, 0.0), np.where(keep, gv, 0.0)


def fd_input_gradient(model, x, idx, step):
    """Central differences of f at the pixels ``idx``."""
    out = []
    for i, j in idx:
        up, down = x.copy(), x.copy()
        up[i, j] += step
        down[i, j] -= step
        out.append((classifier.f(model, up) - classifier.f(model, down)) / (2 * step))
    return np.array(out)


def random_model(seed, dtype=np.float32):
    """Xavier weights plus N(0, 0.05) biases, so activations stay away from zero."""
    m = classifier.build_model(seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    for layer in m.layers:
        if layer.params is not None:
            layer.params.bias[...] = rng.normal(0, 0.05, size=layer.params.bias.shape)
    return m
