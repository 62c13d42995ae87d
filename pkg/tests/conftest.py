import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def conv_loops(x, k, b, padding):
    """Direct-summation correlation, independent of the im2col path."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        xp = np.zeros((h + 2 * ph, w + 2 * pw, cin))
        xp[ph:ph + h, pw:pw + w] = x
        ho, wo = h, w
    else:
        xp, ho, wo = x, h - kh + 1, w - kw + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for c in range(cout):
                s = b[c]
                for u in range(kh):
                    for v in range(kw):
                        for ci in range(cin):
                            s += xp[i + u, j + v, ci] * k[u, v, ci, c]
                out[i, j, c] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
