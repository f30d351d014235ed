"""Shared numerical oracles for the tests."""

import numpy as np


def masks(fmap, X):
    """Flattened ReLU activation pattern (empty for smooth maps)."""
    _, cache = fmap.forward(X)
    kind = fmap.spec.kind
    if kind == "random_mlp":
        return np.concatenate([m.ravel() for m in cache])
    if kind == "random_conv":
        return np.concatenate([e[2].ravel() for c in cache for e in c if e[0] == "conv"])
    return np.zeros(0, dtype=bool)


def central_diff(fun, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def kink_free(fmap, X, h=1e-5):
    """True when no ReLU flips within +-h along any coordinate."""
    base = masks(fmap, X)
    if base.size == 0:
        return True
    X = np.array(X, dtype=np.float64)
    for idx in np.ndindex(X.shape):
        for s in (h, -h):
            Y = X.copy()
            Y[idx] += s
            if not np.array_equal(masks(fmap, Y), base):
                return False
    return True


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES = []


def report(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
