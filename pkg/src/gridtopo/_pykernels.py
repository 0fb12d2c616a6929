"""Pure numpy implementations of the hot kernels.

Semantics match ``_ckernels.pyx`` exactly; results agree to rounding.
"""
import numpy as np

EARTH_RADIUS_M = 6371008.8


def haversine_matrix(lat1, lon1, lat2, lon2, radius=EARTH_RADIUS_M):
    """Great-circle distances in meters, shape ``(len(lat1), len(lat2))``."""
    p1 = np.radians(np.asarray(lat1, dtype=float))[:, None]
    l1 = np.radians(np.asarray(lon1, dtype=float))[:, None]
    p2 = np.radians(np.asarray(lat2, dtype=float))[None, :]
    l2 = np.radians(np.asarray(lon2, dtype=float))[None, :]
    sdp = np.sin((p2 - p1) * 0.5)
    sdl = np.sin((l2 - l1) * 0.5)
    a = sdp * sdp + np.cos(p1) * np.cos(p2) * (sdl * sdl)
    return 2.0 * radius * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def pearson_pair(x, y, min_overlap):
    """Pearson over pairwise-complete samples; NaN when evidence is insufficient."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = ~(np.isnan(x) | np.isnan(y))
    n = int(m.sum())
    if n < max(min_overlap, 2):
        return np.nan
    xs, ys = x[m], y[m]
    dx = xs - xs.sum() / n
    dy = ys - ys.sum() / n
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return np.nan
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def pearson_matrix(X, min_overlap):
    """All-pairs Pearson matrix over pairwise-complete samples."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    out = np.full((n, n), np.nan)
    if n == 0:
        return out
    nan = np.isnan(X)
    if not nan.any():
        if X.shape[1] < max(min_overlap, 2):
            return out
        D = X - (X.sum(axis=1) / X.shape[1])[:, None]
        G = D @ D.T
        diag = np.diag(G).copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            R = G / np.sqrt(np.outer(diag, diag))
        R[diag == 0.0, :] = np.nan
        R[:, diag == 0.0] = np.nan
        return np.clip(R, -1.0, 1.0)
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = pearson_pair(X[i], X[j], min_overlap)
    return out


def _entropy_from_counts(counts, n):
    # sum over distinct count values in ascending order; independent of cell order
    cc = np.bincount(counts[counts > 1], minlength=n + 1)
    v = np.nonzero(cc)[0]
    s = 0.0
    for val in v:
        s += cc[val] * (val * np.log(val))
    return np.log(n) - s / n


def _bin_index(x, lo, hi, bins):
    idx = np.floor(((x - lo) / (hi - lo)) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def hist_entropy(x, bins):
    """Plug-in entropy (nats) of an equal-width histogram over x's own range."""
    x = np.asarray(x, dtype=float)
    n = x.size
    lo, hi = x.min(), x.max()
    if hi == lo:
        return 0.0
    counts = np.bincount(_bin_index(x, lo, hi, bins), minlength=bins)
    return float(_entropy_from_counts(counts, n))


def hist_mi(x, y, bins):
    """Plug-in mutual information (nats) from a joint equal-width histogram.

    Inputs must be finite and equal length. Returns ``(mi, degenerate)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    xlo, xhi = x.min(), x.max()
    ylo, yhi = y.min(), y.max()
    if xhi == xlo or yhi == ylo:
        return 0.0, True
    ix = _bin_index(x, xlo, xhi, bins)
    iy = _bin_index(y, ylo, yhi, bins)
    cx = np.bincount(ix, minlength=bins)
    cy = np.bincount(iy, minlength=bins)
    cxy = np.bincount(ix * bins + iy, minlength=bins * bins)
    hx = _entropy_from_counts(cx, n)
    hy = _entropy_from_counts(cy, n)
    hxy = _entropy_from_counts(cxy, n)
    return float(max(0.0, (hx + hy) - hxy)), False


def lloyd_assign(X, C):
    """Nearest-centroid labels (lowest index wins ties) and squared distances."""
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(X.shape[0]), labels]
