"""Compiled inner loops for grid interpolation, hashing and gradient scatter.

Every kernel is single-threaded and visits samples in index order, so
scatter results are bit-reproducible.
"""

import numba as nb
import numpy as np

HASH_PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)

_jit = nb.njit(cache=True, nogil=True)


@_jit
def _cell(u, n_vertices):
    c = int(np.floor(u))
    if c < 0:
        c = 0
    elif c > n_vertices - 2:
        c = n_vertices - 2
    return c, u - c


@_jit
def dense_interp(raw, shape, u):
    """Multi-linear interpolation of a flat x-fastest scalar grid at continuous vertex coords ``u``."""
    n, d = u.shape
    out = np.empty(n, dtype=raw.dtype)
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    for s in range(n):
        for k in range(d):
            base[k], frac[k] = _cell(u[s, k], shape[k])
        acc = 0.0
        for corner in range(1 << d):
            w = 1.0
            idx = 0
            stride = 1
            for k in range(d):
                bit = (corner >> k) & 1
                w *= frac[k] if bit else 1.0 - frac[k]
                idx += (base[k] + bit) * stride
                stride *= shape[k]
            acc += w * raw[idx]
        out[s] = acc
    return out


@_jit
def dense_scatter(grad, touched, shape, u, upstream):
    n, d = u.shape
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    for s in range(n):
        g = upstream[s]
        if g == 0.0:
            continue
        for k in range(d):
            base[k], frac[k] = _cell(u[s, k], shape[k])
        for corner in range(1 << d):
            w = 1.0
            idx = 0
            stride = 1
            for k in range(d):
                bit = (corner >> k) & 1
                w *= frac[k] if bit else 1.0 - frac[k]
                idx += (base[k] + bit) * stride
                stride *= shape[k]
            if w != 0.0:
                grad[idx] += w * g
                touched[idx] = True


@_jit
def dense_max_merge(raw, shape, u, value):
    """Raise the 2^d vertices of each containing cell to at least ``value``."""
    n, d = u.shape
    base = np.empty(d, dtype=np.int64)
    for s in range(n):
        for k in range(d):
            base[k], _ = _cell(u[s, k], shape[k])
        for corner in range(1 << d):
            idx = 0
            stride = 1
            for k in range(d):
                idx += (base[k] + ((corner >> k) & 1)) * stride
                stride *= shape[k]
            if raw[idx] < value:
                raw[idx] = value


@_jit
def hash_slot(v, res, table_size, dense):
    d = v.shape[0]
    if dense:
        idx = 0
        stride = 1
        for k in range(d):
            idx += v[k] * stride
            stride *= res + 1
        return idx
    h = np.uint64(0)
    for k in range(d):
        h ^= np.uint64(v[k]) * HASH_PRIMES[k]
    return np.int64(h & np.uint64(table_size - 1))


@_jit
def hash_encode(tables, table_size, resolutions, dense, x):
    """Concatenated per-level multi-linear hash-grid features for points ``x`` in [0,1]^d."""
    n, d = x.shape
    levels = resolutions.shape[0]
    c = tables.shape[1]
    out = np.zeros((n, levels * c), dtype=tables.dtype)
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    v = np.empty(d, dtype=np.int64)
    for s in range(n):
        for lvl in range(levels):
            res = resolutions[lvl]
            for k in range(d):
                base[k], frac[k] = _cell(x[s, k] * res, res + 1)
            for corner in range(1 << d):
                w = 1.0
                for k in range(d):
                    bit = (corner >> k) & 1
                    w *= frac[k] if bit else 1.0 - frac[k]
                    v[k] = base[k] + bit
                if w == 0.0:
                    continue
                row = lvl * table_size + hash_slot(v, res, table_size, dense[lvl])
                for j in range(c):
                    out[s, lvl * c + j] += w * tables[row, j]
    return out


@_jit
def hash_scatter(grad, touched, table_size, resolutions, dense, x, upstream):
    n, d = x.shape
    levels = resolutions.shape[0]
    c = grad.shape[1]
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    v = np.empty(d, dtype=np.int64)
    for s in range(n):
        for lvl in range(levels):
            nonzero = False
            for j in range(c):
                if upstream[s, lvl * c + j] != 0.0:
                    nonzero = True
            if not nonzero:
                continue
            res = resolutions[lvl]
            for k in range(d):
                base[k], frac[k] = _cell(x[s, k] * res, res + 1)
            for corner in range(1 << d):
                w = 1.0
                for k in range(d):
                    bit = (corner >> k) & 1
                    w *= frac[k] if bit else 1.0 - frac[k]
                    v[k] = base[k] + bit
                if w == 0.0:
                    continue
                row = lvl * table_size + hash_slot(v, res, table_size, dense[lvl])
                for j in range(c):
                    grad[row, j] += w * upstream[s, lvl * c + j]
                touched[row] = True


@_jit
def sparse_adam(param, m, v, grad, rows, lr, beta1, beta2, eps, bc1, bc2):
    """Adam update restricted to ``rows`` of 2-D (or row-flattened) arrays."""
    c = param.shape[1]
    for r in rows:
        for j in range(c):
            g = grad[r, j]
            m[r, j] = beta1 * m[r, j] + (1.0 - beta1) * g
            v[r, j] = beta2 * v[r, j] + (1.0 - beta2) * g * g
            param[r, j] -= lr * (m[r, j] / bc1) / (np.sqrt(v[r, j] / bc2) + eps)
            grad[r, j] = 0.0


@_jit
def _interp_one(raw, shape, u, d, base, frac):
    for k in range(d):
        base[k], frac[k] = _cell(u[k], shape[k])
    acc = 0.0
    for corner in range(1 << d):
        w = 1.0
        idx = 0
        stride = 1
        for k in range(d):
            bit = (corner >> k) & 1
            w *= frac[k] if bit else 1.0 - frac[k]
            idx += (base[k] + bit) * stride
            stride *= shape[k]
        acc += w * raw[idx]
    return acc


@_jit
def density_field(x, fg_lo, fg_hi, fg_raw, fg_shape, bg_lo, bg_hi, bg_raw, bg_shape, background):
    """Activated density at world points: fg grid, warped bg grid, zero outside (or beyond fg without bg)."""
    n = x.shape[0]
    out = np.zeros(n)
    u = np.empty(4)
    base = np.empty(4, dtype=np.int64)
    frac = np.empty(4)
    center = 0.5 * (fg_lo + fg_hi)
    half = 0.5 * (fg_hi - fg_lo)
    for s in range(n):
        in_fg = True
        in_bg = True
        for k in range(3):
            if x[s, k] < fg_lo[k] or x[s, k] > fg_hi[k]:
                in_fg = False
            if x[s, k] < bg_lo[k] or x[s, k] > bg_hi[k]:
                in_bg = False
        if in_fg:
            for k in range(3):
                u[k] = (x[s, k] - fg_lo[k]) / (fg_hi[k] - fg_lo[k]) * (fg_shape[k] - 1)
                u[k] = min(max(u[k], 0.0), fg_shape[k] - 1.0)
            raw = _interp_one(fg_raw, fg_shape, u, 3, base, frac)
        elif in_bg and background:
            r = 1.0
            for k in range(3):
                r = max(r, abs((x[s, k] - center[k]) / half[k]))
            for k in range(3):
                u[k] = ((x[s, k] - center[k]) / half[k] / r + 1.0) * 0.5 * (bg_shape[k] - 1)
            u[3] = 1.0 / r * (bg_shape[3] - 1)
            raw = _interp_one(bg_raw, bg_shape, u, 4, base, frac)
        else:
            continue
        # softplus, overflow-safe
        out[s] = max(raw, 0.0) + np.log1p(np.exp(-abs(raw)))
    return out
