"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PARETORL_NUMBA`` is not set to ``0``.  Both paths compute the
same values; ``benchmarks/bench_kernels.py`` times one against the other.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("PARETORL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by PARETORL_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# non-dominated scan
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nondominated_mask_nb(rewards):
    n, k = rewards.shape
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            all_le = True
            any_lt = False
            for c in range(k):
                if rewards[i, c] > rewards[j, c]:
                    all_le = False
                    break
                if rewards[i, c] < rewards[j, c]:
                    any_lt = True
            if all_le and any_lt:
                keep[i] = False
                break
    return keep


def _nondominated_mask_np(rewards):
    # le[i, j]: row i <= row j in every channel; lt[i, j]: strictly below in one
    a = rewards[:, None, :]
    b = rewards[None, :, :]
    dominated_by = np.all(a <= b, axis=2) & np.any(a < b, axis=2)
    return ~dominated_by.any(axis=1)


# ---------------------------------------------------------------------------
# hypervolume (maximisation, points already filtered to be >= ref)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _hv2d_nb(points, ref):
    n = points.shape[0]
    if n == 0:
        return 0.0
    order = np.argsort(-points[:, 0], kind="mergesort")
    area = 0.0
    best_y = ref[1]
    for idx in range(n):
        p = order[idx]
        y = points[p, 1]
        if y > best_y:
            area += (points[p, 0] - ref[0]) * (y - best_y)
            best_y = y
    return area


def _hv2d_np(points, ref):
    if points.shape[0] == 0:
        return 0.0
    order = np.argsort(-points[:, 0], kind="mergesort")
    xs = points[order, 0]
    ys = points[order, 1]
    running = np.maximum.accumulate(np.concatenate(([ref[1]], ys)))
    gain = running[1:] - running[:-1]
    return float(np.sum((xs - ref[0]) * gain))


@njit(cache=True)
def _hv3d_nb(points, ref):
    n = points.shape[0]
    if n == 0:
        return 0.0
    order = np.argsort(-points[:, 2], kind="mergesort")
    vol = 0.0
    slab = np.empty((n, 2))
    for s in range(n):
        p = order[s]
        slab[s, 0] = points[p, 0]
        slab[s, 1] = points[p, 1]
        z_hi = points[p, 2]
        z_lo = points[order[s + 1], 2] if s + 1 < n else ref[2]
        if z_hi > z_lo:
            vol += _hv2d_nb(slab[: s + 1], ref[:2]) * (z_hi - z_lo)
    return vol


def _hv3d_np(points, ref):
    n = points.shape[0]
    if n == 0:
        return 0.0
    order = np.argsort(-points[:, 2], kind="mergesort")
    pts = points[order]
    z_lo = np.concatenate((pts[1:, 2], [ref[2]]))
    vol = 0.0
    for s in range(n):
        depth = pts[s, 2] - z_lo[s]
        if depth > 0:
            vol += _hv2d_np(pts[: s + 1, :2], ref[:2]) * depth
    return float(vol)


# ---------------------------------------------------------------------------
# reverse discounted sums over padded (batch, time) streams
# ---------------------------------------------------------------------------


@njit(cache=True)
def _discounted_tail_sums_nb(stream, lengths, gamma):
    b, t = stream.shape
    out = np.zeros((b, t))
    for i in range(b):
        acc = 0.0
        for s in range(lengths[i] - 1, -1, -1):
            acc = stream[i, s] + gamma * acc
            out[i, s] = acc
    return out


def _discounted_tail_sums_np(stream, lengths, gamma):
    b, t = stream.shape
    live = np.arange(t)[None, :] < lengths[:, None]
    s = np.where(live, stream, 0.0)
    out = np.zeros((b, t))
    acc = np.zeros(b)
    for col in range(t - 1, -1, -1):
        acc = s[:, col] + gamma * acc
        out[:, col] = acc
    return np.where(live, out, 0.0)


# ---------------------------------------------------------------------------
# embedding-gradient scatter and the AdamW moment update
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scatter_rows_nb(out, idx, rows):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(rows.shape[1]):
            out[r, j] += rows[i, j]


def _scatter_rows_np(out, idx, rows):
    np.add.at(out, idx, rows)


@njit(cache=True)
def _adamw_nb(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    for i in range(p.shape[0]):
        gi = np.float64(g[i])
        mi = b1 * np.float64(m[i]) + (1.0 - b1) * gi
        vi = b2 * np.float64(v[i]) + (1.0 - b2) * gi * gi
        denom = np.sqrt(vi / bc2) + eps
        upd = (mi / bc1) / denom if denom > 0 else 0.0
        pi = np.float64(p[i])
        pi = pi - lr[i] * wd * pi - lr[i] * upd
        p[i] = pi
        m[i] = mi
        v[i] = vi


def _adamw_np(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    g = g.astype(np.float64)
    m64 = b1 * m.astype(np.float64) + (1 - b1) * g
    v64 = b2 * v.astype(np.float64) + (1 - b2) * g * g
    denom = np.sqrt(v64 / bc2) + eps
    upd = np.divide(m64 / bc1, denom, out=np.zeros_like(m64), where=denom > 0)
    p64 = p.astype(np.float64)
    p[...] = p64 - lr * wd * p64 - lr * upd
    m[...] = m64
    v[...] = v64


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def nondominated_mask(rewards, backend=None):
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        return _nondominated_mask_nb(rewards)
    return _nondominated_mask_np(rewards)


def hypervolume_sweep(points, ref, backend=None):
    points = np.ascontiguousarray(points, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    k = points.shape[1]
    use_nb = (backend or BACKEND) == "numba"
    if k == 2:
        return float(_hv2d_nb(points, ref) if use_nb else _hv2d_np(points, ref))
    if k == 3:
        return float(_hv3d_nb(points, ref) if use_nb else _hv3d_np(points, ref))
    raise ValueError(f"hypervolume supports 2 or 3 objectives, got {k}")


def discounted_tail_sums(stream, lengths, gamma, backend=None):
    stream = np.ascontiguousarray(stream, dtype=np.float64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return _discounted_tail_sums_nb(stream, lengths, float(gamma))
    return _discounted_tail_sums_np(stream, lengths, float(gamma))


def scatter_rows(out, idx, rows, backend=None):
    """In place ``out[idx[i]] += rows[i]`` with repeated indices accumulating."""
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    rows = np.ascontiguousarray(rows, dtype=out.dtype).reshape(idx.shape[0], -1)
    if (backend or BACKEND) == "numba" and out.flags.c_contiguous and out.ndim == 2:
        _scatter_rows_nb(out, idx, rows)
    else:
        _scatter_rows_np(out, idx, rows.reshape((idx.shape[0],) + out.shape[1:]))


def adamw_update(p, g, m, v, lr, b1, b2, eps, wd, step, lr_scale=None, backend=None):
    """In place AdamW on flat float buffers; arithmetic in float64.

    ``lr_scale``, if given, multiplies the learning rate element-wise.
    """
    bc1, bc2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    lr = np.full(p.shape[0], float(lr)) if lr_scale is None else float(lr) * lr_scale.astype(np.float64)
    args = (p, g, m, v, lr, float(b1), float(b2), float(eps), float(wd), float(bc1), float(bc2))
    if (backend or BACKEND) == "numba":
        _adamw_nb(*args)
    else:
        _adamw_np(*args)
