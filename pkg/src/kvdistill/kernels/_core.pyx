# cython: language_level=3
"""Compiled float32 kernels.

Every reduction runs sequentially in float32 (``acc = acc + x * y``), in the
same order as the numpy fallback in ``_fallback.py``. Exponentials are taken
in double precision and rounded to float32 in both backends.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef cnp.float32_t f32
ctypedef cnp.int64_t i64


def matmul(const f32[:, ::1] a, const f32[:, ::1] b, bint transpose_b):
    cdef Py_ssize_t m = a.shape[0], kdim = a.shape[1]
    cdef Py_ssize_t n = b.shape[0] if transpose_b else b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float32)
    cdef f32[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef f32 acc, av
    if transpose_b:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(kdim):
                    acc = acc + a[i, p] * b[j, p]
                out[i, j] = acc
    else:
        # i-p-j order: out[i, j] still accumulates over p in ascending order
        for i in range(m):
            for p in range(kdim):
                av = a[i, p]
                for j in range(n):
                    out[i, j] = out[i, j] + av * b[p, j]
    return out_arr


cdef inline f32 _exp32(f32 x) nogil:
    return <f32>exp(<double>x)


def softmax_rows(const f32[:, ::1] a, const i64[::1] qpos, const i64[::1] kpos):
    """Row softmax; entry (i, j) is masked when kpos[j] > qpos[i].

    Pass empty position arrays for an unmasked softmax. Returns ``None`` if
    some row has no unmasked entry; the caller raises.
    """
    cdef Py_ssize_t rows = a.shape[0], cols = a.shape[1]
    cdef bint masked = qpos.shape[0] > 0
    out_arr = np.zeros((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef f32 mx, total, e
    cdef bint any_valid
    for i in range(rows):
        any_valid = False
        mx = 0.0
        for j in range(cols):
            if masked and kpos[j] > qpos[i]:
                continue
            if not any_valid or a[i, j] > mx:
                mx = a[i, j]
            any_valid = True
        if not any_valid:
            return None
        total = 0.0
        for j in range(cols):
            if masked and kpos[j] > qpos[i]:
                continue
            e = _exp32(a[i, j] - mx)
            out[i, j] = e
            total = total + e
        for j in range(cols):
            out[i, j] = out[i, j] / total
    return out_arr


def causal_attention(
    const f32[:, :, ::1] q,
    const f32[:, :, ::1] k,
    const f32[:, :, ::1] v,
    const i64[::1] qpos,
    const i64[::1] kpos,
    f32 scale,
):
    """Grouped-query attention over a position-sorted key store.

    q is (nq, h, d); k and v are (nk, h_kv, d). Query row i attends to the
    keys whose position is <= qpos[i]; since kpos ascends that is a prefix.
    Returns None if a query row would attend to nothing.
    """
    cdef Py_ssize_t nq = q.shape[0], h = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t nk = k.shape[0], hkv = k.shape[1]
    cdef Py_ssize_t group = h // hkv
    out_arr = np.zeros((nq, h, d), dtype=np.float32)
    cdef f32[:, :, ::1] out = out_arr
    scores_arr = np.empty(max(nk, 1), dtype=np.float32)
    cdef f32[::1] s = scores_arr
    cdef Py_ssize_t i, hd, kv, j, p, count
    cdef f32 acc, mx, total, w
    for i in range(nq):
        count = 0
        while count < nk and kpos[count] <= qpos[i]:
            count += 1
        if count == 0:
            return None
        for hd in range(h):
            kv = hd // group
            mx = 0.0
            for j in range(count):
                acc = 0.0
                for p in range(d):
                    acc = acc + q[i, hd, p] * k[j, kv, p]
                acc = acc * scale
                s[j] = acc
                if j == 0 or acc > mx:
                    mx = acc
            total = 0.0
            for j in range(count):
                s[j] = _exp32(s[j] - mx)
                total = total + s[j]
            for j in range(count):
                s[j] = s[j] / total
            for j in range(count):
                w = s[j]
                for p in range(d):
                    out[i, hd, p] = out[i, hd, p] + w * v[j, kv, p]
    return out_arr
