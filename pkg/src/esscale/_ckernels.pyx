# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, cos, sin, tanh, fabs
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN_GAMMA = 0x9E3779B97F4A7C15ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t seed, uint64_t index) noexcept nogil:
    cdef uint64_t z = seed + (index + 1) * GOLDEN_GAMMA
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64_at(seed, index):
    cdef uint64_t s = <uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)
    idx = np.ascontiguousarray(index, dtype=np.uint64)
    flat = idx.reshape(-1)
    cdef cnp.uint64_t[::1] iv = flat
    out = np.empty(flat.shape[0], dtype=np.uint64)
    cdef cnp.uint64_t[::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(iv.shape[0]):
            ov[i] = _mix(s, iv[i])
    return out.reshape(idx.shape)


def normal_table(seed, Py_ssize_t length):
    cdef uint64_t s = <uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t npairs = (length + 1) // 2
    out = np.empty(2 * npairs, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t p
    cdef double u1, u2, r, angle
    with nogil:
        for p in range(npairs):
            u1 = 1.0 - <double>(_mix(s, 2 * p) >> 11) * INV_2_53
            u2 = <double>(_mix(s, 2 * p + 1) >> 11) * INV_2_53
            r = sqrt(-2.0 * log(u1))
            angle = TWO_PI * u2
            ov[2 * p] = r * cos(angle)
            ov[2 * p + 1] = r * sin(angle)
    return out[:length]


def weighted_noise_sum(values, offsets, weights, Py_ssize_t d):
    cdef const double[::1] tv = np.ascontiguousarray(values, dtype=np.float64)
    cdef const int64_t[::1] offv = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    out = np.zeros(d, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, k, off
    cdef double w
    if offv.shape[0] != wv.shape[0]:
        raise ValueError("offsets and weights differ in length")
    for i in range(offv.shape[0]):
        off = offv[i]
        if off < 0 or off + d > tv.shape[0]:
            raise ValueError("offset out of range")
    with nogil:
        for i in range(offv.shape[0]):
            off = offv[i]
            w = wv[i]
            for k in range(d):
                ov[k] = ov[k] + w * tv[off + k]
    return out


cdef inline void _pole_step(double* st, double force, double gravity, double masscart,
                            double masspole, double length, double dt) noexcept nogil:
    cdef double total_mass = masscart + masspole
    cdef double pml = masspole * length
    cdef double costh = cos(st[2])
    cdef double sinth = sin(st[2])
    cdef double temp = (force + pml * st[3] * st[3] * sinth) / total_mass
    cdef double th_acc = (gravity * sinth - costh * temp) / (
        length * (4.0 / 3.0 - masspole * costh * costh / total_mass))
    cdef double x_acc = temp - pml * th_acc * costh / total_mass
    st[1] = st[1] + dt * x_acc
    st[0] = st[0] + dt * st[1]
    st[3] = st[3] + dt * th_acc
    st[2] = st[2] + dt * st[3]


def pole_step(state, double force, double gravity, double masscart, double masspole,
              double length, double dt):
    cdef double st[4]
    st[0], st[1], st[2], st[3] = state
    _pole_step(st, force, gravity, masscart, masspole, length, dt)
    return (st[0], st[1], st[2], st[3])


def pole_rollout(theta, layer_sizes, vbn_mean, vbn_std, centers, double low, double high,
                 state0, consts, Py_ssize_t horizon, Py_ssize_t cap, Py_ssize_t frameskip):
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const int64_t[::1] sizes = np.ascontiguousarray(layer_sizes, dtype=np.int64)
    cdef Py_ssize_t n_layers = sizes.shape[0] - 1
    cdef Py_ssize_t widest = 0
    cdef Py_ssize_t i, j, li, a, b, pos, n_in, best
    for i in range(sizes.shape[0]):
        if sizes[i] > widest:
            widest = sizes[i]
    buf_a = np.zeros(widest, dtype=np.float64)
    buf_b = np.zeros(widest, dtype=np.float64)
    cdef double[::1] xa = buf_a
    cdef double[::1] xb = buf_b
    cdef bint use_vbn = vbn_mean is not None
    cdef const double[::1] mu
    cdef const double[::1] sd
    if use_vbn:
        mu = np.ascontiguousarray(vbn_mean, dtype=np.float64)
        sd = np.ascontiguousarray(vbn_std, dtype=np.float64)
    cdef bint discrete = centers is not None
    cdef const double[::1] cen
    if discrete:
        cen = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double gravity = consts[0], masscart = consts[1], masspole = consts[2]
    cdef double length = consts[3], force_mag = consts[4], dt = consts[5]
    cdef double x_limit = consts[6], th_limit = consts[7]
    cdef double st[4]
    st[0], st[1], st[2], st[3] = state0
    cdef Py_ssize_t limit = horizon if cap <= 0 else min(horizon, cap)
    cdef double total = 0.0, acc, force
    cdef Py_ssize_t steps = 0, r
    cdef bint done = False
    n_in = sizes[0]
    with nogil:
        while not done and steps < limit:
            for i in range(n_in):
                xa[i] = st[i]
            pos = 0
            if use_vbn:
                for i in range(n_in):
                    xa[i] = (xa[i] - mu[i]) / sd[i] * th[pos + i] + th[pos + n_in + i]
                pos = 2 * n_in
            for li in range(n_layers):
                a = sizes[li]
                b = sizes[li + 1]
                for j in range(b):
                    acc = 0.0
                    for i in range(a):
                        acc = acc + xa[i] * th[pos + i * b + j]
                    acc = acc + th[pos + a * b + j]
                    if li < n_layers - 1:
                        acc = tanh(acc)
                    xb[j] = acc
                pos += a * b + b
                for j in range(b):
                    xa[j] = xb[j]
            if discrete:
                best = 0
                for j in range(1, sizes[n_layers]):
                    if xa[j] > xa[best]:
                        best = j
                force = cen[best]
            else:
                force = xa[0]
                if force < low:
                    force = low
                if force > high:
                    force = high
            if force < -force_mag:
                force = -force_mag
            if force > force_mag:
                force = force_mag
            for r in range(frameskip):
                _pole_step(st, force, gravity, masscart, masspole, length, dt)
                steps += 1
                if fabs(st[2]) < th_limit and fabs(st[0]) < x_limit:
                    total += 1.0
                else:
                    done = True
                if done or steps >= limit:
                    break
    truncated = (not done) and steps >= limit and limit < horizon
    return total, steps, bool(truncated)
