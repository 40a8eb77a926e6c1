# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef uint64_t TRAJ = 0xD1B54A32D192ED03ULL
cdef double INV53 = 1.0 / 9007199254740992.0


cdef inline uint64_t splitmix64(uint64_t x) noexcept nogil:
    cdef uint64_t z = x + GOLDEN
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline double uniform(uint64_t key, uint64_t counter) noexcept nogil:
    return <double>(splitmix64(key + counter) >> 11) * INV53


cdef inline int64_t first_above(double u, const double* row, int64_t n) noexcept nogil:
    cdef int64_t k
    for k in range(n):
        if u < row[k]:
            return k
    return 0


def sample_batch(uint64_t seed, int64_t start, int64_t count, sizes,
                 const double[:, :, ::1] pi_cdf, const double[:, :, :, ::1] p_cdf,
                 const double[:, :, ::1] rmean, bint bernoulli):
    cdef int64_t H = len(sizes) - 1
    cdef int64_t A = pi_cdf.shape[2]
    cdef int64_t N = pi_cdf.shape[1]
    states_np = np.zeros((count, H + 1), dtype=np.int64)
    actions_np = np.zeros((count, H + 1), dtype=np.int64)
    rewards_np = np.zeros((count, H + 1), dtype=np.float64)
    cdef int64_t[:, ::1] states = states_np
    cdef int64_t[:, ::1] actions = actions_np
    cdef double[:, ::1] rewards = rewards_np
    cdef uint64_t base = splitmix64(seed)
    cdef uint64_t key
    cdef int64_t i, h, s, a
    cdef double mean
    with nogil:
        for i in range(count):
            key = splitmix64(base ^ (<uint64_t>(start + i) * TRAJ))
            s = 0
            for h in range(H + 1):
                states[i, h] = s
                a = first_above(uniform(key, 3 * h), &pi_cdf[h, s, 0], A)
                actions[i, h] = a
                mean = rmean[h, s, a]
                if bernoulli:
                    rewards[i, h] = 1.0 if uniform(key, 3 * h + 2) < mean else 0.0
                else:
                    rewards[i, h] = mean
                if h < H:
                    s = first_above(uniform(key, 3 * h + 1), &p_cdf[h, s, a, 0], N)
    return states_np, actions_np, rewards_np


cdef class _Enumerator:
    """Mixed-radix walk over deterministic policies of stages h+1..H-1.

    Digits are ordered stage h+1 first, state 0 first, so the common case of
    an increment only re-evaluates the stages nearest to h.
    """
    cdef int64_t h, H, A, N, D
    cdef int64_t[::1] sizes
    cdef const double[:, :, ::1] r
    cdef const double[:, :, :, ::1] P
    cdef double[:, ::1] v
    cdef double[:, :, ::1] q
    cdef int64_t[::1] digit_stage
    cdef int64_t[::1] digit_state
    cdef int64_t[:, ::1] sigma

    def __init__(self, int64_t h, sizes, const double[:, :, ::1] r,
                 const double[:, :, :, ::1] P):
        self.h = h
        self.H = len(sizes) - 1
        self.A = r.shape[2]
        self.N = r.shape[1]
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.r = r
        self.P = P
        self.v = np.zeros((self.H + 1, self.N))
        self.q = np.zeros((self.H + 1, self.N, self.A))
        self.sigma = np.zeros((self.H + 1, self.N), dtype=np.int64)
        stages = []
        states = []
        for u in range(h + 1, self.H):
            for i in range(sizes[u]):
                stages.append(u)
                states.append(i)
        self.D = len(stages)
        self.digit_stage = np.asarray(stages, dtype=np.int64)
        self.digit_state = np.asarray(states, dtype=np.int64)

    cdef void backup(self, int64_t u) noexcept nogil:
        cdef int64_t i, a, k
        cdef double acc
        for i in range(self.sizes[u]):
            for a in range(self.A):
                acc = self.r[u, i, a]
                for k in range(self.sizes[u + 1]):
                    acc = acc + self.P[u, i, a, k] * self.v[u + 1, k]
                self.q[u, i, a] = acc

    cdef void select(self, int64_t u) noexcept nogil:
        cdef int64_t i
        for i in range(self.sizes[u]):
            self.v[u, i] = self.q[u, i, self.sigma[u, i]]

    cdef void refresh(self, int64_t top) noexcept nogil:
        # stage ``top`` had a choice change; its q is still valid
        cdef int64_t u
        u = top
        while u > self.h:
            if u != top:
                self.backup(u)
            self.select(u)
            u -= 1
        self.backup(self.h)

    cdef bint advance(self) noexcept nogil:
        cdef int64_t pos = 0
        cdef int64_t u, i
        while pos < self.D:
            u = self.digit_stage[pos]
            i = self.digit_state[pos]
            self.sigma[u, i] += 1
            if self.sigma[u, i] < self.A:
                self.refresh(u)
                return True
            self.sigma[u, i] = 0
            pos += 1
        return False

    cdef void start(self) noexcept nogil:
        cdef int64_t u
        u = self.H - 1
        while u > self.h:
            self.backup(u)
            self.select(u)
            u -= 1
        self.backup(self.h)

    def count(self):
        return int(self.A) ** int(self.D)


def max_action_gaps(int64_t h, sizes, const double[:, :, ::1] r,
                    const double[:, :, :, ::1] P):
    cdef _Enumerator e = _Enumerator(h, sizes, r, P)
    cdef int64_t n_h = sizes[h]
    cdef int64_t A = r.shape[2]
    out_np = np.full((n_h, A, A), -np.inf)
    cdef double[:, :, ::1] out = out_np
    cdef int64_t i, a, b
    cdef double g
    cdef bint more = True
    with nogil:
        e.start()
        while more:
            for i in range(n_h):
                for a in range(A):
                    for b in range(A):
                        g = e.q[h, i, a] - e.q[h, i, b]
                        if g > out[i, a, b]:
                            out[i, a, b] = g
            more = e.advance()
    return out_np


def stage_q_tables(int64_t h, sizes, const double[:, :, ::1] r,
                   const double[:, :, :, ::1] P):
    cdef _Enumerator e = _Enumerator(h, sizes, r, P)
    cdef int64_t n_h = sizes[h]
    cdef int64_t A = r.shape[2]
    out_np = np.empty((e.count(), n_h, A))
    cdef double[:, :, ::1] out = out_np
    cdef int64_t m = 0
    cdef int64_t i, a
    cdef bint more = True
    with nogil:
        e.start()
        while more:
            for i in range(n_h):
                for a in range(A):
                    out[m, i, a] = e.q[h, i, a]
            m += 1
            more = e.advance()
    return out_np
