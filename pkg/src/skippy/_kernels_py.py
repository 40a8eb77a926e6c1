"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation.  The sampler must be
bit-identical between the two backends; the enumeration kernels agree up to
floating point summation order.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TRAJ = np.uint64(0xD1B54A32D192ED03)
_INV53 = 1.0 / 9007199254740992.0

# rows of downstream value vectors materialised at once by the enumerators
CHUNK_ROWS = 1 << 16


def splitmix64(x):
    # wrap-around multiplication is intended
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def trajectory_keys(seed: int, index):
    base = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        mixed = base ^ (np.asarray(index, dtype=np.uint64) * _TRAJ)
    return splitmix64(mixed)


def uniforms(keys, counter: int):
    with np.errstate(over="ignore"):
        keys = keys + np.uint64(counter)
    x = splitmix64(keys)
    return (x >> np.uint64(11)).astype(np.float64) * _INV53


def _first_above(u, cdf_rows):
    # index of the first entry with u < cdf; cdf rows are padded with 2.0
    return np.argmax(u[:, None] < cdf_rows, axis=1)


def sample_batch(seed, start, count, sizes, pi_cdf, p_cdf, rmean, bernoulli):
    H = len(sizes) - 1
    idx = np.arange(start, start + count, dtype=np.uint64)
    keys = trajectory_keys(seed, idx)
    states = np.zeros((count, H + 1), dtype=np.int64)
    actions = np.zeros((count, H + 1), dtype=np.int64)
    rewards = np.zeros((count, H + 1), dtype=np.float64)
    s = np.zeros(count, dtype=np.int64)
    for h in range(H + 1):
        states[:, h] = s
        a = _first_above(uniforms(keys, 3 * h), pi_cdf[h, s])
        actions[:, h] = a
        mean = rmean[h, s, a]
        if bernoulli:
            rewards[:, h] = (uniforms(keys, 3 * h + 2) < mean).astype(np.float64)
        else:
            rewards[:, h] = mean
        if h < H:
            s = _first_above(uniforms(keys, 3 * h + 1), p_cdf[h, s, a])
    return states, actions, rewards


def _selections(n_states: int, A: int) -> np.ndarray:
    """All action assignments for a stage, state 0 varying fastest."""
    k = np.arange(A ** n_states)
    return np.stack([(k // A ** i) % A for i in range(n_states)], axis=1)


def _enumerate(h, sizes, r, P, reduce):
    """Feed q_h tables of every downstream deterministic policy to ``reduce``.

    Tables arrive in counter order: stage h+1 choices vary fastest.
    """
    H = len(sizes) - 1
    A = r.shape[2]

    def expand(u, V):
        # V: (m, sizes[u+1]) value vectors at stage u+1
        n_u = sizes[u]
        Q = r[u, :n_u][None] + np.einsum("san,mn->msa", P[u, :n_u, :, : sizes[u + 1]], V)
        if u == h:
            reduce(Q)
            return
        sel = _selections(n_u, A)
        per = max(1, CHUNK_ROWS // len(sel))
        rows = np.arange(n_u)
        for lo in range(0, len(Q), per):
            block = Q[lo : lo + per]
            Vn = block[:, rows[None, :], sel]  # (m, |sel|, n_u)
            expand(u - 1, Vn.reshape(-1, n_u))

    expand(H - 1, np.zeros((1, sizes[H])))


def max_action_gaps(h, sizes, r, P):
    n_h = sizes[h]
    A = r.shape[2]
    out = np.full((n_h, A, A), -np.inf)

    def reduce(Q):
        gaps = Q[:, :, :, None] - Q[:, :, None, :]
        np.maximum(out, gaps.max(axis=0), out=out)

    _enumerate(h, sizes, r, P, reduce)
    return out


def stage_q_tables(h, sizes, r, P):
    parts = []
    _enumerate(h, sizes, r, P, parts.append)
    return np.concatenate(parts, axis=0)
