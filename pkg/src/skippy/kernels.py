"""Backend selection for the hot kernels.

The compiled extension is used when it imports; ``SKIPPY_PURE_PYTHON=1``
forces the numpy fallback.  Both backends expose the same three functions
over padded stage arrays (see :func:`skippy.mdp.StagedMdp.padded`).
"""
from __future__ import annotations

import os

from . import _kernels_py

try:
    if os.environ.get("SKIPPY_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

# policies above this count are refused by the enumerators
MAX_POLICIES = 10**7


def backend(name: str | None = None):
    """Return the kernel module for ``name`` ("cython", "python") or the default."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def sample_batch(seed, start, count, sizes, pi_cdf, p_cdf, rmean, bernoulli, impl=None):
    mod = backend(impl)
    return mod.sample_batch(
        int(seed) & 0xFFFFFFFFFFFFFFFF, int(start), int(count), list(sizes), pi_cdf, p_cdf, rmean, bool(bernoulli)
    )


def enumeration_size(h: int, sizes, num_actions: int) -> int:
    digits = sum(sizes[h + 1 : len(sizes) - 1])
    return num_actions**digits


def _check_size(h, sizes, num_actions):
    count = enumeration_size(h, sizes, num_actions)
    if count > MAX_POLICIES:
        raise ValueError(
            f"stage {h} needs {count} deterministic continuation policies (cap {MAX_POLICIES})"
        )


def max_action_gaps(h, sizes, r, P, impl=None):
    _check_size(h, sizes, r.shape[2])
    return backend(impl).max_action_gaps(int(h), list(sizes), r, P)


def stage_q_tables(h, sizes, r, P, impl=None):
    _check_size(h, sizes, r.shape[2])
    return backend(impl).stage_q_tables(int(h), list(sizes), r, P)
