"""Compiled Monte Carlo inner loops.

Randomness inside the kernels is stateless: every decision derives a uniform
from a splitmix64 fold of (read key, sweep, slice, site, salt), mirroring
``rng.hash_words`` exactly (the test suite cross-checks the two). This keeps
results identical under any scheduling of reads across workers.

All hash operands must stay np.uint64: mixing a uint64 with a signed int
promotes to float64 under numba and silently corrupts the stream.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64
_GAMMA = U64(0x9E3779B97F4A7C15)
_C1 = U64(0xBF58476D1CE4E5B9)
_C2 = U64(0x94D049BB133111EB)
_S30 = U64(30)
_S27 = U64(27)
_S31 = U64(31)
_S11 = U64(11)
_ONE = U64(1)
_TWO_NEG53 = 2.0**-53

# salt registry; values are arbitrary but frozen (streams depend on them)
SALT_SVMC_INIT = U64(101)
SALT_SVMC_PROP = U64(102)
SALT_SVMC_ACC = U64(103)
SALT_SQA_INIT = U64(201)
SALT_SQA_LOCAL = U64(202)
SALT_SQA_GLOBAL = U64(203)

_PI = np.pi


@njit(cache=True, inline="always")
def _mix(z):
    z = z + _GAMMA
    z = (z ^ (z >> _S30)) * _C1
    z = (z ^ (z >> _S27)) * _C2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _fold4(a, b, c, d):
    h = _mix(a)
    h = _mix(h + b)
    h = _mix(h + c)
    return _mix(h + d)


@njit(cache=True, inline="always")
def _fold5(a, b, c, d, e):
    h = _mix(a)
    h = _mix(h + b)
    h = _mix(h + c)
    h = _mix(h + d)
    return _mix(h + e)


@njit(cache=True, inline="always")
def _uniform(h):
    # (0, 1]: never exactly 0, so u <= exp(very negative) cannot fire
    return np.float64((h >> _S11) + _ONE) * _TWO_NEG53


@njit(cache=True)
def fold4_reference(a, b, c, d):
    """Exposed for the cross-check against rng.hash_words."""
    return _fold4(U64(a), U64(b), U64(c), U64(d))


@njit(cache=True)
def uniform_reference(h):
    return _uniform(U64(h))


@njit(cache=True, nogil=True)
def svmc_kernel(
    n,
    h,
    ptr,
    idx,
    val,
    a_arr,
    b_arr,
    beta,
    base_keys,
    read_lo,
    read_hi,
    out_cos,
):
    """Rotor Metropolis over reads [read_lo, read_hi).

    Angles live on [0, pi]; energy is
    E = -A sum_i sin(th_i) + B (sum_i h_i cos(th_i) + sum_ij J_ij cos cos).
    Writes the final cos(theta) row per read into out_cos.
    """
    sweeps = a_arr.shape[0]
    cos_t = np.empty(n, dtype=np.float64)
    sin_t = np.empty(n, dtype=np.float64)
    zero = U64(0)
    for r in range(read_lo, read_hi):
        key = base_keys[r]
        for i in range(n):
            u = _uniform(_fold4(key, zero, U64(i), SALT_SVMC_INIT))
            th = _PI * u
            cos_t[i] = np.cos(th)
            sin_t[i] = np.sin(th)
        for t in range(sweeps):
            a = a_arr[t]
            b = b_arr[t]
            tw = U64(t + 1)
            for i in range(n):
                up = _uniform(_fold4(key, tw, U64(i), SALT_SVMC_PROP))
                th_new = _PI * up
                cn = np.cos(th_new)
                sn = np.sin(th_new)
                loc = h[i]
                for k in range(ptr[i], ptr[i + 1]):
                    loc += val[k] * cos_t[idx[k]]
                dlw = -beta * (-a * (sn - sin_t[i]) + b * loc * (cn - cos_t[i]))
                if dlw >= 0.0:
                    cos_t[i] = cn
                    sin_t[i] = sn
                else:
                    ua = _uniform(_fold4(key, tw, U64(i), SALT_SVMC_ACC))
                    if ua <= np.exp(dlw):
                        cos_t[i] = cn
                        sin_t[i] = sn
        for i in range(n):
            out_cos[r, i] = cos_t[i]


@njit(cache=True, nogil=True)
def sqa_kernel(
    n,
    n_slices,
    h,
    ptr,
    idx,
    val,
    b_arr,
    jperp_arr,
    locked_arr,
    beta_slice,
    base_keys,
    slice_pick,
    read_lo,
    read_hi,
    out_spins,
):
    """Path-integral Metropolis over reads [read_lo, read_hi).

    Per sweep: local single-(slice, site) flips unless the slice coupling is
    locked, then one global worldline flip per site. locked_arr marks sweeps
    where bond-breaking acceptance underflows below the smallest uniform, so
    skipping local moves there is exact, not an approximation. On entering a
    locked stretch all slices are copied from slice 0. Readout takes the
    slice_pick[r]-th slice.
    """
    sweeps = b_arr.shape[0]
    m_slices = n_slices
    spins = np.empty((m_slices, n), dtype=np.int8)
    zero = U64(0)
    for r in range(read_lo, read_hi):
        key = base_keys[r]
        for m in range(m_slices):
            for i in range(n):
                u = _uniform(_fold5(key, zero, U64(m), U64(i), SALT_SQA_INIT))
                spins[m, i] = 1 if u <= 0.5 else -1
        was_locked = False
        for t in range(sweeps):
            b = b_arr[t]
            jp = jperp_arr[t]
            locked = locked_arr[t]
            tw = U64(t + 1)
            if locked and not was_locked:
                for m in range(1, m_slices):
                    for i in range(n):
                        spins[m, i] = spins[0, i]
            was_locked = locked
            bb = beta_slice * b
            if m_slices > 1 and not locked:
                for m in range(m_slices):
                    mu = m + 1 if m + 1 < m_slices else 0
                    md = m - 1 if m >= 1 else m_slices - 1
                    for i in range(n):
                        loc = h[i]
                        for k in range(ptr[i], ptr[i + 1]):
                            loc += val[k] * spins[m, idx[k]]
                        s = spins[m, i]
                        dlw = 2.0 * bb * s * loc - 2.0 * jp * s * (
                            spins[mu, i] + spins[md, i]
                        )
                        if dlw >= 0.0:
                            spins[m, i] = -s
                        else:
                            ua = _uniform(
                                _fold5(key, tw, U64(m), U64(i), SALT_SQA_LOCAL)
                            )
                            if ua <= np.exp(dlw):
                                spins[m, i] = -s
            # global worldline flips (the only move in locked stretches;
            # for a single slice this IS classical Metropolis)
            if locked or m_slices == 1:
                for i in range(n):
                    loc = h[i]
                    for k in range(ptr[i], ptr[i + 1]):
                        loc += val[k] * spins[0, idx[k]]
                    s = spins[0, i]
                    dlw = 2.0 * beta_slice * m_slices * b * s * loc
                    flip = False
                    if dlw >= 0.0:
                        flip = True
                    else:
                        ua = _uniform(
                            _fold5(key, tw, zero, U64(i), SALT_SQA_GLOBAL)
                        )
                        if ua <= np.exp(dlw):
                            flip = True
                    if flip:
                        for m in range(m_slices):
                            spins[m, i] = -s
            else:
                for i in range(n):
                    tot = 0.0
                    for m in range(m_slices):
                        loc = h[i]
                        for k in range(ptr[i], ptr[i + 1]):
                            loc += val[k] * spins[m, idx[k]]
                        tot += spins[m, i] * loc
                    dlw = 2.0 * bb * tot
                    flip = False
                    if dlw >= 0.0:
                        flip = True
                    else:
                        ua = _uniform(
                            _fold5(key, tw, zero, U64(i), SALT_SQA_GLOBAL)
                        )
                        if ua <= np.exp(dlw):
                            flip = True
                    if flip:
                        for m in range(m_slices):
                            spins[m, i] = -spins[m, i]
        mpick = slice_pick[r]
        for i in range(n):
            out_spins[r, i] = spins[mpick, i]
