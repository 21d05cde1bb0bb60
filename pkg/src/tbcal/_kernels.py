"""Compiled inner loops.

Random draws go through the numpy ``Generator`` passed in, so a kernel
consumes exactly the stream a plain numpy loop would.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _grow(a, size):
    out = np.empty(max(2 * a.size, size))
    out[: a.size] = a
    return out


@njit(cache=True)
def spontaneous_pairs(rng, first_slot, n_slots, V, tau, limit):
    """Photon times of both arms for slots ``first_slot .. first_slot + n_slots``.

    Non-empty slots are found from geometric gaps; a non-empty slot holds
    1 + (Bose-Einstein, mean V) pairs, which is geometric on {1, 2, ...} with
    success probability 1/(1+V). Each pair puts photon 1 at a uniform phase of
    the slot and photon 2 at a further uniform offset, wrapped into the slot.
    """
    p = V / (1.0 + V)
    expected = n_slots * V
    cap = int(expected + 8.0 * math.sqrt(expected) + 64.0)
    t1 = np.empty(cap)
    t2 = np.empty(cap)
    n = 0
    if p <= 0.0 or n_slots <= 0:
        return t1[:0], t2[:0]
    gap_scale = 1.0 / -math.log1p(-p)
    mult_scale = 1.0 / -math.log(p)
    top = np.nextafter(limit, 0.0)
    slot = -1
    while True:
        g = max(math.ceil(rng.standard_exponential() * gap_scale), 1.0)
        if g >= n_slots - slot:
            break
        slot += int(g)
        m = int(max(math.ceil(rng.standard_exponential() * mult_scale), 1.0))
        if n + m > t1.size:
            t1 = _grow(t1, n + m)
            t2 = _grow(t2, n + m)
        base = float(first_slot + slot)
        for _ in range(m):
            u = rng.random()
            s = u + rng.random()
            if s >= 1.0:
                s -= 1.0
            t1[n] = min((base + u) * tau, top)
            t2[n] = min((base + s) * tau, top)
            n += 1
    return t1[:n], t2[:n]


@njit(cache=True)
def deposit_steps(steps, p, q, length):
    """Add sampled rectangles of ``length`` samples as +/- steps.

    A step at position ``x`` puts ``1 - frac(x)`` of its height in bin
    ``floor(x)`` and the rest in the next bin; the cumulative sum of
    ``steps`` is then the boxcar-sampled pulse train times ``length``.
    """
    for i in range(p.size):
        x = p[i]
        j = int(math.floor(x))
        f = x - j
        steps[j] += q[i] * (1.0 - f)
        steps[j + 1] += q[i] * f
        x = x + length
        j = int(math.floor(x))
        f = x - j
        steps[j] -= q[i] * (1.0 - f)
        steps[j + 1] -= q[i] * f


@njit(cache=True)
def integrate_steps(steps, n, level, scale, out):
    """Running sum of ``steps[:n]`` from ``level``, times ``scale``, into ``out``."""
    for i in range(n):
        level += steps[i]
        out[i] = level * scale
    return level


@njit(cache=True)
def deposit_poly(out, first, u, q, basis):
    """``out[first[i] + k] += q[i] * sum_d basis[d, k] * u[i]**d``."""
    D, K = basis.shape
    for i in range(first.size):
        j = first[i]
        w = q[i]
        for d in range(D):
            for k in range(K):
                out[j + k] += w * basis[d, k]
            w *= u[i]
