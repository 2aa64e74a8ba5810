"""
Deterministic Reduction Kernels

numba-compiled reductions shared by the matter, imaging and far-field
modules. Parallelism is only ever across independent output entries; each
entry is accumulated sequentially in a fixed order, so results are
bit-identical for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def ordered_vdot(a: np.ndarray, b: np.ndarray) -> complex:
    """sum_j conj(a[j]) * b[j], accumulated left to right."""
    acc = 0j
    for j in range(a.shape[0]):
        acc += np.conj(a[j]) * b[j]
    return acc


@njit(parallel=True, cache=True)
def weighted_gram(a: np.ndarray, weight: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    out[n, m] = sum_j a[n, j] * weight[j] * conj(b[m, j]).

    Args:
        a: (M_a, P) complex rows
        weight: (P,) complex quadrature weights
        b: (M_b, P) complex rows

    Returns:
        (M_a, M_b) complex matrix
    """
    n_a = a.shape[0]
    n_b = b.shape[0]
    n_samples = a.shape[1]
    out = np.zeros((n_a, n_b), dtype=np.complex128)
    for n in prange(n_a):
        for m in range(n_b):
            acc = 0j
            for j in range(n_samples):
                acc += a[n, j] * weight[j] * np.conj(b[m, j])
            out[n, m] = acc
    return out


@njit(parallel=True, cache=True)
def hermitian_gram(a: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """
    out[n, m] = sum_j a[n, j] * weight[j] * conj(a[m, j]) for real weight.

    Only the upper triangle is accumulated; the lower one is its conjugate,
    so the result is Hermitian to the last bit.
    """
    n_modes = a.shape[0]
    n_samples = a.shape[1]
    out = np.zeros((n_modes, n_modes), dtype=np.complex128)
    for n in prange(n_modes):
        for m in range(n, n_modes):
            acc = 0j
            for j in range(n_samples):
                acc += a[n, j] * weight[j] * np.conj(a[m, j])
            if m == n:
                out[n, n] = acc.real
            else:
                out[n, m] = acc
    for n in range(n_modes):
        for m in range(n):
            out[n, m] = np.conj(out[m, n])
    return out


@njit(parallel=True, cache=True)
def circular_correlate(modes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    out[m, sy, sx] = sum_d kernel[(d - s) mod N, centered] * conj(modes[m, dy, dx]).

    Args:
        modes: (M, N, N) momentum-space modes in centered layout
        kernel: (N, N) momentum-space kernel in centered layout

    Returns:
        (M, N, N) complex array
    """
    n_modes = modes.shape[0]
    n = modes.shape[1]
    half = n // 2
    out = np.zeros(modes.shape, dtype=np.complex128)
    for m in prange(n_modes):
        for sy in range(n):
            for sx in range(n):
                acc = 0j
                for dy in range(n):
                    ky = (dy - sy + half) % n
                    for dx in range(n):
                        kx = (dx - sx + half) % n
                        acc += kernel[ky, kx] * np.conj(modes[m, dy, dx])
                out[m, sy, sx] = acc
    return out


@njit(parallel=True, cache=True)
def sesquilinear_map(a_t: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """
    c[j] = sum_n conj(a_t[j, n]) * sum_m beta[n, m] * a_t[j, m].

    Args:
        a_t: (P, M) weighted mode samples, one row per pixel
        beta: (M, M) coupling matrix

    Returns:
        (P,) complex contraction per pixel
    """
    n_pixels = a_t.shape[0]
    n_modes = a_t.shape[1]
    out = np.zeros(n_pixels, dtype=np.complex128)
    for j in prange(n_pixels):
        acc = 0j
        for n in range(n_modes):
            inner = 0j
            for m in range(n_modes):
                inner += beta[n, m] * a_t[j, m]
            acc += np.conj(a_t[j, n]) * inner
        out[j] = acc
    return out
