"""Hot numeric kernels: edit-distance DP and spectral band energies.

Every kernel has two implementations selected at import time:

  * a numba ``@njit`` version compiled on first call (cached on disk), and
  * a pure-numpy version using vectorized row updates.

Set ``ANNOLAB_NUMBA=0`` to force the numpy path even when numba is
installed; ``annolab.kernels.USE_NUMBA`` reports which path is live.
The two paths agree exactly on integer kernels and to <1e-9 on float
kernels (see tests/test_kernels.py and benchmarks/kernel_bench.py).
"""

from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("ANNOLAB_NUMBA", "1") != "0"

try:
    if not _WANT_NUMBA:
        raise ImportError("disabled via ANNOLAB_NUMBA=0")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = HAS_NUMBA


def str_codes(s: str) -> np.ndarray:
    """Unicode scalar values of `s` as an int64 vector."""
    if not s:
        return np.empty(0, dtype=np.int64)
    return np.frombuffer(s.encode("utf-32-le"), dtype="<u4").astype(np.int64)


# --- edit distance ------------------------------------------------------------


@njit(cache=True)
def _edit_distance_nb(a: np.ndarray, b: np.ndarray) -> int:
    n, m = len(a), len(b)
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])


def _edit_distance_np(a: np.ndarray, b: np.ndarray) -> int:
    n, m = len(a), len(b)
    if m == 0:
        return n
    prev = np.arange(m + 1)
    idx = np.arange(1, m + 1)
    for i in range(1, n + 1):
        cost = (b != a[i - 1]).astype(np.int64)
        cur0 = np.minimum(prev[:-1] + cost, prev[1:] + 1)
        # In-row left-to-right relaxation, vectorized: cur[j] =
        # min_{k<=j}(cur0[k] + j - k) and the insertion chain from cur[0]=i.
        tail = np.minimum.accumulate(cur0 - idx) + idx
        tail = np.minimum(tail, i + idx)
        prev = np.concatenate(([i], tail))
    return int(prev[m])


@njit(cache=True)
def _edit_matrix_nb(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, m = len(a), len(b)
    d = np.empty((n + 1, m + 1), dtype=np.int32)
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        d[i, 0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = d[i - 1, j - 1] + cost
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            d[i, j] = best
    return d


def _edit_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, m = len(a), len(b)
    d = np.empty((n + 1, m + 1), dtype=np.int32)
    d[0, :] = np.arange(m + 1)
    if m == 0:
        d[:, 0] = np.arange(n + 1)
        return d
    idx = np.arange(1, m + 1)
    for i in range(1, n + 1):
        prev = d[i - 1].astype(np.int64)
        cost = (b != a[i - 1]).astype(np.int64)
        cur0 = np.minimum(prev[:-1] + cost, prev[1:] + 1)
        tail = np.minimum.accumulate(cur0 - idx) + idx
        tail = np.minimum(tail, i + idx)
        d[i, 0] = i
        d[i, 1:] = tail.astype(np.int32)
    return d


def edit_distance_codes(a: np.ndarray, b: np.ndarray) -> int:
    if USE_NUMBA:
        return _edit_distance_nb(a, b)
    return _edit_distance_np(a, b)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance between two strings."""
    return edit_distance_codes(str_codes(a), str_codes(b))


def levenshtein_matrix(a: str, b: str) -> np.ndarray:
    """Full (len(a)+1, len(b)+1) DP cost matrix, for backtrace callers."""
    ca, cb = str_codes(a), str_codes(b)
    if USE_NUMBA:
        return _edit_matrix_nb(ca, cb)
    return _edit_matrix_np(ca, cb)


# --- spectral band energies ---------------------------------------------------
#
# The Fourier basis is evaluated at dft_len resolution but only over the
# first frame_len rows: zero-padded samples contribute nothing to the sums,
# so padding never needs to materialize. Basis construction is cheap, done
# once per (frame_len, dft_len) by callers, and shared by both paths.


def dft_basis(frame_len: int, dft_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine/sine DFT basis of shape (frame_len, dft_len//2+1)."""
    t = np.arange(frame_len, dtype=np.float64)[:, None]
    k = np.arange(dft_len // 2 + 1, dtype=np.float64)[None, :]
    ang = 2.0 * np.pi * t * k / float(dft_len)
    return np.cos(ang), np.sin(ang)


@njit(cache=True, fastmath=True)
def _band_energies_nb(
    frames: np.ndarray,
    window: np.ndarray,
    cos_t: np.ndarray,
    sin_t: np.ndarray,
    bands_t: np.ndarray,
) -> np.ndarray:
    # Bases arrive transposed to (n_bins, frame_len) / (n_bands, n_bins) so
    # every reduction runs over contiguous memory and vectorizes.
    n_frames, frame_len = frames.shape
    n_bins = cos_t.shape[0]
    n_bands = bands_t.shape[0]
    out = np.empty((n_frames, n_bands), dtype=np.float64)
    buf = np.empty(frame_len, dtype=np.float64)
    power = np.empty(n_bins, dtype=np.float64)
    for f in range(n_frames):
        for t in range(frame_len):
            buf[t] = frames[f, t] * window[t]
        for k in range(n_bins):
            re = 0.0
            im = 0.0
            for t in range(frame_len):
                re += buf[t] * cos_t[k, t]
                im += buf[t] * sin_t[k, t]
            power[k] = re * re + im * im
        for bnd in range(n_bands):
            acc = 0.0
            for k in range(n_bins):
                acc += power[k] * bands_t[bnd, k]
            out[f, bnd] = np.log(acc + 1e-10)
    return out


def _band_energies_np(
    frames: np.ndarray,
    window: np.ndarray,
    cos_b: np.ndarray,
    sin_b: np.ndarray,
    bands: np.ndarray,
) -> np.ndarray:
    w = frames * window
    re = w @ cos_b
    im = w @ sin_b
    power = re * re + im * im
    return np.log(power @ bands + 1e-10)


def band_energies(
    frames: np.ndarray,
    window: np.ndarray,
    cos_b: np.ndarray,
    sin_b: np.ndarray,
    bands: np.ndarray,
) -> np.ndarray:
    """Per-frame log band energies.

    frames: (n_frames, frame_len) float64 raw samples
    window: (frame_len,) analysis window
    cos_b, sin_b: DFT basis from dft_basis()
    bands: (n_bins, n_bands) filterbank weights
    returns: (n_frames, n_bands) log(energy + 1e-10)
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if USE_NUMBA:
        cos_t = np.ascontiguousarray(cos_b.T)
        sin_t = np.ascontiguousarray(sin_b.T)
        bands_t = np.ascontiguousarray(bands.T)
        return _band_energies_nb(frames, window, cos_t, sin_t, bands_t)
    return _band_energies_np(frames, window, cos_b, sin_b, bands)
