"""Kernel parity and oracle checks for both execution paths."""

from __future__ import annotations

import random

import numpy as np
import pytest

from annolab import kernels
from annolab.kernels import (
    _band_energies_nb,
    _band_energies_np,
    _edit_distance_nb,
    _edit_distance_np,
    _edit_matrix_nb,
    _edit_matrix_np,
    band_energies,
    dft_basis,
    levenshtein,
    levenshtein_matrix,
    str_codes,
)


def oracle_distance(a: str, b: str) -> int:
    """Textbook quadratic DP, scalar Python; the trusted reference."""
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[n][m]


def random_pair(rng: random.Random, alphabet: str, max_len: int) -> tuple[str, str]:
    a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, max_len)))
    b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, max_len)))
    return a, b


class TestEditDistance:
    def test_known_values(self):
        assert levenshtein("", "") == 0
        assert levenshtein("abc", "abc") == 0
        assert levenshtein("", "ab") == 2
        assert levenshtein("kitten", "sitting") == 3

    def test_matches_oracle_on_random_pairs(self):
        rng = random.Random(11)
        for _ in range(300):
            a, b = random_pair(rng, "abcd", 12)
            assert levenshtein(a, b) == oracle_distance(a, b), (a, b)

    def test_both_paths_agree(self):
        rng = random.Random(12)
        for _ in range(100):
            a, b = random_pair(rng, "abc", 10)
            ca, cb = str_codes(a), str_codes(b)
            assert _edit_distance_nb(ca, cb) == _edit_distance_np(ca, cb)

    def test_unicode_beyond_bmp(self):
        assert levenshtein("a\U0001F600b", "ab") == 1

    def test_matrix_corner_is_distance(self):
        rng = random.Random(13)
        for _ in range(50):
            a, b = random_pair(rng, "xyz", 9)
            m = levenshtein_matrix(a, b)
            assert m.shape == (len(a) + 1, len(b) + 1)
            assert int(m[-1, -1]) == oracle_distance(a, b)

    def test_matrix_paths_identical(self):
        rng = random.Random(14)
        for _ in range(50):
            a, b = random_pair(rng, "pq", 8)
            ca, cb = str_codes(a), str_codes(b)
            assert np.array_equal(_edit_matrix_nb(ca, cb), _edit_matrix_np(ca, cb))

    def test_matrix_cells_match_oracle_dp(self):
        a, b = "abcab", "cabba"
        m = levenshtein_matrix(a, b)
        for i in range(len(a) + 1):
            for j in range(len(b) + 1):
                assert int(m[i, j]) == oracle_distance(a[:i], b[:j])


def synth_frames(n_frames: int, frame_len: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_frames, frame_len))


class TestBandEnergies:
    def test_power_spectrum_matches_fft_oracle(self):
        # Direct-DFT power over the truncated basis must equal
        # |rfft(zero-padded frame)|^2: padding adds nothing to the sums.
        frame_len, dft_len = 40, 64
        frames = synth_frames(3, frame_len, seed=5)
        window = np.hanning(frame_len)
        cos_b, sin_b = dft_basis(frame_len, dft_len)
        bands = np.eye(dft_len // 2 + 1)  # identity bank exposes raw power
        got = np.exp(band_energies(frames, window, cos_b, sin_b, bands)) - 1e-10
        padded = np.zeros((3, dft_len))
        padded[:, :frame_len] = frames * window
        want = np.abs(np.fft.rfft(padded, n=dft_len, axis=1)) ** 2
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_both_paths_agree(self):
        frame_len, dft_len, n_bands = 50, 128, 16
        frames = synth_frames(7, frame_len, seed=6)
        window = np.hanning(frame_len)
        cos_b, sin_b = dft_basis(frame_len, dft_len)
        rng = np.random.default_rng(7)
        bands = np.abs(rng.standard_normal((dft_len // 2 + 1, n_bands)))
        a = _band_energies_nb(
            frames,
            window,
            np.ascontiguousarray(cos_b.T),
            np.ascontiguousarray(sin_b.T),
            np.ascontiguousarray(bands.T),
        )
        b = _band_energies_np(frames, window, cos_b, sin_b, bands)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_silence_gives_log_floor(self):
        frame_len, dft_len = 30, 64
        frames = np.zeros((2, frame_len))
        window = np.hanning(frame_len)
        cos_b, sin_b = dft_basis(frame_len, dft_len)
        bands = np.ones((dft_len // 2 + 1, 4))
        out = band_energies(frames, window, cos_b, sin_b, bands)
        np.testing.assert_allclose(out, np.log(1e-10), atol=1e-9)


def test_selected_path_is_reported():
    assert kernels.USE_NUMBA in (True, False)
    if kernels.USE_NUMBA:
        assert kernels.HAS_NUMBA
