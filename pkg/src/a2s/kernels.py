"""Hot numeric kernels for the audio frontend.

Each kernel has a compiled numba variant and a pure-numpy fallback with
identical semantics.  Selection happens once at import time via the
``A2S_NUMBA`` environment variable ("0"/"false"/"off" disables numba);
``benchmarks/bench_kernels.py`` compares the two paths.

Kernels operate on float64 and keep accumulation order identical between
variants so results agree to rounding noise.
"""
from __future__ import annotations

import os

import numpy as np

_TWO_PI = 2.0 * np.pi


def _env_wants_numba() -> bool:
    return os.environ.get("A2S_NUMBA", "1").strip().lower() not in ("0", "false", "off")


try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and _env_wants_numba()


def phase_vocoder_numpy(mag: np.ndarray, phase: np.ndarray, steps: np.ndarray,
                        phase_advance: np.ndarray) -> np.ndarray:
    """Resample an STFT along time with phase accumulation.

    mag, phase: (n_bins, n_frames); steps: fractional source-frame positions,
    one per output frame; phase_advance: expected per-hop phase advance per bin.
    Returns the complex output spectrogram (n_bins, n_out).
    """
    n_bins, n_frames = mag.shape
    idx = np.minimum(steps.astype(np.int64), n_frames - 1)
    nxt = np.minimum(idx + 1, n_frames - 1)
    frac = steps - idx

    out_mag = mag[:, idx] * (1.0 - frac) + mag[:, nxt] * frac
    dphase = phase[:, nxt] - phase[:, idx] - phase_advance[:, None]
    dphase -= _TWO_PI * np.round(dphase / _TWO_PI)
    increments = phase_advance[:, None] + dphase

    out_phase = np.empty_like(out_mag)
    out_phase[:, 0] = phase[:, idx[0]]
    if out_phase.shape[1] > 1:
        out_phase[:, 1:] = out_phase[:, :1] + np.cumsum(increments[:, :-1], axis=1)
    return out_mag * np.exp(1j * out_phase)


def _phase_vocoder_loop(mag, phase, steps, phase_advance):
    n_bins, n_frames = mag.shape
    n_out = steps.shape[0]
    out = np.empty((n_bins, n_out), dtype=np.complex128)
    for b in range(n_bins):
        acc = phase[b, min(int(steps[0]), n_frames - 1)]
        adv = phase_advance[b]
        for t in range(n_out):
            i = int(steps[t])
            if i > n_frames - 1:
                i = n_frames - 1
            j = i + 1 if i + 1 < n_frames else n_frames - 1
            frac = steps[t] - i
            m = mag[b, i] * (1.0 - frac) + mag[b, j] * frac
            out[b, t] = m * (np.cos(acc) + 1j * np.sin(acc))
            dp = phase[b, j] - phase[b, i] - adv
            dp -= _TWO_PI * np.round(dp / _TWO_PI)
            acc += adv + dp
    return out


def overlap_add_numpy(frames: np.ndarray, window: np.ndarray, hop: int) -> tuple[np.ndarray, np.ndarray]:
    """Windowed overlap-add of time-domain frames (n_frames, n_fft).

    Returns (signal, window-square envelope); caller divides where the
    envelope is non-negligible.
    """
    n_frames, n_fft = frames.shape
    out_len = hop * (n_frames - 1) + n_fft
    out = np.zeros(out_len)
    env = np.zeros(out_len)
    wsq = window * window
    for t in range(n_frames):
        start = t * hop
        out[start:start + n_fft] += frames[t] * window
        env[start:start + n_fft] += wsq
    return out, env


def _overlap_add_loop(frames, window, hop):
    n_frames, n_fft = frames.shape
    out_len = hop * (n_frames - 1) + n_fft
    out = np.zeros(out_len)
    env = np.zeros(out_len)
    for t in range(n_frames):
        start = t * hop
        for i in range(n_fft):
            w = window[i]
            out[start + i] += frames[t, i] * w
            env[start + i] += w * w
    return out, env


def band_energy_numpy(mag: np.ndarray, band_start: np.ndarray, band_end: np.ndarray,
                      nearest_bin: np.ndarray) -> np.ndarray:
    """Sum |STFT| bins into semitone bands: (n_frames, n_bins) -> (n_frames, n_bands).

    Bands too narrow to contain a bin fall back to their nearest bin.
    """
    n_frames = mag.shape[0]
    n_bands = band_start.shape[0]
    out = np.zeros((n_frames, n_bands))
    for k in range(n_bands):
        if band_end[k] > band_start[k]:
            out[:, k] = mag[:, band_start[k]:band_end[k]].sum(axis=1)
        else:
            out[:, k] = mag[:, nearest_bin[k]]
    return out


def _band_energy_loop(mag, band_start, band_end, nearest_bin):
    n_frames = mag.shape[0]
    n_bands = band_start.shape[0]
    out = np.zeros((n_frames, n_bands))
    for t in range(n_frames):
        for k in range(n_bands):
            lo, hi = band_start[k], band_end[k]
            if hi > lo:
                s = 0.0
                for b in range(lo, hi):
                    s += mag[t, b]
                out[t, k] = s
            else:
                out[t, k] = mag[t, nearest_bin[k]]
    return out


if NUMBA_ENABLED:
    phase_vocoder_core = numba.njit(cache=True)(_phase_vocoder_loop)
    overlap_add = numba.njit(cache=True)(_overlap_add_loop)
    band_energy = numba.njit(cache=True)(_band_energy_loop)
else:
    phase_vocoder_core = phase_vocoder_numpy
    overlap_add = overlap_add_numpy
    band_energy = band_energy_numpy


def warmup():
    """Trigger JIT compilation so timing-sensitive callers pay it up front."""
    mag = np.ones((4, 6))
    phase = np.zeros((4, 6))
    steps = np.linspace(0.0, 4.0, 5)
    adv = np.linspace(0.0, np.pi, 4)
    phase_vocoder_core(mag, phase, steps, adv)
    overlap_add(np.ones((3, 8)), np.hanning(8), 4)
    band_energy(np.ones((3, 16)), np.array([0, 4]), np.array([4, 4]),
                np.array([0, 8]))
