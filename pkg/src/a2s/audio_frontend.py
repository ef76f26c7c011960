"""Beat-annotated audio to fixed-tempo segments and transcriber embeddings.

The pipeline consumes accompaniment audio (vocals already removed
upstream, e.g. by a source-separation hook script).  Segments are 8 beats
time-stretched to 95 BPM at 16 kHz; a piano-transcriber backend turns each
segment into stacked onset/frame/velocity matrices.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import kernels
from .errors import (BackendUnavailable, ContractViolation, DataError,
                     InsufficientBeats, NonDownbeatStart, ShapeError)

SAMPLE_RATE = 16000
NOMINAL_BPM = 95
BEAT_SECONDS = 60.0 / NOMINAL_BPM
N_SAMPLES = round(8 * BEAT_SECONDS * SAMPLE_RATE)   # 80842
STFT_N_FFT = 2048
STFT_HOP = 512
N_FRAMES = N_SAMPLES // STFT_HOP + 1                # 158 (centered STFT)
N_KEYS = 88
KEY_MIDI_LOW = 21                                   # A0; key index = midi - 21

PV_N_FFT = 1024
PV_HOP = 256


@dataclass
class BeatGrid:
    """Strictly increasing beat times (seconds) with per-beat downbeat flags."""
    beat_times: np.ndarray
    downbeat_flags: np.ndarray

    def __post_init__(self):
        self.beat_times = np.asarray(self.beat_times, dtype=np.float64)
        self.downbeat_flags = np.asarray(self.downbeat_flags, dtype=bool)
        if self.beat_times.ndim != 1 or len(self.beat_times) != len(self.downbeat_flags):
            raise ContractViolation("beat_times and downbeat_flags must be parallel 1-d arrays")
        if len(self.beat_times) >= 2 and np.any(np.diff(self.beat_times) <= 0):
            raise DataError("beat times must be strictly increasing")

    def __len__(self):
        return len(self.beat_times)

    @classmethod
    def from_file(cls, path) -> "BeatGrid":
        """Read `time_seconds<TAB>is_downbeat{0,1}` lines."""
        times, flags = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
                try:
                    times.append(float(parts[0]))
                    flags.append(bool(int(parts[1])))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
        if not times:
            raise DataError(f"{path}: no beats found")
        return cls(np.array(times), np.array(flags))

    def extended(self, n_beats: int) -> "BeatGrid":
        """Extrapolate the right edge (last inter-beat interval) up to n_beats."""
        if len(self) >= n_beats:
            return self
        if len(self) < 2:
            raise InsufficientBeats("cannot extrapolate a grid with fewer than 2 beats")
        step = self.beat_times[-1] - self.beat_times[-2]
        extra = np.arange(1, n_beats - len(self) + 1) * step + self.beat_times[-1]
        return BeatGrid(np.concatenate([self.beat_times, extra]),
                        np.concatenate([self.downbeat_flags, np.zeros(len(extra), dtype=bool)]))

    def beat_of_time(self, t) -> np.ndarray:
        return np.interp(t, self.beat_times, np.arange(len(self), dtype=np.float64))


@dataclass
class AudioSegment:
    """One 8-beat accompaniment window at 95 BPM / 16 kHz, fixed length."""
    samples: np.ndarray
    nominal_bpm: int = NOMINAL_BPM

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (N_SAMPLES,):
            raise ContractViolation(f"segment must be exactly {N_SAMPLES} samples, got {self.samples.shape}")


@dataclass
class TranscriberEmbedding:
    """Stacked onset/frame/velocity matrices, each (158, 88) in [0,1]."""
    onset: np.ndarray
    frame: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        for name in ("onset", "frame", "velocity"):
            m = np.asarray(getattr(self, name), dtype=np.float32)
            if m.shape != (N_FRAMES, N_KEYS):
                raise ShapeError(f"{name} must be {N_FRAMES}x{N_KEYS}, got {m.shape}")
            if m.min() < 0.0 or m.max() > 1.0:
                raise ContractViolation(f"{name} values must lie in [0,1]")
            setattr(self, name, m)

    def stack(self) -> np.ndarray:
        """(3, 158, 88) float32, channel order onset, frame, velocity."""
        return np.stack([self.onset, self.frame, self.velocity])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "TranscriberEmbedding":
        if arr.shape != (3, N_FRAMES, N_KEYS):
            raise ShapeError(f"expected (3,{N_FRAMES},{N_KEYS}), got {arr.shape}")
        return cls(arr[0], arr[1], arr[2])


def load_wav(path) -> tuple[np.ndarray, int]:
    """Load a WAV file as mono float64 in [-1,1] (stereo is averaged)."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data, int(rate)


def resample_to_16k(samples: np.ndarray, rate: int) -> np.ndarray:
    if rate == SAMPLE_RATE:
        return samples
    g = np.gcd(rate, SAMPLE_RATE)
    return resample_poly(samples, SAMPLE_RATE // g, rate // g)


def _stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered magnitude-preserving STFT, zero padding, Hann window.

    Returns complex (n_bins, n_frames), n_frames = 1 + len(x)//hop.
    """
    pad = n_fft // 2
    xp = np.concatenate([np.zeros(pad), x.astype(np.float64), np.zeros(pad)])
    n_frames = 1 + len(x) // hop
    window = np.hanning(n_fft)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * window
    return np.fft.rfft(frames, axis=1).T


def _istft(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1)
    window = np.hanning(n_fft)
    out, env = kernels.overlap_add(np.ascontiguousarray(frames), window, hop)
    nz = env > 1e-10
    out[nz] /= env[nz]
    pad = n_fft // 2
    return out[pad:]


def _fit_length(x: np.ndarray, target: int) -> np.ndarray:
    if len(x) >= target:
        return x[:target]
    return np.concatenate([x, np.zeros(target - len(x))])


def time_stretch(x: np.ndarray, target_len: int) -> np.ndarray:
    """Phase-vocoder stretch of `x` to exactly `target_len` samples.

    Equal lengths pass through untouched so a 95 BPM / 16 kHz source is
    bit-exact.
    """
    if len(x) == target_len:
        return x.astype(np.float64, copy=True)
    if target_len <= 0:
        return np.zeros(0)
    if len(x) == 0:
        return np.zeros(target_len)
    spec = _stft(x, PV_N_FFT, PV_HOP)
    n_frames = spec.shape[1]
    n_out = max(1 + target_len // PV_HOP, 2)
    steps = np.linspace(0.0, n_frames - 1.0, n_out)
    phase_advance = 2.0 * np.pi * PV_HOP * np.arange(spec.shape[0]) / PV_N_FFT
    out_spec = kernels.phase_vocoder_core(
        np.ascontiguousarray(np.abs(spec)), np.ascontiguousarray(np.angle(spec)),
        steps, phase_advance)
    y = _istft(out_spec, PV_N_FFT, PV_HOP)
    return _fit_length(y, target_len)


def stretch_and_resample(samples: np.ndarray, rate: int, grid: BeatGrid,
                         start_beat: int) -> AudioSegment:
    """Map 8 source beats starting at `start_beat` onto the fixed 95 BPM grid.

    Each beat interval is stretched independently (piecewise-constant
    factor) so beat boundaries stay exactly aligned.
    """
    if start_beat < 0 or start_beat + 8 > len(grid) - 1:
        raise InsufficientBeats(
            f"grid has {len(grid)} beats; segment at beat {start_beat} needs {start_beat + 9}")
    if not grid.downbeat_flags[start_beat]:
        raise NonDownbeatStart(f"beat {start_beat} is not a downbeat")

    x = resample_to_16k(np.asarray(samples, dtype=np.float64), rate)
    src_bounds = np.round(grid.beat_times[start_beat:start_beat + 9] * SAMPLE_RATE).astype(np.int64)
    tgt_bounds = np.round(np.arange(9) * BEAT_SECONDS * SAMPLE_RATE).astype(np.int64)

    pieces = []
    for i in range(8):
        lo, hi = src_bounds[i], src_bounds[i + 1]
        target = int(tgt_bounds[i + 1] - tgt_bounds[i])
        chunk = x[max(lo, 0):max(hi, 0)]
        if len(chunk) < hi - lo:  # source ran out; pad with silence
            chunk = _fit_length(chunk, hi - lo)
        pieces.append(time_stretch(chunk, target))
    out = np.concatenate(pieces)
    return AudioSegment(_fit_length(out, N_SAMPLES).astype(np.float32))


# --- transcriber backends ---------------------------------------------------

_FILTERBANK = None


def _semitone_bands() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-key rfft bin ranges [start, end) plus a nearest-bin fallback."""
    global _FILTERBANK
    if _FILTERBANK is None:
        freqs = np.fft.rfftfreq(STFT_N_FFT, 1.0 / SAMPLE_RATE)
        starts = np.zeros(N_KEYS, dtype=np.int64)
        ends = np.zeros(N_KEYS, dtype=np.int64)
        nearest = np.zeros(N_KEYS, dtype=np.int64)
        for k in range(N_KEYS):
            f = 440.0 * 2.0 ** ((k + KEY_MIDI_LOW - 69) / 12.0)
            lo, hi = f * 2.0 ** (-1 / 24), f * 2.0 ** (1 / 24)
            starts[k] = np.searchsorted(freqs, lo, side="left")
            ends[k] = np.searchsorted(freqs, hi, side="left")
            nearest[k] = int(np.argmin(np.abs(freqs - f)))
        _FILTERBANK = (starts, ends, nearest)
    return _FILTERBANK


# Band magnitude of a full-scale sine roughly equals the Hann window sum.
_REF_ENERGY = float(np.sum(np.hanning(STFT_N_FFT)))


def band_features(segment: AudioSegment) -> np.ndarray:
    """(158, 88) semitone-band magnitudes normalized into [0,1]."""
    mag = np.abs(_stft(segment.samples, STFT_N_FFT, STFT_HOP)).T  # (frames, bins)
    starts, ends, nearest = _semitone_bands()
    energies = kernels.band_energy(np.ascontiguousarray(mag), starts, ends, nearest)
    return np.clip(energies / _REF_ENERGY, 0.0, 1.0).astype(np.float32)


class TranscriberBackend:
    """Maps an AudioSegment to onset/frame/velocity matrices."""

    name = "base"

    def transcribe(self, segment: AudioSegment) -> TranscriberEmbedding:
        raise NotImplementedError

    def cache_tag(self) -> str:
        return self.name


class StubTranscriber(TranscriberBackend):
    """Deterministic DSP stand-in for a learned transcriber.

    frame = semitone filterbank magnitudes (normalized), onset = positive
    temporal difference of frame, velocity = frame.
    """

    name = "stub"

    def transcribe(self, segment: AudioSegment) -> TranscriberEmbedding:
        frame = band_features(segment)
        onset = np.empty_like(frame)
        onset[0] = frame[0]
        onset[1:] = np.maximum(frame[1:] - frame[:-1], 0.0)
        return TranscriberEmbedding(onset=onset, frame=frame, velocity=frame.copy())


class PretrainedTranscriber(TranscriberBackend):
    """Learned refinement on top of the filterbank features.

    Weights come from a versioned checkpoint (config key
    `transcriber.weights`); the module can be frozen or fine-tuned in-graph
    by the trainer.
    """

    name = "pretrained"

    def __init__(self, weights_path, freeze: bool = True):
        import torch

        from .model import TranscriberNet

        if weights_path is None or not Path(weights_path).is_file():
            raise BackendUnavailable(f"transcriber weights not found: {weights_path}")
        payload = torch.load(weights_path, map_location="cpu", weights_only=True)
        if not isinstance(payload, dict) or payload.get("format") != "a2s-transcriber-1":
            raise BackendUnavailable(f"{weights_path}: not a transcriber checkpoint")
        self.net = TranscriberNet()
        self.net.load_state_dict(payload["state_dict"])
        self.net.eval()
        if freeze:
            for p in self.net.parameters():
                p.requires_grad_(False)
        self.freeze = freeze
        self.weights_path = str(weights_path)

    def cache_tag(self) -> str:
        return f"pretrained:{os.path.basename(self.weights_path)}"

    def transcribe(self, segment: AudioSegment) -> TranscriberEmbedding:
        import torch

        feats = torch.from_numpy(band_features(segment))[None, None]
        with torch.no_grad():
            out = self.net(feats)[0].numpy()
        return TranscriberEmbedding.from_stack(out)


def get_backend(name: str, weights_path=None, freeze: bool = True) -> TranscriberBackend:
    if name == "stub":
        return StubTranscriber()
    if name == "pretrained":
        return PretrainedTranscriber(weights_path, freeze=freeze)
    raise BackendUnavailable(f"unknown transcriber backend {name!r}")


def transcribe_embed(segment: AudioSegment, backend: TranscriberBackend) -> TranscriberEmbedding:
    """Run the backend and enforce the shape/range contract."""
    emb = backend.transcribe(segment)
    if not isinstance(emb, TranscriberEmbedding):
        raise ShapeError("backend must return a TranscriberEmbedding")
    return emb
