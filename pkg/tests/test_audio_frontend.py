import numpy as np
import pytest
import torch
from scipy.io import wavfile

from a2s import kernels
from a2s.audio_frontend import (AudioSegment, BeatGrid, N_FRAMES, N_KEYS,
                                N_SAMPLES, SAMPLE_RATE, PretrainedTranscriber,
                                StubTranscriber, get_backend, load_wav,
                                stretch_and_resample, time_stretch,
                                transcribe_embed)
from a2s.errors import (BackendUnavailable, DataError, InsufficientBeats,
                        NonDownbeatStart)


def grid_at(bpm: float, n_beats: int, beats_per_bar: int = 4) -> BeatGrid:
    times = np.arange(n_beats) * 60.0 / bpm
    return BeatGrid(times, np.arange(n_beats) % beats_per_bar == 0)


def sine(freq: float, seconds: float, rate: int, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def test_stretch_length_formula_120bpm():
    g = grid_at(120.0, 12)
    x = sine(220.0, 6.5, SAMPLE_RATE)
    seg = stretch_and_resample(x, SAMPLE_RATE, g, 0)
    assert seg.samples.shape == (80842,)


def test_identity_stretch_at_95bpm_16k():
    g = grid_at(95.0, 10)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(int(g.beat_times[-1] * SAMPLE_RATE) + SAMPLE_RATE)
    seg = stretch_and_resample(x, SAMPLE_RATE, g, 0)
    assert np.array_equal(seg.samples, x[:N_SAMPLES].astype(np.float32))


def test_silence_in_silence_out():
    g = grid_at(110.0, 10)
    x = np.zeros(int(g.beat_times[-1] * SAMPLE_RATE) + SAMPLE_RATE)
    seg = stretch_and_resample(x, SAMPLE_RATE, g, 0)
    assert not seg.samples.any()


def test_stretch_preserves_tone_frequency():
    # 4 s of 440 Hz at 120 BPM must still read as A4 after stretching
    g = grid_at(120.0, 12)
    x = sine(440.0, 6.5, 22050)
    seg = stretch_and_resample(x, 22050, g, 0)
    emb = StubTranscriber().transcribe(seg)
    assert emb.frame.mean(axis=0).argmax() == 69 - 21


def test_insufficient_beats():
    g = grid_at(95.0, 6)
    with pytest.raises(InsufficientBeats):
        stretch_and_resample(np.zeros(SAMPLE_RATE * 10), SAMPLE_RATE, g, 0)


def test_non_downbeat_start():
    g = grid_at(95.0, 12)
    with pytest.raises(NonDownbeatStart):
        stretch_and_resample(np.zeros(SAMPLE_RATE * 10), SAMPLE_RATE, g, 1)


def test_beat_grid_file_and_errors(tmp_path):
    p = tmp_path / "beats.txt"
    p.write_text("0.0\t1\n0.5\t0\n1.0\t0\n")
    g = BeatGrid.from_file(p)
    assert len(g) == 3 and g.downbeat_flags[0] and not g.downbeat_flags[1]
    p.write_text("0.0\t1\n0.0\t0\n")
    with pytest.raises(DataError):
        BeatGrid.from_file(p)
    p.write_text("")
    with pytest.raises(DataError):
        BeatGrid.from_file(p)


def test_beat_grid_extension():
    g = grid_at(100.0, 8)
    ext = g.extended(10)
    assert len(ext) == 10
    assert ext.beat_times[-1] == pytest.approx(9 * 0.6)
    assert not ext.downbeat_flags[-1]


def test_wav_loading_stereo_and_int(tmp_path):
    rate = 22050
    left = sine(440.0, 0.5, rate)
    stereo = np.stack([left, np.zeros_like(left)], axis=1)
    p = tmp_path / "st.wav"
    wavfile.write(p, rate, (stereo * 32767).astype(np.int16))
    mono, r = load_wav(p)
    assert r == rate and mono.ndim == 1
    assert np.abs(mono).max() == pytest.approx(0.25, abs=0.01)  # averaged channels
    with pytest.raises(DataError):
        load_wav(tmp_path / "missing.wav")


# --- stub transcriber ------------------------------------------------------


def test_stub_silence_is_near_zero():
    emb = StubTranscriber().transcribe(AudioSegment(np.zeros(N_SAMPLES, np.float32)))
    for m in (emb.onset, emb.frame, emb.velocity):
        assert m.shape == (N_FRAMES, N_KEYS)
        assert m.max() < 0.05


def test_stub_a4_peak():
    seg = AudioSegment(sine(440.0, N_SAMPLES / SAMPLE_RATE, SAMPLE_RATE).astype(np.float32))
    emb = StubTranscriber().transcribe(seg)
    assert emb.frame.mean(axis=0).argmax() == 48


def test_stub_shape_and_range_contract():
    rng = np.random.default_rng(3)
    seg = AudioSegment((rng.standard_normal(N_SAMPLES) * 0.7).astype(np.float32))
    emb = transcribe_embed(seg, StubTranscriber())
    assert emb.stack().shape == (3, N_FRAMES, N_KEYS)
    assert emb.stack().min() >= 0.0 and emb.stack().max() <= 1.0


def test_stub_determinism_bitwise():
    rng = np.random.default_rng(4)
    x = (rng.standard_normal(N_SAMPLES) * 0.4).astype(np.float32)
    a = StubTranscriber().transcribe(AudioSegment(x))
    b = StubTranscriber().transcribe(AudioSegment(x.copy()))
    assert np.array_equal(a.stack(), b.stack())


def test_stub_energy_monotone_in_amplitude():
    x = sine(330.0, N_SAMPLES / SAMPLE_RATE, SAMPLE_RATE).astype(np.float32)
    full = StubTranscriber().transcribe(AudioSegment(x)).frame
    for alpha in (0.15, 0.5, 0.9):
        scaled = StubTranscriber().transcribe(AudioSegment((alpha * x))).frame
        assert (scaled <= full + 1e-7).all()


def test_stub_onset_mass_at_tone_start():
    x = np.zeros(N_SAMPLES, dtype=np.float32)
    start = 20 * 512
    x[start:] = sine(440.0, (N_SAMPLES - start) / SAMPLE_RATE, SAMPLE_RATE, 0.6)
    emb = StubTranscriber().transcribe(AudioSegment(x))
    onset_by_frame = emb.onset.sum(axis=1)
    early = onset_by_frame[18:26].mean()
    late = onset_by_frame[40:].mean()
    assert early > 10 * max(late, 1e-6)
    assert onset_by_frame.argmax() in range(18, 26)


# --- pretrained backend -----------------------------------------------------


def test_pretrained_backend_missing_weights(tmp_path):
    with pytest.raises(BackendUnavailable):
        get_backend("pretrained", tmp_path / "nope.pt")
    with pytest.raises(BackendUnavailable):
        get_backend("pretrained", None)
    with pytest.raises(BackendUnavailable):
        get_backend("definitely-not-a-backend")


def test_pretrained_backend_roundtrip(tmp_path):
    from a2s.model import TranscriberNet

    torch.manual_seed(0)
    net = TranscriberNet()
    path = tmp_path / "weights.pt"
    torch.save({"format": "a2s-transcriber-1", "state_dict": net.state_dict()}, path)
    backend = PretrainedTranscriber(path, freeze=True)
    assert all(not p.requires_grad for p in backend.net.parameters())

    seg = AudioSegment(sine(440.0, N_SAMPLES / SAMPLE_RATE, SAMPLE_RATE).astype(np.float32))
    emb1 = backend.transcribe(seg)
    emb2 = backend.transcribe(seg)
    assert emb1.stack().shape == (3, N_FRAMES, N_KEYS)
    assert np.array_equal(emb1.stack(), emb2.stack())
    assert emb1.stack().min() >= 0.0 and emb1.stack().max() <= 1.0

    trainable = PretrainedTranscriber(path, freeze=False)
    assert all(p.requires_grad for p in trainable.net.parameters())

    torch.save({"weights": "wrong"}, path)
    with pytest.raises(BackendUnavailable):
        PretrainedTranscriber(path)


# --- kernel parity: compiled loop vs pure numpy ------------------------------


def test_phase_vocoder_kernel_parity():
    rng = np.random.default_rng(7)
    mag = rng.random((129, 40))
    phase = rng.uniform(-np.pi, np.pi, (129, 40))
    steps = np.linspace(0.0, 39.0, 55)
    adv = 2 * np.pi * 64 * np.arange(129) / 256
    out_np = kernels.phase_vocoder_numpy(mag, phase, steps, adv)
    out_loop = kernels.phase_vocoder_core(mag, phase, steps, adv)
    assert np.allclose(out_np, out_loop, rtol=1e-9, atol=1e-9)


def test_overlap_add_kernel_parity():
    rng = np.random.default_rng(8)
    frames = rng.standard_normal((30, 256))
    window = np.hanning(256)
    a_sig, a_env = kernels.overlap_add_numpy(frames, window, 64)
    b_sig, b_env = kernels.overlap_add(frames, window, 64)
    assert np.allclose(a_sig, b_sig, atol=1e-12)
    assert np.allclose(a_env, b_env, atol=1e-12)


def test_band_energy_kernel_parity():
    rng = np.random.default_rng(9)
    mag = rng.random((50, 1025))
    starts = np.array([0, 10, 10, 500], dtype=np.int64)
    ends = np.array([10, 10, 30, 1025], dtype=np.int64)
    nearest = np.array([5, 10, 20, 700], dtype=np.int64)
    a = kernels.band_energy_numpy(mag, starts, ends, nearest)
    b = kernels.band_energy(mag, starts, ends, nearest)
    assert np.allclose(a, b, atol=1e-12)


def test_time_stretch_roundtrip_energy():
    x = sine(440.0, 1.0, SAMPLE_RATE)
    y = time_stretch(x, 2 * len(x))
    assert len(y) == 2 * len(x)
    assert np.abs(y[1000:-1000]).max() > 0.2  # content survives stretching
