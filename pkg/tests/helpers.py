"""Shared builders for the test suite."""
import numpy as np
import torch

from a2s.audio_frontend import N_FRAMES, N_KEYS, TranscriberEmbedding
from a2s.chords import chord_frame
from a2s.config import ModelConfig
from a2s.dataset import TrainingExample
from a2s.symbolic import (ChordProgression, NoteEvent, SegmentScore,
                          extract_features)

TINY = dict(chord_enc_hidden=32, chord_dec_hidden=48, conv_channels=8,
            enc_gru_hidden=48, feat_hidden=48, dec_time_hidden=96,
            dec_note_hidden=64, pitch_emb=24, dur_emb=8, feat_emb=16, z_inject=24)


def tiny_model_config(**kw) -> ModelConfig:
    args = dict(TINY)
    args.update(kw)
    return ModelConfig(**args)


def random_score(rng: np.random.Generator, n_notes: int = 20,
                 pitch_lo: int = 24, pitch_hi: int = 104) -> SegmentScore:
    notes = [NoteEvent(int(o), int(p), int(d)) for o, p, d in zip(
        rng.integers(0, 32, n_notes),
        rng.integers(pitch_lo, pitch_hi, n_notes),
        rng.integers(1, 9, n_notes))]
    return SegmentScore(notes)


def random_progression(rng: np.random.Generator) -> ChordProgression:
    labels = ["C:maj", "G:maj", "A:min", "F:maj", "D:min", "E:min", "A:min7", "G:maj/5"]
    frames = np.stack([chord_frame(labels[int(rng.integers(len(labels)))])
                       for _ in range(8)])
    return ChordProgression(frames)


def random_embedding(rng: np.random.Generator) -> TranscriberEmbedding:
    arr = (rng.random((3, N_FRAMES, N_KEYS)) * 0.6).astype(np.float32)
    return TranscriberEmbedding.from_stack(arr)


def random_example(rng: np.random.Generator, song_id: str = "song",
                   segment_index: int = 0, n_notes: int = 20,
                   with_embedding: bool = True) -> TrainingExample:
    score = random_score(rng, n_notes)
    melody = random_score(rng, 6, 72, 96)
    return TrainingExample(
        song_id=song_id,
        segment_index=segment_index,
        chord=random_progression(rng),
        score=score,
        melody=melody,
        features=extract_features(score, melody),
        embedding=random_embedding(rng) if with_embedding else None,
    )


def zero_grads_or_none(params) -> bool:
    return all(p.grad is None or torch.all(p.grad == 0) for p in params)
