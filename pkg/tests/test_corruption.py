import numpy as np
import pytest

from helpers import random_score

from a2s.corruption import (CorruptionSpec, Stage, corrupt_for_stage,
                            draw_p_base, mask_lead_voice, mask_probability,
                            random_pitch_weighted_mask, rng_for_segment)
from a2s.errors import ContractViolation, MissingContext
from a2s.symbolic import NoteEvent, SegmentScore


def test_mask_lead_voice_drops_top_of_chord():
    chord = SegmentScore([NoteEvent(0, 60, 4), NoteEvent(0, 64, 4), NoteEvent(0, 67, 4)])
    out = mask_lead_voice(chord)
    assert sorted(n.pitch for n in out.notes) == [60, 64]


def test_mask_lead_voice_empty_and_monophonic():
    assert mask_lead_voice(SegmentScore()).is_empty()
    mono = SegmentScore([NoteEvent(t, 60 + t, 2) for t in range(0, 32, 4)])
    assert mask_lead_voice(mono).is_empty()


def test_mask_lead_voice_per_step():
    s = SegmentScore([NoteEvent(0, 60, 2), NoteEvent(0, 72, 2),
                      NoteEvent(8, 55, 2), NoteEvent(8, 59, 2), NoteEvent(8, 62, 2)])
    out = mask_lead_voice(s)
    assert {(n.onset_step, n.pitch) for n in out.notes} == {(0, 60), (8, 55), (8, 59)}


def test_random_mask_deterministic():
    score = random_score(np.random.default_rng(0), 40)
    spec = CorruptionSpec(stage=Stage.PRETRAIN, seed=3)
    a = random_pitch_weighted_mask(score, spec, np.random.default_rng(99))
    b = random_pitch_weighted_mask(score, spec, np.random.default_rng(99))
    assert a == b


def test_random_mask_degenerate_all_masked():
    score = random_score(np.random.default_rng(1), 30)
    spec = CorruptionSpec(p_base_range=(1.0, 1.0), pitch_slope=0.0,
                          prob_clamp=(0.05, 1.0))
    out = random_pitch_weighted_mask(score, spec, np.random.default_rng(0))
    assert out.is_empty()


def test_random_mask_monte_carlo_rate():
    # 10,000 notes at pitch 60 (the pivot), p_base forced to 0.65
    notes = [NoteEvent(t % 32, 60, 1) for t in range(32)]
    spec = CorruptionSpec(p_base_range=(0.65, 0.65))
    kept = 0
    total = 0
    rng = np.random.default_rng(123)
    score = SegmentScore(notes)
    for _ in range(10000 // len(score.notes)):
        out = random_pitch_weighted_mask(score, spec, rng)
        kept += len(out)
        total += len(score.notes)
    rate = 1.0 - kept / total
    assert rate == pytest.approx(0.65, abs=0.02)


def test_mask_probability_monotone_nonincreasing_in_pitch():
    spec = CorruptionSpec()
    probs = [mask_probability(p, 0.65, spec) for p in range(128)]
    assert all(a >= b for a, b in zip(probs, probs[1:]))
    assert all(0.05 <= p <= 0.95 for p in probs)


def test_aggregate_mask_rate_band():
    rng = np.random.default_rng(5)
    spec = CorruptionSpec(stage=Stage.PRETRAIN, seed=0)
    kept = total = 0
    for seed in range(40):
        pitches = np.random.default_rng(seed).integers(36, 85, 300)
        score = SegmentScore([NoteEvent(int(i % 32), int(p), 1)
                              for i, p in enumerate(pitches)])
        out = random_pitch_weighted_mask(score, spec, rng)
        kept += len(out)
        total += len(score.notes)
    assert total >= 10_000
    rate = 1.0 - kept / total
    assert 0.45 <= rate <= 0.85


def test_masking_only_removes_notes():
    rng = np.random.default_rng(8)
    for seed in range(10):
        score = random_score(np.random.default_rng(seed), 30)
        out = random_pitch_weighted_mask(score, CorruptionSpec(), rng)
        assert set(out.notes) <= set(score.notes)
        out2 = mask_lead_voice(score)
        assert set(out2.notes) <= set(score.notes)


def test_corrupt_for_stage_warmup():
    chord = SegmentScore([NoteEvent(0, 60, 4), NoteEvent(0, 64, 4), NoteEvent(0, 67, 4)])
    out = corrupt_for_stage(chord, CorruptionSpec(stage=Stage.WARMUP),
                            np.random.default_rng(0))
    assert sorted(n.pitch for n in out.notes) == [60, 64]


def test_corrupt_for_stage_pretrain_composition():
    score = random_score(np.random.default_rng(2), 40)
    spec = CorruptionSpec(stage=Stage.PRETRAIN, seed=7)
    got = corrupt_for_stage(score, spec, np.random.default_rng(7))
    expect = random_pitch_weighted_mask(mask_lead_voice(score), spec,
                                        np.random.default_rng(7))
    assert got == expect


def test_corrupt_for_stage_prior_sentinel():
    score = random_score(np.random.default_rng(3), 10)
    out = corrupt_for_stage(score, CorruptionSpec(stage=Stage.FINETUNE_PRIOR),
                            np.random.default_rng(0))
    assert out.is_empty()


def test_corrupt_for_stage_autoregressive():
    score = random_score(np.random.default_rng(4), 10)
    prev = random_score(np.random.default_rng(5), 12)
    spec = CorruptionSpec(stage=Stage.FINETUNE_AUTOREGRESSIVE)
    out = corrupt_for_stage(score, spec, np.random.default_rng(0), previous=prev)
    assert out == prev  # passed through uncorrupted
    with pytest.raises(MissingContext):
        corrupt_for_stage(score, spec, np.random.default_rng(0), previous=None)


def test_ramp_mode_progress():
    spec = CorruptionSpec(ramp=True, ramp_progress=0.0)
    assert draw_p_base(spec, np.random.default_rng(0)) == pytest.approx(0.5)
    spec.ramp_progress = 1.0
    assert draw_p_base(spec, np.random.default_rng(0)) == pytest.approx(0.8)
    spec.ramp_progress = 0.5
    assert draw_p_base(spec, np.random.default_rng(0)) == pytest.approx(0.65)


def test_spec_validation():
    with pytest.raises(ContractViolation):
        CorruptionSpec(prob_clamp=(0.9, 0.1))
    with pytest.raises(ContractViolation):
        CorruptionSpec(p_base_range=(0.5, 1.2))


def test_worker_rng_streams_stable():
    a = rng_for_segment(1, "songA", 3, epoch=2).random(4)
    b = rng_for_segment(1, "songA", 3, epoch=2).random(4)
    c = rng_for_segment(1, "songA", 4, epoch=2).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
