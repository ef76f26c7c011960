"""Stage-dependent corruption of the arrangement fed to the symbolic encoder.

Corruption only ever removes notes.  All randomness flows through an
explicit numpy Generator so (seed, score, spec) fully determines the
output; data workers derive their own streams from (global seed,
segment id).
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, MissingContext
from .symbolic import SegmentScore


class Stage(enum.Enum):
    WARMUP = "warmup"
    PRETRAIN = "pretrain"
    FINETUNE_PRIOR = "finetune_prior"
    FINETUNE_AUTOREGRESSIVE = "finetune_autoregressive"


@dataclass
class CorruptionSpec:
    stage: Stage = Stage.WARMUP
    p_base_range: tuple[float, float] = (0.5, 0.8)
    pitch_pivot: int = 60
    pitch_slope: float = 0.005
    prob_clamp: tuple[float, float] = (0.05, 0.95)
    seed: int = 0
    ramp: bool = False          # if True, p_base ramps linearly over training
    ramp_progress: float = 0.0  # in [0,1]; used only when ramp is set

    def __post_init__(self):
        lo, hi = self.prob_clamp
        if not 0.0 <= lo < hi <= 1.0:
            raise ContractViolation(f"prob_clamp {self.prob_clamp} must satisfy 0 <= lo < hi <= 1")
        plo, phi = self.p_base_range
        if not 0.0 <= plo <= phi <= 1.0:
            raise ContractViolation(f"p_base_range {self.p_base_range} must lie within [0,1]")

    def with_stage(self, stage: Stage) -> "CorruptionSpec":
        return CorruptionSpec(stage, self.p_base_range, self.pitch_pivot, self.pitch_slope,
                              self.prob_clamp, self.seed, self.ramp, self.ramp_progress)


def mask_probability(pitch: int, p_base: float, spec: CorruptionSpec) -> float:
    """Per-note mask probability, linear in pitch and clamped.

    Monotone non-increasing in pitch: lower notes are likelier to vanish.
    """
    p = p_base + spec.pitch_slope * (spec.pitch_pivot - pitch)
    return float(min(max(p, spec.prob_clamp[0]), spec.prob_clamp[1]))


def mask_lead_voice(score: SegmentScore) -> SegmentScore:
    """Drop the highest-pitched note among those onsetting at each step."""
    top: dict[int, int] = {}
    for n in score.notes:
        if n.onset_step not in top or n.pitch > top[n.onset_step]:
            top[n.onset_step] = n.pitch
    return SegmentScore(n for n in score.notes if top[n.onset_step] != n.pitch)


def draw_p_base(spec: CorruptionSpec, rng: np.random.Generator) -> float:
    lo, hi = spec.p_base_range
    if spec.ramp:
        return lo + (hi - lo) * float(min(max(spec.ramp_progress, 0.0), 1.0))
    return float(rng.uniform(lo, hi))


def random_pitch_weighted_mask(score: SegmentScore, spec: CorruptionSpec,
                               rng: np.random.Generator) -> SegmentScore:
    """Mask each note independently; one p_base draw per segment."""
    p_base = draw_p_base(spec, rng)
    kept = []
    for n in score.notes:
        if rng.random() >= mask_probability(n.pitch, p_base, spec):
            kept.append(n)
    return SegmentScore(kept)


def corrupt_for_stage(score: SegmentScore, spec: CorruptionSpec,
                      rng: np.random.Generator,
                      previous: SegmentScore | None = None) -> SegmentScore:
    """Symbolic-encoder input for the current curriculum stage.

    warmup: lead voice masked; pretrain: lead voice masked then
    pitch-weighted random masking; finetune_prior: empty sentinel (the
    encoder is bypassed); finetune_autoregressive: the previous segment,
    uncorrupted.
    """
    if spec.stage is Stage.WARMUP:
        return mask_lead_voice(score)
    if spec.stage is Stage.PRETRAIN:
        return random_pitch_weighted_mask(mask_lead_voice(score), spec, rng)
    if spec.stage is Stage.FINETUNE_PRIOR:
        return SegmentScore()
    if spec.stage is Stage.FINETUNE_AUTOREGRESSIVE:
        if previous is None:
            raise MissingContext("autoregressive corruption needs the previous segment")
        return previous
    raise ContractViolation(f"unknown stage {spec.stage}")


def rng_for_segment(global_seed: int, song_id: str, segment_index: int,
                    epoch: int = 0) -> np.random.Generator:
    """Stable per-segment stream so corruption is reproducible across workers."""
    ss = np.random.SeedSequence(
        [global_seed, epoch, segment_index, zlib.crc32(song_id.encode("utf-8"))])
    return np.random.default_rng(ss)
