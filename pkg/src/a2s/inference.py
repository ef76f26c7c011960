"""Audio-to-MIDI arrangement, latent-swap style transfer and ablations.

Inference uses posterior means for z_chd and z_aud; z_sym is sampled from
the prior in prior mode (`--sample-all` switches everything to sampling).
Prior-mode segments are independent; autoregressive mode feeds each
generated segment into the symbolic encoder for the next one.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio_frontend import (AudioSegment, BeatGrid, get_backend,
                             stretch_and_resample, load_wav)
from .chords import progression_for_window, read_chord_annotation
from .corruption import Stage
from .dataset import score_from_timed_notes, segment_start_indices
from .errors import (AnnotationGap, CheckpointStageError, ConfigMismatch,
                     ContractViolation)
from .midi_io import read_midi, write_midi
from .model import load_checkpoint, model_from_checkpoint
from .symbolic import (ChordProgression, NoteEvent, SegmentScore,
                       score_to_pianoroll)

VARIANTS = ("full", "audio_only_vae", "audio_only_ae", "chord_only")


@dataclass
class ArrangeRequest:
    audio: Path
    beats: Path
    chords: Path
    mode: str = "prior"               # prior | autoregressive
    seed: int = 0
    temperature: float = 0.0          # 0 = greedy argmax
    reference_midi: Path | None = None  # optional AR priming; ignored in prior mode
    sample_all: bool = False

    def __post_init__(self):
        if self.mode not in ("prior", "autoregressive"):
            raise ContractViolation(f"unknown inference mode {self.mode!r}")
        if self.temperature < 0:
            raise ContractViolation("temperature must be >= 0")


@dataclass
class AblationConfig:
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown ablation variant {self.variant!r}")


class ArrangementSession:
    """A loaded checkpoint plus its transcriber backend."""

    def __init__(self, checkpoint_path, allow_early: bool = False):
        payload = load_checkpoint(checkpoint_path)
        self.model = model_from_checkpoint(payload)
        self.model.eval()
        self.stage = Stage(payload["stage"])
        self.global_step = payload["global_step"]
        self.variant = self.model.cfg.variant
        run_cfg = payload.get("extra", {}).get("run_config", {})
        tc = run_cfg.get("transcriber", {})
        self.backend = get_backend(tc.get("backend", "stub"), tc.get("weights") or None)
        self.allow_early = allow_early
        self.checkpoint_path = str(checkpoint_path)

    def require_stage3(self):
        if self.stage in (Stage.FINETUNE_PRIOR, Stage.FINETUNE_AUTOREGRESSIVE):
            return
        if self.allow_early:
            warnings.warn(f"{self.checkpoint_path}: checkpoint stopped at stage "
                          f"{self.stage.value}; prior-mode output may be poor")
        else:
            raise CheckpointStageError(
                f"{self.checkpoint_path}: checkpoint never reached stage 3 "
                f"(stage={self.stage.value}); pass --allow-early to proceed")

    # -- encoders (posterior means) ------------------------------------

    @torch.no_grad()
    def embed(self, segment: AudioSegment) -> torch.Tensor:
        emb = self.backend.transcribe(segment)
        return torch.from_numpy(emb.stack())[None]

    @torch.no_grad()
    def encode_audio(self, segment: AudioSegment, sample_noise: np.ndarray | None = None):
        post = self.model.audio_encoder(self.embed(segment))
        if sample_noise is not None:
            return post.sample(torch.from_numpy(sample_noise.astype(np.float32))[None])[0]
        return post.mean[0]

    @torch.no_grad()
    def encode_chords(self, prog: ChordProgression, sample_noise: np.ndarray | None = None):
        post = self.model.chord_encoder(torch.from_numpy(prog.frames)[None])
        if sample_noise is not None:
            return post.sample(torch.from_numpy(sample_noise.astype(np.float32))[None])[0]
        return post.mean[0]

    @torch.no_grad()
    def encode_score(self, score: SegmentScore):
        roll = torch.from_numpy(score_to_pianoroll(score).stack())[None]
        return self.model.symbolic_encoder(roll).mean[0]

    def z_sym_prior(self, seed: int, segment_index: int) -> torch.Tensor:
        rng = np.random.default_rng([seed & 0x7FFFFFFF, segment_index, 0x5A])
        return torch.from_numpy(
            rng.standard_normal(self.model.cfg.z_sym).astype(np.float32))

    def _zeros(self, dim: int) -> torch.Tensor:
        return torch.zeros(dim)

    # -- decoding --------------------------------------------------------

    @torch.no_grad()
    def decode(self, z_chd: torch.Tensor, z_aud: torch.Tensor, z_sym: torch.Tensor,
               seed: int = 0, segment_index: int = 0,
               temperature: float = 0.0) -> SegmentScore:
        feats, _ = self.model.feature_predictor(z_aud[None])
        z = self.model.concat_latent(z_chd[None], z_aud[None], z_sym[None])
        gen = None
        if temperature > 0:
            gen = torch.Generator(device="cpu")
            gen.manual_seed((seed * 1000003 + segment_index) & 0x7FFFFFFFFFFFFFFF)
        pitches, durs, counts = self.model.decoder.generate(z, feats, temperature, gen)
        return decoded_to_score(pitches[0], durs[0], counts[0])

    @torch.no_grad()
    def latents_for_segment(self, segment: AudioSegment, prog: ChordProgression,
                            req: ArrangeRequest, segment_index: int,
                            previous_score: SegmentScore | None,
                            variant: str | None = None):
        """(z_chd, z_aud, z_sym) per the request mode and ablation variant."""
        variant = variant or self.variant
        cfg = self.model.cfg
        rng = np.random.default_rng([req.seed & 0x7FFFFFFF, segment_index, 0xA5])

        if variant in ("full", "chord_only"):
            noise = rng.standard_normal(cfg.z_chd) if req.sample_all else None
            z_chd = self.encode_chords(prog, noise)
        else:
            z_chd = self._zeros(cfg.z_chd)

        if variant == "chord_only":
            z_aud = self._zeros(cfg.z_aud)
        else:
            noise = rng.standard_normal(cfg.z_aud) if req.sample_all else None
            z_aud = self.encode_audio(segment, noise)

        if variant in ("full", "chord_only"):
            if req.mode == "prior":
                z_sym = self.z_sym_prior(req.seed, segment_index)
            else:
                context = previous_score if previous_score is not None else SegmentScore()
                z_sym = self.encode_score(context)
        else:
            z_sym = self._zeros(cfg.z_sym)
        return z_chd, z_aud, z_sym


def decoded_to_score(pitches: torch.Tensor, durs: torch.Tensor,
                     counts: torch.Tensor) -> SegmentScore:
    """(32, K) index tensors -> SegmentScore (duration class d means d+1 steps)."""
    notes = []
    for t in range(pitches.shape[0]):
        for i in range(int(counts[t])):
            notes.append(NoteEvent(t, int(pitches[t, i]), int(durs[t, i]) + 1))
    return SegmentScore(notes)


def _load_request_segments(req: ArrangeRequest):
    grid = BeatGrid.from_file(req.beats)
    spans = read_chord_annotation(req.chords)
    samples, rate = load_wav(req.audio)
    starts = segment_start_indices(grid)
    if not starts:
        raise AnnotationGap(f"{req.beats}: no downbeat-aligned 8-beat window available")
    grid_ext = grid.extended(len(grid) + 1) if starts[-1] + 8 > len(grid) - 1 else grid
    out = []
    for k, start in enumerate(starts):
        segment = stretch_and_resample(samples, rate, grid_ext, start)
        prog = progression_for_window(spans, float(start), strict=True)
        out.append((k, start, segment, prog))
    return out, grid_ext


def arrange_scores(req: ArrangeRequest, session: ArrangementSession,
                   variant: str | None = None) -> list[SegmentScore]:
    """Arrange every 8-beat window; returns one SegmentScore per window."""
    if req.mode == "prior":
        session.require_stage3()
    segments, grid = _load_request_segments(req)

    reference_scores = None
    if req.mode == "autoregressive" and req.reference_midi is not None:
        ref_notes = read_midi(req.reference_midi)
        reference_scores = [score_from_timed_notes(ref_notes, grid, start)
                            for _, start, _, _ in segments]

    scores: list[SegmentScore] = []
    previous: SegmentScore | None = None
    if reference_scores:
        previous = reference_scores[0]
    for k, start, segment, prog in segments:
        z_chd, z_aud, z_sym = session.latents_for_segment(
            segment, prog, req, k, previous, variant)
        score = session.decode(z_chd, z_aud, z_sym, req.seed, k, req.temperature)
        scores.append(score)
        previous = score
    return scores


def arrange(req: ArrangeRequest, checkpoint_path, out_path,
            allow_early: bool = False, variant: str | None = None) -> list[SegmentScore]:
    """Full pipeline: slice, encode, decode, concatenate into one MIDI file."""
    session = ArrangementSession(checkpoint_path, allow_early=allow_early)
    scores = arrange_scores(req, session, variant)
    write_midi(out_path, scores)
    return scores


def style_transfer_chord(session: ArrangementSession, segment: AudioSegment,
                         new_chords: ChordProgression, seed: int = 0,
                         segment_index: int = 0, mode: str = "prior",
                         previous_score: SegmentScore | None = None,
                         temperature: float = 0.0) -> SegmentScore:
    """Re-decode one segment with z_chd encoded from replacement chords."""
    z_chd = session.encode_chords(new_chords)
    z_aud = session.encode_audio(segment)
    if mode == "prior":
        z_sym = session.z_sym_prior(seed, segment_index)
    else:
        z_sym = session.encode_score(previous_score or SegmentScore())
    return session.decode(z_chd, z_aud, z_sym, seed, segment_index, temperature)


def style_transfer_texture(session: ArrangementSession, segment: AudioSegment,
                           chords: ChordProgression, donor_score: SegmentScore,
                           seed: int = 0, segment_index: int = 0,
                           temperature: float = 0.0) -> SegmentScore:
    """Re-decode one segment with z_sym encoded from a donor texture."""
    z_chd = session.encode_chords(chords)
    z_aud = session.encode_audio(segment)
    z_sym = session.encode_score(donor_score)
    return session.decode(z_chd, z_aud, z_sym, seed, segment_index, temperature)


def run_ablation(cfg: AblationConfig, req: ArrangeRequest, checkpoint_path,
                 out_path, allow_early: bool = False) -> list[SegmentScore]:
    """Arrange under an ablated graph; the checkpoint must match the variant."""
    session = ArrangementSession(checkpoint_path, allow_early=allow_early)
    if session.variant != cfg.variant:
        raise ConfigMismatch(
            f"checkpoint was trained as {session.variant!r}, requested {cfg.variant!r}")
    scores = arrange_scores(req, session, cfg.variant)
    write_midi(out_path, scores)
    return scores
