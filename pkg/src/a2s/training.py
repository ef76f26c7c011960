"""ELBO assembly, per-latent KL annealing schedules and the curriculum driver.

The three training stages: warm-up (lead voice masked, all betas ramp
0 -> 0.01), pre-training (pitch-weighted random masking, beta_sym ramps
0.01 -> 0.5) and fine-tuning (symbolic latent from the prior, or fed the
previous segment autoregressively).  Learning rate ramps 4e-4 -> 6e-4
across stages 1-2 and holds.
"""
from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .corruption import CorruptionSpec, Stage, corrupt_for_stage, rng_for_segment
from .errors import (ContractViolation, DataError, MissingContext,
                     ResumeMismatch, ShapeError)
from .model import (ArrangementModel, DecoderOutput, GaussianPosterior,
                    TranscriberNet, config_fingerprint, load_checkpoint,
                    reparameterize, save_checkpoint)
from .symbolic import MAX_DURATION, N_STEPS, SegmentScore, score_to_pianoroll


def kl_normal(post: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL(q || N(0,I)), summed over dims, averaged over the batch."""
    return post.kl_per_sample().mean()


@dataclass
class CurriculumSchedule:
    """Stage boundaries in optimizer steps, resolved from a CurriculumConfig."""
    stage1_end: int
    stage2_end: int
    stage3_end: int
    finetune_mode: str = "prior"
    beta_low: float = 0.01
    beta_high: float = 0.5

    def __post_init__(self):
        if not 0 < self.stage1_end < self.stage2_end < self.stage3_end:
            raise ContractViolation("stage boundaries must be strictly increasing")

    @classmethod
    def resolve(cls, cfg, steps_per_epoch: int) -> "CurriculumSchedule":
        if cfg.stage_steps is not None:
            a, b, c = cfg.stage_steps
        else:
            a, b, c = (e * steps_per_epoch for e in cfg.stage_epochs)
        return cls(a, a + b, a + b + c, cfg.finetune_mode, cfg.beta_low, cfg.beta_high)

    def stage(self, step: int) -> Stage:
        if step < self.stage1_end:
            return Stage.WARMUP
        if step < self.stage2_end:
            return Stage.PRETRAIN
        return Stage.FINETUNE_PRIOR if self.finetune_mode == "prior" \
            else Stage.FINETUNE_AUTOREGRESSIVE

    def betas(self, step: int) -> tuple[float, float, float]:
        """(beta_chd, beta_aud, beta_sym) at `step`; boundaries are inclusive
        on the right so stage endpoints evaluate to their scheduled values."""
        if step < 0:
            raise ContractViolation("step must be >= 0")
        if step <= self.stage1_end:
            b = self.beta_low * step / self.stage1_end
            return (b, b, b)
        if step <= self.stage2_end:
            frac = (step - self.stage1_end) / (self.stage2_end - self.stage1_end)
            return (self.beta_low, self.beta_low,
                    self.beta_low + (self.beta_high - self.beta_low) * frac)
        if self.finetune_mode == "prior":
            return (self.beta_low, self.beta_low, 0.0)
        return (self.beta_low, self.beta_low, self.beta_high)

    def lr(self, step: int, lr_start: float, lr_end: float, schedule: str = "linear") -> float:
        if schedule == "constant":
            return lr_start
        frac = min(step / self.stage2_end, 1.0)
        return lr_start + (lr_end - lr_start) * frac


def beta_schedule(step: int, schedule: CurriculumSchedule) -> tuple[float, float, float]:
    return schedule.betas(step)


@dataclass
class LossBreakdown:
    recon_arrangement: torch.Tensor
    recon_chord: torch.Tensor
    recon_features: torch.Tensor
    kl_chd: torch.Tensor
    kl_aud: torch.Tensor
    kl_sym: torch.Tensor
    beta_chd: float
    beta_aud: float
    beta_sym: float
    total: torch.Tensor

    FIELDS = ("total", "recon_arrangement", "recon_chord", "recon_features",
              "kl_chd", "kl_aud", "kl_sym", "beta_chd", "beta_aud", "beta_sym")

    def floats(self) -> dict[str, float]:
        out = {}
        for name in self.FIELDS:
            v = getattr(self, name)
            out[name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out

    def composition_residual(self) -> float:
        """|total - (sum recon + sum beta_i * kl_i)| relative to |total|."""
        recomposed = (self.recon_arrangement + self.recon_chord + self.recon_features
                      + self.beta_chd * self.kl_chd + self.beta_aud * self.kl_aud
                      + self.beta_sym * self.kl_sym)
        denom = max(abs(float(self.total)), 1.0)
        return abs(float(self.total) - float(recomposed)) / denom


@dataclass
class Batch:
    """Collated tensors for one training step."""
    chord: torch.Tensor        # (B, 8, 36)
    embedding: torch.Tensor    # (B, 3, 158, 88) transcriber output (or None)
    audio_feats: torch.Tensor | None  # (B, 1, 158, 88) for in-graph transcription
    roll: torch.Tensor         # (B, 2, 32, 128) corrupted symbolic input
    feats: torch.Tensor        # (B, 32, 3) ground-truth feature series
    pitch_idx: torch.Tensor    # (B, 32, K) teacher pitches (pad 0)
    dur_idx: torch.Tensor      # (B, 32, K) teacher duration classes (pad 0)
    counts: torch.Tensor       # (B, 32)

    @property
    def size(self) -> int:
        return self.chord.shape[0]


def teacher_arrays(score: SegmentScore, max_notes: int):
    """Pitch/duration-class index arrays plus per-step counts."""
    pitch = np.zeros((N_STEPS, max_notes), dtype=np.int64)
    dur = np.zeros((N_STEPS, max_notes), dtype=np.int64)
    counts = np.zeros(N_STEPS, dtype=np.int64)
    for n in score.notes:
        c = counts[n.onset_step]
        if c >= max_notes:
            continue
        pitch[n.onset_step, c] = n.pitch
        dur[n.onset_step, c] = n.duration_steps - 1
        counts[n.onset_step] = c + 1
    return pitch, dur, counts


def collate(examples, corrupted: list[SegmentScore], max_notes: int,
            dtype=torch.float32, device="cpu") -> Batch:
    if len(examples) != len(corrupted):
        raise ShapeError("examples and corrupted scores must align")
    chords, embs, feats_list, rolls = [], [], [], []
    pitches, durs, counts = [], [], []
    audio_feats = []
    for ex, cor in zip(examples, corrupted):
        chords.append(ex.chord.frames)
        if ex.embedding is not None:
            embs.append(ex.embedding.stack())
        if ex.audio_features is not None:
            audio_feats.append(ex.audio_features[None])
        rolls.append(score_to_pianoroll(cor).stack())
        feats_list.append(ex.features.stack())
        p, d, c = teacher_arrays(ex.score, max_notes)
        pitches.append(p)
        durs.append(d)
        counts.append(c)

    def t(arrs, dt=dtype):
        return torch.as_tensor(np.stack(arrs), dtype=dt, device=device)

    return Batch(
        chord=t(chords),
        embedding=t(embs) if embs else None,
        audio_feats=t(audio_feats) if audio_feats else None,
        roll=t(rolls),
        feats=t(feats_list),
        pitch_idx=t(pitches, torch.long),
        dur_idx=t(durs, torch.long),
        counts=t(counts, torch.long),
    )


@dataclass
class ModelOutputs:
    dec_out: DecoderOutput
    chord_logits: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None
    feat_probs: torch.Tensor | None
    feat_raw: torch.Tensor | None
    posteriors: dict[str, GaussianPosterior | None]
    latents: dict[str, torch.Tensor]


def noise_for(model: ArrangementModel, batch_size: int, seed: int,
              dtype=torch.float32, device="cpu") -> dict[str, torch.Tensor]:
    """Per-call reparameterization noise; a fixed seed freezes the draw."""
    g = torch.Generator(device="cpu")
    g.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    cfg = model.cfg
    return {
        "chd": torch.randn(batch_size, cfg.z_chd, generator=g, dtype=dtype).to(device),
        "aud": torch.randn(batch_size, cfg.z_aud, generator=g, dtype=dtype).to(device),
        "sym": torch.randn(batch_size, cfg.z_sym, generator=g, dtype=dtype).to(device),
    }


def run_model(model: ArrangementModel, batch: Batch, stage: Stage,
              noise: dict[str, torch.Tensor], variant: str | None = None) -> ModelOutputs:
    """Training-mode forward pass for the given curriculum stage and variant."""
    variant = variant or model.cfg.variant
    b = batch.size
    cfg = model.cfg
    zeros = lambda d: torch.zeros(b, d, dtype=batch.chord.dtype, device=batch.chord.device)

    if batch.embedding is not None:
        embedding = batch.embedding
    elif batch.audio_feats is not None:
        embedding = model.embed_audio(batch.audio_feats)
    else:
        raise ContractViolation("batch carries neither embeddings nor audio features")

    posteriors: dict[str, GaussianPosterior | None] = {"chd": None, "aud": None, "sym": None}
    latents: dict[str, torch.Tensor] = {}

    if variant in ("full", "chord_only"):
        posteriors["chd"] = model.chord_encoder(batch.chord)
        latents["chd"] = reparameterize(posteriors["chd"], noise["chd"])
    else:
        latents["chd"] = zeros(cfg.z_chd)

    if variant == "chord_only":
        latents["aud"] = zeros(cfg.z_aud)
    else:
        posteriors["aud"] = model.audio_encoder(embedding)
        if variant == "audio_only_ae":
            latents["aud"] = posteriors["aud"].mean
        else:
            latents["aud"] = reparameterize(posteriors["aud"], noise["aud"])

    if variant in ("full", "chord_only"):
        if stage is Stage.FINETUNE_PRIOR:
            latents["sym"] = noise["sym"]  # z_sym ~ N(0, I); encoder bypassed
        else:
            posteriors["sym"] = model.symbolic_encoder(batch.roll)
            latents["sym"] = reparameterize(posteriors["sym"], noise["sym"])
    else:
        latents["sym"] = zeros(cfg.z_sym)

    chord_logits = None
    if variant in ("full", "chord_only"):
        chord_logits = model.chord_decoder(latents["chd"], batch.chord)

    feat_probs = feat_raw = None
    if variant in ("full", "chord_only", "audio_only_vae", "audio_only_ae"):
        feat_probs, feat_raw = model.feature_predictor(latents["aud"])

    z = model.concat_latent(latents["chd"], latents["aud"], latents["sym"])
    dec_out = model.decoder(z, batch.feats, batch.pitch_idx, batch.dur_idx, batch.counts)
    return ModelOutputs(dec_out, chord_logits, feat_probs, feat_raw, posteriors, latents)


def arrangement_nll(dec_out: DecoderOutput, pitch_idx: torch.Tensor,
                    dur_idx: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over note-count (stop tokens), pitch and duration.

    Summed over steps and note slots, averaged over the batch.
    """
    b, steps, n_slots, _ = dec_out.pitch_logits.shape
    slot = torch.arange(n_slots, device=counts.device)[None, None]
    note_mask = slot < counts[..., None]                      # slots holding a note
    stop_mask = slot <= counts[..., None]                     # slots incl. the stop slot
    stop_target = (slot == counts[..., None]).long()

    logp_pitch = torch.log_softmax(dec_out.pitch_logits, dim=-1)
    logp_dur = torch.log_softmax(dec_out.dur_logits, dim=-1)
    logp_stop = torch.log_softmax(dec_out.stop_logits, dim=-1)

    pitch_t = pitch_idx[:, :, :n_slots].clamp(max=logp_pitch.shape[-1] - 1)
    dur_t = dur_idx[:, :, :n_slots].clamp(max=logp_dur.shape[-1] - 1)
    nll_pitch = -(logp_pitch.gather(-1, pitch_t[..., None])[..., 0] * note_mask).sum()
    nll_dur = -(logp_dur.gather(-1, dur_t[..., None])[..., 0] * note_mask).sum()
    nll_stop = -(logp_stop.gather(-1, stop_target[..., None])[..., 0] * stop_mask).sum()
    return (nll_pitch + nll_dur + nll_stop) / b


def chord_nll(chord_logits, chord_target: torch.Tensor) -> torch.Tensor:
    """Root/bass categorical CE plus chroma Bernoulli CE over the 8 frames."""
    root_logits, chroma_logits, bass_logits = chord_logits
    b = chord_target.shape[0]
    root_t = chord_target[:, :, :12].argmax(-1)
    bass_t = chord_target[:, :, 24:].argmax(-1)
    chroma_t = chord_target[:, :, 12:24]
    nll_root = -(torch.log_softmax(root_logits, -1).gather(-1, root_t[..., None])[..., 0]).sum()
    nll_bass = -(torch.log_softmax(bass_logits, -1).gather(-1, bass_t[..., None])[..., 0]).sum()
    nll_chroma = torch.nn.functional.binary_cross_entropy_with_logits(
        chroma_logits, chroma_t, reduction="sum")
    return (nll_root + nll_bass + nll_chroma) / b


def feature_nll(feat_raw: torch.Tensor, feat_probs: torch.Tensor,
                feats_target: torch.Tensor) -> torch.Tensor:
    """BCE for bass/melody onsets plus squared error for intensity."""
    b = feats_target.shape[0]
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        feat_raw[..., :2], feats_target[..., :2], reduction="sum")
    mse = ((feat_probs[..., 2] - feats_target[..., 2]) ** 2).sum()
    return (bce + mse) / b


def elbo_loss(batch: Batch, outputs: ModelOutputs, betas: tuple[float, float, float],
              stage: Stage, weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossBreakdown:
    """Assemble the scheduled ELBO for one batch.

    Reconstruction terms are batch means; each KL term enters as
    beta_i * kl_i.  In prior-mode fine-tuning kl_sym is reported as 0 and
    excluded; absent branches (ablations) contribute zero terms.
    """
    dtype = batch.chord.dtype
    device = batch.chord.device
    zero = torch.zeros((), dtype=dtype, device=device)
    w_arr, w_chd, w_feat = weights

    recon_arr = arrangement_nll(outputs.dec_out, batch.pitch_idx, batch.dur_idx,
                                batch.counts) * w_arr
    recon_chord = chord_nll(outputs.chord_logits, batch.chord) * w_chd \
        if outputs.chord_logits is not None else zero.clone()
    recon_feat = feature_nll(outputs.feat_raw, outputs.feat_probs, batch.feats) * w_feat \
        if outputs.feat_raw is not None else zero.clone()

    beta_chd, beta_aud, beta_sym = betas
    kl_chd = kl_normal(outputs.posteriors["chd"]) if outputs.posteriors["chd"] is not None else zero.clone()
    kl_aud = kl_normal(outputs.posteriors["aud"]) if outputs.posteriors["aud"] is not None else zero.clone()
    if stage is Stage.FINETUNE_PRIOR or outputs.posteriors["sym"] is None:
        kl_sym = zero.clone()
        beta_sym = 0.0
    else:
        kl_sym = kl_normal(outputs.posteriors["sym"])
    if outputs.posteriors["chd"] is None:
        beta_chd = 0.0
    if outputs.posteriors["aud"] is None:
        beta_aud = 0.0

    total = (recon_arr + recon_chord + recon_feat
             + beta_chd * kl_chd + beta_aud * kl_aud + beta_sym * kl_sym)
    return LossBreakdown(recon_arr, recon_chord, recon_feat, kl_chd, kl_aud, kl_sym,
                         beta_chd, beta_aud, beta_sym, total)


def forward_loss(model: ArrangementModel, batch: Batch, stage: Stage,
                 betas: tuple[float, float, float], noise_seed: int,
                 weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                 variant: str | None = None) -> LossBreakdown:
    """Deterministic forward + loss given a noise seed (used by training,
    the finite-difference oracle and the acceptance suite)."""
    dtype = batch.chord.dtype
    noise = noise_for(model, batch.size, noise_seed, dtype=dtype, device=batch.chord.device)
    outputs = run_model(model, batch, stage, noise, variant)
    return elbo_loss(batch, outputs, betas, stage, weights)


def stage3_prior_step(model: ArrangementModel, batch: Batch,
                      betas: tuple[float, float, float], noise_seed: int,
                      weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """Fine-tuning step with z_sym drawn from N(0, I); the symbolic encoder
    is never evaluated, so its gradients stay exactly zero."""
    return forward_loss(model, batch, Stage.FINETUNE_PRIOR, betas, noise_seed, weights)


class MetricsLog:
    COLUMNS = ("step", "epoch", "stage", "lr") + LossBreakdown.FIELDS

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(self.COLUMNS)

    def write(self, step: int, epoch: int, stage: Stage, lr: float, loss: LossBreakdown):
        row = [step, epoch, stage.value, f"{lr:.6g}"]
        row += [f"{v:.6g}" for v in loss.floats().values()]
        self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


class Trainer:
    """Three-stage curriculum driver over prepared training examples."""

    def __init__(self, cfg: RunConfig, examples: list, out_dir, device: str = "cpu"):
        if not examples:
            raise DataError("no training examples")
        self.cfg = cfg
        self.examples = examples
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.device = device

        transcriber = None
        if cfg.transcriber.backend == "pretrained" and any(
                ex.embedding is None for ex in examples):
            from .audio_frontend import PretrainedTranscriber
            transcriber = PretrainedTranscriber(
                cfg.transcriber.weights, freeze=cfg.transcriber.freeze).net
        self.model = ArrangementModel(cfg.model, transcriber).to(device)
        self.optimizer = torch.optim.Adam(
            [p for p in self.model.parameters() if p.requires_grad], lr=cfg.train.lr_start)

        self.steps_per_epoch = max(1, math.ceil(len(examples) / cfg.train.batch_size))
        self.schedule = CurriculumSchedule.resolve(cfg.curriculum, self.steps_per_epoch)
        self.global_step = 0
        self._by_position = {(ex.song_id, ex.segment_index, getattr(ex, "transposition", 0)): ex
                             for ex in examples}

    # -- data plumbing --------------------------------------------------

    def _order_for_epoch(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.train.seed, 7919, epoch])
        order = np.arange(len(self.examples))
        rng.shuffle(order)
        return order

    def _previous_score(self, ex) -> SegmentScore | None:
        key = (ex.song_id, ex.segment_index - 1, getattr(ex, "transposition", 0))
        prev = self._by_position.get(key)
        return prev.score if prev is not None else None

    def _corrupt(self, ex, stage: Stage, epoch: int) -> SegmentScore:
        spec = self.cfg.corruption.with_stage(stage)
        if spec.ramp:
            spec.ramp_progress = min(self.global_step / max(self.schedule.stage2_end, 1), 1.0)
        rng = rng_for_segment(spec.seed, f"{ex.song_id}#k{getattr(ex, 'transposition', 0)}",
                              ex.segment_index, epoch)
        try:
            return corrupt_for_stage(ex.score, spec, rng, previous=self._previous_score(ex))
        except MissingContext:
            return SegmentScore()  # first segment of a song: no context yet

    def make_batch(self, indices, stage: Stage, epoch: int) -> Batch:
        exs = [self.examples[i] for i in indices]
        corrupted = [self._corrupt(ex, stage, epoch) for ex in exs]
        return collate(exs, corrupted, self.cfg.model.max_notes_per_step, device=self.device)

    # -- optimization ---------------------------------------------------

    def _noise_seed(self, step: int) -> int:
        return zlib.crc32(f"{self.cfg.train.seed}:{step}".encode()) + step

    def train_step(self, batch: Batch, stage: Stage) -> LossBreakdown:
        betas = self.schedule.betas(self.global_step)
        lr = self.schedule.lr(self.global_step, self.cfg.train.lr_start,
                              self.cfg.train.lr_end, self.cfg.train.lr_schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        weights = (self.cfg.train.weight_arrangement, self.cfg.train.weight_chord,
                   self.cfg.train.weight_features)
        loss = forward_loss(self.model, batch, stage, betas,
                            self._noise_seed(self.global_step), weights)
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        return loss

    # -- checkpointing ---------------------------------------------------

    def _save(self, name: str, stage: Stage):
        save_checkpoint(self.out_dir / name, self.model, self.optimizer, stage,
                        self.global_step,
                        extra={"run_config": self.cfg.to_dict(),
                               "schedule": [self.schedule.stage1_end, self.schedule.stage2_end,
                                            self.schedule.stage3_end]})

    def resume(self, path):
        payload = load_checkpoint(path, expected=self.cfg.model)
        saved = payload["extra"].get("schedule")
        ours = [self.schedule.stage1_end, self.schedule.stage2_end, self.schedule.stage3_end]
        if saved is not None and saved != ours:
            raise ResumeMismatch(f"checkpoint schedule {saved} != current {ours}")
        self.model.load_state_dict(payload["state_dict"])
        if payload["optimizer_state"] is not None:
            self.optimizer.load_state_dict(payload["optimizer_state"])
        self.global_step = payload["global_step"]

    # -- driver -----------------------------------------------------------

    def run(self, resume_from=None, max_steps: int | None = None,
            step_callback=None) -> Path:
        """Run (or continue) all stages; returns the final checkpoint path."""
        if resume_from is not None:
            self.resume(resume_from)
        log = MetricsLog(self.out_dir / "train_log.csv")
        total = self.schedule.stage3_end if max_steps is None \
            else min(self.schedule.stage3_end, self.global_step + max_steps)
        try:
            while self.global_step < total:
                step = self.global_step
                epoch = step // self.steps_per_epoch
                order = self._order_for_epoch(epoch)
                pos = (step % self.steps_per_epoch) * self.cfg.train.batch_size
                indices = order[pos:pos + self.cfg.train.batch_size]
                if len(indices) == 0:
                    indices = order[:self.cfg.train.batch_size]
                stage = self.schedule.stage(step)
                batch = self.make_batch(indices, stage, epoch)
                loss = self.train_step(batch, stage)
                if step_callback is not None:
                    step_callback(self, step, stage, loss)
                if step % self.cfg.train.log_every == 0 or step + 1 == total:
                    log.write(step, epoch, stage,
                              self.schedule.lr(step, self.cfg.train.lr_start,
                                               self.cfg.train.lr_end,
                                               self.cfg.train.lr_schedule), loss)
                self.global_step += 1
                if self.global_step in (self.schedule.stage1_end, self.schedule.stage2_end):
                    idx = 1 if self.global_step == self.schedule.stage1_end else 2
                    self._save(f"stage{idx}_end.ckpt", stage)
                if self.global_step % self.steps_per_epoch == 0:
                    self._save("latest.ckpt", self.schedule.stage(min(self.global_step, total - 1)))
        finally:
            log.close()
        final_stage = self.schedule.stage(max(total - 1, 0))
        self._save("final.ckpt", final_stage)
        return self.out_dir / "final.ckpt"
