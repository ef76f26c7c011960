"""The five-part cross-modal network.

Chord encoder/decoder, audio- and symbolic-texture encoders (same conv+GRU
structure), a feature predictor driven by the audio latent only, and a
hierarchical arrangement decoder: a time-axis GRU over the 32 grid steps
emits per-step contexts, and a note-axis GRU expands each context into an
ordered note list, finishing each step with an end-of-step token.

Latent layout: z = [z_chd(128), z_aud(192), z_sym(192)] -> 512.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .audio_frontend import N_FRAMES, N_KEYS
from .config import ModelConfig
from .corruption import Stage
from .errors import ConfigMismatch, ContractViolation, ShapeError
from .symbolic import MAX_DURATION, N_CHORD_FRAMES, N_PITCHES, N_STEPS

CHECKPOINT_FORMAT = "a2s-ckpt-1"

PITCH_START = N_PITCHES      # embedding index for the start-of-step token
DUR_START = MAX_DURATION


class GaussianPosterior:
    """Diagonal Gaussian with log-variance bounded to [-10, 10]."""

    def __init__(self, mean: torch.Tensor, log_variance: torch.Tensor):
        if mean.shape != log_variance.shape:
            raise ShapeError("mean and log_variance must agree in shape")
        self.mean = mean
        self.log_variance = log_variance.clamp(-10.0, 10.0)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape != self.mean.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} != posterior shape {tuple(self.mean.shape)}")
        return self.mean + torch.exp(0.5 * self.log_variance) * noise

    def kl_per_sample(self) -> torch.Tensor:
        """KL(q || N(0,I)) summed over dimensions, one value per batch row."""
        var = torch.exp(self.log_variance)
        return 0.5 * (self.mean.pow(2) + var - 1.0 - self.log_variance).sum(dim=-1)


def reparameterize(post: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    return post.sample(noise)


class ChordEncoder(nn.Module):
    """Chord progression (B, 8, 36) -> 128-d posterior."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gru = nn.GRU(36, cfg.chord_enc_hidden, batch_first=True, bidirectional=True)
        self.mean = nn.Linear(2 * cfg.chord_enc_hidden, cfg.z_chd)
        self.logvar = nn.Linear(2 * cfg.chord_enc_hidden, cfg.z_chd)

    def forward(self, chd: torch.Tensor) -> GaussianPosterior:
        if chd.dim() != 3 or chd.shape[1:] != (N_CHORD_FRAMES, 36):
            raise ShapeError(f"chord input must be (B,{N_CHORD_FRAMES},36), got {tuple(chd.shape)}")
        _, h = self.gru(chd)
        h = torch.cat([h[0], h[1]], dim=-1)
        return GaussianPosterior(self.mean(h), self.logvar(h))


class ChordDecoder(nn.Module):
    """Teacher-forced recurrent reconstruction of the 8 chord frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.chord_dec_hidden
        self.z_dim = cfg.z_chd
        self.init = nn.Linear(cfg.z_chd, hidden)
        self.gru = nn.GRU(36 + cfg.z_chd, hidden, batch_first=True)
        self.root_head = nn.Linear(hidden, 12)
        self.chroma_head = nn.Linear(hidden, 12)
        self.bass_head = nn.Linear(hidden, 12)

    def _heads(self, out):
        return self.root_head(out), self.chroma_head(out), self.bass_head(out)

    def forward(self, z_chd: torch.Tensor, teacher: torch.Tensor):
        """Returns (root, chroma, bass) logits, each (B, 8, 12)."""
        if z_chd.shape[-1] != self.z_dim:
            raise ShapeError(f"z_chd must be {self.z_dim}-d")
        b = z_chd.shape[0]
        h0 = torch.tanh(self.init(z_chd))[None]
        start = torch.zeros(b, 1, 36, dtype=z_chd.dtype, device=z_chd.device)
        inputs = torch.cat([start, teacher[:, :-1]], dim=1)
        inputs = torch.cat([inputs, z_chd[:, None].expand(b, N_CHORD_FRAMES, self.z_dim)], dim=-1)
        out, _ = self.gru(inputs, h0)
        return self._heads(out)

    @torch.no_grad()
    def greedy(self, z_chd: torch.Tensor) -> torch.Tensor:
        """Argmax frame-by-frame reconstruction, (B, 8, 36)."""
        b = z_chd.shape[0]
        h = torch.tanh(self.init(z_chd))[None]
        frame = torch.zeros(b, 36, dtype=z_chd.dtype, device=z_chd.device)
        frames = []
        for _ in range(N_CHORD_FRAMES):
            inp = torch.cat([frame, z_chd], dim=-1)[:, None]
            out, h = self.gru(inp, h)
            root, chroma, bass = self._heads(out[:, 0])
            frame = torch.zeros_like(frame)
            frame.scatter_(1, root.argmax(-1, keepdim=True), 1.0)
            frame[:, 12:24] = (chroma > 0).to(frame.dtype)
            frame.scatter_(1, bass.argmax(-1, keepdim=True) + 24, 1.0)
            frames.append(frame)
        return torch.stack(frames, dim=1)


class TextureEncoder(nn.Module):
    """Shared conv+GRU structure for the audio and symbolic texture encoders."""

    def __init__(self, cfg: ModelConfig, in_channels: int, in_time: int, in_keys: int,
                 z_dim: int):
        super().__init__()
        self.in_shape = (in_channels, in_time, in_keys)
        self.conv = nn.Conv2d(in_channels, cfg.conv_channels, cfg.conv_kernel, cfg.conv_stride)
        t_out = (in_time - cfg.conv_kernel[0]) // cfg.conv_stride[0] + 1
        k_out = (in_keys - cfg.conv_kernel[1]) // cfg.conv_stride[1] + 1
        self.gru = nn.GRU(cfg.conv_channels * k_out, cfg.enc_gru_hidden,
                          batch_first=True, bidirectional=True)
        self.mean = nn.Linear(2 * cfg.enc_gru_hidden, z_dim)
        self.logvar = nn.Linear(2 * cfg.enc_gru_hidden, z_dim)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"expected (B,{','.join(map(str, self.in_shape))}), got {tuple(x.shape)}")
        h = F.relu(self.conv(x))                      # (B, C, T', K')
        b, c, t, k = h.shape
        h = h.permute(0, 2, 1, 3).reshape(b, t, c * k)
        _, hn = self.gru(h)
        hn = torch.cat([hn[0], hn[1]], dim=-1)
        return GaussianPosterior(self.mean(hn), self.logvar(hn))


class FeaturePredictor(nn.Module):
    """z_aud -> 32-step (bass, melody, intensity) series.

    Bass and melody heads are onset probabilities (sigmoid); the intensity
    head is clamped to [0,1], with its bias initialized mid-range so the
    clamp starts in its linear region.
    """

    STEP_EMB = 16

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.z_dim = cfg.z_aud
        self.init = nn.Linear(cfg.z_aud, cfg.feat_hidden)
        self.step_emb = nn.Parameter(torch.randn(N_STEPS, self.STEP_EMB) * 0.05)
        self.gru = nn.GRU(self.STEP_EMB, cfg.feat_hidden, batch_first=True)
        self.head = nn.Linear(cfg.feat_hidden, 3)
        with torch.no_grad():
            self.head.bias[2] = 0.5

    def forward(self, z_aud: torch.Tensor):
        """Returns (features (B,32,3) in [0,1], raw logits (B,32,3))."""
        if z_aud.shape[-1] != self.z_dim:
            raise ShapeError(f"z_aud must be {self.z_dim}-d")
        b = z_aud.shape[0]
        h0 = torch.tanh(self.init(z_aud))[None]
        inp = self.step_emb[None].expand(b, N_STEPS, self.STEP_EMB)
        out, _ = self.gru(inp.contiguous(), h0)
        raw = self.head(out)
        feats = torch.stack([torch.sigmoid(raw[..., 0]),
                             torch.sigmoid(raw[..., 1]),
                             raw[..., 2].clamp(0.0, 1.0)], dim=-1)
        return feats, raw


@dataclass
class DecoderOutput:
    """Per-step decoding distributions.

    pitch_logits, dur_logits: (B, 32, S, 128) / (B, 32, S, 32) for S note
    slots; stop_logits: (B, 32, S, 2) where class 1 means "end of step".
    The induced note-count distribution is available via
    note_count_log_probs().
    """
    pitch_logits: torch.Tensor
    dur_logits: torch.Tensor
    stop_logits: torch.Tensor

    def note_count_log_probs(self) -> torch.Tensor:
        """(B, 32, S): log P(count = k) implied by the stop tokens."""
        logp = F.log_softmax(self.stop_logits, dim=-1)
        cont, stop = logp[..., 0], logp[..., 1]
        cum = torch.cumsum(cont, dim=-1) - cont  # sum of cont over slots < k
        return cum + stop


class ArrangementDecoder(nn.Module):
    """Hierarchical decoder: time-axis GRU -> per-step note-axis GRU."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        z_total = cfg.z_total
        self.feat_emb = nn.Linear(3, cfg.feat_emb)
        self.z_inject = nn.Linear(z_total, cfg.z_inject)
        self.time_init = nn.Linear(z_total, cfg.dec_time_hidden)
        self.time_gru = nn.GRU(cfg.feat_emb + cfg.z_inject, cfg.dec_time_hidden,
                               batch_first=True)
        self.note_init = nn.Linear(cfg.dec_time_hidden, cfg.dec_note_hidden)
        self.pitch_embedding = nn.Embedding(N_PITCHES + 1, cfg.pitch_emb)
        self.dur_embedding = nn.Embedding(MAX_DURATION + 1, cfg.dur_emb)
        self.note_gru = nn.GRU(cfg.pitch_emb + cfg.dur_emb, cfg.dec_note_hidden,
                               batch_first=True)
        self.pitch_head = nn.Linear(cfg.dec_note_hidden, N_PITCHES)
        self.dur_head = nn.Linear(cfg.dec_note_hidden, MAX_DURATION)
        self.stop_head = nn.Linear(cfg.dec_note_hidden, 2)

    def step_contexts(self, z: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """Time-axis recurrence: (B, z_total) x (B, 32, 3) -> (B, 32, H)."""
        if z.dim() != 2 or z.shape[-1] != self.cfg.z_total:
            raise ShapeError(f"z must be (B,{self.cfg.z_total}), got {tuple(z.shape)}")
        if feats.dim() != 3 or feats.shape[1] != N_STEPS or feats.shape[2] != 3:
            raise ContractViolation(f"features must be (B,{N_STEPS},3), got {tuple(feats.shape)}")
        b = z.shape[0]
        h0 = torch.tanh(self.time_init(z))[None]
        inject = self.z_inject(z)[:, None].expand(b, N_STEPS, self.cfg.z_inject)
        inp = torch.cat([self.feat_emb(feats), inject], dim=-1)
        out, _ = self.time_gru(inp, h0)
        return out

    def _note_input(self, pitch_idx: torch.Tensor, dur_idx: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.pitch_embedding(pitch_idx), self.dur_embedding(dur_idx)], dim=-1)

    def forward(self, z: torch.Tensor, feats: torch.Tensor,
                teacher_pitch: torch.Tensor, teacher_dur: torch.Tensor,
                counts: torch.Tensor) -> DecoderOutput:
        """Teacher-forced decoding.

        teacher_pitch/teacher_dur: (B, 32, K) indices padded past counts;
        counts: (B, 32).  Slot i is predicted from the embedding of teacher
        note i-1 (slot 0 from the start token); one extra slot carries the
        end-of-step prediction.
        """
        contexts = self.step_contexts(z, feats)
        b = z.shape[0]
        n_slots = int(counts.max().item()) + 1 if counts.numel() else 1
        n_slots = min(n_slots, self.cfg.max_notes_per_step + 1)

        flat = b * N_STEPS
        start_p = torch.full((b, N_STEPS, 1), PITCH_START, dtype=torch.long, device=z.device)
        start_d = torch.full((b, N_STEPS, 1), DUR_START, dtype=torch.long, device=z.device)
        in_pitch = torch.cat([start_p, teacher_pitch[:, :, :n_slots - 1]], dim=2)
        in_dur = torch.cat([start_d, teacher_dur[:, :, :n_slots - 1]], dim=2)
        inputs = self._note_input(in_pitch, in_dur).reshape(flat, n_slots, -1)

        h0 = torch.tanh(self.note_init(contexts)).reshape(1, flat, -1)
        out, _ = self.note_gru(inputs, h0.contiguous())
        out = out.reshape(b, N_STEPS, n_slots, -1)
        return DecoderOutput(self.pitch_head(out), self.dur_head(out), self.stop_head(out))

    @torch.no_grad()
    def generate(self, z: torch.Tensor, feats: torch.Tensor, temperature: float = 0.0,
                 generator: torch.Generator | None = None):
        """Greedy (temperature 0) or sampled decoding.

        Returns (pitches, durs, counts): (B, 32, K) index tensors and the
        per-step note counts.
        """
        contexts = self.step_contexts(z, feats)
        b = z.shape[0]
        flat = b * N_STEPS
        k_max = self.cfg.max_notes_per_step
        h = torch.tanh(self.note_init(contexts)).reshape(1, flat, -1).contiguous()
        pitch_in = torch.full((flat,), PITCH_START, dtype=torch.long, device=z.device)
        dur_in = torch.full((flat,), DUR_START, dtype=torch.long, device=z.device)
        stopped = torch.zeros(flat, dtype=torch.bool, device=z.device)
        pitches = torch.zeros(flat, k_max, dtype=torch.long, device=z.device)
        durs = torch.zeros(flat, k_max, dtype=torch.long, device=z.device)
        counts = torch.zeros(flat, dtype=torch.long, device=z.device)

        def pick(logits):
            if temperature <= 0.0:
                return logits.argmax(dim=-1)
            probs = torch.softmax(logits / temperature, dim=-1)
            return torch.multinomial(probs, 1, generator=generator)[:, 0]

        for slot in range(k_max):
            inp = self._note_input(pitch_in[:, None], dur_in[:, None])
            out, h = self.note_gru(inp, h)
            out = out[:, 0]
            stop_now = self.stop_head(out).argmax(dim=-1).bool() if temperature <= 0.0 else \
                pick(self.stop_head(out)).bool()
            newly_active = ~stopped & ~stop_now
            stopped = stopped | stop_now
            pitch = pick(self.pitch_head(out))
            dur = pick(self.dur_head(out))
            pitches[newly_active, slot] = pitch[newly_active]
            durs[newly_active, slot] = dur[newly_active]
            counts[newly_active] += 1
            pitch_in, dur_in = pitch, dur
            if bool(stopped.all()):
                break
        return (pitches.reshape(b, N_STEPS, k_max), durs.reshape(b, N_STEPS, k_max),
                counts.reshape(b, N_STEPS))


class TranscriberNet(nn.Module):
    """Small refinement net for the pretrained transcriber backend.

    (B, 1, 158, 88) filterbank features -> (B, 3, 158, 88) onset/frame/
    velocity in [0,1].
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, N_FRAMES, N_KEYS):
            raise ShapeError(f"expected (B,1,{N_FRAMES},{N_KEYS}), got {tuple(x.shape)}")
        return torch.sigmoid(self.conv2(F.relu(self.conv1(x))))


class ArrangementModel(nn.Module):
    """All trainable parts plus the latent plumbing between them."""

    def __init__(self, cfg: ModelConfig, transcriber_net: TranscriberNet | None = None):
        super().__init__()
        self.cfg = cfg
        self.chord_encoder = ChordEncoder(cfg)
        self.chord_decoder = ChordDecoder(cfg)
        self.audio_encoder = TextureEncoder(cfg, 3, N_FRAMES, N_KEYS, cfg.z_aud)
        self.symbolic_encoder = TextureEncoder(cfg, 2, N_STEPS, N_PITCHES, cfg.z_sym)
        self.feature_predictor = FeaturePredictor(cfg)
        self.decoder = ArrangementDecoder(cfg)
        self.transcriber = transcriber_net

    def parameter_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        groups = {
            "chord_encoder": list(self.chord_encoder.parameters()),
            "chord_decoder": list(self.chord_decoder.parameters()),
            "audio_encoder": list(self.audio_encoder.parameters()),
            "symbolic_encoder": list(self.symbolic_encoder.parameters()),
            "feature_predictor": list(self.feature_predictor.parameters()),
            "decoder": list(self.decoder.parameters()),
        }
        if self.transcriber is not None:
            groups["transcriber"] = list(self.transcriber.parameters())
        return groups

    def concat_latent(self, z_chd: torch.Tensor, z_aud: torch.Tensor,
                      z_sym: torch.Tensor) -> torch.Tensor:
        for name, z, d in (("z_chd", z_chd, self.cfg.z_chd), ("z_aud", z_aud, self.cfg.z_aud),
                           ("z_sym", z_sym, self.cfg.z_sym)):
            if z.shape[-1] != d:
                raise ShapeError(f"{name} must be {d}-d, got {z.shape[-1]}")
        return torch.cat([z_chd, z_aud, z_sym], dim=-1)

    def embed_audio(self, batch_audio_feats: torch.Tensor) -> torch.Tensor:
        """In-graph transcription for fine-tuning: (B,1,158,88) -> (B,3,158,88)."""
        if self.transcriber is None:
            raise ContractViolation("model has no in-graph transcriber")
        return self.transcriber(batch_audio_feats)


def config_fingerprint(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def save_checkpoint(path, model: ArrangementModel, optimizer=None,
                    stage: Stage = Stage.WARMUP, global_step: int = 0,
                    extra: dict | None = None):
    """Atomic checkpoint write (temp file + rename)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": config_fingerprint(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "stage": stage.value,
        "global_step": int(global_step),
        "extra": extra or {},
    }
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigMismatch(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if expected is not None and not force:
        if payload["model_config"] != config_fingerprint(expected):
            raise ConfigMismatch(
                f"{path}: checkpoint config differs from the requested config (use force to override)")
    return payload


def model_from_checkpoint(payload: dict) -> ArrangementModel:
    raw = dict(payload["model_config"])
    for k in ("conv_kernel", "conv_stride"):
        raw[k] = tuple(raw[k])
    model = ArrangementModel(ModelConfig(**raw))
    model.load_state_dict(payload["state_dict"])
    return model
