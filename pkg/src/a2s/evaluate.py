"""Objective evaluation: faithfulness proxies plus model-quality probes.

Per-segment metrics: chroma similarity of the generated notes against the
annotated chords, onset F1s for bass and (lead-voice proxy) melody, and
Pearson correlation of rhythmic-intensity series.  Correlation metrics are
symmetric in their inputs; the F1s are precision/recall against the
reference (asymmetric), noted in the CSV header.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio_frontend import BeatGrid
from .chords import progression_for_window, read_chord_annotation
from .dataset import score_from_timed_notes, segment_start_indices
from .errors import LengthMismatch
from .midi_io import read_midi
from .symbolic import (ChordProgression, SegmentScore, extract_bass_onset,
                       extract_rhythmic_intensity, N_STEPS, STEPS_PER_BEAT)

CSV_NOTE = ("chroma_similarity/intensity_correlation are symmetric; "
            "onset F1s treat the reference as ground truth")


def onset_f1(pred: np.ndarray, ref: np.ndarray) -> float:
    """F1 over binarized onset series; two empty series count as a match."""
    p = pred > 0.5
    r = ref > 0.5
    tp = float(np.sum(p & r))
    if not p.any() and not r.any():
        return 1.0
    if tp == 0.0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / r.sum()
    return 2 * precision * recall / (precision + recall)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; constant series compare by equality (1.0 or 0.0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa < 1e-12 or sb < 1e-12:
        return 1.0 if np.allclose(a, b) else 0.0
    return float(np.corrcoef(a, b)[0, 1])


def lead_onset(score: SegmentScore) -> np.ndarray:
    """Onset series of the highest-pitched note per step (melody proxy)."""
    series = np.zeros(N_STEPS, dtype=np.float32)
    for n in score.notes:
        series[n.onset_step] = 1.0  # the top note of a step always onsets there
    return series


def beatwise_chroma(score: SegmentScore) -> np.ndarray:
    """(8, 12) pitch-class onset histograms, one row per beat."""
    hist = np.zeros((8, 12), dtype=np.float64)
    for n in score.notes:
        hist[n.onset_step // STEPS_PER_BEAT, n.pitch % 12] += 1.0
    return hist


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def chroma_similarity(score: SegmentScore, prog: ChordProgression) -> float:
    """Mean beat-wise cosine between note histograms and annotated chroma."""
    hist = beatwise_chroma(score)
    chroma = prog.chroma().astype(np.float64)
    sims = []
    for b in range(8):
        if hist[b].sum() > 0 and chroma[b].sum() > 0:
            sims.append(cosine(hist[b], chroma[b]))
    return float(np.mean(sims)) if sims else 0.0


@dataclass
class SegmentEval:
    index: int
    chroma_similarity: float
    bass_onset_f1: float
    melody_onset_f1: float
    intensity_correlation: float


@dataclass
class EvalReport:
    segments: list[SegmentEval]

    def aggregate(self) -> dict[str, float]:
        keys = ("chroma_similarity", "bass_onset_f1", "melody_onset_f1",
                "intensity_correlation")
        return {k: float(np.mean([getattr(s, k) for s in self.segments])) for k in keys}

    def to_csv(self, path):
        agg = self.aggregate()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {CSV_NOTE}\n")
            writer = csv.writer(fh)
            writer.writerow(["segment", "chroma_similarity", "bass_onset_f1",
                             "melody_onset_f1", "intensity_correlation"])
            for s in self.segments:
                writer.writerow([s.index, f"{s.chroma_similarity:.4f}",
                                 f"{s.bass_onset_f1:.4f}", f"{s.melody_onset_f1:.4f}",
                                 f"{s.intensity_correlation:.4f}"])
            writer.writerow(["mean", f"{agg['chroma_similarity']:.4f}",
                             f"{agg['bass_onset_f1']:.4f}", f"{agg['melody_onset_f1']:.4f}",
                             f"{agg['intensity_correlation']:.4f}"])


def evaluate_scores(generated: list[SegmentScore], reference: list[SegmentScore],
                    progressions: list[ChordProgression]) -> EvalReport:
    if not (len(generated) == len(reference) == len(progressions)):
        raise LengthMismatch(
            f"segment counts differ: generated={len(generated)}, "
            f"reference={len(reference)}, chords={len(progressions)}")
    rows = []
    for i, (gen, ref, prog) in enumerate(zip(generated, reference, progressions)):
        rows.append(SegmentEval(
            index=i,
            chroma_similarity=chroma_similarity(gen, prog),
            bass_onset_f1=onset_f1(extract_bass_onset(gen), extract_bass_onset(ref)),
            melody_onset_f1=onset_f1(lead_onset(gen), lead_onset(ref)),
            intensity_correlation=pearson(extract_rhythmic_intensity(gen),
                                          extract_rhythmic_intensity(ref)),
        ))
    return EvalReport(rows)


def scores_from_midi(midi_path, grid: BeatGrid, starts: list[int]) -> list[SegmentScore]:
    notes = read_midi(midi_path)
    return [score_from_timed_notes(notes, grid, start) for start in starts]


def evaluate_midi(generated_midi, reference_midi, beats_path, chords_path) -> EvalReport:
    """Window both MIDI files on the annotated beat grid and compare."""
    grid = BeatGrid.from_file(beats_path)
    spans = read_chord_annotation(chords_path)
    starts = segment_start_indices(grid)
    grid_ext = grid.extended(len(grid) + 1) if starts and starts[-1] + 8 > len(grid) - 1 else grid
    generated = scores_from_midi(generated_midi, grid_ext, starts)
    reference = scores_from_midi(reference_midi, grid_ext, starts)
    progressions = [progression_for_window(spans, float(s)) for s in starts]
    return evaluate_scores(generated, reference, progressions)


def plot_report(report: EvalReport, out_dir):
    """Static per-metric plots (PNG) from the report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = [s.index for s in report.segments]
    for key in ("chroma_similarity", "bass_onset_f1", "melody_onset_f1",
                "intensity_correlation"):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(idx, [getattr(s, key) for s in report.segments])
        ax.set_xlabel("segment")
        ax.set_ylabel(key)
        ax.set_ylim(-1.05 if "correlation" in key else 0.0, 1.05)
        fig.tight_layout()
        fig.savefig(out / f"{key}.png", dpi=110)
        plt.close(fig)


def plot_loss_curves(log_csv, out_png):
    """Loss curves from the training metrics CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, series = [], {}
    with open(log_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            steps.append(int(row["step"]))
            for key in ("total", "recon_arrangement", "recon_chord", "recon_features"):
                series.setdefault(key, []).append(float(row[key]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, vals in series.items():
        ax.plot(steps, vals, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


# --- model-quality probes used by the acceptance suite -----------------------


@torch.no_grad()
def teacher_forced_note_f1(model, examples, batch_size: int = 32) -> float:
    """Note-level F1 with teacher forcing and posterior-mean latents.

    A note counts as correct when its (step, pitch, duration) match the
    ground truth at its slot.
    """
    from .training import collate

    model.eval()
    correct = total = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = collate(chunk, [ex.score for ex in chunk], model.cfg.max_notes_per_step)
        z_chd = model.chord_encoder(batch.chord).mean
        z_aud = model.audio_encoder(batch.embedding).mean
        z_sym = model.symbolic_encoder(batch.roll).mean
        z = model.concat_latent(z_chd, z_aud, z_sym)
        out = model.decoder(z, batch.feats, batch.pitch_idx, batch.dur_idx, batch.counts)
        n_slots = out.pitch_logits.shape[2]
        slot = torch.arange(n_slots)[None, None]
        mask = slot < batch.counts[..., None]
        pred_pitch = out.pitch_logits.argmax(-1)
        pred_dur = out.dur_logits.argmax(-1)
        ok = (pred_pitch == batch.pitch_idx[:, :, :n_slots]) & \
             (pred_dur == batch.dur_idx[:, :, :n_slots]) & mask
        correct += int(ok.sum())
        total += int(mask.sum())
    return correct / total if total else 1.0


@torch.no_grad()
def chord_frame_accuracy(model, examples, batch_size: int = 64) -> float:
    """Teacher-forced chord reconstruction: a frame is correct when root and
    bass argmaxes match and the thresholded chroma is exactly right."""
    model.eval()
    good = total = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        chd = torch.as_tensor(np.stack([ex.chord.frames for ex in chunk]))
        z = model.chord_encoder(chd).mean
        root_l, chroma_l, bass_l = model.chord_decoder(z, chd)
        root_ok = root_l.argmax(-1) == chd[:, :, :12].argmax(-1)
        bass_ok = bass_l.argmax(-1) == chd[:, :, 24:].argmax(-1)
        chroma_ok = ((chroma_l > 0).float() == chd[:, :, 12:24]).all(-1)
        ok = root_ok & bass_ok & chroma_ok
        good += int(ok.sum())
        total += ok.numel()
    return good / total if total else 1.0
