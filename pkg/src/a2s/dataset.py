"""Aligned training segments from song-level assets; splits, augmentation, shards.

A song asset bundles accompaniment audio, arrangement + melody MIDI, beat
and chord annotations.  Songs are cut into non-overlapping 8-beat windows
starting at downbeats; each window becomes one TrainingExample whose
components all describe the same 8 beats.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_frontend import (AudioSegment, BeatGrid, TranscriberBackend,
                             TranscriberEmbedding, band_features, load_wav,
                             stretch_and_resample, N_SAMPLES)
from .chords import ChordSpan, progression_for_window, read_chord_annotation
from .errors import AlignmentError, DataError
from .midi_io import TimedNote, read_midi
from .symbolic import (ChordProgression, NoteEvent, SegmentScore,
                       SymbolicFeatures, extract_features, transpose,
                       transpose_chord, N_STEPS, STEPS_PER_BEAT)

SHARD_MAGIC = b"A2S1"
ALLOWED_METERS = ("4/4", "2/4")
TRANSPOSITION_RANGE = tuple(range(-5, 7))  # 12 keys, centered


@dataclass
class SongAsset:
    song_id: str
    audio: Path
    midi_acc: Path
    midi_mel: Path
    beats: Path
    chords: Path
    meter: str = "4/4"

    def __post_init__(self):
        if self.meter not in ALLOWED_METERS:
            raise DataError(f"{self.song_id}: meter {self.meter!r} not in {ALLOWED_METERS}")
        for name in ("audio", "midi_acc", "midi_mel", "beats", "chords"):
            p = Path(getattr(self, name))
            setattr(self, name, p)
            if not p.is_file():
                raise DataError(f"{self.song_id}: missing {name} file {p}")


@dataclass
class TrainingExample:
    song_id: str
    segment_index: int
    chord: ChordProgression
    score: SegmentScore
    melody: SegmentScore
    features: SymbolicFeatures
    embedding: TranscriberEmbedding | None = None
    audio: np.ndarray | None = None          # raw segment samples when embeddings are deferred
    transposition: int = 0
    audio_features: np.ndarray | None = None  # lazy (158,88) in-graph transcriber input


def read_manifest(path) -> list[SongAsset]:
    """CSV with columns song_id, audio, midi_acc, midi_mel, beats, chords, meter."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"manifest file not found: {path}")
    base = p.parent
    assets = []
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"song_id", "audio", "midi_acc", "midi_mel", "beats", "chords", "meter"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: manifest must have columns {sorted(required)}")
        for row in reader:
            assets.append(SongAsset(
                song_id=row["song_id"],
                audio=base / row["audio"],
                midi_acc=base / row["midi_acc"],
                midi_mel=base / row["midi_mel"],
                beats=base / row["beats"],
                chords=base / row["chords"],
                meter=row["meter"],
            ))
    if not assets:
        raise DataError(f"{path}: manifest has no songs")
    return assets


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def score_from_timed_notes(notes: list[TimedNote], grid: BeatGrid,
                           start_beat: int) -> SegmentScore:
    """Quantize timed notes onto the window's 32-step grid (nearest step)."""
    out = []
    for n in notes:
        onset_beat = float(grid.beat_of_time(n.onset_sec))
        step = _round_half_up((onset_beat - start_beat) * STEPS_PER_BEAT)
        if not 0 <= step < N_STEPS:
            continue
        end_beat = float(grid.beat_of_time(n.onset_sec + n.duration_sec))
        end_step = _round_half_up((end_beat - start_beat) * STEPS_PER_BEAT)
        out.append(NoteEvent(step, n.pitch, max(end_step - step, 1)))
    return SegmentScore(out)


def check_alignment(notes: list[TimedNote], grid: BeatGrid, label: str):
    """MIDI extending more than one beat past the annotated grid is an error."""
    if not notes:
        return
    last = max(n.onset_sec + n.duration_sec for n in notes)
    interval = grid.beat_times[-1] - grid.beat_times[-2] if len(grid) >= 2 else 0.0
    if last > grid.beat_times[-1] + 2 * interval:
        raise AlignmentError(
            f"{label}: MIDI runs {last:.2f}s, beat annotation ends at "
            f"{grid.beat_times[-1]:.2f}s (more than 1 beat short)")


def segment_start_indices(grid: BeatGrid) -> list[int]:
    """Non-overlapping 8-beat windows from the first downbeat (hop 8)."""
    down = np.nonzero(grid.downbeat_flags)[0]
    if len(down) == 0:
        return []
    first = int(down[0])
    extended_len = len(grid) + 1  # one extrapolated right edge is allowed
    return [b for b in range(first, len(grid), 8) if b + 8 <= extended_len - 1]


def _cache_path(segment: AudioSegment, backend: TranscriberBackend) -> Path | None:
    root = os.environ.get("A2S_CACHE")
    if not root:
        return None
    digest = hashlib.sha1(segment.samples.tobytes()).hexdigest()
    tag = backend.cache_tag().replace(":", "_").replace("/", "_")
    d = Path(root) / tag
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{digest}.npy"


def embed_segment(segment: AudioSegment, backend: TranscriberBackend) -> TranscriberEmbedding:
    cache = _cache_path(segment, backend)
    if cache is not None and cache.is_file():
        return TranscriberEmbedding.from_stack(np.load(cache))
    emb = backend.transcribe(segment)
    if cache is not None:
        np.save(cache, emb.stack())
    return emb


def segment_song(asset: SongAsset, backend: TranscriberBackend | None = None,
                 precompute_embeddings: bool = True) -> list[TrainingExample]:
    """Cut one song into aligned 8-beat examples.

    Windows with an empty arrangement are kept: silence is a valid texture.
    """
    grid = BeatGrid.from_file(asset.beats)
    spans = read_chord_annotation(asset.chords)
    samples, rate = load_wav(asset.audio)
    acc_notes = read_midi(asset.midi_acc)
    mel_notes = read_midi(asset.midi_mel)
    check_alignment(acc_notes, grid, f"{asset.song_id}/{asset.midi_acc.name}")

    starts = segment_start_indices(grid)
    grid_ext = grid.extended(len(grid) + 1) if starts and starts[-1] + 8 > len(grid) - 1 else grid

    examples = []
    for seg_idx, start in enumerate(starts):
        segment = stretch_and_resample(samples, rate, grid_ext, start)
        score = score_from_timed_notes(acc_notes, grid_ext, start)
        melody = score_from_timed_notes(mel_notes, grid_ext, start)
        ex = TrainingExample(
            song_id=asset.song_id,
            segment_index=seg_idx,
            chord=progression_for_window(spans, float(start)),
            score=score,
            melody=melody,
            features=extract_features(score, melody),
        )
        if precompute_embeddings:
            if backend is None:
                raise DataError("precompute_embeddings requires a transcriber backend")
            ex.embedding = embed_segment(segment, backend)
        else:
            ex.audio = segment.samples
        examples.append(ex)
    return examples


def split_by_song(examples: list[TrainingExample], train_fraction: float = 0.9,
                  seed: int = 0) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """Song-level split: every song's segments land entirely on one side."""
    songs = sorted({ex.song_id for ex in examples})
    rng = np.random.default_rng(seed)
    order = list(songs)
    rng.shuffle(order)
    n_train = int(round(train_fraction * len(songs)))
    train_songs = set(order[:n_train])
    train = [ex for ex in examples if ex.song_id in train_songs]
    test = [ex for ex in examples if ex.song_id not in train_songs]
    return train, test


def _shift_audio(ex: TrainingExample, semitones: int, cmd_template: str) -> np.ndarray:
    """Run the external pitch-shift hook on one segment's audio."""
    from scipy.io import wavfile

    if ex.audio is None:
        raise DataError("audio transposition needs raw segment audio "
                        "(prepare with dataset.precompute_embeddings=false)")
    with tempfile.TemporaryDirectory() as td:
        src = Path(td) / "in.wav"
        dst = Path(td) / "out.wav"
        wavfile.write(src, 16000, ex.audio)
        cmd = cmd_template.format(infile=src, outfile=dst, semitones=semitones)
        proc = subprocess.run(shlex.split(cmd), capture_output=True)
        if proc.returncode != 0 or not dst.is_file():
            raise DataError(f"pitch-shift hook failed: {cmd!r}: {proc.stderr.decode()[:200]}")
        shifted, _ = load_wav(dst)
    out = np.zeros(N_SAMPLES, dtype=np.float32)
    out[:min(len(shifted), N_SAMPLES)] = shifted[:N_SAMPLES]
    return out


def augment_transpositions(examples: list[TrainingExample],
                           transpose_audio: bool = False,
                           pitch_shift_cmd: str = "") -> list[TrainingExample]:
    """12-key augmentation of the training side (k in -5..+6).

    Symbolic components are transposed and the feature series recomputed;
    audio/embeddings are shared untouched unless `transpose_audio` is set,
    which requires an external pitch-shift hook command.
    """
    if transpose_audio and not pitch_shift_cmd:
        raise DataError("dataset.transpose_audio=true needs dataset.pitch_shift_cmd "
                        "(an external pitch shifter; symbolic-only augmentation is the default)")
    out = []
    for ex in examples:
        for k in TRANSPOSITION_RANGE:
            score = transpose(ex.score, k)
            melody = transpose(ex.melody, k)
            audio = ex.audio
            if transpose_audio and k != 0:
                audio = _shift_audio(ex, k, pitch_shift_cmd)
            out.append(TrainingExample(
                song_id=ex.song_id,
                segment_index=ex.segment_index,
                chord=transpose_chord(ex.chord, k),
                score=score,
                melody=melody,
                features=extract_features(score, melody),
                embedding=ex.embedding,
                audio=audio,
                transposition=k,
            ))
    return out


# --- shard container ---------------------------------------------------------

def _notes_to_array(score: SegmentScore) -> np.ndarray:
    return np.array([(n.onset_step, n.pitch, n.duration_steps) for n in score.notes],
                    dtype=np.int16).reshape(-1, 3)


def _array_to_notes(arr: np.ndarray) -> SegmentScore:
    return SegmentScore(NoteEvent(int(o), int(p), int(d)) for o, p, d in arr)


def write_shard(path, song_id: str, examples: list[TrainingExample]):
    """Binary container: magic, uint32 JSON header length, header, raw arrays."""
    blobs = []
    index = []
    offset = 0

    def add(name, arr, entry):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entry["arrays"][name] = {"dtype": str(arr.dtype), "shape": list(arr.shape),
                                 "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)

    for ex in examples:
        entry = {"segment_index": ex.segment_index, "transposition": ex.transposition,
                 "arrays": {}}
        add("chord", ex.chord.frames, entry)
        add("score", _notes_to_array(ex.score), entry)
        add("melody", _notes_to_array(ex.melody), entry)
        add("features", ex.features.stack(), entry)
        if ex.embedding is not None:
            add("embedding", ex.embedding.stack(), entry)
        if ex.audio is not None:
            add("audio", ex.audio, entry)
        index.append(entry)

    header = json.dumps({"format_version": 1, "song_id": song_id,
                         "n_examples": len(examples), "examples": index}).encode()
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_shard(path) -> list[TrainingExample]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SHARD_MAGIC:
            raise DataError(f"{path}: bad shard magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        data = fh.read()
    if header.get("format_version") != 1:
        raise DataError(f"{path}: unsupported shard version {header.get('format_version')}")

    def get(entry, name):
        spec = entry["arrays"].get(name)
        if spec is None:
            return None
        raw = data[spec["offset"]:spec["offset"] + spec["nbytes"]]
        return np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()

    examples = []
    for entry in header["examples"]:
        emb = get(entry, "embedding")
        audio = get(entry, "audio")
        examples.append(TrainingExample(
            song_id=header["song_id"],
            segment_index=entry["segment_index"],
            chord=ChordProgression(get(entry, "chord")),
            score=_array_to_notes(get(entry, "score")),
            melody=_array_to_notes(get(entry, "melody")),
            features=SymbolicFeatures(*[get(entry, "features")[:, i] for i in range(3)]),
            embedding=TranscriberEmbedding.from_stack(emb) if emb is not None else None,
            audio=audio,
            transposition=entry.get("transposition", 0),
        ))
    return examples


def prepare(manifest_path, out_dir, backend: TranscriberBackend | None = None,
            precompute_embeddings: bool = True) -> dict:
    """Ingest every song in the manifest into per-song shards plus an index."""
    assets = read_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"format": "a2s-shards-1", "songs": []}
    total = 0
    for asset in assets:
        examples = segment_song(asset, backend, precompute_embeddings)
        shard = out / f"{asset.song_id}.a2s"
        write_shard(shard, asset.song_id, examples)
        index["songs"].append({"song_id": asset.song_id, "shard": shard.name,
                               "n_examples": len(examples)})
        total += len(examples)
    index["n_examples"] = total
    with open(out / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2)
    return index


def load_examples(shards_dir) -> list[TrainingExample]:
    d = Path(shards_dir)
    index_path = d / "index.json"
    if not index_path.is_file():
        raise DataError(f"no shard index at {index_path}")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    examples = []
    for song in index["songs"]:
        examples.extend(read_shard(d / song["shard"]))
    return examples


def ensure_inputs(examples: list[TrainingExample], backend: TranscriberBackend | None,
                  in_graph: bool = False):
    """Materialize encoder inputs for examples that stored raw audio."""
    for ex in examples:
        if ex.embedding is None and ex.audio is not None:
            segment = AudioSegment(ex.audio)
            if in_graph:
                if ex.audio_features is None:
                    ex.audio_features = band_features(segment)
            else:
                if backend is None:
                    raise DataError("examples need embeddings but no backend was given")
                ex.embedding = embed_segment(segment, backend)
