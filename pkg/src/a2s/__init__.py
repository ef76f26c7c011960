"""Audio-to-symbolic piano arrangement toolkit.

Learns a cross-modal conditional VAE over (audio, chords, arrangement)
segments and arranges pop-song accompaniment audio into 2-bar piano MIDI.
"""

__version__ = "0.1.0"

from .symbolic import (ChordProgression, NoteEvent, PianoRoll, SegmentScore,
                       SymbolicFeatures)

__all__ = [
    "ChordProgression", "NoteEvent", "PianoRoll", "SegmentScore",
    "SymbolicFeatures", "__version__",
]
