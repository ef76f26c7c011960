"""Unified command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error (bad/missing inputs),
1 anything else.  Every command is deterministic given --seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ArrangerError, DataError, UsageError


def _add_config_args(p):
    p.add_argument("--config", help="TOML-style config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config entry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a2s", description="Audio-to-symbolic piano arrangement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a song manifest into training shards")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precompute-embeddings", action="store_true", default=None,
                   help="force embedding precomputation regardless of config")
    _add_config_args(p)

    p = sub.add_parser("train", help="run the three-stage curriculum")
    p.add_argument("--shards", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--dry-run", action="store_true",
                   help="validate inputs and print the resolved config")
    _add_config_args(p)

    p = sub.add_parser("arrange", help="arrange audio into a piano MIDI file")
    p.add_argument("--audio", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--chords", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["prior", "autoregressive"], default="prior")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--reference-midi", help="optional AR priming MIDI (ignored in prior mode)")
    p.add_argument("--allow-early", action="store_true",
                   help="warn instead of failing on a pre-stage-3 checkpoint")
    p.add_argument("--sample-all", action="store_true",
                   help="sample z_chd/z_aud instead of using posterior means")
    p.add_argument("--variant", choices=["full", "audio_only_vae", "audio_only_ae",
                                         "chord_only"],
                   help="run an ablation graph (checkpoint must match)")

    p = sub.add_parser("transfer", help="compositional style transfer on one segment")
    p.add_argument("--kind", choices=["chord", "texture"], required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--chords", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment", type=int, default=0, help="segment index to re-decode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--allow-early", action="store_true")
    p.add_argument("--new-chords", help="chord annotation file (kind=chord); its first "
                                        "8 beats replace the segment's progression")
    p.add_argument("--donor", help="donor MIDI file (kind=texture)")
    p.add_argument("--donor-segment", type=int, default=0)
    p.add_argument("--donor-bpm", type=float, default=95.0)

    p = sub.add_parser("eval", help="objective report: generated vs reference")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--chords", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--plots", help="directory for per-metric PNG plots")

    p = sub.add_parser("fixture", help="generate a synthetic demo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--songs", type=int, default=10)
    p.add_argument("--segments", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overfit", action="store_true",
                   help="emit the 8-segment 95 BPM overfit fixture instead")

    p = sub.add_parser("plot-loss", help="plot loss curves from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)

    return parser


def cmd_prepare(args) -> int:
    from .audio_frontend import get_backend
    from .config import load_run_config
    from .dataset import prepare

    cfg = load_run_config(args.config, args.overrides)
    pre = cfg.dataset.precompute_embeddings if args.precompute_embeddings is None else True
    backend = None
    if pre:
        backend = get_backend(cfg.transcriber.backend, cfg.transcriber.weights or None,
                              cfg.transcriber.freeze)
    index = prepare(args.manifest, args.out, backend, pre)
    print(f"prepared {index['n_examples']} segments from "
          f"{len(index['songs'])} songs into {args.out}")
    return 0


def cmd_train(args) -> int:
    from .audio_frontend import get_backend
    from .config import load_run_config
    from .dataset import (augment_transpositions, ensure_inputs, load_examples,
                          split_by_song)
    from .training import Trainer

    cfg = load_run_config(args.config, args.overrides)
    examples = load_examples(args.shards)
    train_ex, test_ex = split_by_song(examples, 0.9, cfg.train.seed)
    train_ex = augment_transpositions(train_ex, cfg.dataset.transpose_audio,
                                      cfg.dataset.pitch_shift_cmd)
    if args.dry_run:
        print(json.dumps({"resolved_config": cfg.to_dict(),
                          "n_train_examples": len(train_ex),
                          "n_test_examples": len(test_ex)}, indent=2, default=str))
        return 0
    in_graph = cfg.transcriber.backend == "pretrained" and not cfg.dataset.precompute_embeddings
    backend = None
    if not in_graph:
        backend = get_backend(cfg.transcriber.backend, cfg.transcriber.weights or None,
                              cfg.transcriber.freeze)
    ensure_inputs(train_ex, backend, in_graph)
    trainer = Trainer(cfg, train_ex, args.out)
    final = trainer.run(resume_from=args.resume)
    print(f"training finished at step {trainer.global_step}; final checkpoint {final}")
    return 0


def cmd_arrange(args) -> int:
    from .inference import AblationConfig, ArrangeRequest, arrange, run_ablation

    req = ArrangeRequest(
        audio=args.audio, beats=args.beats, chords=args.chords, mode=args.mode,
        seed=args.seed, temperature=args.temperature,
        reference_midi=args.reference_midi, sample_all=args.sample_all)
    if args.variant and args.variant != "full":
        scores = run_ablation(AblationConfig(args.variant), req, args.ckpt, args.out,
                              allow_early=args.allow_early)
    else:
        scores = arrange(req, args.ckpt, args.out, allow_early=args.allow_early,
                         variant=args.variant)
    print(f"wrote {args.out} ({len(scores)} segments, "
          f"{sum(len(s) for s in scores)} notes)")
    return 0


def cmd_transfer(args) -> int:
    import numpy as np

    from .chords import progression_for_window, read_chord_annotation
    from .inference import (ArrangeRequest, ArrangementSession, arrange_scores,
                            style_transfer_chord, style_transfer_texture)
    from .audio_frontend import BeatGrid
    from .dataset import score_from_timed_notes
    from .inference import _load_request_segments
    from .midi_io import read_midi, write_midi
    from .symbolic import N_STEPS

    req = ArrangeRequest(audio=args.audio, beats=args.beats, chords=args.chords,
                         mode="prior", seed=args.seed, temperature=args.temperature)
    session = ArrangementSession(args.ckpt, allow_early=args.allow_early)
    segments, _ = _load_request_segments(req)
    if not 0 <= args.segment < len(segments):
        raise UsageError(f"--segment {args.segment} out of range (0..{len(segments) - 1})")
    scores = arrange_scores(req, session)

    k, start, segment_audio, prog = segments[args.segment]
    if args.kind == "chord":
        if not args.new_chords:
            raise UsageError("--kind chord requires --new-chords")
        spans = read_chord_annotation(args.new_chords)
        new_prog = progression_for_window(spans, 0.0, strict=True)
        swapped = style_transfer_chord(session, segment_audio, new_prog,
                                       seed=args.seed, segment_index=k,
                                       temperature=args.temperature)
    else:
        if not args.donor:
            raise UsageError("--kind texture requires --donor")
        notes = read_midi(args.donor)
        beat = 60.0 / args.donor_bpm
        n_beats = int(max((n.onset_sec + n.duration_sec) for n in notes) / beat) + 2 \
            if notes else 9
        grid = BeatGrid(np.arange(n_beats) * beat,
                        np.arange(n_beats) % 4 == 0)
        donor = score_from_timed_notes(notes, grid, args.donor_segment * 8)
        swapped = style_transfer_texture(session, segment_audio, prog, donor,
                                         seed=args.seed, segment_index=k,
                                         temperature=args.temperature)
    scores[args.segment] = swapped
    write_midi(args.out, scores)
    print(f"wrote {args.out} with a {args.kind} swap at segment {args.segment}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_midi, plot_report

    report = evaluate_midi(args.generated, args.reference, args.beats, args.chords)
    report.to_csv(args.out)
    if args.plots:
        plot_report(report, args.plots)
    agg = report.aggregate()
    print("  ".join(f"{k}={v:.3f}" for k, v in agg.items()))
    return 0


def cmd_fixture(args) -> int:
    from .fixtures import make_demo_dataset, make_overfit_fixture

    if args.overfit:
        manifest = make_overfit_fixture(args.out, seed=args.seed or 7)
    else:
        manifest = make_demo_dataset(args.out, n_songs=args.songs,
                                     n_segments=args.segments, seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_plot_loss(args) -> int:
    from .evaluate import plot_loss_curves

    if not Path(args.log).is_file():
        raise DataError(f"log file not found: {args.log}")
    plot_loss_curves(args.log, args.out)
    print(f"wrote {args.out}")
    return 0


_DISPATCH = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "arrange": cmd_arrange,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "fixture": cmd_fixture,
    "plot-loss": cmd_plot_loss,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ArrangerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
