"""Command-line pipeline driver.

Subcommands cover the full offline flow: simulate a corpus, run the tracker,
assign targets, build track samples, refine with the coherence optimizer,
merge augmentation variants, clean up, and evaluate. All module parameters
come from an optional YAML config with one section per stage; flags override
the few per-run knobs (mode, seed, paths).

Exit codes: 0 on success, 2 on a pipeline error (bad config, schema
violation, missing data), 1 on an unexpected crash. Pipeline errors print a
single machine-readable JSON line to stderr.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .assignment import TrackCentricAssigner
from .errors import PipelineError
from .evaluation import Evaluator, LifeCycleResult
from .io import (
    config_section,
    list_corpus_sequences,
    load_config,
    read_corpus_sequence,
    read_records_jsonl,
    records_to_tracks,
    render_histogram_svg,
    render_report_csv,
    render_report_text,
    tracks_to_records,
    write_corpus_sequence,
    write_records_jsonl,
    write_report_json,
    write_samples,
)
from .postprocess import remove_empty, tta_merge
from .registration import TrackCoherenceRefiner
from .samples import TrackSampleBuilder
from .sim import ScenarioConfig, SequenceSimulator
from .tracking import BidirectionalTracker

__all__ = ["main"]


def _apply_section(estimator, section, name):
    try:
        if section:
            estimator.set_params(**section)
    except (ValueError, TypeError) as err:
        raise PipelineError("bad_config", f"config section {name!r}: {err}") from None
    return estimator


def _read_tracks_by_sequence(path):
    groups = {}
    for record in read_records_jsonl(path):
        groups.setdefault(record.sequence_id, []).append(record)
    return {seq: records_to_tracks(records) for seq, records in sorted(groups.items())}


def _load_corpus(root):
    root = Path(root)
    if not root.is_dir():
        raise PipelineError("schema_error", f"corpus directory {root} does not exist")
    seq_dirs = list_corpus_sequences(root)
    if not seq_dirs:
        raise PipelineError("schema_error", f"no sequences under {root}")
    return [read_corpus_sequence(d) for d in seq_dirs]


def _cmd_simulate(args, config):
    sim = _apply_section(SequenceSimulator(), config_section(config, "simulate"),
                         "simulate")
    if args.seed is not None:
        sim.set_params(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for result in sim.generate():
        write_corpus_sequence(out, result, hz=sim.hz)
    print(f"wrote {sim.num_sequences} sequences to {out}")
    return 0


def _cmd_track(args, config):
    tracker = _apply_section(BidirectionalTracker(), config_section(config, "track"),
                             "track")
    if args.mode is not None:
        tracker.set_params(extension=args.mode)
    records = []
    for corpus in _load_corpus(args.corpus):
        tracks = tracker.track(corpus.detections)
        records.extend(tracks_to_records(corpus.sequence_id, tracks, hz=corpus.hz))
    write_records_jsonl(args.out, records)
    print(f"wrote {len(records)} track records to {args.out}")
    return 0


def _assignments_by_sequence(args, config):
    assigner = _apply_section(TrackCentricAssigner(), config_section(config, "assign"),
                              "assign")
    by_seq = _read_tracks_by_sequence(args.tracks)
    out = {}
    for corpus in _load_corpus(args.corpus):
        tracks = by_seq.get(corpus.sequence_id, [])
        if not tracks:
            continue
        out[corpus.sequence_id] = (tracks, corpus,
                                   assigner.assign(tracks, corpus.gt_tracks))
    return out


def _cmd_assign(args, config):
    rows = []
    for seq_id, (tracks, _, result) in _assignments_by_sequence(args, config).items():
        for assignment in result.tracks:
            for label in assignment.labels:
                row = {
                    "sequence_id": seq_id,
                    "track_id": assignment.track_id,
                    "matched": assignment.matched,
                    "frame_index": label.frame_index,
                    "positive": label.positive,
                    "iou": label.iou,
                    "q": label.q,
                }
                if label.positive:
                    row["gt_track_id"] = label.gt_track_id
                rows.append(row)
    Path(args.out).write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    print(f"wrote {len(rows)} assignment rows to {args.out}")
    return 0


def _cmd_build_dataset(args, config):
    builder = _apply_section(TrackSampleBuilder(),
                             config_section(config, "build_dataset"), "build_dataset")
    samples = []
    for seq_id, (tracks, corpus, result) in _assignments_by_sequence(args, config).items():
        assignments = result.by_track_id()
        for track in tracks:
            sample = builder.build(track, corpus.point_frames, seq_id)
            samples.append(replace(sample, assignment=assignments[track.track_id]))
    write_samples(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_tco(args, config):
    refiner = _apply_section(TrackCoherenceRefiner(), config_section(config, "tco"),
                             "tco")
    by_seq = _read_tracks_by_sequence(args.tracks)
    records = []
    for corpus in _load_corpus(args.corpus):
        tracks = by_seq.get(corpus.sequence_id, [])
        refined = [refiner.refine(t, corpus.point_frames) for t in tracks]
        records.extend(tracks_to_records(corpus.sequence_id, refined, hz=corpus.hz))
    write_records_jsonl(args.out, records)
    print(f"wrote {len(records)} refined track records to {args.out}")
    return 0


def _cmd_tta_merge(args, config):
    del config
    if len(args.tags) != len(args.inputs):
        raise PipelineError("bad_config",
                            f"{len(args.inputs)} inputs but {len(args.tags)} tags")
    variant_tracks = [_read_tracks_by_sequence(path) for path in args.inputs]
    sequences = sorted({seq for v in variant_tracks for seq in v})
    records = []
    for seq in sequences:
        variants = [(tag, v.get(seq, [])) for tag, v in zip(args.tags, variant_tracks)]
        merged = tta_merge(variants)
        records.extend(tracks_to_records(seq, merged, hz=args.hz))
    write_records_jsonl(args.out, records)
    print(f"wrote {len(records)} merged track records to {args.out}")
    return 0


def _cmd_postprocess(args, config):
    del config
    by_seq = _read_tracks_by_sequence(args.tracks)
    records = []
    for corpus in _load_corpus(args.corpus):
        tracks = by_seq.get(corpus.sequence_id, [])
        kept = remove_empty(tracks, corpus.point_frames)
        records.extend(tracks_to_records(corpus.sequence_id, kept, hz=corpus.hz))
    write_records_jsonl(args.out, records)
    print(f"wrote {len(records)} track records to {args.out}")
    return 0


def _evaluate(args, config):
    evaluator = _apply_section(Evaluator(), config_section(config, "eval"), "eval")
    by_seq = _read_tracks_by_sequence(args.tracks)
    pairs = []
    for corpus in _load_corpus(args.corpus):
        if not corpus.gt_tracks:
            raise PipelineError("no_ground_truth",
                                f"sequence {corpus.sequence_id} has no GT file")
        pairs.append((by_seq.get(corpus.sequence_id, []), corpus.gt_tracks))
    return evaluator.evaluate_many(pairs)


def _cmd_eval(args, config):
    report = _evaluate(args, config)
    if args.report is not None:
        write_report_json(args.report, report)
    if args.format == "text":
        rendered = render_report_text(report)
    elif args.format == "csv":
        rendered = render_report_csv(report)
    else:
        rendered = render_histogram_svg(report.classes[0].life_cycle,
                                        title=f"{report.classes[0].cls.value}"
                                              " track length (s)")
    if args.out is not None:
        Path(args.out).write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    return 0


def _cmd_inspect(args, config):
    report = _evaluate(args, config)
    payload = {}
    for r in report.classes:
        payload[r.cls.value] = {
            "t_fn": r.inspection.t_fn,
            "t_fn_ratio": r.inspection.t_fn_ratio,
            "h_fp": r.inspection.h_fp,
            "h_fp_ratio": r.inspection.h_fp_ratio,
            "h_tp": r.inspection.h_tp,
            "h_tp_ratio": r.inspection.h_tp_ratio,
            "s_t": r.inspection.s_t,
            "s_t_reached": r.inspection.s_t_reached,
            "num_gt": r.inspection.num_gt,
            "num_pred": r.inspection.num_pred,
            "inferior_track_ids": list(r.life_cycle.inferior_track_ids),
            "lengths_s": list(r.life_cycle.lengths_s),
        }
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_plot(args, config):
    del config
    path = Path(args.report)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise PipelineError("schema_error",
                            f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None
    if args.cls not in data:
        raise PipelineError("bad_config",
                            f"class {args.cls!r} not in report (has {sorted(data)})")
    cycle = data[args.cls].get("life_cycle")
    if cycle is None:
        raise PipelineError("schema_error", f"{path}:1: report has no life_cycle data")
    life = LifeCycleResult(tuple(cycle["lengths_s"]), tuple(cycle["hist_counts"]),
                           tuple(cycle["hist_edges"]),
                           tuple(cycle["inferior_hist_counts"]),
                           tuple(cycle["inferior_track_ids"]))
    Path(args.out).write_text(
        render_histogram_svg(life, title=f"{args.cls} track length (s)"),
        encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(prog="trackforge",
                                     description="offline track-centric detection pipeline")
    parser.add_argument("--config", default=None, help="YAML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["none", "forward", "bidirectional"], default=None)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("assign", help="track-centric target assignment")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_assign)

    p = sub.add_parser("build-dataset", help="write track samples with targets")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("tco", help="refine tracks with the coherence optimizer")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tco)

    p = sub.add_parser("tta-merge", help="merge augmentation-variant track sets")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--tags", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hz", type=float, default=10.0)
    p.set_defaults(func=_cmd_tta_merge)

    p = sub.add_parser("postprocess", help="drop empty predictions")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_postprocess)

    p = sub.add_parser("eval", help="score tracks against corpus ground truth")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["text", "csv", "svg"], default="text")
    p.add_argument("--out", default=None)
    p.add_argument("--report", default=None, help="also write the full JSON report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="failure-profile counts only")
    p.add_argument("--tracks", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("plot", help="render the track-length histogram from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cls", default="Vehicle")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else {}
        return args.func(args, config)
    except PipelineError as err:
        sys.stderr.write(json.dumps({"error": err.code, "message": err.message}) + "\n")
        return 2
    except OSError as err:
        message = f"{err.filename}: {err.strerror}" if err.filename else str(err)
        sys.stderr.write(json.dumps({"error": "schema_error", "message": message}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
