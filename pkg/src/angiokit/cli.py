"""Command-line interface exposing every pipeline stage.

Exit codes: 0 ok, 2 validation error (bad input or arguments), 3 runtime
error. Every command that takes --seed is byte-deterministic in its primary
outputs for a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .acquisition import assign_phases, classify_view
from .analytics import (
    StudyPairObservation,
    cluster_purity,
    kmeans,
    progression_report,
    silhouette,
)
from .contrastive import (
    ContrastiveConfig,
    build_pairs,
    project_pairs,
    retrieval_eval,
    train_contrastive,
)
from .errors import AngiokitError, ValidationError
from .evaluation import evaluate_tables, metrics_csv_rows, predict_split
from .milhead import (
    HeadConfig,
    PoolingConfig,
    TrainedHeadModel,
    ablation_harness,
    pool_study,
    train_heads,
)
from .optim import OptimizerConfig
from .reports import parse_report
from .service import (
    InferenceModel,
    ServiceConfig,
    infer_study,
    parse_bundle,
    serve,
)
from .study import (
    LabelPrevalences,
    SynthConfig,
    load_manifest,
    save_manifest,
    split_by_patient,
    synth_cohort,
    write_embeddings,
)
from .types import Cohort, SEGMENTS


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, rows: List[List]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerows(rows)


def _load_cohort(args, need_embeddings: bool = True) -> Cohort:
    if not args.manifest:
        raise ValidationError("--manifest is required for this command")
    cohort = load_manifest(args.manifest, embeddings_path=args.embeddings)
    if need_embeddings and cohort.embeddings is None:
        has_inline = all(
            v.embedding is not None for s in cohort.studies for v in s.videos
        )
        if not has_inline:
            raise ValidationError("this command needs --embeddings (or inline embeddings)")
    return cohort


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = SynthConfig(
        n_patients=args.patients,
        videos_per_study_range=(args.min_videos, args.max_videos),
        label_prevalences=LabelPrevalences(),
        view_informativeness=args.view_informativeness,
        uninformative_rate=args.uninformative_rate,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    cohort = synth_cohort(config)
    out = _outdir(args)
    emb_name = "embeddings.dcem"
    write_embeddings(os.path.join(out, emb_name), cohort.embeddings)
    save_manifest(cohort, os.path.join(out, "manifest.json"), embeddings_file=emb_name)
    print(f"wrote {len(cohort.studies)} studies, {cohort.embeddings.shape[0]} embeddings to {out}")
    return 0


def cmd_split(args) -> int:
    cohort = _load_cohort(args, need_embeddings=False)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValidationError("--ratios must be three comma-separated numbers")
    cohort = split_by_patient(cohort, ratios=ratios, seed=args.seed)
    out = _outdir(args)
    embeddings_file = None
    with open(args.manifest, "r", encoding="utf-8") as fh:
        embeddings_file = json.load(fh).get("embeddings_file")
    save_manifest(cohort, os.path.join(out, "manifest.json"), embeddings_file=embeddings_file)
    counts = {s: sum(1 for v in cohort.split.values() if v == s) for s in ("train", "val", "test")}
    print(f"split {len(cohort.split)} patients: {counts}")
    return 0


def cmd_classify_views(args) -> int:
    cohort = _load_cohort(args, need_embeddings=False)
    rows = [["study_id", "video_id", "primary_angle_deg", "secondary_angle_deg", "view_class"]]
    for s in cohort.studies:
        for v in s.videos:
            rows.append(
                [s.study_id, v.video_id, _fmt(v.primary_angle_deg), _fmt(v.secondary_angle_deg),
                 classify_view(v.primary_angle_deg, v.secondary_angle_deg)]
            )
    _write_csv(os.path.join(_outdir(args), "views.csv"), rows)
    print(f"classified {len(rows) - 1} videos")
    return 0


def cmd_phases(args) -> int:
    cohort = _load_cohort(args, need_embeddings=False)
    rows = [["study_id", "video_id", "artery", "equipment", "contrast", "phase"]]
    for s in cohort.studies:
        for v in assign_phases(s.videos):
            rows.append([s.study_id, v.video_id, v.artery, v.equipment, str(v.contrast), v.phase])
    _write_csv(os.path.join(_outdir(args), "phases.csv"), rows)
    print(f"assigned phases for {len(rows) - 1} videos")
    return 0


def cmd_parse_reports(args) -> int:
    cohort = _load_cohort(args, need_embeddings=False)
    out: Dict[str, dict] = {}
    for s in cohort.studies:
        study_labels = {}
        for territory in sorted(s.report_text):
            labels = parse_report(s.report_text[territory], territory, s.dominance)
            study_labels[territory] = {
                seg: {
                    "stenosis_pct": f.stenosis_pct,
                    "calcification": f.calcification,
                    "thrombus": f.thrombus,
                    "cto": f.cto,
                }
                for seg, f in sorted(labels.findings.items())
            }
        out[s.study_id] = study_labels
    _write_json(os.path.join(_outdir(args), "parsed_labels.json"), out)
    print(f"parsed reports for {len(out)} studies")
    return 0


def cmd_train_contrastive(args) -> int:
    cohort = _load_cohort(args)
    pairs = build_pairs(cohort, text_seed=args.seed)
    config = ContrastiveConfig(
        loss_kind=args.loss,
        temperature=args.temperature,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        allow_any_temperature=args.allow_any_temperature,
    )
    pair, history = train_contrastive(pairs, config)
    out = _outdir(args)
    pair.save(os.path.join(out, "contrastive.dcw1"), {"loss_kind": config.loss_kind,
                                                      "temperature": config.temperature,
                                                      "seed": config.seed})
    _write_csv(
        os.path.join(out, "contrastive_history.csv"),
        [["epoch", "loss"]] + [[str(e), repr(l)] for e, l in history],
    )
    zv, zt = project_pairs(pair, pairs)
    metrics = retrieval_eval(zv, zt, np.arange(len(pairs)), study_ids=pairs.study_ids)
    _write_json(os.path.join(out, "retrieval_train.json"), _retrieval_json(metrics))
    print(f"trained {config.loss_kind} for {config.epochs} epochs; "
          f"final loss {history[-1][1]:.4f}; train recall@1 {metrics.v2t.recall[1]:.3f}")
    return 0


def _retrieval_json(metrics) -> dict:
    def direction(d):
        return {
            "recall": {str(k): v for k, v in d.recall.items()},
            "mean_rank": d.mean_rank,
            "median_rank": d.median_rank,
            "n_queries": d.n_queries,
            "n_candidates": d.n_candidates,
        }

    out = {
        "v2t": direction(metrics.v2t),
        "t2v": direction(metrics.t2v),
        "alignment": metrics.alignment,
    }
    if metrics.study_v2t is not None:
        out["study_v2t"] = direction(metrics.study_v2t)
        out["study_t2v"] = direction(metrics.study_t2v)
    return out


def _head_configs(args):
    pooling = PoolingConfig(
        mode=args.pooling,
        num_heads=args.heads,
        hidden_dim=args.hidden_dim,
        dropout=args.pool_dropout,
        seed=args.seed,
    )
    heads = HeadConfig(dropout=args.head_dropout, seed=args.seed)
    opt = OptimizerConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    return pooling, heads, opt


def cmd_train_heads(args) -> int:
    cohort = _load_cohort(args)
    if not cohort.split:
        cohort = split_by_patient(cohort, seed=args.seed)
    pooling, heads, opt = _head_configs(args)
    model = train_heads(cohort, pooling, heads, opt, freeze_pooling=args.freeze_pooling)
    out = _outdir(args)
    model.save(os.path.join(out, "milhead.dcw1"))
    _write_csv(
        os.path.join(out, "milhead_history.csv"),
        [["epoch", "train_loss", "val_loss"]]
        + [[str(e), repr(tr), repr(vl)] for e, tr, vl in model.history],
    )
    print(f"trained {pooling.mode} for {opt.epochs} epochs; best epoch {model.best_epoch}; "
          f"best val loss {min(h[2] for h in model.history):.4f}")
    return 0


def cmd_eval(args) -> int:
    cohort = _load_cohort(args)
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required for eval")
    model = TrainedHeadModel.load(args.checkpoint)
    tables = predict_split(cohort, model, split=args.split)
    metrics = evaluate_tables(tables, n_bootstrap=args.bootstrap_iters, seed=args.seed)
    out = _outdir(args)
    _write_json(os.path.join(out, "metrics.json"),
                {"split": args.split, "seed": args.seed, "tasks": metrics})
    _write_csv(os.path.join(out, "metrics.csv"), metrics_csv_rows(metrics))
    headline = metrics["stenosis"]["global"]["auroc"]["value"]
    print(f"evaluated split {args.split!r}; stenosis global AUROC "
          f"{'undefined' if headline is None else f'{headline:.3f}'}")
    return 0


def cmd_ablate(args) -> int:
    cohort = _load_cohort(args)
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required for ablate")
    model = TrainedHeadModel.load(args.checkpoint)
    results = ablation_harness(cohort, model, split=args.split)
    rows = [["task", "single_video", "study_average", "multi_video_attention",
             "delta_attention_minus_single"]]
    for task in sorted(results):
        r = results[task]
        rows.append([task, repr(r["single_video"]), repr(r["study_average"]),
                     repr(r["multi_video_attention"]),
                     repr(r["multi_video_attention"] - r["single_video"])])
    out = _outdir(args)
    _write_json(os.path.join(out, "ablation.json"), results)
    _write_csv(os.path.join(out, "ablation.csv"), rows)
    for task in sorted(results):
        r = results[task]
        print(f"{task}: single {r['single_video']:.3f}  average {r['study_average']:.3f}  "
              f"attention {r['multi_video_attention']:.3f}")
    return 0


def _study_embedding(cohort: Cohort, study, model: Optional[TrainedHeadModel]) -> np.ndarray:
    videos = assign_phases(study.videos)
    usable = [v for v in videos if v.phase == "diagnostic" and v.contrast and v.artery in ("LCA", "RCA")]
    if not usable:
        raise ValidationError(f"study {study.study_id}: no diagnostic content",
                              code="no_diagnostic_content")
    embs = np.stack([cohort.embedding_for(v) for v in usable])
    if model is None:
        return embs.mean(axis=0)
    n = min(len(usable), model.pooling_config.max_videos)
    padded = np.zeros((model.pooling_config.max_videos, model.pooling_config.embed_dim))
    padded[:n] = embs[:n]
    mask = np.zeros(model.pooling_config.max_videos, dtype=bool)
    mask[:n] = True
    state = pool_study(padded, mask, model.pooling_config, model.params)
    return state.embedding


def cmd_progression(args) -> int:
    cohort = _load_cohort(args)
    model = TrainedHeadModel.load(args.checkpoint) if args.checkpoint else None
    by_patient: Dict[str, list] = {}
    for s in cohort.studies:
        by_patient.setdefault(s.patient_id, []).append(s)
    pairs: List[StudyPairObservation] = []
    for patient_id in sorted(by_patient):
        studies = sorted(by_patient[patient_id],
                         key=lambda s: min(v.acquired_at for v in s.videos))
        for earlier, later in zip(studies, studies[1:]):
            if earlier.labels is None or later.labels is None:
                continue
            pairs.append(StudyPairObservation(
                patient_id=patient_id,
                embedding_t0=_study_embedding(cohort, earlier, model),
                embedding_t1=_study_embedding(cohort, later, model),
                labels_t0=earlier.full_labels(),
                labels_t1=later.full_labels(),
            ))
    if not pairs:
        raise ValidationError("no consecutive labeled study pairs in manifest")
    report = progression_report(pairs, n_bootstrap=args.bootstrap_iters, seed=args.seed)
    out = _outdir(args)
    payload = {
        "counts": {k: len(v) for k, v in report.distances.items()},
        "means": report.means,
        "intervals": {
            k: None if v is None else {"lo": v.lo, "hi": v.hi, "point": v.point,
                                       "undefined_replicates": v.undefined_replicates}
            for k, v in report.intervals.items()
        },
        "welch_tests": {
            k: None if v is None else {"t": v.t, "df": v.df, "p_two_sided": v.p_two_sided,
                                       "degenerate": v.degenerate}
            for k, v in report.tests.items()
        },
        "notes": report.notes,
    }
    _write_json(os.path.join(out, "progression.json"), payload)
    rows = [["status", "n_pairs", "mean_distance"]]
    for status in sorted(report.distances):
        rows.append([status, str(len(report.distances[status])), _fmt(report.means[status])])
    _write_csv(os.path.join(out, "progression.csv"), rows)
    print(f"progression over {len(pairs)} pairs: "
          + ", ".join(f"{k}={len(v)}" for k, v in sorted(report.distances.items())))
    return 0


def cmd_cluster(args) -> int:
    cohort = _load_cohort(args)
    rows_emb, video_ids, arteries = [], [], []
    for s in cohort.studies:
        for v in s.videos:
            rows_emb.append(cohort.embedding_for(v))
            video_ids.append(v.video_id)
            arteries.append(v.artery)
    x = np.stack(rows_emb)
    result = kmeans(x, k=args.k, seed=args.seed)
    sil = silhouette(x, result.assignments) if args.k >= 2 else None
    purity = cluster_purity(result.assignments, arteries)
    out = _outdir(args)
    _write_csv(
        os.path.join(out, "clusters.csv"),
        [["video_id", "cluster", "artery"]]
        + [[vid, str(int(c)), art] for vid, c, art in zip(video_ids, result.assignments, arteries)],
    )
    summary = {
        "k": args.k,
        "inertia": result.inertia,
        "silhouette": sil,
        "purity_by_artery": {str(k): v for k, v in sorted(purity.items())},
    }
    if args.elbow:
        summary["inertia_by_k"] = {
            str(k): kmeans(x, k=k, seed=args.seed).inertia for k in range(2, args.k + 1)
        }
    _write_json(os.path.join(out, "clusters.json"), summary)
    print(f"k={args.k} inertia {result.inertia:.3f}"
          + (f" silhouette {sil:.3f}" if sil is not None else ""))
    return 0


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required for infer")
    model = InferenceModel.load(args.checkpoint, embeddings_path=args.embeddings,
                                stub_seed=args.seed)
    with open(args.bundle, "r", encoding="utf-8") as fh:
        bundle = json.load(fh)
    study = parse_bundle(bundle)
    result = infer_study(study, model)
    payload = result.to_json()
    if args.out:
        _write_json(args.out if args.out.endswith(".json")
                    else os.path.join(_outdir(args), "inference.json"), payload)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_serve(args) -> int:
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required for serve")
    model = InferenceModel.load(args.checkpoint, embeddings_path=args.embeddings,
                                stub_seed=args.seed)
    config = ServiceConfig(host=args.host, port=args.port,
                           max_concurrent=args.max_concurrent,
                           latency_log_path=args.latency_log)
    service = serve(model, config)
    host, port = service.address
    print(f"listening on http://{host}:{port} (model {model.version}); Ctrl-C to stop")
    try:
        while True:
            service._thread.join(timeout=3600)
    except KeyboardInterrupt:
        service.stop()
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="angiokit",
        description="Study-level coronary angiography analysis engine",
    )
    parser.add_argument("--version", action="version", version=f"angiokit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest", help="cohort manifest JSON")
    common.add_argument("--embeddings", help="DCEM embedding store")
    common.add_argument("--checkpoint", help="DCW1 checkpoint path")
    common.add_argument("--out", help="output directory (or file for infer)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, default=100)
    p.add_argument("--min-videos", type=int, default=4)
    p.add_argument("--max-videos", type=int, default=8)
    p.add_argument("--view-informativeness", type=float, default=1.0)
    p.add_argument("--uninformative-rate", type=float, default=0.0)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="assign patient-level splits")
    p.add_argument("--ratios", default="0.70,0.15,0.15")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("classify-views", parents=[common], help="view class per video")
    p.set_defaults(func=cmd_classify_views)

    p = sub.add_parser("phases", parents=[common], help="procedural phase per video")
    p.set_defaults(func=cmd_phases)

    p = sub.add_parser("parse-reports", parents=[common], help="parse territory reports")
    p.set_defaults(func=cmd_parse_reports)

    p = sub.add_parser("train-contrastive", parents=[common], help="train projection pair")
    p.add_argument("--loss", choices=["clip", "siglip", "infonce"], default="clip")
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--allow-any-temperature", action="store_true")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.set_defaults(func=cmd_train_contrastive)

    p = sub.add_parser("train-heads", parents=[common], help="train pooling + task heads")
    p.add_argument("--pooling", default="gated_attention")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--pool-dropout", type=float, default=0.0)
    p.add_argument("--head-dropout", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--freeze-pooling", action="store_true")
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("eval", parents=[common], help="metric reports with bootstrap CIs")
    p.add_argument("--split", default="test")
    p.add_argument("--bootstrap-iters", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="single vs average vs attention AUROC table")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("progression", parents=[common],
                       help="serial-study embedding distances by disease trajectory")
    p.add_argument("--bootstrap-iters", type=int, default=1000)
    p.set_defaults(func=cmd_progression)

    p = sub.add_parser("cluster", parents=[common], help="k-means over video embeddings")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--elbow", action="store_true", help="emit inertia for k=2..k")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("infer", parents=[common], help="one-shot bundle inference")
    p.add_argument("bundle", help="InferenceBundle JSON file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP listener")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--max-concurrent", type=int, default=8)
    p.add_argument("--latency-log", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AngiokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
