"""Command-line surface: ingest, split, train, eval, predict, exports.

All randomness flows from --seed (default 0, never wall clock); given
identical inputs, seeds, and output paths every subcommand overwrites its
outputs byte-identically. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .data import MAX_LENGTHS, SETTINGS
from .training import (RunConfig, evaluate_buckets, load_model_checkpoint,
                       predict, train_run)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffdta",
        description="Two-stage latent-diffusion affinity regression pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize an affinity TSV into a dataset directory")
    p.add_argument("--input", required=True, help="5-column affinity TSV")
    p.add_argument("--dataset", required=True, choices=["davis", "kiba", "generic"])
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--raw-kd", action="store_true",
                   help="labels are raw Kd in nM; apply -log10(kd)+9 (davis only)")
    p.add_argument("--max-drug-len", type=int, default=0, help="override dataset default")
    p.add_argument("--max-target-len", type=int, default=0, help="override dataset default")

    p = sub.add_parser("split", help="write a cold-start split manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest.json from ingest")
    p.add_argument("--out", required=True, help="split manifest JSON path")
    p.add_argument("--drug-frac", type=float, default=0.8)
    p.add_argument("--target-frac", type=float, default=0.8)
    _add_seed(p)

    p = sub.add_parser("train", help="run stage-one/stage-two training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--config", help="JSON run-config file (flags override it)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--affinity-weight", type=float,
                   help="weight on the regression term of the objective")
    p.add_argument("--patience", type=int)
    p.add_argument("--diffusion-steps", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--inference-step", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="metrics per cold-start setting, or on a prediction file")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="evaluate an existing prediction TSV instead")
    p.add_argument("--mode", choices=["var", "diff"], default="diff")
    p.add_argument("--out", required=True, help="output directory for report JSONs")
    p.add_argument("--setting", default="predictions",
                   help="report label when using --predictions")
    p.add_argument("--inference-step", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=1)
    _add_seed(p)

    p = sub.add_parser("predict", help="write predictions for every record in a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["var", "diff"], default="diff")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["tsv", "json"], default="tsv")
    p.add_argument("--inference-step", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=1)
    _add_seed(p)

    p = sub.add_parser("export-embeddings",
                       help="per-entity clean latent means as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="collate eval JSONs / prediction TSVs for plotting")
    p.add_argument("--predictions", nargs="*", default=[], help="prediction TSV files")
    p.add_argument("--eval", nargs="*", default=[], dest="eval_files",
                   help="eval report JSON files")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_ingest(args) -> int:
    records = data_mod.load_tsv(args.input)
    if args.raw_kd:
        if args.dataset != "davis":
            raise ValueError("--raw-kd applies to --dataset davis only")
        records = [dataclasses.replace(r, affinity=data_mod.kd_to_pkd(r.affinity))
                   for r in records]
    d_len, t_len = MAX_LENGTHS[args.dataset]
    d_len = args.max_drug_len or d_len
    t_len = args.max_target_len or t_len
    manifest_path = data_mod.save_dataset(
        args.out, records, args.dataset, d_len, t_len, source=str(args.input))
    manifest = data_mod.read_json(manifest_path)
    print(f"ingested {manifest['n_records']} records "
          f"({manifest['n_drugs']} drugs, {manifest['n_targets']} targets) "
          f"-> {manifest_path}")
    return 0


def _cmd_split(args) -> int:
    ds, manifest = data_mod.load_dataset(args.manifest)
    records = [
        data_mod.AffinityRecord(did, "-", tid, "-", float(y))
        for did, tid, y in zip(ds.drug_ids, ds.target_ids, ds.labels)
    ]
    split = data_mod.cold_start_split(records, args.drug_frac, args.target_frac, args.seed)
    data_mod.write_json(args.out, data_mod.split_to_manifest(split))
    n_old_d = sum(1 for v in split.drug_partition.values() if v == "old")
    n_old_t = sum(1 for v in split.target_partition.values() if v == "old")
    print(f"drugs: {n_old_d} old / {len(split.drug_partition) - n_old_d} new")
    print(f"targets: {n_old_t} old / {len(split.target_partition) - n_old_t} new")
    print(f"train: {len(split.train)}")
    for s in SETTINGS:
        print(f"{s}: val {len(split.val[s])} / test {len(split.test[s])}")
    for w in split.warnings:
        print(f"warning: {w}")
    return 0


def _cmd_train(args) -> int:
    base = RunConfig().to_dict()
    if args.config:
        file_cfg = data_mod.read_json(args.config)
        base.update(file_cfg)
    stage_names = {"1": "one", "2": "two", "both": "both"}
    overrides = {
        "manifest": args.manifest,
        "split": args.split,
        "checkpoint_dir": args.out,
        "stage": stage_names[args.stage],
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "affinity_weight": args.affinity_weight,
        "patience": args.patience,
        "diffusion_steps": args.diffusion_steps,
        "beta_start": args.beta_start,
        "beta_end": args.beta_end,
        "inference_step": args.inference_step,
        "mc_samples": args.mc_samples,
        "seed": args.seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig.from_dict(base)
    result = train_run(cfg)
    print(f"checkpoints in {result['checkpoint_dir']}")
    return 0


def _load_model_for(args, manifest):
    cfg = RunConfig(seed=args.seed,
                    inference_step=getattr(args, "inference_step", 0) or 0,
                    mc_samples=getattr(args, "mc_samples", 1) or 1)
    return load_model_checkpoint(
        args.checkpoint, manifest["drug_vocab_size"], manifest["target_vocab_size"], cfg)


def _read_predictions_tsv(path):
    ids, y_true, y_hat = [], [], []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        required = {"drug_id", "target_id", "y_hat"}
        if not required.issubset(reader.fieldnames or ()):
            raise ValueError(f"{path}: prediction TSV needs columns {sorted(required)}")
        for row in reader:
            ids.append((row["drug_id"], row["target_id"]))
            y_hat.append(float(row["y_hat"]))
            y_true.append(float(row["y_true"]) if row.get("y_true") not in (None, "") else np.nan)
    return ids, np.asarray(y_true), np.asarray(y_hat)


def _cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.predictions:
        _, y_true, y_hat = _read_predictions_tsv(args.predictions)
        if np.isnan(y_true).any():
            raise ValueError("eval --predictions requires y_true for every row")
        report = metrics_mod.evaluate(y_true, y_hat, args.setting).to_dict()
        path = out_dir / f"eval_{args.setting}.json"
        data_mod.write_json(path, report)
        print(f"{args.setting}: mse {report['mse']:.6f} mae {report['mae']:.6f} "
              f"ci {report['ci']} rm2 {report['rm2']} -> {path}")
        return 0
    if not (args.manifest and args.split and args.checkpoint):
        raise ValueError("eval needs --manifest, --split and --checkpoint (or --predictions)")
    ds, manifest = data_mod.load_dataset(args.manifest)
    split = data_mod.split_from_manifest(data_mod.read_json(args.split))
    model = _load_model_for(args, manifest)
    buckets = {s: split.test[s] for s in SETTINGS}
    reports = evaluate_buckets(ds, model, buckets, args.mode, args.seed,
                               inference_step=args.inference_step,
                               mc_samples=args.mc_samples)
    for setting, report in reports.items():
        path = out_dir / f"eval_{setting}.json"
        if report is None:
            print(f"{setting}: empty test bucket, skipped")
            continue
        data_mod.write_json(path, report)
        print(f"{setting}: n {report['n']} mse {report['mse']:.6f} "
              f"mae {report['mae']:.6f} ci {report['ci']} rm2 {report['rm2']} -> {path}")
    return 0


def _cmd_predict(args) -> int:
    ds, manifest = data_mod.load_dataset(args.manifest)
    model = _load_model_for(args, manifest)
    y_hat = predict(ds, model, args.mode, args.seed,
                    inference_step=args.inference_step, mc_samples=args.mc_samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "tsv":
        with out.open("w", encoding="utf-8", newline="") as fh:
            fh.write("drug_id\ttarget_id\ty_true\ty_hat\n")
            for did, tid, yt, yh in zip(ds.drug_ids, ds.target_ids, ds.labels, y_hat):
                fh.write(f"{did}\t{tid}\t{yt:.6f}\t{yh:.6f}\n")
    else:
        rows = [
            {"drug_id": did, "target_id": tid, "y_true": float(yt), "y_hat": float(yh)}
            for did, tid, yt, yh in zip(ds.drug_ids, ds.target_ids, ds.labels, y_hat)
        ]
        out.write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(y_hat)} predictions -> {out}")
    return 0


def _cmd_export_embeddings(args) -> int:
    from .encoder import encode, sample_latent
    from .numerics import no_grad

    ds, manifest = data_mod.load_dataset(args.manifest)
    model = _load_model_for(args, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def entity_rows(kind, ids, tokens, prefix, enc_cfg):
        first_idx = {}
        for i, eid in enumerate(ids):
            first_idx.setdefault(eid, i)
        idx = np.array(sorted(first_idx.values()), dtype=np.int64)
        with no_grad():
            h = encode(tokens[idx], model.params, prefix, enc_cfg, train=False)
            mu = sample_latent(h, model.params, prefix,
                               eps=np.zeros(h.shape, dtype=h.dtype)).mu.data
        return [(kind, ids[i], mu[j]) for j, i in enumerate(idx)]

    rows = entity_rows("drug", ds.drug_ids, ds.drug_tokens, "encoder.drug", model.drug_encoder)
    rows += entity_rows("target", ds.target_ids, ds.target_tokens,
                        "encoder.target", model.target_encoder)
    dim = model.drug_encoder.latent_dim
    with out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "entity_id"] + [f"z{i}" for i in range(dim)])
        for kind, eid, vec in rows:
            writer.writerow([kind, eid] + [f"{v:.6g}" for v in vec])
    print(f"wrote {len(rows)} embeddings -> {out}")
    return 0


def _cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.predictions and not args.eval_files:
        raise ValueError("report needs at least one --predictions or --eval input")

    if args.predictions:
        scatter = out_dir / "scatter.csv"
        with scatter.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "drug_id", "target_id",
                             "y_true", "y_hat", "identity", "squared_error"])
            for pred_path in args.predictions:
                ids, y_true, y_hat = _read_predictions_tsv(pred_path)
                src = Path(pred_path).name
                for (did, tid), yt, yh in zip(ids, y_true, y_hat):
                    sq = (yh - yt) ** 2
                    writer.writerow([src, did, tid, f"{yt:.6f}", f"{yh:.6f}",
                                     f"{yt:.6f}", f"{sq:.6f}"])
        print(f"wrote {scatter}")

    if args.eval_files:
        summary = out_dir / "metrics_summary.csv"
        with summary.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "setting", "n", "mse", "mae", "ci", "rm2"])
            for eval_path in args.eval_files:
                rep = data_mod.read_json(eval_path)
                writer.writerow([Path(eval_path).name, rep["setting"], rep["n"],
                                 rep["mse"], rep["mae"], rep["ci"], rep["rm2"]])
        print(f"wrote {summary}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "export-embeddings": _cmd_export_embeddings,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "split" and not (0.0 < args.drug_frac < 1.0
                                        and 0.0 < args.target_frac < 1.0):
        parser.error("--drug-frac/--target-frac must lie in (0, 1)")
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
