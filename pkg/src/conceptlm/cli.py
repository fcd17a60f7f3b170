"""Command-line pipeline: gen-corpus, train (base model), build-concepts,
sweep, eval, and report.

All commands share one versioned JSON config file. Stage seeds are derived
from the master seed through named SeedSequence streams, so the whole
pipeline is a pure function of (config, master seed): re-running any stage
with the same inputs reproduces its artifacts byte for byte. Commands skip
work whose outputs already exist unless --force is given.
"""

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .conceptset import (ExternalProvider, ExternalProviderConfig,
                         OracleProvider, build_dataset)
from .corpus import (Vocabulary, build_vocabulary, export_annotated,
                     generate_corpus, ground_truth_similarity,
                     ingest_annotated)
from .errors import ConceptLMError, ConfigError
from .evaluate import (evaluate_model, score_corpus, write_records_csv)
from .model import ModelConfig, init_params, load_checkpoint
from .objective import ObjectiveConfig
from .trainer import TrainConfig, load_manifest, save_manifest, sweep, train

VOCAB_STREAM = 1
TRAIN_CORPUS_STREAM = 2
HELD_IN_STREAM = 3
HELD_OOD_STREAM = 4
BASE_TRAIN_STREAM = 5
INIT_STREAM = 6
EVAL_STREAM = 7

DEFAULTS = {
    "version": 1,
    "run_root": "runs",
    "seed": 17,
    "corpus": {
        "n_domains": 4, "concepts_per_domain": 7, "tokens_per_concept": 5,
        "n_function": 160, "n_train": 2500, "n_heldout": 400,
        "min_len": 8, "max_len": 64, "target_content_fraction": 0.28,
        "train_profile": "A", "ood_profile": "B",
        "collocation_strength": 0.5, "concept_sharpness": 5.0,
    },
    "concepts": {"top_k": 200, "cap": 10, "provider": {"kind": "oracle"}},
    "model": {"d_model": 64, "n_heads": 4, "n_layers": 2, "max_context": 64,
              "mlp_ratio": 4, "dtype": "f64"},
    "pretrain": {"learning_rate": 1e-3, "batch_size": 8, "max_epochs": 6,
                 "early_stop_patience": 2, "train_split": 0.9},
    "train": {"learning_rate": 7e-5, "batch_size": 2, "max_epochs": 5,
              "early_stop_patience": 2, "train_split": 0.9},
    "objective": {"mass_threshold": 0.6, "include_original_in_mass": True},
    "sweep": {"lambda_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
              "modes": ["concepts"], "proportions": ["all"]},
    "eval": {"bootstrap_resamples": 1000, "bootstrap_level": 0.95,
             "clustering_sample": 150},
}

REPORT_FIELDS = (
    "run_id", "lambda", "mode", "proportion", "profile", "model", "domain",
    "content_ppl", "global_ppl", "content_acc", "global_acc",
    "clustering_score", "centroid_similarity", "spearman_alignment",
    "content_nll_diff_lo", "content_nll_diff_hi",
    "content_acc_diff_lo", "content_acc_diff_hi", "is_baseline")

REPORT_LONG_FIELDS = ("run_id", "lambda", "mode", "proportion", "profile",
                      "model", "domain", "metric", "value", "is_baseline")

REPORT_METRICS = ("content_ppl", "global_ppl", "content_acc", "global_acc",
                  "clustering_score", "centroid_similarity",
                  "spearman_alignment")


def _merge(defaults, override, path="config"):
    out = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {path}.{key}")
        if isinstance(defaults[key], dict) and key != "provider":
            if not isinstance(value, dict):
                raise ConfigError(f"{path}.{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def load_config(path, seed=None, run_root=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from e
    if raw.get("version") != 1:
        raise ConfigError(f"{path}: config version must be 1")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if run_root is not None:
        cfg["run_root"] = run_root
    return cfg


def derive_seed(master, stream):
    return int(np.random.SeedSequence([master, 0xC11, stream])
               .generate_state(1)[0])


def _paths(cfg):
    root = Path(cfg["run_root"])
    return {
        "root": root,
        "vocab": root / "corpus" / "vocab.json",
        "corpus_train": root / "corpus" / "train.jsonl",
        "corpus_in": root / "corpus" / "heldout_in_domain.jsonl",
        "corpus_ood": root / "corpus" / "heldout_ood.jsonl",
        "ground_truth": root / "corpus" / "ground_truth.csv",
        "base_dir": root / "base",
        "base_ckpt": root / "base" / "best.npz",
        "concepts_train": root / "concepts" / "train.jsonl",
        "concepts_in": root / "concepts" / "heldout_in_domain.jsonl",
        "concepts_ood": root / "concepts" / "heldout_ood.jsonl",
        "concepts_stats": root / "concepts" / "stats.json",
        "manifest": root / "manifest.json",
        "base_eval": root / "base_eval",
        "report_dir": root / "report",
    }


def _require(path, hint):
    if not Path(path).exists():
        raise ConfigError(f"missing {path} (run `{hint}` first)")
    return path


def _load_vocab(paths):
    return Vocabulary.from_json(
        Path(_require(paths["vocab"], "gen-corpus")).read_text()).validate()


def cmd_gen_corpus(cfg, force=False):
    paths = _paths(cfg)
    outputs = [paths["vocab"], paths["corpus_train"], paths["corpus_in"],
               paths["corpus_ood"], paths["ground_truth"]]
    if not force and all(p.exists() for p in outputs):
        print("gen-corpus: outputs exist, skipping (use --force to redo)")
        return 0
    c = cfg["corpus"]
    master = cfg["seed"]
    vocab = build_vocabulary(c["n_domains"], c["concepts_per_domain"],
                             c["tokens_per_concept"], c["n_function"],
                             seed=derive_seed(master, VOCAB_STREAM))
    gen = dict(min_len=c["min_len"], max_len=c["max_len"],
               collocation_strength=c["collocation_strength"],
               concept_sharpness=c["concept_sharpness"])
    frac = c["target_content_fraction"]
    train_seqs = generate_corpus(vocab, c["n_train"], c["train_profile"],
                                 frac, derive_seed(master, TRAIN_CORPUS_STREAM),
                                 **gen)
    held_in = generate_corpus(vocab, c["n_heldout"], c["train_profile"],
                              frac, derive_seed(master, HELD_IN_STREAM), **gen)
    held_ood = generate_corpus(vocab, c["n_heldout"], c["ood_profile"],
                               frac, derive_seed(master, HELD_OOD_STREAM),
                               **gen)
    paths["vocab"].parent.mkdir(parents=True, exist_ok=True)
    paths["vocab"].write_text(vocab.to_json())
    for path, seqs in ((paths["corpus_train"], train_seqs),
                       (paths["corpus_in"], held_in),
                       (paths["corpus_ood"], held_ood)):
        export_annotated(path, [(s, []) for s in seqs], vocab)
    benchmark = ground_truth_similarity(vocab)
    with open(paths["ground_truth"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token_a", "token_b", "similarity"])
        for a, b, s in zip(benchmark.token_a, benchmark.token_b,
                           benchmark.score):
            w.writerow([vocab.tokens[a], vocab.tokens[b], repr(float(s))])
    print(f"gen-corpus: wrote {len(train_seqs)} train sequences, "
          f"2x{len(held_in)} held-out, {len(benchmark)} benchmark pairs")
    return 0


def _model_config(cfg, vocab):
    return ModelConfig(vocab_size=vocab.n_tokens, **cfg["model"])


def cmd_train(cfg, force=False):
    """Train the base model: pure next-token pretraining on the train corpus."""
    paths = _paths(cfg)
    if not force and paths["base_ckpt"].exists():
        print("train: base checkpoint exists, skipping (use --force to redo)")
        return 0
    vocab = _load_vocab(paths)
    dataset = ingest_annotated(
        _require(paths["corpus_train"], "gen-corpus"), vocab,
        cap=cfg["concepts"]["cap"])
    master = cfg["seed"]
    params = init_params(_model_config(cfg, vocab),
                         seed=derive_seed(master, INIT_STREAM))
    objective = ObjectiveConfig(concept_weight=0.0,
                                **cfg["objective"])
    train_cfg = TrainConfig(seed=derive_seed(master, BASE_TRAIN_STREAM),
                            objective=objective, **cfg["pretrain"])
    best, log_ = train(params, dataset, train_cfg, run_dir=paths["base_dir"])
    print(f"train: base model done, stopped at epoch {log_.stopping_epoch} "
          f"(best epoch {log_.best_epoch})")
    return 0


def _provider(cfg, vocab):
    p = dict(cfg["concepts"]["provider"])
    kind = p.pop("kind", "oracle")
    if kind == "oracle":
        return OracleProvider(vocab)
    if kind == "external":
        return ExternalProvider(ExternalProviderConfig(**p), vocab)
    raise ConfigError(f"unknown provider kind {kind!r}")


def cmd_build_concepts(cfg, force=False):
    paths = _paths(cfg)
    outputs = [paths["concepts_train"], paths["concepts_in"],
               paths["concepts_ood"], paths["concepts_stats"]]
    if not force and all(p.exists() for p in outputs):
        print("build-concepts: outputs exist, skipping (use --force to redo)")
        return 0
    vocab = _load_vocab(paths)
    params, _, _ = load_checkpoint(_require(paths["base_ckpt"], "train"))
    provider = _provider(cfg, vocab)
    k, cap = cfg["concepts"]["top_k"], cfg["concepts"]["cap"]
    paths["concepts_train"].parent.mkdir(parents=True, exist_ok=True)
    stats = {}
    for src, dst, tag in ((paths["corpus_train"], paths["concepts_train"],
                           "train"),
                          (paths["corpus_in"], paths["concepts_in"],
                           "heldout_in_domain"),
                          (paths["corpus_ood"], paths["concepts_ood"],
                           "heldout_ood")):
        corpus = [seq for seq, _ in ingest_annotated(
            _require(src, "gen-corpus"), vocab, cap=cap)]
        dataset = build_dataset(params, corpus, provider, k=k, cap=cap)
        export_annotated(dst, dataset, vocab)
        n_ann = sum(len(anns) for _, anns in dataset)
        n_empty = sum(1 for _, anns in dataset
                      for a in anns if not a.synonyms)
        stats[tag] = {"sequences": len(dataset), "annotations": n_ann,
                      "empty_synonym_sets": n_empty}
    if getattr(provider, "kind", None) == "external":
        stats["duplicate_synonyms_dropped"] = provider.duplicate_count
    paths["concepts_stats"].write_text(
        json.dumps(stats, indent=2, sort_keys=True))
    print(f"build-concepts: {stats}")
    return 0


def cmd_sweep(cfg, jobs=1):
    paths = _paths(cfg)
    vocab = _load_vocab(paths)
    base_params, _, _ = load_checkpoint(_require(paths["base_ckpt"], "train"))
    dataset = ingest_annotated(
        _require(paths["concepts_train"], "build-concepts"), vocab,
        cap=cfg["concepts"]["cap"])
    objective = ObjectiveConfig(**cfg["objective"])
    base_cfg = TrainConfig(objective=objective, **cfg["train"])
    s = cfg["sweep"]
    manifest = sweep(base_params, dataset, base_cfg, s["lambda_grid"],
                     s["modes"], s["proportions"], cfg["seed"],
                     paths["root"], jobs=jobs)
    manifest["base_checkpoint"] = str(paths["base_ckpt"])
    save_manifest(paths["manifest"], manifest)
    done = sum(1 for r in manifest["runs"].values() if r["status"] == "done")
    failed = [rid for rid, r in manifest["runs"].items()
              if r["status"] == "failed"]
    print(f"sweep: {done}/{len(manifest['runs'])} runs done"
          + (f", failed: {failed}" if failed else ""))
    return 1 if failed and not done else 0


def _eval_one(params, heldouts, benchmark, vocab, out_dir, eval_cfg,
              base_records=None, run_meta=None):
    reports, scored = evaluate_model(
        params, heldouts, benchmark, vocab, base_records=base_records,
        clustering_sample=eval_cfg["clustering_sample"],
        resamples=eval_cfg["bootstrap_resamples"],
        level=eval_cfg["bootstrap_level"], seed=eval_cfg["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(run_meta or {})
    payload["domains"] = {d: asdict(r) for d, r in reports.items()}
    (out_dir / "eval.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))
    for domain, records in scored.items():
        write_records_csv(out_dir / f"records_{domain}.csv", records)
    return scored


def cmd_eval(cfg, run="all", force=False):
    paths = _paths(cfg)
    vocab = _load_vocab(paths)
    cap = cfg["concepts"]["cap"]
    heldouts = {
        "in_domain": ingest_annotated(
            _require(paths["concepts_in"], "build-concepts"), vocab, cap=cap),
        "ood": ingest_annotated(
            _require(paths["concepts_ood"], "build-concepts"), vocab,
            cap=cap),
    }
    benchmark = ground_truth_similarity(vocab)
    eval_cfg = dict(cfg["eval"])
    eval_cfg["seed"] = derive_seed(cfg["seed"], EVAL_STREAM)
    manifest = load_manifest(_require(paths["manifest"], "sweep"))

    base_params, _, _ = load_checkpoint(_require(paths["base_ckpt"], "train"))
    if force or not (paths["base_eval"] / "eval.json").exists():
        base_records = _eval_one(
            base_params, heldouts, benchmark, vocab, paths["base_eval"],
            eval_cfg, run_meta={"run_id": "base", "lambda": None,
                                "mode": "baseline", "proportion": None,
                                "is_baseline": True})
    else:
        from .evaluate import read_records_csv
        base_records = {d: read_records_csv(
            paths["base_eval"] / f"records_{d}.csv") for d in heldouts}
        print("eval: base model already evaluated, reusing records")

    selected = manifest["runs"] if run == "all" else {
        run: manifest["runs"][run]} if run in manifest["runs"] else None
    if selected is None:
        print(f"eval: unknown run id {run!r}", file=sys.stderr)
        return 1
    attempted = failures = 0
    for rid, entry in sorted(selected.items()):
        run_dir = Path(entry["paths"]["run_dir"])
        if entry["status"] != "done":
            print(f"eval: skipping {rid} (status {entry['status']})")
            continue
        if not force and (run_dir / "eval.json").exists():
            print(f"eval: {rid} already evaluated, skipping")
            continue
        attempted += 1
        try:
            params, _, _ = load_checkpoint(entry["paths"]["checkpoint"])
            _eval_one(params, heldouts, benchmark, vocab, run_dir, eval_cfg,
                      base_records=base_records,
                      run_meta={"run_id": rid, **entry["grid"],
                                "lambda": entry["grid"]["concept_weight"],
                                "is_baseline":
                                    entry["grid"]["concept_weight"] == 0.0})
            print(f"eval: {rid} done")
        except (ConceptLMError, OSError) as e:
            failures += 1
            print(f"eval: {rid} failed: {e}", file=sys.stderr)
    return 1 if attempted and failures == attempted else 0


def _report_rows(cfg, paths):
    manifest = load_manifest(paths["manifest"])
    entries = [("base", paths["base_eval"])]
    entries += [(rid, Path(e["paths"]["run_dir"]))
                for rid, e in sorted(manifest["runs"].items())
                if e["status"] == "done"]
    rows = []
    model_tag = f"d{cfg['model']['d_model']}L{cfg['model']['n_layers']}"
    profile = cfg["corpus"]["train_profile"]
    for rid, run_dir in entries:
        eval_path = run_dir / "eval.json"
        if not eval_path.exists():
            continue
        payload = json.loads(eval_path.read_text())
        for domain, rep in sorted(payload["domains"].items()):
            nll_ci = rep.get("content_nll_diff_ci") or {}
            acc_ci = rep.get("content_acc_diff_ci") or {}
            rows.append({
                "run_id": rid,
                "lambda": payload.get("lambda"),
                "mode": payload.get("mode"),
                "proportion": payload.get("proportion"),
                "profile": profile,
                "model": model_tag,
                "domain": domain,
                "is_baseline": int(bool(payload.get("is_baseline"))),
                "content_nll_diff_lo": nll_ci.get("lower"),
                "content_nll_diff_hi": nll_ci.get("upper"),
                "content_acc_diff_lo": acc_ci.get("lower"),
                "content_acc_diff_hi": acc_ci.get("upper"),
                **{m: rep[m] for m in REPORT_METRICS},
            })
    return rows


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_report(cfg):
    paths = _paths(cfg)
    _require(paths["manifest"], "sweep")
    rows = _report_rows(cfg, paths)
    if not rows:
        print("report: no completed evaluations found", file=sys.stderr)
        return 1
    paths["report_dir"].mkdir(parents=True, exist_ok=True)
    with open(paths["report_dir"] / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in REPORT_FIELDS])
    with open(paths["report_dir"] / "report_long.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_LONG_FIELDS)
        for row in rows:
            for metric in REPORT_METRICS:
                w.writerow([_fmt(row["run_id"]), _fmt(row["lambda"]),
                            _fmt(row["mode"]), _fmt(row["proportion"]),
                            _fmt(row["profile"]), _fmt(row["model"]),
                            _fmt(row["domain"]), metric,
                            _fmt(row[metric]), row["is_baseline"]])
    lines = ["evaluation summary", "=================="]
    for row in rows:
        lines.append(
            f"{row['run_id']:30s} {row['domain']:10s} "
            f"content_ppl={row['content_ppl']:.3f} "
            f"global_ppl={row['global_ppl']:.3f} "
            f"clustering={row['clustering_score']:.4f} "
            f"alignment={row['spearman_alignment']:.4f}"
            + ("  [baseline]" if row["is_baseline"] else ""))
    (paths["report_dir"] / "report.txt").write_text("\n".join(lines) + "\n")
    print(f"report: wrote {len(rows)} rows to {paths['report_dir']}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="conceptlm",
        description="concept-level language model training toolkit")
    parser.add_argument("--config", required=True, help="path to config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--run-root", default=None,
                        help="override the run root (or set CONCEPTLM_RUN_ROOT)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel processes for sweep runs")
    parser.add_argument("--force", action="store_true",
                        help="redo work even when outputs exist")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-corpus", "train", "build-concepts", "sweep", "report"):
        sub.add_parser(name)
    p_eval = sub.add_parser("eval")
    p_eval.add_argument("--run", default="all",
                        help="run id to evaluate (default: all)")
    return parser


def main(argv=None):
    import os
    args = build_parser().parse_args(argv)
    run_root = args.run_root or os.environ.get("CONCEPTLM_RUN_ROOT")
    try:
        cfg = load_config(args.config, seed=args.seed, run_root=run_root)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(cfg, force=args.force)
        if args.command == "train":
            return cmd_train(cfg, force=args.force)
        if args.command == "build-concepts":
            return cmd_build_concepts(cfg, force=args.force)
        if args.command == "sweep":
            return cmd_sweep(cfg, jobs=args.jobs)
        if args.command == "eval":
            return cmd_eval(cfg, run=args.run, force=args.force)
        if args.command == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConceptLMError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
