"""Command-line entry point.

Verbs: ingest, synth, train, eval, ablate, sweep, gradcheck, export.
Every run writes its resolved configuration next to its outputs. Errors
print one machine-parseable `error: ...` line and exit nonzero (2 for usage
problems, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import corpus, evalkit, gradchecks, trainer
from .config import ConfigError, TrainConfig


class CliError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    p.add_argument("--config", help="config file (key = value lines)")
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                       help=f"TrainConfig.{f.name} (default {f.default})")


def _resolve_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = v
    if overrides:
        merged = cfg.to_dict()
        merged.update(overrides)
        cfg = TrainConfig.from_dict(merged)
    return cfg.validate()


def _write_resolved(cfg: TrainConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved-config"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def _load_data(args, cfg: TrainConfig) -> corpus.InteractionDataset:
    d = corpus.load_dataset_dir(args.data)
    return corpus.prepare(d, cfg.min_interactions)


def cmd_synth(args) -> int:
    d = corpus.synth_generate(args.users, args.items, args.categories,
                              args.signal, args.seed, min_len=args.min_len,
                              max_len=args.max_len, n_chains=args.chains)
    corpus.save_dataset(d, args.out)
    with open(os.path.join(args.out, "resolved-config"), "w", encoding="utf-8") as fh:
        for key in ("users", "items", "categories", "signal", "seed",
                    "min_len", "max_len", "chains"):
            fh.write(f"{key} = {getattr(args, key)}\n")
    print(f"wrote {d.n_users} users, {d.n_items} items, "
          f"{d.n_interactions} interactions to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    d = corpus.ingest(args.interactions, args.catalog)
    print(f"ingested {d.n_users} users, {d.n_items} items, "
          f"{d.n_interactions} interactions")
    if args.out:
        corpus.save_dataset(d, args.out)
        print(f"normalized copy written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_data(args, cfg)
    _write_resolved(cfg, args.out)
    result = trainer.fit(dataset, cfg,
                         log_path=os.path.join(args.out, "metrics.jsonl"))
    ckpt_path = os.path.join(args.out, "checkpoint.coco")
    trainer.save_checkpoint(result.checkpoint, ckpt_path)
    evalkit.export_all(result.report, args.out, run_id=cfg.config_hash())
    ks = cfg.ks()
    print(f"test R@{ks[0]} = {result.report.recall[ks[0]]:.4f}  "
          f"N@{ks[0]} = {result.report.ndcg[ks[0]]:.4f}  "
          f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    dataset = _load_data(args, cfg)
    state = trainer.state_from_checkpoint(ckpt, dataset)
    report = evalkit.evaluate(state, dataset, args.split, ks=cfg.ks(),
                              batch_size=cfg.eval_batch,
                              apply_mask=args.apply_mask)
    _write_resolved(cfg, args.out)
    evalkit.export_all(report, args.out, run_id=cfg.config_hash())
    ks = cfg.ks()
    print(f"{args.split} R@{ks[0]} = {report.recall[ks[0]]:.6f}  "
          f"N@{ks[0]} = {report.ndcg[ks[0]]:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_data(args, cfg)
    result = evalkit.ablate(args.variant, dataset, cfg)
    _write_resolved(dataclasses.replace(cfg, variant=args.variant), args.out)
    trainer.save_checkpoint(result.checkpoint,
                            os.path.join(args.out, "checkpoint.coco"))
    evalkit.export_all(result.report, args.out,
                       run_id=f"{cfg.config_hash()}-{args.variant}")
    ks = cfg.ks()
    print(f"variant {args.variant}: test R@{ks[0]} = "
          f"{result.report.recall[ks[0]]:.4f}")
    return 0


def _sweep_point(payload: tuple) -> dict:
    cfg_dict, data_dir, point = payload
    merged = dict(cfg_dict)
    merged.update(point)
    cfg = TrainConfig.from_dict(merged)
    dataset = corpus.prepare(corpus.load_dataset_dir(data_dir),
                             cfg.min_interactions)
    result = trainer.fit(dataset, cfg)
    k = cfg.ks()[0]
    return {**point, "status": "ok",
            f"test_r{k}": result.report.recall[k],
            f"test_n{k}": result.report.ndcg[k]}


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    grid: list[tuple[str, list[str]]] = []
    for spec in args.grid:
        if "=" not in spec:
            raise CliError(f"bad grid spec {spec!r}; expected key=v1,v2,...")
        key, _, values = spec.partition("=")
        grid.append((key.strip(), [v.strip() for v in values.split(",") if v.strip()]))
    names = [k for k, _ in grid]
    points = [dict(zip(names, combo))
              for combo in itertools.product(*(vs for _, vs in grid))]
    for point in points:  # validate the whole grid before any training
        merged = cfg.to_dict()
        merged.update(point)
        TrainConfig.from_dict(merged)

    _write_resolved(cfg, args.out)
    csv_path = os.path.join(args.out, "sweep.csv")
    rows: list[dict] = []
    failed = False
    payloads = [(cfg.to_dict(), args.data, p) for p in points]
    try:
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                rows = list(pool.map(_sweep_point, payloads))
        else:
            for payload in payloads:
                rows.append(_sweep_point(payload))
    except Exception as e:  # preserve partial results, mark the failure
        failed = True
        rows.append({**points[len(rows)], "status": f"failed: {e}"})

    k = cfg.ks()[0]
    cols = names + ["status", f"test_r{k}", f"test_n{k}"]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    print(f"sweep wrote {len(rows)} rows to {csv_path}")
    if failed:
        raise CliError("sweep aborted; partial results preserved and marked")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradchecks.run_scope(args.scope)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    if n_fail:
        print(f"{n_fail} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_export(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for path in args.report:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        for entry in payload:
            rows.append((entry["run_id"], entry["epoch"],
                         evalkit.MetricsReport.from_dict(entry["report"])))
    evalkit.export_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    evalkit.export_metrics_json(rows, os.path.join(args.out, "metrics.json"))
    for i, (run_id, _, rep) in enumerate(rows):
        if rep.m_hist is not None:
            evalkit.export_m_histogram(
                rep, os.path.join(args.out, f"m_histogram_{run_id}.csv"))
    if args.checkpoint and args.data:
        ckpt = trainer.load_checkpoint(args.checkpoint)
        dataset = corpus.prepare(corpus.load_dataset_dir(args.data),
                                 ckpt.config.min_interactions)
        state = trainer.state_from_checkpoint(ckpt, dataset)
        evalkit.export_embeddings(state, dataset,
                                  os.path.join(args.out, "embeddings.csv"))
    print(f"exports written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptrec",
        description="Prompt-augmented sequential recommender workbench")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--signal", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=9, dest="min_len")
    p.add_argument("--max-len", type=int, default=15, dest="max_len")
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate and normalize raw data files")
    p.add_argument("--interactions", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train and evaluate a model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--apply-mask", action="store_true", dest="apply_mask",
                   help="route scoring through the (forward-identical) gate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one ablation variant")
    p.add_argument("--variant", required=True,
                   choices=[v for v in evalkit_variants()])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, skip=("variant",))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid sweep over config fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", required=True,
                   metavar="key=v1,v2", help="repeatable grid axis")
    p.add_argument("--parallel", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audits")
    p.add_argument("--scope", choices=gradchecks.SCOPES, default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="convert report JSON to CSV bundles")
    p.add_argument("--report", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="also dump sample embeddings")
    p.add_argument("--data", help="dataset dir for the embedding dump")
    p.set_defaults(func=cmd_export)
    return parser


def evalkit_variants() -> tuple[str, ...]:
    from .config import VARIANTS

    return VARIANTS


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CliError, ConfigError, corpus.CorpusError, trainer.TrainerError,
            trainer.CheckpointError, evalkit.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, (CliError, ConfigError)) else 1
    except Exception as e:  # unexpected: still one parseable line
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
