"""Ranking metrics, leave-one-out evaluation, ablations, and exports.

Evaluation ranks the held-out item against the entire catalog by dot
product; score ties break toward the smaller dense index. Metrics are
averaged over users in fixed user order.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus
from . import diffcore as dc
from .config import TrainConfig
from .corpus import InteractionDataset
from .pipeline import ModelState, forward_batch


class EvalError(Exception):
    pass


def recall_at_k(rank_of_target: int, k: int) -> int:
    """1 iff the single held-out target lands in the top k."""
    if rank_of_target < 1:
        raise EvalError(f"rank must be >= 1, got {rank_of_target}")
    return 1 if rank_of_target <= k else 0


def ndcg_at_k(rank_of_target: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the cutoff, else 0."""
    if rank_of_target < 1:
        raise EvalError(f"rank must be >= 1, got {rank_of_target}")
    if rank_of_target > k:
        return 0.0
    return 1.0 / math.log2(rank_of_target + 1)


def rank_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target; equal scores rank by ascending index."""
    b, n = scores.shape
    t_scores = scores[np.arange(b), targets][:, None]
    higher = (scores > t_scores).sum(axis=1)
    tied_before = ((scores == t_scores) & (np.arange(n)[None, :] < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


@dataclass
class MetricsReport:
    split: str
    n_users: int
    recall: dict[int, float]
    ndcg: dict[int, float]
    loss_means: dict[str, float] = field(default_factory=dict)
    m_hist: list[int] | None = None
    m_mean: float | None = None
    mask_fraction: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_users": self.n_users,
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "loss_means": self.loss_means,
            "m_hist": self.m_hist,
            "m_mean": self.m_mean,
            "mask_fraction": self.mask_fraction,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            split=d["split"], n_users=d["n_users"],
            recall={int(k): v for k, v in d["recall"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            loss_means=d.get("loss_means", {}),
            m_hist=d.get("m_hist"), m_mean=d.get("m_mean"),
            mask_fraction=d.get("mask_fraction"),
            metadata=d.get("metadata", {}),
        )


def evaluate(state: ModelState, dataset: InteractionDataset, split: str,
             ks: list[int] | None = None, batch_size: int = 256,
             apply_mask: bool = False) -> MetricsReport:
    """Full-catalog leave-one-out evaluation of the fused representation.

    ``apply_mask`` routes scoring through the gradient-gated tensor; the
    gate is forward-transparent, so metrics cannot depend on it.
    """
    ks = ks or [5]
    if state.title_ids is None:
        raise EvalError("state has no attached dataset; call attach_dataset")
    if dataset.fingerprint() != state.catalog_fingerprint:
        raise EvalError("dataset catalog does not match the evaluated model")

    hits = {k: 0.0 for k in ks}
    gains = {k: 0.0 for k in ks}
    m_hist = None
    m_total = 0.0
    mask_total = 0.0
    n = 0
    if state.cfg.variant != "backbone_only":
        m_hist = [0] * (state.cfg.codebook_size + 1)

    item_table = state.backbone.item_emb.data
    with dc.no_grad():
        for batch in corpus.eval_batches(dataset, split, batch_size, state.cfg.t_max):
            trace = forward_batch(state, batch, training=False,
                                  apply_mask=apply_mask)
            scores = trace.h_final.data @ item_table.T
            ranks = rank_targets(scores, batch.target)
            for k in ks:
                hits[k] += sum(recall_at_k(int(r), k) for r in ranks)
                gains[k] += sum(ndcg_at_k(int(r), k) for r in ranks)
            if trace.m_counts is not None and m_hist is not None:
                for m in trace.m_counts:
                    m_hist[int(m)] += 1
                m_total += float(trace.m_counts.sum())
            if trace.mask is not None:
                mask_total += float(trace.mask.sum())
            n += batch.size

    return MetricsReport(
        split=split, n_users=n,
        recall={k: hits[k] / n for k in ks},
        ndcg={k: gains[k] / n for k in ks},
        m_hist=m_hist,
        m_mean=(m_total / n) if m_hist is not None else None,
        mask_fraction=(mask_total / n) if state.cfg.variant != "backbone_only" else None,
        metadata={"variant": state.cfg.variant},
    )


def ablate(variant: str, dataset: InteractionDataset, cfg: TrainConfig,
           seed_path: str | None = None):
    """Train and test one ablation variant; returns the trainer FitResult.

    `con` disables language-model adaptation twice over: the benefit gate is
    pinned to 1 (stopping the fused-path gradient) and the adapter learning
    rate is zeroed.
    """
    from . import trainer  # local import; trainer depends on this module

    cfg2 = replace(cfg, variant=variant)
    if variant == "con":
        cfg2 = replace(cfg2, lr_lora=0.0)
    cfg2.validate()
    return trainer.fit(dataset, cfg2, seed_path=seed_path)


# ---------------------------------------------------------------------------
# exports

CSV_HEADER = ["run_id", "epoch", "split", "metric", "K", "value"]


def export_metrics_csv(rows: list[tuple], path: str) -> None:
    """Rows: (run_id, epoch, MetricsReport)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for run_id, epoch, rep in rows:
            for k, v in sorted(rep.recall.items()):
                w.writerow([run_id, epoch, rep.split, "recall", k, repr(v)])
            for k, v in sorted(rep.ndcg.items()):
                w.writerow([run_id, epoch, rep.split, "ndcg", k, repr(v)])
            for name, v in sorted(rep.loss_means.items()):
                w.writerow([run_id, epoch, rep.split, name, "", repr(v)])


def export_metrics_json(rows: list[tuple], path: str) -> None:
    payload = [{"run_id": r, "epoch": e, "report": rep.to_dict()}
               for r, e, rep in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def export_m_histogram(report: MetricsReport, path: str) -> None:
    if report.m_hist is None:
        raise EvalError("report carries no selected-prompt histogram")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "count"])
        for m, count in enumerate(report.m_hist):
            w.writerow([m, count])


def export_embeddings(state: ModelState, dataset: InteractionDataset,
                      path: str, n_rows: int = 64) -> None:
    """Dump sample behavioral states and knowledge fragments for external
    projection tools. Schema: kind,row_id,dim0..dimN."""
    batch = corpus.eval_batches(dataset, "test", min(n_rows, dataset.n_users),
                                state.cfg.t_max)[0]
    with dc.no_grad():
        trace = forward_batch(state, batch, training=False, apply_mask=False)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        dim = max(trace.h_rs.shape[1],
                  trace.h_pure.shape[2] if trace.h_pure is not None else 0)
        w.writerow(["kind", "row_id"] + [f"dim{i}" for i in range(dim)])

        def pad(vec):
            return list(vec) + [""] * (dim - len(vec))

        for i in range(trace.h_rs.shape[0]):
            w.writerow(["h_rs", i] + pad(trace.h_rs.data[i]))
        if trace.h_pure is not None:
            for i in range(trace.h_pure.shape[0]):
                for j in range(trace.h_pure.shape[1]):
                    row = trace.h_pure.data[i, j]
                    if np.abs(row).sum() > 0:
                        w.writerow([f"h_pure_{j}", i] + pad(row))


def export_all(report: MetricsReport, out_dir: str, run_id: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    csv_path = os.path.join(out_dir, "metrics.csv")
    export_metrics_csv([(run_id, report.metadata.get("best_epoch", 0), report)],
                       csv_path)
    paths.append(csv_path)
    json_path = os.path.join(out_dir, "metrics.json")
    export_metrics_json([(run_id, report.metadata.get("best_epoch", 0), report)],
                        json_path)
    paths.append(json_path)
    if report.m_hist is not None:
        hist_path = os.path.join(out_dir, "m_histogram.csv")
        export_m_histogram(report, hist_path)
        paths.append(hist_path)
    return paths
