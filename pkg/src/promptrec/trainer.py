"""Training loop, optimization, and binary checkpointing."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import corpus, evalkit
from .config import TrainConfig
from .corpus import InteractionDataset
from .diffcore import ParameterRegistry
from .pipeline import ModelState, compute_losses, forward_batch

CHECKPOINT_MAGIC = b"COCO"
CHECKPOINT_VERSION = 1


class TrainerError(Exception):
    pass


class CheckpointError(Exception):
    pass


class Adam:
    """Adaptive-moment optimizer with decoupled per-group step sizes.

    Parameters whose gradient is absent in a step are skipped entirely, so
    an untouched tensor stays bitwise identical.
    """

    def __init__(self, registry: ParameterRegistry, lr: float,
                 group_lr: dict[str, float] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.registry = registry
        self.lr = lr
        self.group_lr = dict(group_lr or {})
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {e.name: np.zeros_like(e.tensor.data) for e in registry.trainable()}
        self.v = {e.name: np.zeros_like(e.tensor.data) for e in registry.trainable()}

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for e in self.registry.trainable():
            if e.tensor.grad is not None:
                total += float((e.tensor.grad ** 2).sum())
        norm = total ** 0.5
        if max_norm > 0 and norm > max_norm:
            factor = max_norm / norm
            for e in self.registry.trainable():
                if e.tensor.grad is not None:
                    e.tensor.grad *= factor
        return norm

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for e in self.registry.trainable():
            g = e.tensor.grad
            if g is None:
                continue
            lr = self.group_lr.get(e.group, self.lr)
            if lr == 0.0:
                continue
            m = self.m[e.name]
            v = self.v[e.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            e.tensor.data = e.tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        return {"step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_arrays(self, st: dict) -> None:
        self.step_count = int(st["step"])
        for k in self.m:
            self.m[k] = st["m"][k].copy()
            self.v[k] = st["v"][k].copy()


@dataclass
class Checkpoint:
    """Complete run state: enough to reproduce forwards bit-for-bit."""

    version: int
    config: TrainConfig
    vocab: dict[str, int]
    params: dict[str, np.ndarray]
    param_meta: list[tuple[str, str, bool]]      # name, group, frozen
    opt_state: dict
    epoch: int
    rng_state: dict
    n_users: int
    n_items: int
    catalog_fingerprint: str
    best_valid: float | None = None


def state_to_checkpoint(state: ModelState, optimizer: Adam, epoch: int,
                        best_valid: float | None) -> Checkpoint:
    meta = [(e.name, e.group, e.frozen) for e in state.registry.entries()]
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config=state.cfg,
        vocab=dict(state.tokenizer.vocab),
        params=state.registry.snapshot(),
        param_meta=meta,
        opt_state=optimizer.state_arrays(),
        epoch=epoch,
        rng_state=state.rng.bit_generator.state,
        n_users=state.n_users,
        n_items=state.n_items,
        catalog_fingerprint=state.catalog_fingerprint,
        best_valid=best_valid,
    )


def state_from_checkpoint(ckpt: Checkpoint,
                          dataset: InteractionDataset | None = None) -> ModelState:
    """Rebuild a ModelState whose forward outputs match the saved run."""
    from . import toylm

    tokenizer = toylm.Tokenizer(ckpt.vocab)
    state = ModelState(ckpt.config, ckpt.n_users, ckpt.n_items, tokenizer)
    # codebook contents come from the snapshot; seed it with placeholder rows
    from . import promptvq as pv
    from .diffcore import Tensor

    state.codebook = pv.PromptCodebook(
        z=Tensor(np.zeros((ckpt.config.codebook_size, ckpt.config.d_llm))),
        z_share=Tensor(np.zeros((ckpt.config.shared_prompts, ckpt.config.d_llm))),
    )
    state.register_all()
    saved = [(e.name, e.group, e.frozen) for e in state.registry.entries()]
    if saved != [tuple(m) for m in ckpt.param_meta]:
        raise CheckpointError("checkpoint parameter layout does not match the "
                              "model built from its config")
    state.registry.load_snapshot(ckpt.params)
    state.rng.bit_generator.state = ckpt.rng_state
    if dataset is not None:
        if dataset.fingerprint() != ckpt.catalog_fingerprint:
            raise CheckpointError(
                "dataset catalog does not match the checkpoint "
                f"({dataset.fingerprint()} vs {ckpt.catalog_fingerprint})")
        state.attach_dataset(dataset)
    else:
        state.catalog_fingerprint = ckpt.catalog_fingerprint
    return state


# ---------------------------------------------------------------------------
# binary serialization


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Atomic write: versioned header, JSON metadata, raw little-endian data."""
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab,
        "params": [
            {"name": n, "group": g, "frozen": f,
             "shape": list(ckpt.params[n].shape)}
            for n, g, f in ckpt.param_meta
        ],
        "opt": {"step": ckpt.opt_state["step"],
                "names": sorted(ckpt.opt_state["m"])},
        "epoch": ckpt.epoch,
        "rng": ckpt.rng_state,
        "n_users": ckpt.n_users,
        "n_items": ckpt.n_items,
        "catalog_fingerprint": ckpt.catalog_fingerprint,
        "best_valid": ckpt.best_valid,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, _, _ in ckpt.param_meta:
            fh.write(ckpt.params[name].astype("<f8", copy=False).tobytes())
        for name in sorted(ckpt.opt_state["m"]):
            fh.write(ckpt.opt_state["m"][name].astype("<f8", copy=False).tobytes())
        for name in sorted(ckpt.opt_state["v"]):
            fh.write(ckpt.opt_state["v"][name].astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"checkpoint version {version} unsupported "
                    f"(this build reads version {CHECKPOINT_VERSION})")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
            params: dict[str, np.ndarray] = {}
            meta: list[tuple[str, str, bool]] = []
            for p in header["params"]:
                shape = tuple(p["shape"])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * n)
                if len(buf) != 8 * n:
                    raise CheckpointError(f"truncated data for parameter {p['name']}")
                params[p["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
                meta.append((p["name"], p["group"], bool(p["frozen"])))
            shapes = {p["name"]: tuple(p["shape"]) for p in header["params"]}
            opt = {"step": header["opt"]["step"], "m": {}, "v": {}}
            for slot in ("m", "v"):
                for name in header["opt"]["names"]:
                    shape = shapes[name]
                    n = int(np.prod(shape)) if shape else 1
                    buf = fh.read(8 * n)
                    if len(buf) != 8 * n:
                        raise CheckpointError(f"truncated optimizer slot for {name}")
                    opt[slot][name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    except (OSError, struct.error, json.JSONDecodeError, KeyError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return Checkpoint(
        version=version,
        config=TrainConfig.from_dict(header["config"]),
        vocab={k: int(v) for k, v in header["vocab"].items()},
        params=params,
        param_meta=meta,
        opt_state=opt,
        epoch=int(header["epoch"]),
        rng_state=header["rng"],
        n_users=int(header["n_users"]),
        n_items=int(header["n_items"]),
        catalog_fingerprint=header["catalog_fingerprint"],
        best_valid=header["best_valid"],
    )


# ---------------------------------------------------------------------------
# training


def train_step(state: ModelState, batch: corpus.Batch, optimizer: Adam) -> dict:
    """One optimization step; returns loss terms and gating statistics."""
    state.registry.zero_grad()
    trace = forward_batch(state, batch, training=True)
    bundle = compute_losses(state, trace, batch)
    for term, tensor in (("l_r", bundle.l_r), ("l_aux", bundle.l_aux),
                         ("l_ortho", bundle.l_ortho), ("l_q", bundle.l_q),
                         ("l_total", bundle.l_total)):
        if not np.isfinite(tensor.data).all():
            raise TrainerError(f"non-finite loss term {term}; aborting the run")
    bundle.l_total.backward()
    optimizer.clip_global_norm(state.cfg.grad_clip)
    optimizer.step()
    stats = bundle.values()
    stats["mask_fraction"] = float(trace.mask.mean()) if trace.mask is not None else 0.0
    stats["mean_m"] = float(trace.m_counts.mean()) if trace.m_counts is not None else 0.0
    return stats


@dataclass
class FitResult:
    checkpoint: Checkpoint
    report: "evalkit.MetricsReport"
    epoch_log: list[dict] = field(default_factory=list)


def fit(dataset: InteractionDataset, cfg: TrainConfig,
        log_path: str | None = None,
        seed_path: str | None = None) -> FitResult:
    """Full training run with per-epoch validation and early stopping.

    Keeps the checkpoint of the best validation R@K (first K in eval_ks);
    stops early when that metric has not improved for ``patience`` epochs.
    Returns the best checkpoint evaluated on the test split.
    """
    cfg.validate()
    if not dataset.split_done:
        raise TrainerError("dataset must be split before training")

    state = ModelState.initialize(cfg, dataset, seed_path=seed_path)
    optimizer = Adam(state.registry, cfg.lr, {"lora": cfg.lr_lora})
    k_main = cfg.ks()[0]

    best_valid = -1.0
    best_epoch = -1
    best_snapshot = None
    best_opt = None
    best_rng = None
    epoch_log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            batches = corpus.make_batches(
                dataset, cfg.batch_size, cfg.t_max,
                seed=int(np.random.SeedSequence((cfg.seed, epoch)).generate_state(1)[0]))
            sums: dict[str, float] = {}
            for batch in batches:
                stats = train_step(state, batch, optimizer)
                for k, v in stats.items():
                    sums[k] = sums.get(k, 0.0) + v
            state.sanitize_codebook()
            means = {k: v / max(1, len(batches)) for k, v in sums.items()}

            valid = evalkit.evaluate(state, dataset, "valid",
                                     ks=cfg.ks(), batch_size=cfg.eval_batch)
            entry = {"epoch": epoch, **{k: round(v, 6) for k, v in means.items()},
                     **{f"valid_r{k}": valid.recall[k] for k in cfg.ks()},
                     **{f"valid_n{k}": valid.ndcg[k] for k in cfg.ks()}}
            epoch_log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()

            if valid.recall[k_main] > best_valid:
                best_valid = valid.recall[k_main]
                best_epoch = epoch
                best_snapshot = state.registry.snapshot()
                best_opt = optimizer.state_arrays()
                best_rng = state.rng.bit_generator.state
            if epoch - best_epoch >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()

    if best_snapshot is not None:
        state.registry.load_snapshot(best_snapshot)
        optimizer.load_state_arrays(best_opt)
        state.rng.bit_generator.state = best_rng

    ckpt = state_to_checkpoint(state, optimizer, max(best_epoch, 0),
                               best_valid if best_epoch >= 0 else None)
    report = evalkit.evaluate(state, dataset, "test", ks=cfg.ks(),
                              batch_size=cfg.eval_batch)
    report.loss_means = {k: v for k, v in (epoch_log[-1].items()
                                           if epoch_log else ())
                         if k.startswith("l_")}
    report.metadata.update({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "variant": cfg.variant,
        "best_epoch": best_epoch,
        "best_valid": best_valid if best_epoch >= 0 else None,
        "epochs_run": len(epoch_log),
    })
    return FitResult(checkpoint=ckpt, report=report, epoch_log=epoch_log)
