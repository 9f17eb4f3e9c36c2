"""Model state construction and the end-to-end differentiable forward pass.

One training step walks: behavioral encoding -> user projection -> prompt
scoring/selection -> prompt+text assembly -> frozen LM with adapters ->
decoupling -> alignment -> benefit gating -> weighted losses. Ablation
variants reroute individual stages without touching the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import contradiction as ct
from . import diffcore as dc
from . import fusion as fu
from . import promptvq as pv
from . import toylm
from .config import TrainConfig
from .corpus import Batch, InteractionDataset
from .diffcore import ParameterRegistry, Tensor


class PipelineError(Exception):
    pass


class ModelState:
    """All parameters plus the registry describing their training status."""

    def __init__(self, cfg: TrainConfig, n_users: int, n_items: int,
                 tokenizer: toylm.Tokenizer):
        self.cfg = cfg
        self.n_users = n_users
        self.n_items = n_items
        self.tokenizer = tokenizer
        self.registry = ParameterRegistry()
        self.title_ids: list[list[int]] | None = None
        self.catalog_fingerprint = ""

        ss = np.random.SeedSequence(cfg.seed)
        (self._rng_lm, self._rng_warmup, self._rng_codebook, self._rng_backbone,
         self._rng_user, self._rng_fusion, self._rng_extra, rng_dropout,
         self._rng_sanitize) = [np.random.default_rng(s) for s in ss.spawn(9)]
        self.rng = rng_dropout

        self.lm_cfg = toylm.LMConfig(
            vocab_size=tokenizer.size, d_llm=cfg.d_llm, n_layers=cfg.lm_layers,
            n_heads=cfg.lm_heads, l_max=cfg.l_max)
        self.lm = toylm.LMParams(self.lm_cfg, self._rng_lm)
        self.adapters = toylm.make_adapters(
            self.lm_cfg, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
            self._rng_lm)
        self.backbone = bb.BackboneParams(
            bb.BackboneConfig(n_items=n_items, d_rs=cfg.d_rs,
                              n_blocks=cfg.backbone_blocks,
                              n_heads=cfg.backbone_heads, t_max=cfg.t_max),
            self._rng_backbone)
        self.user_enc = pv.UserEncoderParams(
            n_users, cfg.d_rs, cfg.d_rs, cfg.d_llm, self._rng_user,
            wobble=cfg.user_wobble)
        self.fusion = fu.FusionParams(cfg.d_llm, cfg.d_rs, self._rng_fusion)
        self.codebook: pv.PromptCodebook | None = None
        self.soft_prompt: Tensor | None = None
        self.alt_fusion: fu.AltFusionParams | None = None
        if cfg.variant == "soft":
            self.soft_prompt = Tensor(self._rng_extra.normal(0.0, 0.02, (1, cfg.d_llm)))
        if cfg.variant in ("fuse_mlp", "fuse_concat"):
            self.alt_fusion = fu.AltFusionParams(cfg.d_rs, cfg.d_rs, self._rng_extra)

    # -- construction ----------------------------------------------------

    def warmup_lm(self, titles: list[str]) -> list[float]:
        if self.cfg.lm_warmup_steps <= 0:
            return []
        return toylm.warmup_pretrain(
            self.lm, self.tokenizer, titles, steps=self.cfg.lm_warmup_steps,
            lr=self.cfg.lm_warmup_lr, rng=self._rng_warmup)

    def init_codebook(self, seed_path: str | None = None) -> None:
        self.codebook = pv.init_codebook(
            self.cfg.codebook_size, self.cfg.shared_prompts, self.tokenizer,
            self.lm, self._rng_codebook, seed_path=seed_path)
        # aim the fresh user projection at a mutually-spread bundle of
        # codeword directions: cosines to bundle members start near
        # 1/sqrt(J), inside the gate's operating range, so selection is
        # alive from step one without saturating
        j = min(self.cfg.codebook_size, max(2, self.cfg.codebook_size // 16))
        z = self.codebook.z.data
        zh = z / np.linalg.norm(z, axis=1, keepdims=True)
        members = [0]
        while len(members) < j:
            members.append(min(
                (i for i in range(len(zh)) if i not in members),
                key=lambda i: max(abs(float(zh[i] @ zh[c])) for c in members)))
        bundle = zh[members].sum(axis=0)
        if np.linalg.norm(bundle) < 1e-6:  # tiny codebooks can cancel exactly
            bundle = zh[0]
        self.user_enc.bias_towards(
            bundle, scale=float(np.linalg.norm(z, axis=1).mean()))

    def register_all(self) -> None:
        self.lm.register(self.registry, frozen=True)
        toylm.register_adapters(self.adapters, self.registry)
        self.backbone.register(self.registry)
        self.user_enc.register(self.registry)
        if self.codebook is None:
            raise PipelineError("init_codebook must run before register_all")
        self.codebook.register(self.registry)
        self.fusion.register(self.registry)
        if self.soft_prompt is not None:
            self.registry.register("codebook.soft_prompt", self.soft_prompt,
                                   group="codebook")
        if self.alt_fusion is not None:
            self.alt_fusion.register(self.registry)

    def attach_dataset(self, dataset: InteractionDataset) -> None:
        """Cache tokenized titles and pin the catalog identity."""
        if dataset.n_items != self.n_items:
            raise PipelineError(
                f"catalog mismatch: state built for {self.n_items} items, "
                f"dataset has {dataset.n_items}")
        self.title_ids = [self.tokenizer.encode(t) or
                          [self.tokenizer.vocab[toylm.Tokenizer.UNK]]
                          for t in dataset.titles()]
        self.catalog_fingerprint = dataset.fingerprint()

    def sanitize_codebook(self) -> int:
        return self.codebook.sanitize(self._rng_sanitize)

    @classmethod
    def initialize(cls, cfg: TrainConfig, dataset: InteractionDataset,
                   seed_path: str | None = None) -> "ModelState":
        """Standard construction order used by both training and loading."""
        titles = dataset.titles()
        tokenizer = toylm.Tokenizer.build(
            titles + pv.load_seed_texts(seed_path) + pv.SHARED_PROMPT_TEXTS)
        state = cls(cfg, dataset.n_users, dataset.n_items, tokenizer)
        state.warmup_lm(_warmup_corpus(dataset))
        state.init_codebook(seed_path)
        state.register_all()
        state.attach_dataset(dataset)
        return state


def _warmup_corpus(dataset: InteractionDataset) -> list[str]:
    """Warm-up documents: one separator-joined title stream per user, from
    the training prefix only (never the held-out items). Falls back to the
    catalog itself when the dataset is unsplit."""
    titles = dataset.titles()
    if not dataset.split_done:
        return titles
    sep = f" {toylm.Tokenizer.SEP} "
    return [sep.join(titles[i] for i in dataset.train_part(u))
            for u in range(dataset.n_users)]


@dataclass
class ForwardTrace:
    """Intermediate tensors of one batch, kept for losses and inspection."""

    h_rs: Tensor
    h_aligned: Tensor
    h_final: Tensor                  # gated h_aligned (forward-identical)
    mask: np.ndarray | None          # per-row benefit decision M
    e_u: Tensor | None = None
    selection: pv.PromptSelection | None = None
    m_counts: np.ndarray | None = None
    h_text: Tensor | None = None
    h_mix: Tensor | None = None
    h_pure: Tensor | None = None
    valid_len: np.ndarray | None = None


def _batch_text_ids(state: ModelState, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Token ids of each row's most recent titles, separator-joined."""
    if state.title_ids is None:
        raise PipelineError("attach_dataset must run before the forward pass")
    sep = state.tokenizer.vocab[toylm.Tokenizer.SEP]
    rows = []
    for i in range(batch.size):
        n_valid = int(batch.prefix_mask[i].sum())
        items = batch.prefix[i, :n_valid][-state.cfg.t_text:]
        ids: list[int] = []
        for j, it in enumerate(items):
            if j:
                ids.append(sep)
            ids.extend(state.title_ids[int(it)])
        rows.append(ids[-state.cfg.l_max:])
    width = max(len(r) for r in rows)
    ids = np.zeros((batch.size, width), dtype=np.int64)
    mask = np.zeros((batch.size, width), dtype=np.float64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def forward_batch(state: ModelState, batch: Batch, training: bool,
                  fixed_mask: np.ndarray | None = None,
                  apply_mask: bool = True,
                  fixed_selection: list[np.ndarray] | None = None,
                  fixed_stopped: np.ndarray | None = None) -> ForwardTrace:
    """Run the full model on one batch and return the trace.

    ``fixed_mask`` and ``fixed_selection`` freeze the two discrete decisions
    (benefit gate, threshold selection) and ``fixed_stopped`` freezes the
    stop-gradient branch's values, so gradient checks probe a differentiable
    objective that agrees with the real one at the base point.
    """
    cfg = state.cfg
    h_rs = bb.encode_sequence(batch.prefix, batch.prefix_mask, batch.last_pos,
                              state.backbone)

    if cfg.variant == "backbone_only":
        return ForwardTrace(h_rs=h_rs, h_aligned=h_rs, h_final=h_rs, mask=None)

    text_ids, text_mask = _batch_text_ids(state, batch)
    rng = state.rng if training else None
    h_text = toylm.decoder_forward(
        toylm.embed_tokens(text_ids, state.lm), state.lm, state.adapters,
        rng, training)

    e_u = None
    if cfg.variant == "soft":
        cb_eff = pv.PromptCodebook(z=state.soft_prompt,
                                   z_share=state.codebook.z_share)
        sel = pv.PromptSelection(
            scores=Tensor(np.ones((batch.size, 1))),
            raw_cos=Tensor(np.ones((batch.size, 1))),
            selected=[np.array([0], dtype=np.int64)] * batch.size,
            m=np.ones(batch.size, dtype=np.int64),
        )
    else:
        cb_eff = state.codebook
        e_u = pv.encode_user(batch.user_idx, batch.prefix, batch.prefix_mask,
                             state.backbone.item_emb, state.user_enc)
        sel = pv.score_prompts(e_u, cb_eff)
        if fixed_selection is not None:
            sel.selected = [np.asarray(s, dtype=np.int64) for s in fixed_selection]
            sel.m = np.array([len(s) for s in sel.selected], dtype=np.int64)
        else:
            sel = pv.select_prompts(sel, cfg.theta)

    lt = text_ids.shape[1]
    max_prompt = cb_eff.n_shared + int(sel.m.max())
    pad_to = min(cfg.l_max, max_prompt + lt)
    h_l, l_mask, h_prompt, prompt_mask, valid_len = pv.assemble_prompt(
        sel, cb_eff, h_text, text_mask, pad_to=pad_to, l_max=cfg.l_max)

    h_mix = toylm.decoder_forward(h_l, state.lm, state.adapters, rng, training)

    if cfg.variant == "dec":
        counts = l_mask.sum(axis=1, keepdims=True)
        pooled = dc.mul(dc.tsum(dc.mul(h_mix, Tensor(l_mask[:, :, None])), axis=1),
                        Tensor(1.0 / counts))
        h_pure = dc.reshape(dc.matmul(pooled, state.fusion.w1_v),
                            (batch.size, 1, state.fusion.d_a))
        align_mask = np.ones((batch.size, 1))
    else:
        h_pure = fu.decouple(h_prompt, prompt_mask, h_mix, l_mask, state.fusion)
        align_mask = prompt_mask

    if cfg.variant in ("fuse_mlp", "fuse_concat"):
        strategy = "mlp" if cfg.variant == "fuse_mlp" else "concat"
        h_aligned = fu.alternative_fusion(strategy, h_rs, h_pure, align_mask,
                                          state.alt_fusion)
    else:
        h_aligned = fu.align(h_rs, h_pure, align_mask, state.fusion)

    if fixed_mask is not None:
        mask = np.asarray(fixed_mask, dtype=np.float64)
    elif cfg.variant == "con":
        mask = np.ones(batch.size)
    else:
        v_t = bb.item_embed(batch.target, state.backbone)
        mask = ct.indicator(h_aligned, h_rs, v_t)

    h_final = (ct.gradient_mask(h_aligned, mask, frozen_forward=fixed_stopped)
               if apply_mask else h_aligned)
    return ForwardTrace(
        h_rs=h_rs, h_aligned=h_aligned, h_final=h_final, mask=mask, e_u=e_u,
        selection=sel, m_counts=sel.m.copy(), h_text=h_text, h_mix=h_mix,
        h_pure=h_pure, valid_len=valid_len)


def info_nce_shared(u: Tensor, v_pos: Tensor, v_negs: Tensor, tau: float,
                    reduction: str = "mean") -> Tensor:
    """InfoNCE against one shared negative set (testing/diagnostic path)."""
    pos = dc.scale(dc.tsum(dc.mul(u, v_pos), axis=1), 1.0 / tau)
    negs = dc.scale(dc.matmul(u, dc.swapaxes(v_negs, 0, 1)), 1.0 / tau)
    logits = dc.concat([dc.reshape(pos, (u.shape[0], 1)), negs], axis=1)
    per_row = dc.sub(dc.log_sum_exp(logits, axis=-1), pos)
    return dc.tmean(per_row) if reduction == "mean" else dc.tsum(per_row)


def compute_losses(state: ModelState, trace: ForwardTrace, batch: Batch,
                   negatives_override: Tensor | None = None,
                   reduction: str = "mean") -> ct.LossBundle:
    """Assemble the four loss terms for one traced batch."""
    cfg = state.cfg
    v_targets = bb.item_embed(batch.target, state.backbone)
    if negatives_override is not None:
        l_r = info_nce_shared(trace.h_final, v_targets, negatives_override,
                              cfg.tau, reduction)
        l_aux = info_nce_shared(trace.h_rs, v_targets, negatives_override,
                                cfg.tau, reduction)
    else:
        l_r = bb.info_nce_batch(trace.h_final, v_targets, batch.neg_mask,
                                cfg.tau, reduction)
        l_aux = bb.info_nce_batch(trace.h_rs, v_targets, batch.neg_mask,
                                  cfg.tau, reduction)

    if cfg.variant in ("soft", "backbone_only"):
        l_ortho = Tensor(0.0)
        l_q = Tensor(0.0)
    else:
        l_ortho = fu.orthogonality_loss(state.codebook.z)
        l_q = pv.quantization_loss(trace.e_u, trace.selection, state.codebook)
    if cfg.variant == "backbone_only":
        l_aux = Tensor(0.0)
    return ct.total_loss(l_r, l_aux, l_ortho, l_q,
                         cfg.alpha, cfg.beta, cfg.gamma)
