"""Causal self-attentive sequence encoder and the InfoNCE training loss.

The encoder follows the single-direction next-item convention: each batch row
is a left-aligned item prefix and the user state is read at the last valid
position. Logits in the contrastive loss are raw dot products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterRegistry, Tensor


class BackboneError(Exception):
    pass


@dataclass
class BackboneConfig:
    n_items: int
    d_rs: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    t_max: int = 50
    d_ff: int = 0  # 0 -> 4 * d_rs

    def __post_init__(self):
        if self.d_rs % self.n_heads:
            raise BackboneError("d_rs must be divisible by n_heads")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_rs


class BackboneParams:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d, ff = cfg.d_rs, cfg.d_ff
        self.cfg = cfg
        self.item_emb = Tensor(rng.normal(0.0, 0.02, (cfg.n_items, d)))
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.t_max, d)))
        self.blocks = []
        for _ in range(cfg.n_blocks):
            self.blocks.append({
                "w_q": Tensor(rng.normal(0.0, d ** -0.5, (d, d))),
                "w_k": Tensor(rng.normal(0.0, d ** -0.5, (d, d))),
                "w_v": Tensor(rng.normal(0.0, d ** -0.5, (d, d))),
                "w_o": Tensor(rng.normal(0.0, d ** -0.5, (d, d))),
                "ln1_g": Tensor(np.ones(d)), "ln1_b": Tensor(np.zeros(d)),
                "w_ff1": Tensor(rng.normal(0.0, d ** -0.5, (d, ff))),
                "b_ff1": Tensor(np.zeros(ff)),
                "w_ff2": Tensor(rng.normal(0.0, ff ** -0.5, (ff, d))),
                "b_ff2": Tensor(np.zeros(d)),
                "ln2_g": Tensor(np.ones(d)), "ln2_b": Tensor(np.zeros(d)),
            })
        self.lnf_g = Tensor(np.ones(d))
        self.lnf_b = Tensor(np.zeros(d))

    def named_tensors(self):
        yield "backbone.item_emb", self.item_emb
        yield "backbone.pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            for key, t in blk.items():
                yield f"backbone.block{i}.{key}", t
        yield "backbone.lnf_g", self.lnf_g
        yield "backbone.lnf_b", self.lnf_b

    def register(self, reg: ParameterRegistry) -> None:
        for name, t in self.named_tensors():
            reg.register(name, t, group="backbone")


def item_embed(indices, params: BackboneParams) -> Tensor:
    """Rows of the item embedding table for the given dense indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= params.cfg.n_items):
        raise BackboneError(
            f"item index out of range [0, {params.cfg.n_items}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    return dc.gather_rows(params.item_emb, idx)


def encode_sequence(prefix: np.ndarray, prefix_mask: np.ndarray,
                    last_pos: np.ndarray, params: BackboneParams) -> Tensor:
    """Behavioral state h_RS per row, read at the last valid position.

    Padding must be on the right; causal masking then guarantees the output
    at the last valid position never attends a padded slot.
    """
    if prefix_mask.sum(axis=1).min() < 1:
        raise BackboneError("encode_sequence: a row is entirely padding")
    cfg = params.cfg
    b, length = prefix.shape
    if length > cfg.t_max:
        raise BackboneError(f"prefix length {length} exceeds t_max {cfg.t_max}")
    nh, dh = cfg.n_heads, cfg.d_rs // cfg.n_heads

    emb = item_embed(prefix, params)
    pos = dc.gather_rows(params.pos_emb, np.arange(length))
    x = dc.add(emb, dc.reshape(pos, (1, length, cfg.d_rs)))
    # zero padded rows so their content cannot leak through value mixing
    x = dc.mul(x, Tensor(prefix_mask[:, :, None]))
    bias = Tensor(np.triu(np.full((length, length), -1e30), k=1)[None, None])

    for blk in params.blocks:
        h = dc.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        q = dc.matmul(h, blk["w_q"])
        k = dc.matmul(h, blk["w_k"])
        v = dc.matmul(h, blk["w_v"])

        def heads(t):
            return dc.swapaxes(dc.reshape(t, (b, length, nh, dh)), 1, 2)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = dc.scale(dc.matmul(qh, dc.swapaxes(kh, -1, -2)), dh ** -0.5)
        attn = dc.softmax(dc.add(scores, bias), axis=-1)
        ctx = dc.reshape(dc.swapaxes(dc.matmul(attn, vh), 1, 2), (b, length, cfg.d_rs))
        x = dc.add(x, dc.matmul(ctx, blk["w_o"]))

        h2 = dc.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
        ff = dc.matmul(h2, blk["w_ff1"]) + blk["b_ff1"]
        ff = dc.matmul(dc.tanh(ff), blk["w_ff2"]) + blk["b_ff2"]
        x = dc.add(x, ff)

    x = dc.layer_norm(x, params.lnf_g, params.lnf_b)
    return dc.select_positions(x, np.asarray(last_pos, dtype=np.int64))


def info_nce(u: Tensor, v_pos: Tensor, v_negs: Tensor, tau: float) -> Tensor:
    """Contrastive loss for one row: -log softmax of the positive logit.

    Logits are raw dot products scaled by 1/tau.
    """
    if tau <= 0:
        raise BackboneError(f"temperature must be positive, got {tau}")
    if v_negs.ndim != 2 or v_negs.shape[0] < 1:
        raise BackboneError("info_nce: need at least one negative row")
    u2 = dc.reshape(u, (1, -1)) if u.ndim == 1 else u
    vp = dc.reshape(v_pos, (1, -1)) if v_pos.ndim == 1 else v_pos
    pos = dc.scale(dc.tsum(dc.mul(u2, vp), axis=1), 1.0 / tau)       # [1]
    negs = dc.scale(dc.matmul(u2, dc.swapaxes(v_negs, 0, 1)), 1.0 / tau)  # [1, N]
    logits = dc.concat([dc.reshape(pos, (1, 1)), negs], axis=1)
    return dc.sub(dc.reshape(dc.log_sum_exp(logits, axis=-1), ()), dc.reshape(pos, ()))


def info_nce_batch(u: Tensor, v_targets: Tensor, neg_mask: np.ndarray,
                   tau: float, reduction: str = "mean") -> Tensor:
    """In-batch InfoNCE: row i's positive is v_targets[i], its negatives are
    the other rows' targets where ``neg_mask`` permits.

    The whole batch reduces to one B x B logit matrix; masked-out entries get
    a -1e30 bias and vanish from the softmax.
    """
    if tau <= 0:
        raise BackboneError(f"temperature must be positive, got {tau}")
    b = u.shape[0]
    if neg_mask.shape != (b, b):
        raise dc.ShapeError("info_nce_batch", u.shape, neg_mask.shape)
    if b >= 2 and not np.all(neg_mask.sum(axis=1) >= 1):
        raise BackboneError("info_nce_batch: a row has an empty negative set")
    logits = dc.scale(dc.matmul(u, dc.swapaxes(v_targets, 0, 1)), 1.0 / tau)
    keep = neg_mask.copy()
    np.fill_diagonal(keep, 1.0)  # own target is the positive
    bias = np.where(keep > 0.0, 0.0, -1e30)
    lse = dc.log_sum_exp(dc.add(logits, Tensor(bias)), axis=-1)     # [B]
    pos = dc.scale(dc.tsum(dc.mul(u, v_targets), axis=1), 1.0 / tau)  # [B]
    per_row = dc.sub(lse, pos)
    if reduction == "mean":
        return dc.tmean(per_row)
    if reduction == "sum":
        return dc.tsum(per_row)
    if reduction == "none":
        return per_row
    raise BackboneError(f"unknown reduction {reduction!r}")
