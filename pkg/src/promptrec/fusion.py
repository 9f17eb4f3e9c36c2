"""Decoupling of mixed LM states into per-prompt knowledge, the codebook
orthogonality penalty, and semantic-behavioral alignment.

Both attentions are single-head scaled dot products by default. The
alignment step builds one key/value row per knowledge fragment plus a pooled
row, concatenates each with the behavioral state, and passes them through a
shared MLP before attending; an explicit output projection returns to the
behavioral dimension so the result is directly comparable with item
embeddings.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterRegistry, Tensor


class FusionError(Exception):
    pass


class FusionParams:
    """Projections for both cross attentions plus the row MLP."""

    def __init__(self, d_llm: int, d_rs: int, rng: np.random.Generator,
                 d_a: int = 0):
        d_a = d_a or d_rs
        self.d_a = d_a
        self.w1_q = Tensor(rng.normal(0.0, d_llm ** -0.5, (d_llm, d_a)))
        self.w1_k = Tensor(rng.normal(0.0, d_llm ** -0.5, (d_llm, d_a)))
        self.w1_v = Tensor(rng.normal(0.0, d_llm ** -0.5, (d_llm, d_a)))
        d_in = d_rs + d_a
        self.mlp_w1 = Tensor(rng.normal(0.0, d_in ** -0.5, (d_in, d_a)))
        self.mlp_b1 = Tensor(np.zeros(d_a))
        self.mlp_w2 = Tensor(rng.normal(0.0, d_a ** -0.5, (d_a, d_a)))
        self.mlp_b2 = Tensor(np.zeros(d_a))
        self.w2_q = Tensor(rng.normal(0.0, d_rs ** -0.5, (d_rs, d_a)))
        self.w2_k = Tensor(rng.normal(0.0, d_a ** -0.5, (d_a, d_a)))
        self.w2_v = Tensor(rng.normal(0.0, d_a ** -0.5, (d_a, d_a)))
        self.w_out = Tensor(rng.normal(0.0, d_a ** -0.5, (d_a, d_rs)))

    def named_tensors(self):
        for key in ("w1_q", "w1_k", "w1_v", "mlp_w1", "mlp_b1", "mlp_w2",
                    "mlp_b2", "w2_q", "w2_k", "w2_v", "w_out"):
            yield f"fusion.{key}", getattr(self, key)

    def register(self, reg: ParameterRegistry) -> None:
        for name, t in self.named_tensors():
            reg.register(name, t, group="fusion")


class AltFusionParams:
    """Heads for the ablation strategies replacing the alignment attention."""

    def __init__(self, d_llm_pure: int, d_rs: int, rng: np.random.Generator):
        d_in = d_rs + d_llm_pure
        self.lin_w = Tensor(rng.normal(0.0, d_in ** -0.5, (d_in, d_rs)))
        self.lin_b = Tensor(np.zeros(d_rs))
        self.mlp_w1 = Tensor(rng.normal(0.0, d_in ** -0.5, (d_in, d_rs)))
        self.mlp_b1 = Tensor(np.zeros(d_rs))
        self.mlp_w2 = Tensor(rng.normal(0.0, d_rs ** -0.5, (d_rs, d_rs)))
        self.mlp_b2 = Tensor(np.zeros(d_rs))

    def register(self, reg: ParameterRegistry) -> None:
        for key in ("lin_w", "lin_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            reg.register(f"fusion.alt.{key}", getattr(self, key), group="fusion")


def decouple(h_prompt: Tensor, prompt_mask: np.ndarray, h_mix: Tensor,
             mix_mask: np.ndarray, p: FusionParams) -> Tensor:
    """Per-prompt knowledge fragments via cross attention.

    Queries are the (pre-LM) prompt rows; keys and values are the LM's mixed
    states, with invalid positions masked out of the softmax.

    Shapes: h_prompt [B, P, d_llm], h_mix [B, L, d_llm] -> [B, P, d_a].
    """
    if np.asarray(mix_mask).sum(axis=-1).min() < 1:
        raise FusionError("decouple: a row has zero valid mixed-state positions")
    q = dc.matmul(h_prompt, p.w1_q)
    k = dc.matmul(h_mix, p.w1_k)
    v = dc.matmul(h_mix, p.w1_v)
    scores = dc.scale(dc.matmul(q, dc.swapaxes(k, -1, -2)), p.d_a ** -0.5)
    attn = dc.masked_softmax(scores, np.asarray(mix_mask)[:, None, :], axis=-1)
    out = dc.matmul(attn, v)
    # zero fragments for padded prompt rows so nothing downstream reads them
    return dc.mul(out, Tensor(np.asarray(prompt_mask)[:, :, None]))


def orthogonality_loss(z: Tensor) -> Tensor:
    """Sum of absolute pairwise cosines over the private codewords.

    Minimizing the absolute value pushes prompts toward mutual orthogonality;
    penalizing the signed value instead would reward anti-alignment, which
    caps how small the pairwise overlap can get for more than two prompts.
    """
    k = z.shape[0]
    if k < 2:
        return Tensor(0.0)
    cos = dc.cosine_rows(z, z)
    rows, cols = np.triu_indices(k, 1)
    pairs = dc.gather_rows(dc.reshape(cos, (k * k, 1)), rows * k + cols)
    return dc.tsum(dc.absval(pairs))


def align(h_rs: Tensor, h_pure: Tensor, prompt_mask: np.ndarray,
          p: FusionParams) -> Tensor:
    """Fuse behavioral and semantic states into h_aligned [B, d_rs].

    Key/value rows: [h_RS ; pooled h_pure] plus one [h_RS ; fragment] row per
    valid prompt, each through the shared MLP; the behavioral state queries
    them and the attended value is projected back to d_rs.
    """
    b, p_rows, d_a = h_pure.shape
    mask = np.asarray(prompt_mask, dtype=np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    if counts.min() < 1:
        raise FusionError("align: a row has no knowledge fragments")
    pooled = dc.mul(dc.tsum(dc.mul(h_pure, Tensor(mask[:, :, None])), axis=1),
                    Tensor(1.0 / counts))                       # [B, d_a]
    h_rs_rows = dc.reshape(h_rs, (b, 1, h_rs.shape[1]))
    h_rs_tiled = dc.mul(h_rs_rows, Tensor(np.ones((1, p_rows + 1, 1))))
    sem = dc.concat([dc.reshape(pooled, (b, 1, d_a)), h_pure], axis=1)
    rows = dc.concat([h_rs_tiled, sem], axis=2)                  # [B, P+1, d_rs+d_a]
    h1 = dc.tanh(dc.matmul(rows, p.mlp_w1) + p.mlp_b1)
    h_concat = dc.matmul(h1, p.mlp_w2) + p.mlp_b2                # [B, P+1, d_a]

    q = dc.reshape(dc.matmul(h_rs, p.w2_q), (b, 1, d_a))
    k = dc.matmul(h_concat, p.w2_k)
    v = dc.matmul(h_concat, p.w2_v)
    scores = dc.scale(dc.matmul(q, dc.swapaxes(k, -1, -2)), d_a ** -0.5)
    kv_mask = np.concatenate([np.ones((b, 1)), mask], axis=1)[:, None, :]
    attn = dc.masked_softmax(scores, kv_mask, axis=-1)
    ctx = dc.reshape(dc.matmul(attn, v), (b, d_a))
    return dc.matmul(ctx, p.w_out)


def alternative_fusion(strategy: str, h_rs: Tensor, h_pure: Tensor,
                       prompt_mask: np.ndarray, p: AltFusionParams) -> Tensor:
    """Ablation fusion heads: plain concatenation or a two-layer MLP."""
    mask = np.asarray(prompt_mask, dtype=np.float64)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    pooled = dc.mul(dc.tsum(dc.mul(h_pure, Tensor(mask[:, :, None])), axis=1),
                    Tensor(1.0 / counts))
    x = dc.concat([h_rs, pooled], axis=1)
    if strategy == "concat":
        return dc.matmul(x, p.lin_w) + p.lin_b
    if strategy == "mlp":
        h = dc.tanh(dc.matmul(x, p.mlp_w1) + p.mlp_b1)
        return dc.matmul(h, p.mlp_w2) + p.mlp_b2
    raise FusionError(f"unknown fusion strategy {strategy!r}")
