"""Personalized soft-prompt selection over a learned codebook.

A user state is projected into the language-model embedding space, scored
against every codeword by cosine similarity, and codewords whose raw cosine
clears the threshold become the user's private prompts. Shared prompts are
always included, so the downstream prompt matrix is never empty.

The gate uses raw cosine rather than softmax mass: with K codewords the
softmax of values bounded in [-1, 1] cannot exceed e^2/(e^2 + K - 1), so a
threshold like 0.45 would select nothing for realistic K if applied to the
normalized scores.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import diffcore as dc
from . import toylm
from .diffcore import ParameterRegistry, Tensor

SEED_PROMPT_ENV = "PROMPTREC_SEED_PROMPTS"

SHARED_PROMPT_TEXTS = [
    "summarize the user's general shopping interests",
    "describe the user's recent behavior patterns",
]


class PromptVQError(Exception):
    pass


@dataclass
class PromptCodebook:
    z: Tensor        # [K, d_llm] private codewords
    z_share: Tensor  # [S, d_llm] always-included prompts

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def n_shared(self) -> int:
        return self.z_share.shape[0]

    def register(self, reg: ParameterRegistry) -> None:
        reg.register("codebook.z", self.z, group="codebook")
        reg.register("codebook.z_share", self.z_share, group="shared")

    def sanitize(self, rng: np.random.Generator, min_norm: float = 1e-8) -> int:
        """Re-initialize codewords whose norm collapsed; returns the count."""
        fixed = 0
        for t in (self.z, self.z_share):
            norms = np.sqrt((t.data ** 2).sum(axis=1))
            dead = norms < min_norm
            if dead.any():
                t.data[dead] = rng.normal(0.0, 0.02, (int(dead.sum()), t.shape[1]))
                fixed += int(dead.sum())
        return fixed


@dataclass
class PromptSelection:
    """Scores over the codebook plus the gated private-prompt choice."""

    scores: Tensor            # [B, K] softmax simplex rows
    raw_cos: Tensor           # [B, K]
    selected: list[np.ndarray] | None = None  # ascending indices per row
    m: np.ndarray | None = None               # [B] selected counts


class UserEncoderParams:
    """User-id embedding plus the MLP projecting into the LM space."""

    def __init__(self, n_users: int, d_user: int, d_rs: int, d_llm: int,
                 rng: np.random.Generator, d_hidden: int = 0,
                 wobble: float = 0.25):
        d_hidden = d_hidden or d_llm
        d_in = d_user + d_rs
        # user-id rows get mild scale: enough per-user jitter to keep the
        # cosine gate spread out, small enough that the prefix mean (which
        # actually reflects behavior once item embeddings train) dominates;
        # `wobble` sets how far user states scatter around the output bias
        self.user_emb = Tensor(rng.normal(0.0, 0.1, (n_users, d_user)))
        self.w1 = Tensor(rng.normal(0.0, d_in ** -0.5, (d_in, d_hidden)))
        self.b1 = Tensor(np.zeros(d_hidden))
        self.w2 = Tensor(rng.normal(0.0, wobble * d_hidden ** -0.5,
                                    (d_hidden, d_llm)))
        self.b2 = Tensor(np.zeros(d_llm))

    def named_tensors(self):
        yield "user_encoder.user_emb", self.user_emb
        yield "user_encoder.w1", self.w1
        yield "user_encoder.b1", self.b1
        yield "user_encoder.w2", self.w2
        yield "user_encoder.b2", self.b2

    def register(self, reg: ParameterRegistry) -> None:
        for name, t in self.named_tensors():
            reg.register(name, t, group="user_encoder")

    def bias_towards(self, direction: np.ndarray, scale: float = 1.0) -> None:
        """Point the output bias at a direction in codeword space.

        ``scale`` should be the typical codeword norm: putting user states on
        the same shell keeps the quantization pull rotational instead of
        letting it shrink codewords toward a much smaller user-state ball.
        The wobble projection is rescaled to match.
        """
        norm = float(np.linalg.norm(direction))
        if norm < 1e-12:
            raise PromptVQError("bias direction has zero norm")
        if scale <= 0:
            raise PromptVQError(f"scale must be positive, got {scale}")
        self.b2.data = direction / norm * scale
        self.w2.data = self.w2.data * scale


def encode_user(user_idx: np.ndarray, prefix: np.ndarray, prefix_mask: np.ndarray,
                item_emb: Tensor, enc: UserEncoderParams) -> Tensor:
    """Unified user state e_u: MLP over [user-id embedding ; masked prefix mean]."""
    if prefix_mask.sum(axis=1).min() < 1:
        raise PromptVQError("encode_user: a row has an empty prefix")
    u = dc.gather_rows(enc.user_emb, np.asarray(user_idx, dtype=np.int64))
    items = dc.gather_rows(item_emb, np.asarray(prefix, dtype=np.int64))
    masked = dc.mul(items, Tensor(prefix_mask[:, :, None]))
    counts = prefix_mask.sum(axis=1, keepdims=True)
    mean = dc.mul(dc.tsum(masked, axis=1), Tensor(1.0 / counts))
    h = dc.tanh(dc.matmul(dc.concat([u, mean], axis=1), enc.w1) + enc.b1)
    return dc.matmul(h, enc.w2) + enc.b2


def score_prompts(e_u: Tensor, cb: PromptCodebook) -> PromptSelection:
    """Cosine of e_u against every codeword, normalized to a distribution."""
    raw = dc.cosine_rows(e_u, cb.z)
    return PromptSelection(scores=dc.softmax(raw, axis=-1), raw_cos=raw)


def select_prompts(sel: PromptSelection, theta: float) -> PromptSelection:
    """Gate on raw cosine: indices with cos > theta, ascending."""
    if not -1.0 < theta < 1.0:
        raise PromptVQError(f"theta must be in (-1, 1), got {theta}")
    raw = sel.raw_cos.data
    selected = [np.flatnonzero(raw[i] > theta).astype(np.int64)
                for i in range(raw.shape[0])]
    sel.selected = selected
    sel.m = np.array([len(s) for s in selected], dtype=np.int64)
    return sel


def assemble_prompt(sel: PromptSelection, cb: PromptCodebook, h_text: Tensor,
                    text_mask: np.ndarray, pad_to: int, l_max: int):
    """Build per-row LM inputs [shared ; selected ; text] with zero padding.

    Implemented as a single row-gather from the pool
    [z_share ; z ; text rows ; one zero row], so gradients scatter back to
    every source. Text is truncated from the old end when a row would
    overflow ``pad_to``.

    Returns (h_l [B, pad_to, d], valid_mask [B, pad_to], prompt_idx
    [B, P_max], prompt_mask [B, P_max], valid_len [B]).
    """
    if sel.selected is None:
        raise PromptVQError("assemble_prompt: run select_prompts first")
    b, lt, d = h_text.shape
    s = cb.n_shared
    if pad_to > l_max:
        raise PromptVQError(f"pad_to {pad_to} exceeds l_max {l_max}")

    pool = dc.concat(
        [cb.z_share, cb.z, dc.reshape(h_text, (b * lt, d)),
         Tensor(np.zeros((1, d)))],
        axis=0,
    )
    pad_row = s + cb.size + b * lt

    idx = np.full((b, pad_to), pad_row, dtype=np.int64)
    valid_mask = np.zeros((b, pad_to), dtype=np.float64)
    p_max = max(s + len(rows) for rows in sel.selected)
    prompt_idx = np.full((b, p_max), pad_row, dtype=np.int64)
    prompt_mask = np.zeros((b, p_max), dtype=np.float64)
    valid_len = np.zeros(b, dtype=np.int64)

    for i, rows in enumerate(sel.selected):
        n_prompt = s + len(rows)
        if n_prompt > pad_to:
            raise PromptVQError(
                f"row {i}: {n_prompt} prompt rows overflow the budget {pad_to}"
            )
        text_positions = np.flatnonzero(text_mask[i] > 0)
        budget = pad_to - n_prompt
        if len(text_positions) > budget:
            text_positions = text_positions[-budget:]  # keep the most recent
        row_idx = np.concatenate([
            np.arange(s),
            s + rows,
            s + cb.size + i * lt + text_positions,
        ])
        idx[i, : len(row_idx)] = row_idx
        valid_mask[i, : len(row_idx)] = 1.0
        valid_len[i] = len(row_idx)
        prompt_idx[i, :n_prompt] = row_idx[:n_prompt]
        prompt_mask[i, :n_prompt] = 1.0

    h_l = dc.gather_rows(pool, idx)
    h_prompt = dc.gather_rows(pool, prompt_idx)
    return h_l, valid_mask, h_prompt, prompt_mask, valid_len


def quantization_loss(e_u: Tensor, sel: PromptSelection, cb: PromptCodebook) -> Tensor:
    """Sum of squared distances between e_u and each selected codeword,
    averaged over batch rows; zero when nothing is selected.

    Gradient flows symmetrically into the user encoding and the codewords.
    """
    if sel.selected is None:
        raise PromptVQError("quantization_loss: run select_prompts first")
    b = e_u.shape[0]
    pair_rows = np.concatenate(
        [np.full(len(rows), i, dtype=np.int64) for i, rows in enumerate(sel.selected)]
    ) if any(len(r) for r in sel.selected) else np.zeros(0, dtype=np.int64)
    if pair_rows.size == 0:
        return Tensor(0.0)
    pair_codes = np.concatenate([rows for rows in sel.selected if len(rows)])
    diff = dc.sub(dc.gather_rows(e_u, pair_rows), dc.gather_rows(cb.z, pair_codes))
    return dc.scale(dc.tsum(dc.mul(diff, diff)), 1.0 / b)


def load_seed_texts(path: str | None = None) -> list[str]:
    """Seed prompt templates: explicit path, else $PROMPTREC_SEED_PROMPTS,
    else the bundled default."""
    if path is None:
        path = os.environ.get(SEED_PROMPT_ENV)
    if path is None:
        ref = resources.files("promptrec").joinpath("data/seed_prompts.txt")
        text = ref.read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    texts = [line.strip() for line in text.splitlines() if line.strip()]
    if not texts:
        raise PromptVQError("seed prompt file is empty")
    return texts


def init_codebook(k: int, n_shared: int, tokenizer: toylm.Tokenizer,
                  lm_params: toylm.LMParams, rng: np.random.Generator,
                  seed_path: str | None = None,
                  jitter: float = 0.02) -> PromptCodebook:
    """Codewords from frozen encodings of the seed texts; if K exceeds the
    seed count, extra codewords reuse seeds plus Gaussian jitter.

    Transformer sentence encodings share one dominant direction, which would
    start every pairwise cosine near 1: the threshold gate would then select
    all-or-nothing and the quantization pull would collapse the codebook (a
    stationary point of the orthogonality penalty). The private codewords
    therefore have the common mean removed, with norms preserved, so the
    codebook starts with genuine angular spread. Shared prompts keep the raw
    encodings; they bypass the gate.
    """
    texts = load_seed_texts(seed_path)
    with dc.no_grad():
        enc = toylm.encode_text_for_init(texts, tokenizer, lm_params).data
        shared = toylm.encode_text_for_init(
            SHARED_PROMPT_TEXTS[:n_shared], tokenizer, lm_params).data
    if n_shared > len(SHARED_PROMPT_TEXTS):
        extra = rng.normal(0.0, 0.02, (n_shared - len(SHARED_PROMPT_TEXTS), enc.shape[1]))
        shared = np.concatenate([shared, extra], axis=0)
    rows = []
    for i in range(k):
        base = enc[i % len(texts)]
        if i < len(texts):
            rows.append(base.copy())
        else:
            rows.append(base + rng.normal(0.0, jitter, base.shape))
    z = np.stack(rows)
    centered = z - z.mean(axis=0)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    z = centered / norms * np.linalg.norm(z, axis=1, keepdims=True)
    cb = PromptCodebook(z=Tensor(z), z_share=Tensor(shared))
    cb.sanitize(rng)
    return cb
