"""Frozen decoder-only toy language model with LoRA adapters.

The base model is a small causal transformer whose parameters are frozen
after construction (optionally after a short next-token warm-up on the title
corpus). Trainability is confined to low-rank adapters on the query and value
projections of every layer. Soft-prompt rows enter the decoder as
pre-embedded inputs, bypassing the token embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterRegistry, Tensor


class ToyLMError(Exception):
    pass


# ---------------------------------------------------------------------------
# tokenizer


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary built from the catalog."""

    UNK = "<unk>"
    SEP = "<sep>"

    def __init__(self, vocab: dict[str, int]):
        if self.UNK not in vocab or self.SEP not in vocab:
            raise ToyLMError("vocabulary must contain <unk> and <sep>")
        self.vocab = dict(vocab)

    @classmethod
    def build(cls, texts: list[str]) -> "Tokenizer":
        tokens = sorted({tok for t in texts for tok in t.split()})
        vocab = {cls.UNK: 0, cls.SEP: 1}
        for tok in tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
        return cls(vocab)

    @property
    def size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        unk = self.vocab[self.UNK]
        return [self.vocab.get(tok, unk) for tok in text.split()]

    def encode_joined(self, texts: list[str]) -> list[int]:
        """Encode several texts joined by the separator token."""
        sep = self.vocab[self.SEP]
        ids: list[int] = []
        for i, t in enumerate(texts):
            if i:
                ids.append(sep)
            ids.extend(self.encode(t))
        return ids


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass
class LMConfig:
    vocab_size: int
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 2
    l_max: int = 128
    d_ff: int = 0  # 0 -> 4 * d_llm

    def __post_init__(self):
        if self.d_llm < 8:
            raise ToyLMError(f"d_llm must be >= 8, got {self.d_llm}")
        if self.d_llm % self.n_heads:
            raise ToyLMError("d_llm must be divisible by n_heads")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_llm


@dataclass
class LoRAAdapter:
    """Low-rank additive update for one frozen projection matrix."""

    A: Tensor  # [d, r]
    B: Tensor  # [r, d]
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LMParams:
    """Base transformer weights; always registered frozen."""

    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        d, ff = cfg.d_llm, cfg.d_ff
        self.cfg = cfg
        self.token_emb = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, d)))
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.l_max, d)))
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append({
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
        yield "lm.token_emb", self.token_emb
        yield "lm.pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for key, t in layer.items():
                yield f"lm.layer{i}.{key}", t
        yield "lm.lnf_g", self.lnf_g
        yield "lm.lnf_b", self.lnf_b

    def register(self, reg: ParameterRegistry, frozen: bool = True) -> None:
        for name, t in self.named_tensors():
            reg.register(name, t, group="lm_base", frozen=frozen)


def make_adapters(cfg: LMConfig, rank: int, alpha: float, dropout: float,
                  rng: np.random.Generator) -> dict[str, LoRAAdapter]:
    """One adapter per (layer, q|v) projection; B starts at zero so the
    initial update is exactly zero."""
    if rank < 1:
        raise ToyLMError(f"LoRA rank must be >= 1, got {rank}")
    if rank > cfg.d_llm // 2:
        raise ToyLMError(f"LoRA rank {rank} too large for d_llm {cfg.d_llm}")
    adapters = {}
    for i in range(cfg.n_layers):
        for proj in ("q", "v"):
            adapters[f"layer{i}.{proj}"] = LoRAAdapter(
                A=Tensor(rng.normal(0.0, 0.02, (cfg.d_llm, rank))),
                B=Tensor(np.zeros((rank, cfg.d_llm))),
                rank=rank, alpha=alpha, dropout=dropout,
            )
    return adapters


def register_adapters(adapters: dict[str, LoRAAdapter], reg: ParameterRegistry) -> None:
    for key, ad in adapters.items():
        reg.register(f"lora.{key}.A", ad.A, group="lora")
        reg.register(f"lora.{key}.B", ad.B, group="lora")


def lora_apply(w: Tensor, adapter: LoRAAdapter) -> Tensor:
    """Materialize the adapted matrix W + (alpha/r) A B.

    The base matrix never receives gradient; A and B do.
    """
    if w.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise dc.ShapeError("lora_apply", w.shape, adapter.A.shape, adapter.B.shape)
    delta = dc.scale(dc.matmul(adapter.A, adapter.B), adapter.scaling)
    return dc.add(dc.stop_gradient(w), delta)


# ---------------------------------------------------------------------------
# decoder forward


def _project(x: Tensor, w: Tensor, adapter: LoRAAdapter | None,
             rng: np.random.Generator | None, training: bool) -> Tensor:
    out = dc.matmul(x, w)
    if adapter is not None:
        inp = dc.dropout(x, adapter.dropout, rng, training)
        delta = dc.matmul(dc.matmul(inp, adapter.A), adapter.B)
        out = dc.add(out, dc.scale(delta, adapter.scaling))
    return out


def _causal_bias(length: int) -> np.ndarray:
    bias = np.triu(np.full((length, length), -1e30), k=1)
    return bias[None, None, :, :]


def decoder_forward(h_in: Tensor, params: LMParams,
                    adapters: dict[str, LoRAAdapter] | None = None,
                    rng: np.random.Generator | None = None,
                    training: bool = False) -> Tensor:
    """Run the causal decoder over pre-embedded inputs [B, L, d].

    Positions are added here; right-padding is harmless because causal
    masking keeps padded key positions invisible to every valid query.
    """
    cfg = params.cfg
    b, length, d = h_in.shape
    if length > cfg.l_max:
        raise ToyLMError(f"sequence length {length} exceeds l_max {cfg.l_max}")
    nh, dh = cfg.n_heads, d // cfg.n_heads

    pos = dc.gather_rows(params.pos_emb, np.arange(length))
    x = dc.add(h_in, dc.reshape(pos, (1, length, d)))
    bias = Tensor(_causal_bias(length))

    for i, layer in enumerate(params.layers):
        h = dc.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
        ad_q = adapters.get(f"layer{i}.q") if adapters else None
        ad_v = adapters.get(f"layer{i}.v") if adapters else None
        q = _project(h, layer["w_q"], ad_q, rng, training)
        k = dc.matmul(h, layer["w_k"])
        v = _project(h, layer["w_v"], ad_v, rng, training)

        def heads(t):
            return dc.swapaxes(dc.reshape(t, (b, length, nh, dh)), 1, 2)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = dc.scale(dc.matmul(qh, dc.swapaxes(kh, -1, -2)), dh ** -0.5)
        attn = dc.softmax(dc.add(scores, bias), axis=-1)
        ctx = dc.reshape(dc.swapaxes(dc.matmul(attn, vh), 1, 2), (b, length, d))
        x = dc.add(x, dc.matmul(ctx, layer["w_o"]))

        h2 = dc.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
        ff = dc.matmul(h2, layer["w_ff1"]) + layer["b_ff1"]
        ff = dc.matmul(dc.tanh(ff), layer["w_ff2"]) + layer["b_ff2"]
        x = dc.add(x, ff)

    return dc.layer_norm(x, params.lnf_g, params.lnf_b)


def embed_tokens(ids: np.ndarray, params: LMParams) -> Tensor:
    return dc.gather_rows(params.token_emb, np.asarray(ids, dtype=np.int64))


def encode_titles_batch(title_lists: list[list[str]], tokenizer: Tokenizer,
                        params: LMParams, t_text: int,
                        adapters: dict[str, LoRAAdapter] | None = None,
                        rng: np.random.Generator | None = None,
                        training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Encode each row's most recent ``t_text`` titles through the decoder.

    Returns final-layer hidden states [B, Lt, d] plus a validity mask
    [B, Lt]; rows are right-padded with token 0, which the mask excludes.
    """
    ids_rows = []
    for titles in title_lists:
        if not titles:
            raise ToyLMError("encode_titles: empty title list")
        ids = tokenizer.encode_joined(titles[-t_text:])
        if not ids:
            raise ToyLMError("encode_titles: tokenization produced zero tokens")
        ids_rows.append(ids[-params.cfg.l_max:])
    width = max(len(r) for r in ids_rows)
    ids = np.zeros((len(ids_rows), width), dtype=np.int64)
    mask = np.zeros((len(ids_rows), width), dtype=np.float64)
    for i, row in enumerate(ids_rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    h = decoder_forward(embed_tokens(ids, params), params, adapters, rng, training)
    return h, mask


def encode_titles(titles: list[str], tokenizer: Tokenizer, params: LMParams,
                  t_text: int = 10,
                  adapters: dict[str, LoRAAdapter] | None = None) -> Tensor:
    """Single-user title encoding: per-token hidden states [L_text, d]."""
    h, mask = encode_titles_batch([titles], tokenizer, params, t_text, adapters)
    n_valid = int(mask[0].sum())
    flat = dc.reshape(h, (h.shape[1], h.shape[2]))
    if n_valid == h.shape[1]:
        return flat
    return dc.gather_rows(flat, np.arange(n_valid))


def forward_with_prefix(h_l: Tensor, params: LMParams,
                        adapters: dict[str, LoRAAdapter] | None = None,
                        rng: np.random.Generator | None = None,
                        training: bool = False) -> Tensor:
    """Decode a continuous input sequence (soft prompts + text states).

    Gradients reach only the prompt rows and the LoRA parameters; the base
    weights are frozen at registration time.
    """
    if h_l.ndim == 2:
        h_l = dc.reshape(h_l, (1,) + h_l.shape)
    return decoder_forward(h_l, params, adapters, rng, training)


def encode_text_for_init(texts: list[str], tokenizer: Tokenizer,
                         params: LMParams) -> Tensor:
    """Mean-pooled frozen encodings of each text, for codebook seeding."""
    if not texts:
        raise ToyLMError("encode_text_for_init: no texts")
    for t in texts:
        if not t.split():
            raise ToyLMError(f"encode_text_for_init: empty text {t!r}")
    h, mask = encode_titles_batch([[t] for t in texts], tokenizer, params,
                                  t_text=1)
    counts = mask.sum(axis=1, keepdims=True)
    pooled = dc.tsum(dc.mul(h, Tensor(mask[:, :, None])), axis=1)
    return dc.mul(pooled, Tensor(1.0 / counts))


# ---------------------------------------------------------------------------
# optional warm-up: next-token prediction on the title corpus


def warmup_pretrain(params: LMParams, tokenizer: Tokenizer, titles: list[str],
                    steps: int, lr: float, rng: np.random.Generator,
                    batch_size: int = 16, chunk: int = 24) -> list[float]:
    """Train the base LM briefly with next-token prediction, then the caller
    freezes it. Plain SGD; returns the loss trajectory."""
    stream: list[int] = []
    sep = tokenizer.vocab[Tokenizer.SEP]
    for t in titles:
        stream.extend(tokenizer.encode(t))
        stream.append(sep)
    if len(stream) < chunk + 1:
        raise ToyLMError("warmup_pretrain: title corpus too small")

    tensors = [t for _, t in params.named_tensors()]
    for t in tensors:
        t.requires_grad = True
    losses = []
    for _ in range(steps):
        starts = rng.integers(0, len(stream) - chunk - 1, size=batch_size)
        ids = np.stack([stream[s: s + chunk] for s in starts])
        targets = np.stack([stream[s + 1: s + chunk + 1] for s in starts])
        h = decoder_forward(embed_tokens(ids, params), params)
        logits = dc.matmul(h, dc.swapaxes(params.token_emb, 0, 1))
        flat = dc.reshape(logits, (batch_size * chunk, tokenizer.size))
        lse = dc.log_sum_exp(flat, axis=-1)
        onehot = np.zeros((batch_size * chunk, tokenizer.size))
        onehot[np.arange(batch_size * chunk), targets.ravel()] = 1.0
        tgt_logit = dc.tsum(dc.mul(flat, Tensor(onehot)), axis=1)
        loss = dc.tmean(dc.sub(lse, tgt_logit))
        for t in tensors:
            t.grad = None
        loss.backward()
        for t in tensors:
            if t.grad is not None:
                t.data = t.data - lr * t.grad
        losses.append(loss.item())
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    return losses
