"""Interaction data: ingestion, filtering, leave-one-out splits, batching,
and a synthetic generator whose category signal is readable from item titles.

File formats:
  interactions: UTF-8 TSV, one event per line `user_id\\titem_id\\ttimestamp`,
    `#`-prefixed lines ignored.
  catalog: UTF-8 JSON lines, one object per line with string fields
    `item_id`, `title`, `category`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

MISSING_TITLE = "unknown-item"


class CorpusError(Exception):
    """Malformed input files or contract violations in dataset operations."""


@dataclass
class ItemMeta:
    item_id: str
    title: str
    category: str
    dense_index: int


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences plus the item catalog.

    Sequences store dense item indices. After ``leave_one_out_split`` the last
    item of each sequence is the test target and the second-to-last the
    validation target; everything before is the training prefix.
    """

    user_ids: list[str]
    sequences: list[list[int]]          # dense item indices, timestamp order
    timestamps: list[list[int]]
    catalog: list[ItemMeta]
    split_done: bool = False
    user_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def titles(self) -> list[str]:
        return [m.title for m in self.catalog]

    def train_part(self, u: int) -> list[int]:
        self._require_split()
        return self.sequences[u][:-2]

    def valid_item(self, u: int) -> int:
        self._require_split()
        return self.sequences[u][-2]

    def test_item(self, u: int) -> int:
        self._require_split()
        return self.sequences[u][-1]

    def _require_split(self):
        if not self.split_done:
            raise CorpusError("dataset has not been split; call leave_one_out_split first")

    def fingerprint(self) -> str:
        """Stable hex digest of the catalog, for checkpoint/dataset pairing."""
        import hashlib

        h = hashlib.sha256()
        for m in self.catalog:
            h.update(f"{m.item_id}\x00{m.title}\x00{m.category}\x01".encode())
        h.update(str(self.n_users).encode())
        return h.hexdigest()[:16]


@dataclass
class Batch:
    """Training rows: (prefix, next-item) pairs with in-batch negatives.

    ``neg_mask[i, j]`` is 1 when row j's target is a usable negative for row
    i, i.e. j != i and the two targets differ.
    """

    user_idx: np.ndarray     # [B] dense user indices
    prefix: np.ndarray       # [B, T] dense item indices, 0-filled past length
    prefix_mask: np.ndarray  # [B, T] 1.0 at valid positions
    last_pos: np.ndarray     # [B] index of last valid position
    target: np.ndarray       # [B] dense item index
    neg_mask: np.ndarray     # [B, B]

    @property
    def size(self) -> int:
        return len(self.target)


# ---------------------------------------------------------------------------
# ingestion


def _read_catalog(path: str) -> list[ItemMeta]:
    catalog: list[ItemMeta] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            try:
                item_id, title, category = obj["item_id"], obj["title"], obj["category"]
            except (KeyError, TypeError):
                raise CorpusError(
                    f"{path}:{lineno}: expected object with item_id/title/category"
                ) from None
            if item_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            if not str(title).strip():
                title = MISSING_TITLE
            seen[item_id] = len(catalog)
            catalog.append(ItemMeta(str(item_id), str(title), str(category), len(catalog)))
    return catalog


def ingest(interactions_path: str, catalog_path: str) -> InteractionDataset:
    """Load interaction and catalog files into a dataset.

    Sequences are sorted by timestamp with ties broken by input file order.
    Duplicate (user, item, timestamp) rows are kept as distinct events.
    """
    catalog = _read_catalog(catalog_path)
    by_item = {m.item_id: m.dense_index for m in catalog}

    events: dict[str, list[tuple[int, int, int]]] = {}
    user_order: list[str] = []
    with open(interactions_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#"):
                continue
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(
                    f"{interactions_path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            user_id, item_id, ts_raw = parts
            try:
                ts = int(ts_raw)
            except ValueError:
                raise CorpusError(
                    f"{interactions_path}:{lineno}: timestamp {ts_raw!r} is not an integer"
                ) from None
            if item_id not in by_item:
                raise CorpusError(
                    f"{interactions_path}:{lineno}: unknown item_id {item_id!r}"
                )
            if user_id not in events:
                events[user_id] = []
                user_order.append(user_id)
            events[user_id].append((ts, lineno, by_item[item_id]))

    sequences, timestamps = [], []
    for u in user_order:
        evs = sorted(events[u], key=lambda e: e[0])  # stable: file order breaks ties
        sequences.append([e[2] for e in evs])
        timestamps.append([e[0] for e in evs])
    return InteractionDataset(user_order, sequences, timestamps, catalog)


def save_dataset(d: InteractionDataset, out_dir: str) -> tuple[str, str]:
    """Write the dataset back out in the ingest formats; returns the two paths."""
    os.makedirs(out_dir, exist_ok=True)
    inter_path = os.path.join(out_dir, "interactions.tsv")
    cat_path = os.path.join(out_dir, "catalog.jsonl")
    with open(cat_path, "w", encoding="utf-8") as fh:
        for m in d.catalog:
            fh.write(json.dumps(
                {"item_id": m.item_id, "title": m.title, "category": m.category},
                sort_keys=True) + "\n")
    with open(inter_path, "w", encoding="utf-8") as fh:
        for u, (seq, tss) in enumerate(zip(d.sequences, d.timestamps)):
            for idx, ts in zip(seq, tss):
                fh.write(f"{d.user_ids[u]}\t{d.catalog[idx].item_id}\t{ts}\n")
    return inter_path, cat_path


# ---------------------------------------------------------------------------
# filtering and splitting


def filter_min_interactions(d: InteractionDataset, min_n: int = 5) -> InteractionDataset:
    """Drop users with fewer than ``min_n`` events, then drop orphaned items
    and recompact dense indices."""
    if min_n < 1:
        raise CorpusError(f"min_n must be >= 1, got {min_n}")
    keep = [u for u in range(d.n_users) if len(d.sequences[u]) >= min_n]
    if not keep:
        raise CorpusError("no users survive filtering")

    used: set[int] = set()
    for u in keep:
        used.update(d.sequences[u])
    remap: dict[int, int] = {}
    catalog: list[ItemMeta] = []
    for m in d.catalog:
        if m.dense_index in used:
            remap[m.dense_index] = len(catalog)
            catalog.append(ItemMeta(m.item_id, m.title, m.category, len(catalog)))

    return InteractionDataset(
        user_ids=[d.user_ids[u] for u in keep],
        sequences=[[remap[i] for i in d.sequences[u]] for u in keep],
        timestamps=[list(d.timestamps[u]) for u in keep],
        catalog=catalog,
    )


def leave_one_out_split(d: InteractionDataset) -> InteractionDataset:
    """Mark the split: last item test, second-to-last validation, rest train."""
    for u in range(d.n_users):
        if len(d.sequences[u]) < 3:
            raise CorpusError(
                f"user {d.user_ids[u]!r} has {len(d.sequences[u])} interactions; "
                "need >= 3 to form train/valid/test"
            )
    return InteractionDataset(
        user_ids=list(d.user_ids),
        sequences=[list(s) for s in d.sequences],
        timestamps=[list(t) for t in d.timestamps],
        catalog=list(d.catalog),
        split_done=True,
    )


# ---------------------------------------------------------------------------
# batching


def _pack_rows(rows: list[tuple[int, list[int], int]], t_max: int) -> Batch:
    b = len(rows)
    width = min(t_max, max(len(prefix) for _, prefix, _ in rows))
    prefix = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.float64)
    last = np.zeros(b, dtype=np.int64)
    users = np.zeros(b, dtype=np.int64)
    targets = np.zeros(b, dtype=np.int64)
    for i, (u, pre, tgt) in enumerate(rows):
        pre = pre[-t_max:]  # keep the most recent items
        prefix[i, : len(pre)] = pre
        mask[i, : len(pre)] = 1.0
        last[i] = len(pre) - 1
        users[i] = u
        targets[i] = tgt
    neg = (targets[None, :] != targets[:, None]).astype(np.float64)
    return Batch(users, prefix, mask, last, targets, neg)


def make_batches(d: InteractionDataset, batch_size: int, t_max: int,
                 seed: int) -> list[Batch]:
    """All (prefix, next-item) training pairs, shuffled by seed and packed.

    Negatives for a row are the other rows' targets; rows sharing a target
    are excluded from each other's negative sets. A trailing batch with a
    single row is dropped (it would have no negatives).
    """
    if batch_size < 2:
        raise CorpusError(f"batch_size must be >= 2, got {batch_size}")
    if t_max < 1:
        raise CorpusError(f"t_max must be >= 1, got {t_max}")
    d._require_split()

    rows: list[tuple[int, list[int], int]] = []
    for u in range(d.n_users):
        train = d.train_part(u)
        for t in range(1, len(train)):
            rows.append((u, train[:t], train[t]))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(rows))

    batches = []
    for lo in range(0, len(rows), batch_size):
        chunk = [rows[i] for i in order[lo: lo + batch_size]]
        if len(chunk) >= 2:
            batches.append(_pack_rows(chunk, t_max))
    return batches


def eval_rows(d: InteractionDataset, split: str) -> list[tuple[int, list[int], int]]:
    """Per-user (user, prefix, target) rows for the valid or test split."""
    d._require_split()
    if split not in ("valid", "test"):
        raise CorpusError(f"unknown split {split!r}")
    rows = []
    for u in range(d.n_users):
        if split == "valid":
            rows.append((u, d.train_part(u), d.valid_item(u)))
        else:
            rows.append((u, d.train_part(u) + [d.valid_item(u)], d.test_item(u)))
    return rows


def eval_batches(d: InteractionDataset, split: str, batch_size: int,
                 t_max: int) -> list[Batch]:
    rows = eval_rows(d, split)
    return [
        _pack_rows(rows[lo: lo + batch_size], t_max)
        for lo in range(0, len(rows), batch_size)
    ]


# ---------------------------------------------------------------------------
# synthetic data


def _cycle_permutation(rng: np.random.Generator, n: int,
                       cycle_len: int = 3) -> np.ndarray:
    """Random permutation composed of short cycles.

    Users following such a chain orbit a small category subset, so which
    subset a sequence visits identifies the chain; a single transition seen
    out of context does not.
    """
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    for i in range(0, n, cycle_len):
        block = order[i: i + cycle_len]
        for a, b in zip(block, np.roll(block, -1)):
            perm[a] = b
    return perm


def synth_generate(n_users: int, n_items: int, n_categories: int, signal: float,
                   seed: int, *, min_len: int = 9, max_len: int = 15,
                   n_chains: int = 3,
                   popularity_skew: float = 1.2) -> InteractionDataset:
    """Generate a dataset whose next-item category is readable from titles.

    Items are assigned round-robin to categories and titled
    ``"CAT<c> item <i>"``. Each user follows one of ``n_chains`` fixed
    category permutations (built from short cycles, so different users orbit
    different category subsets): with probability ``signal`` the next
    category is the permutation applied to the current one (deterministic
    per user), otherwise uniform. Within a category, items are drawn from a
    Zipf distribution with exponent ``popularity_skew`` (0 gives uniform),
    so the tail of the catalog is identifiable from titles long before its
    interaction counts could train an id embedding.
    """
    if n_categories < 2:
        raise CorpusError(f"n_categories must be >= 2, got {n_categories}")
    if n_items < n_categories:
        raise CorpusError(f"n_items ({n_items}) must be >= n_categories ({n_categories})")
    if not 0.0 <= signal <= 1.0:
        raise CorpusError(f"signal must be in [0, 1], got {signal}")
    if n_users < 1 or min_len < 3 or max_len < min_len or n_chains < 1:
        raise CorpusError("invalid synthetic generator arguments")
    if popularity_skew < 0:
        raise CorpusError(f"popularity_skew must be >= 0, got {popularity_skew}")

    rng = np.random.default_rng(seed)
    catalog = [
        ItemMeta(f"i{i:05d}", f"CAT{i % n_categories} item {i}",
                 f"CAT{i % n_categories}", i)
        for i in range(n_items)
    ]
    by_cat: list[np.ndarray] = [
        np.array([i for i in range(n_items) if i % n_categories == c])
        for c in range(n_categories)
    ]
    cat_weights = []
    for members in by_cat:
        w = (np.arange(len(members)) + 1.0) ** -popularity_skew
        cat_weights.append(w / w.sum())

    chains = [_cycle_permutation(rng, n_categories) for _ in range(n_chains)]
    user_ids, sequences, timestamps = [], [], []
    for u in range(n_users):
        chain = chains[u % n_chains]
        length = int(rng.integers(min_len, max_len + 1))
        cat = int(rng.integers(n_categories))
        seq = []
        for _ in range(length):
            seq.append(int(rng.choice(by_cat[cat], p=cat_weights[cat])))
            if rng.random() < signal:
                cat = int(chain[cat])
            else:
                cat = int(rng.integers(n_categories))
        user_ids.append(f"u{u:05d}")
        sequences.append(seq)
        timestamps.append(list(range(length)))
    return InteractionDataset(user_ids, sequences, timestamps, catalog)


def load_dataset_dir(data_dir: str) -> InteractionDataset:
    """Ingest `interactions.tsv` + `catalog.jsonl` from a directory."""
    return ingest(
        os.path.join(data_dir, "interactions.tsv"),
        os.path.join(data_dir, "catalog.jsonl"),
    )


def prepare(d: InteractionDataset, min_interactions: int = 5) -> InteractionDataset:
    """Standard preprocessing: minimum-interaction filter then split."""
    return leave_one_out_split(filter_min_interactions(d, min_interactions))
