"""Dataset ingestion, filtering, splitting, batching, and synthesis tests."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrec import corpus
from promptrec.corpus import CorpusError


@pytest.fixture
def small_files(tmp_path):
    cat = tmp_path / "catalog.jsonl"
    items = [
        {"item_id": "a", "title": "alpha thing", "category": "X"},
        {"item_id": "b", "title": "beta thing", "category": "X"},
        {"item_id": "c", "title": "", "category": "Y"},
        {"item_id": "d", "title": "delta thing", "category": "Y"},
    ]
    cat.write_text("\n".join(json.dumps(i) for i in items) + "\n")
    inter = tmp_path / "interactions.tsv"
    lines = [
        "# comment line",
        "u1\ta\t3",
        "u1\tb\t1",
        "u2\tc\t5",
        "u1\tc\t2",
        "u2\td\t4",
        "u3\ta\t9",
    ]
    inter.write_text("\n".join(lines) + "\n")
    return str(inter), str(cat)


class TestIngest:
    def test_sorted_by_timestamp(self, small_files):
        d = corpus.ingest(*small_files)
        assert d.n_users == 3 and d.n_interactions == 6
        u1 = d.user_index["u1"]
        # u1 events at ts 1,2,3 -> items b,c,a
        ids = [d.catalog[i].item_id for i in d.sequences[u1]]
        assert ids == ["b", "c", "a"]
        assert d.timestamps[u1] == [1, 2, 3]

    def test_empty_title_replaced(self, small_files):
        d = corpus.ingest(*small_files)
        titles = {m.item_id: m.title for m in d.catalog}
        assert titles["c"] == corpus.MISSING_TITLE

    def test_duplicate_events_kept(self, tmp_path, small_files):
        inter, cat = small_files
        with open(inter, "a") as fh:
            fh.write("u1\ta\t3\n")
        d = corpus.ingest(inter, cat)
        assert len(d.sequences[d.user_index["u1"]]) == 4

    def test_timestamp_ties_stable(self, tmp_path, small_files):
        inter, cat = small_files
        with open(inter, "a") as fh:
            fh.write("u3\tb\t9\nu3\tc\t9\n")
        d = corpus.ingest(inter, cat)
        ids = [d.catalog[i].item_id for i in d.sequences[d.user_index["u3"]]]
        assert ids == ["a", "b", "c"]

    def test_unknown_item_names_id(self, tmp_path, small_files):
        inter, cat = small_files
        with open(inter, "a") as fh:
            fh.write("u1\tmissing\t7\n")
        with pytest.raises(CorpusError, match="missing"):
            corpus.ingest(inter, cat)

    def test_malformed_line_names_lineno(self, tmp_path, small_files):
        inter, cat = small_files
        with open(inter, "a") as fh:
            fh.write("u1\ta\n")
        with pytest.raises(CorpusError, match=":8"):
            corpus.ingest(inter, cat)

    def test_round_trip(self, small_files, tmp_path):
        d = corpus.ingest(*small_files)
        out = tmp_path / "rt"
        ip, cp = corpus.save_dataset(d, str(out))
        d2 = corpus.ingest(ip, cp)
        assert d2.user_ids == d.user_ids
        assert d2.sequences == d.sequences
        assert d2.timestamps == d.timestamps
        assert [m.item_id for m in d2.catalog] == [m.item_id for m in d.catalog]


class TestFilter:
    def _dataset(self, lengths):
        catalog = [corpus.ItemMeta(f"i{k}", f"t{k}", "C", k) for k in range(10)]
        seqs = [[k % 10 for k in range(n)] for n in lengths]
        ts = [list(range(n)) for n in lengths]
        users = [f"u{j}" for j in range(len(lengths))]
        return corpus.InteractionDataset(users, seqs, ts, catalog)

    def test_boundary_inclusive(self):
        d = corpus.filter_min_interactions(self._dataset([3, 5, 9]), 5)
        assert d.n_users == 2

    def test_min1_identity(self):
        base = self._dataset([3, 5, 9])
        d = corpus.filter_min_interactions(base, 1)
        assert d.n_users == 3 and d.sequences == base.sequences

    def test_empty_result_errors(self):
        with pytest.raises(CorpusError, match="no users survive"):
            corpus.filter_min_interactions(self._dataset([4, 4]), 5)

    def test_orphan_items_recompacted(self):
        catalog = [corpus.ItemMeta(f"i{k}", f"t{k}", "C", k) for k in range(5)]
        d = corpus.InteractionDataset(
            ["u0", "u1"], [[0, 2, 4, 0, 2], [1]], [[0, 1, 2, 3, 4], [0]], catalog)
        f = corpus.filter_min_interactions(d, 5)
        assert f.n_items == 3
        assert [m.item_id for m in f.catalog] == ["i0", "i2", "i4"]
        assert f.sequences == [[0, 1, 2, 0, 1]]
        assert [m.dense_index for m in f.catalog] == [0, 1, 2]


class TestSplit:
    def _ds(self, seq):
        catalog = [corpus.ItemMeta(f"i{k}", f"t{k}", "C", k) for k in range(10)]
        return corpus.InteractionDataset(
            ["u"], [list(seq)], [list(range(len(seq)))], catalog)

    def test_five_items(self):
        d = corpus.leave_one_out_split(self._ds([0, 1, 2, 3, 4]))
        assert d.train_part(0) == [0, 1, 2]
        assert d.valid_item(0) == 3 and d.test_item(0) == 4

    def test_minimal(self):
        d = corpus.leave_one_out_split(self._ds([0, 1, 2]))
        assert d.train_part(0) == [0] and d.valid_item(0) == 1 and d.test_item(0) == 2

    def test_too_short_errors(self):
        with pytest.raises(CorpusError, match="need >= 3"):
            corpus.leave_one_out_split(self._ds([0, 1]))

    def test_partition_property(self):
        d = corpus.leave_one_out_split(self._ds([5, 6, 7, 8, 9]))
        rebuilt = d.train_part(0) + [d.valid_item(0), d.test_item(0)]
        assert rebuilt == d.sequences[0]


def _split_synth(**kw):
    defaults = dict(n_users=12, n_items=20, n_categories=4, signal=0.8, seed=7)
    defaults.update(kw)
    return corpus.prepare(corpus.synth_generate(**defaults))


class TestBatches:
    def test_negative_count(self):
        d = _split_synth()
        batches = corpus.make_batches(d, batch_size=4, t_max=10, seed=0)
        full = [b for b in batches if b.size == 4]
        assert full, "expected at least one full batch"
        b = full[0]
        for i in range(4):
            assert b.neg_mask[i, i] == 0.0
            # every other row is a candidate unless it shares the target
            for j in range(4):
                if i != j:
                    expected = 1.0 if b.target[j] != b.target[i] else 0.0
                    assert b.neg_mask[i, j] == expected

    def test_truncation_keeps_recent(self):
        catalog = [corpus.ItemMeta(f"i{k}", f"t{k}", "C", k) for k in range(30)]
        seq = list(range(15))
        d = corpus.InteractionDataset(
            ["u0", "u1"], [seq, seq], [list(range(15))] * 2, catalog, split_done=True)
        batches = corpus.make_batches(d, batch_size=2, t_max=10, seed=1)
        # the sample targeting item 12 has untruncated prefix [0..11]
        rows = [
            b.prefix[i, : int(b.last_pos[i]) + 1].tolist()
            for b in batches for i in range(b.size) if b.target[i] == 12
        ]
        assert rows and all(r == list(range(2, 12)) for r in rows)

    def test_no_leakage(self):
        d = _split_synth()
        batches = corpus.make_batches(d, batch_size=4, t_max=10, seed=3)
        for b in batches:
            for i in range(b.size):
                u = int(b.user_idx[i])
                target = int(b.target[i])
                train = d.train_part(u)
                assert target in train  # never the valid or test item
                prefix = b.prefix[i, : int(b.last_pos[i]) + 1].tolist()
                # prefix + target must be a contiguous window of the train part
                assert any(
                    train[t] == target and train[max(0, t - len(prefix)): t] == prefix
                    for t in range(1, len(train))
                )

    def test_batch_size_guard(self):
        d = _split_synth()
        with pytest.raises(CorpusError):
            corpus.make_batches(d, batch_size=1, t_max=10, seed=0)

    def test_shuffle_deterministic(self):
        d = _split_synth()
        b1 = corpus.make_batches(d, 4, 10, seed=5)
        b2 = corpus.make_batches(d, 4, 10, seed=5)
        assert all(np.array_equal(x.target, y.target) for x, y in zip(b1, b2))

    def test_eval_rows_use_held_out(self):
        d = _split_synth()
        for u, prefix, tgt in corpus.eval_rows(d, "valid"):
            assert prefix == d.train_part(u) and tgt == d.valid_item(u)
        for u, prefix, tgt in corpus.eval_rows(d, "test"):
            assert prefix == d.train_part(u) + [d.valid_item(u)]
            assert tgt == d.test_item(u)


class TestSynth:
    def test_deterministic(self):
        a = corpus.synth_generate(10, 15, 3, 0.5, seed=42)
        b = corpus.synth_generate(10, 15, 3, 0.5, seed=42)
        assert a.sequences == b.sequences
        assert [m.title for m in a.catalog] == [m.title for m in b.catalog]

    def test_titles_embed_category(self):
        d = corpus.synth_generate(5, 12, 4, 0.5, seed=0)
        for m in d.catalog:
            assert m.title.startswith(m.category + " ")

    def test_signal_one_deterministic_per_user(self):
        d = corpus.synth_generate(20, 30, 5, 1.0, seed=3)
        cat = {m.dense_index: int(m.category[3:]) for m in d.catalog}
        for seq in d.sequences:
            seen: dict[int, int] = {}
            for prev, nxt in zip(seq, seq[1:]):
                c_prev, c_next = cat[prev], cat[nxt]
                if c_prev in seen:
                    assert seen[c_prev] == c_next
                seen[c_prev] = c_next

    def test_signal_zero_near_independent(self):
        d = corpus.synth_generate(300, 40, 4, 0.0, seed=11)
        cat = {m.dense_index: int(m.category[3:]) for m in d.catalog}
        counts = np.zeros((4, 4))
        for seq in d.sequences:
            for prev, nxt in zip(seq, seq[1:]):
                counts[cat[prev], cat[nxt]] += 1
        joint = counts / counts.sum()
        pi = joint.sum(1, keepdims=True) @ joint.sum(0, keepdims=True)
        mi = float(np.nansum(joint * np.log2(joint / pi, where=joint > 0)))
        assert mi < 0.01

    def test_invalid_args(self):
        with pytest.raises(CorpusError):
            corpus.synth_generate(5, 3, 4, 0.5, seed=0)  # items < categories
        with pytest.raises(CorpusError):
            corpus.synth_generate(5, 10, 1, 0.5, seed=0)
        with pytest.raises(CorpusError):
            corpus.synth_generate(5, 10, 4, 1.5, seed=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=3, max_value=30))
def test_property_split_partitions(n):
    catalog = [corpus.ItemMeta(f"i{k}", f"t{k}", "C", k) for k in range(n)]
    d = corpus.InteractionDataset(["u"], [list(range(n))], [list(range(n))], catalog)
    s = corpus.leave_one_out_split(d)
    assert len(s.train_part(0)) + 2 == n
    assert s.train_part(0) + [s.valid_item(0), s.test_item(0)] == list(range(n))
