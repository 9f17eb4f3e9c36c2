"""Forward-pass integration: variants, caching, masks, and loss assembly."""

import numpy as np
import pytest

from promptrec import corpus, toylm
from promptrec import diffcore as dc
from promptrec.config import TrainConfig
from promptrec.pipeline import (ModelState, PipelineError, compute_losses,
                                forward_batch)


def tiny_cfg(**kw):
    base = dict(seed=7, epochs=1, batch_size=4, d_rs=8, backbone_blocks=1,
                backbone_heads=2, d_llm=8, lm_layers=1, lm_heads=2,
                codebook_size=4, shared_prompts=2, lora_rank=2, t_max=8,
                t_text=3, l_max=32, theta=0.2)
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def dataset():
    return corpus.prepare(corpus.synth_generate(10, 14, 3, 0.8, seed=2))


@pytest.fixture()
def state(dataset):
    return ModelState.initialize(tiny_cfg(), dataset)


def first_batch(dataset, cfg, seed=3):
    return corpus.make_batches(dataset, cfg.batch_size, cfg.t_max, seed=seed)[0]


class TestForward:
    def test_trace_shapes(self, dataset, state):
        batch = first_batch(dataset, state.cfg)
        trace = forward_batch(state, batch, training=False)
        b = batch.size
        assert trace.h_rs.shape == (b, 8)
        assert trace.h_aligned.shape == (b, 8)
        assert trace.h_final.shape == (b, 8)
        assert trace.mask.shape == (b,)
        assert trace.e_u.shape == (b, 8)
        assert trace.h_pure.shape[0] == b
        assert set(np.unique(trace.mask)) <= {0.0, 1.0}

    def test_forward_identity_of_gate(self, dataset, state):
        batch = first_batch(dataset, state.cfg)
        gated = forward_batch(state, batch, training=False, apply_mask=True)
        plain = forward_batch(state, batch, training=False, apply_mask=False)
        np.testing.assert_array_equal(gated.h_final.data, plain.h_final.data)

    def test_deterministic_without_training(self, dataset, state):
        batch = first_batch(dataset, state.cfg)
        a = forward_batch(state, batch, training=False)
        b = forward_batch(state, batch, training=False)
        np.testing.assert_array_equal(a.h_aligned.data, b.h_aligned.data)

    def test_title_cache_matches_string_path(self, dataset, state):
        """The cached token-id assembly must agree with tokenizing the
        joined title strings directly."""
        from promptrec.pipeline import _batch_text_ids

        batch = first_batch(dataset, state.cfg)
        ids, mask = _batch_text_ids(state, batch)
        for i in range(batch.size):
            n_valid = int(batch.prefix_mask[i].sum())
            items = batch.prefix[i, :n_valid][-state.cfg.t_text:]
            titles = [dataset.catalog[int(j)].title for j in items]
            expected = state.tokenizer.encode_joined(titles)
            got = ids[i, mask[i] > 0].tolist()
            assert got == expected

    def test_requires_attached_dataset(self, dataset):
        cfg = tiny_cfg()
        st = ModelState(cfg, dataset.n_users, dataset.n_items,
                        toylm.Tokenizer.build(dataset.titles()))
        st.init_codebook()
        st.register_all()
        batch = first_batch(dataset, cfg)
        with pytest.raises(PipelineError):
            forward_batch(st, batch, training=False)


class TestVariants:
    def test_backbone_only_skips_lm(self, dataset):
        st = ModelState.initialize(tiny_cfg(variant="backbone_only"), dataset)
        batch = first_batch(dataset, st.cfg)
        trace = forward_batch(st, batch, training=False)
        assert trace.h_final is trace.h_rs
        assert trace.mask is None and trace.m_counts is None
        bundle = compute_losses(st, trace, batch)
        assert bundle.l_aux.item() == 0.0
        assert bundle.l_ortho.item() == 0.0 and bundle.l_q.item() == 0.0

    def test_soft_single_fixed_prompt(self, dataset):
        st = ModelState.initialize(tiny_cfg(variant="soft"), dataset)
        batch = first_batch(dataset, st.cfg)
        trace = forward_batch(st, batch, training=False)
        assert (trace.m_counts == 1).all()
        assert "codebook.soft_prompt" in st.registry
        bundle = compute_losses(st, trace, batch)
        assert bundle.l_q.item() == 0.0 and bundle.l_ortho.item() == 0.0

    def test_dec_single_pooled_fragment(self, dataset):
        st = ModelState.initialize(tiny_cfg(variant="dec"), dataset)
        batch = first_batch(dataset, st.cfg)
        trace = forward_batch(st, batch, training=False)
        assert trace.h_pure.shape[1] == 1

    def test_con_forces_full_mask(self, dataset):
        st = ModelState.initialize(tiny_cfg(variant="con"), dataset)
        batch = first_batch(dataset, st.cfg)
        trace = forward_batch(st, batch, training=False)
        np.testing.assert_array_equal(trace.mask, np.ones(batch.size))

    def test_fuse_variants_register_alt_head(self, dataset):
        for variant in ("fuse_mlp", "fuse_concat"):
            st = ModelState.initialize(tiny_cfg(variant=variant), dataset)
            assert "fusion.alt.lin_w" in st.registry
            batch = first_batch(dataset, st.cfg)
            trace = forward_batch(st, batch, training=False)
            assert trace.h_aligned.shape == (batch.size, st.cfg.d_rs)

    def test_full_has_no_variant_extras(self, dataset, state):
        assert "codebook.soft_prompt" not in state.registry
        assert "fusion.alt.lin_w" not in state.registry


class TestLossAssembly:
    def test_all_terms_positive_on_random_model(self, dataset, state):
        batch = first_batch(dataset, state.cfg)
        trace = forward_batch(state, batch, training=False)
        bundle = compute_losses(state, trace, batch)
        vals = bundle.values()
        assert vals["l_r"] > 0 and vals["l_aux"] > 0
        assert vals["l_ortho"] >= 0 and vals["l_q"] >= 0
        assert vals["l_total"] == pytest.approx(
            vals["l_r"] + 0.2 * vals["l_aux"] + 0.15 * vals["l_ortho"]
            + 0.25 * vals["l_q"], rel=1e-12)

    def test_dropout_only_in_training_mode(self, dataset):
        st = ModelState.initialize(tiny_cfg(lora_dropout=0.5), dataset)
        # make the adapters matter so dropout changes the output
        for ad in st.adapters.values():
            ad.B.data += 0.2
        batch = first_batch(dataset, st.cfg)
        eval_a = forward_batch(st, batch, training=False).h_aligned.data
        eval_b = forward_batch(st, batch, training=False).h_aligned.data
        np.testing.assert_array_equal(eval_a, eval_b)
        train_a = forward_batch(st, batch, training=True).h_aligned.data
        train_b = forward_batch(st, batch, training=True).h_aligned.data
        assert np.abs(train_a - train_b).max() > 0

    def test_centroid_bias_makes_selection_live(self, dataset, state):
        batch = first_batch(dataset, state.cfg)
        trace = forward_batch(state, batch, training=False)
        assert trace.m_counts.max() > 0
