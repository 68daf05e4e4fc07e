import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satlab import tensor as tc
from satlab.attention import (
    AttentionLayerWeights, ReferenceKV, ShareConfig, ShareContext, ShareMode, adain,
    layer_mask_from_spec, multi_head_block, scaled_dot_attention, shared_attention_full,
    shared_attention_reference, split_heads,
)
from satlab.tensor import Rng

from helpers import rand


def _layer(rng, d=8, heads=2, dtype=np.float64):
    ws = [rand(rng, d, d, scale=1 / math.sqrt(d), dtype=dtype) for _ in range(4)]
    return AttentionLayerWeights(*ws, heads=heads)


class TestAdain:
    def test_hand(self):
        out = adain(np.array([[0.0], [2.0]]), np.array([[10.0], [14.0]]))
        np.testing.assert_allclose(out, [[10.0], [14.0]])

    def test_constant_source_is_guarded(self):
        out = adain(np.full((3, 2), 4.0), np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[3.0, 2.0]] * 3)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            adain(np.ones((2, 3)), np.ones((2, 4)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 12), m2=st.integers(2, 12))
    def test_moments(self, seed, m, m2):
        r = Rng(seed, 4)
        x = rand(r, m, 5, scale=3.0) + 1.0
        y = rand(r, m2, 5, scale=0.5) - 2.0
        if tc.column_stats(x)[1].min() < 1e-3:
            return
        out = adain(x, y)
        mo, so = tc.column_stats(out)
        my, sy = tc.column_stats(y)
        assert np.abs(mo - my).max() < 1e-5 and np.abs(so - sy).max() < 1e-5


class TestScaledDot:
    def test_single_key(self, rng):
        q = rand(rng, 3, 4)
        out, probs = scaled_dot_attention(q, rand(rng, 1, 4), np.array([[3.0, 7.0]]))
        np.testing.assert_allclose(out, [[3.0, 7.0]] * 3)
        np.testing.assert_allclose(probs, [[1.0]] * 3)

    def test_duplicate_keys(self, rng):
        q, k, v = rand(rng, 3, 4), rand(rng, 1, 4), rand(rng, 1, 2)
        out1, _ = scaled_dot_attention(q, k, v)
        out2, probs = scaled_dot_attention(q, np.vstack([k, k]), np.vstack([v, v]))
        np.testing.assert_allclose(out2, out1, atol=1e-12)
        np.testing.assert_allclose(probs, 0.5)

    def test_unit_scale_is_bitwise_noop(self, rng):
        q, k, v = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
        a, pa = scaled_dot_attention(q, k, v)
        b, pb = scaled_dot_attention(q, k, v, np.ones(5))
        assert a.tobytes() == b.tobytes() and pa.tobytes() == pb.tobytes()

    def test_matches_brute_force(self, rng):
        q, k, v = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
        logits = q @ k.T / 2.0
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        out, probs = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(probs, p, atol=1e-12)
        np.testing.assert_allclose(out, p @ v, atol=1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError):
            scaled_dot_attention(rand(rng, 2, 3), rand(rng, 2, 4), rand(rng, 2, 1))


class TestReferenceSharing:
    def test_duplicate_reference_collapse(self, rng):
        q, k, v = rand(rng, 6, 4), rand(rng, 6, 4), rand(rng, 6, 3)
        shared, _ = shared_attention_reference(q, k, v, (q, k, v), use_adain=True, lam=1.0)
        plain, _ = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(shared, plain, atol=1e-5)

    def test_reference_block_first(self, rng):
        q, k, v = rand(rng, 4, 4), rand(rng, 4, 4), rand(rng, 4, 3)
        ref = (rand(rng, 4, 4), rand(rng, 4, 4) + 5.0, rand(rng, 4, 3))
        _, probs = shared_attention_reference(q, k, v, ref, use_adain=False)
        assert probs.shape == (4, 8)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)

    def test_adain_moves_target_queries(self, rng):
        q_t, k_t, v_t = rand(rng, 6, 4, scale=3.0), rand(rng, 6, 4), rand(rng, 6, 3)
        q_r, k_r, v_r = rand(rng, 6, 4), rand(rng, 6, 4), rand(rng, 6, 3)
        out_a, _ = shared_attention_reference(q_t, k_t, v_t, (q_r, k_r, v_r), use_adain=True)
        manual_q, manual_k = adain(q_t, q_r), adain(k_t, k_r)
        out_m, _ = scaled_dot_attention(manual_q, np.vstack([k_r, manual_k]), np.vstack([v_r, v_t]))
        np.testing.assert_allclose(out_a, out_m, atol=1e-12)

    def test_tiny_lambda_moves_mass_to_targets(self, rng):
        # positive queries and keys: reference logits are large at lam=1 and
        # flatten to ~0 at lam=1e-6, while target logits stay well above 0
        q = np.abs(rand(rng, 5, 4)) + 2.0
        k_r = np.abs(rand(rng, 5, 4)) + 2.0
        k_t = np.abs(rand(rng, 5, 4)) + 2.0
        v = rand(rng, 5, 3)
        _, tiny = shared_attention_reference(q, k_t, v, (q, k_r, v), use_adain=False, lam=1e-6)
        assert tiny[:, 5:].sum(-1).min() >= 0.99
        _, full = shared_attention_reference(q, k_t, v, (q, k_r, v), use_adain=False, lam=1.0)
        assert full[:, :5].sum() > tiny[:, :5].sum()

    def test_lambda_can_raise_mass_when_reference_logits_are_negative(self):
        # the documented counterexample to unconditional monotonicity
        q = np.array([[1.0, 0.0]])
        k_r = np.array([[-4.0, 0.0]])
        k_t = np.array([[0.0, 0.0]])
        v = np.zeros((1, 1))
        _, p1 = shared_attention_reference(q, k_t, v, (q, k_r, v), use_adain=False, lam=1.0)
        _, p2 = shared_attention_reference(q, k_t, v, (q, k_r, v), use_adain=False, lam=0.1)
        assert p2[0, 0] > p1[0, 0]

    def test_lambda_monotone_with_nonnegative_reference_logits(self, rng):
        # d(mass)/d(lam) has the sign of the softmax-weighted mean reference
        # logit, so monotonicity holds whenever every reference logit is >= 0
        lams = np.geomspace(1.0, 1e-3, 25)
        for _ in range(100):
            q, k_r = np.abs(rand(rng, 5, 3)), np.abs(rand(rng, 5, 3))
            k_t, v = rand(rng, 5, 3), rand(rng, 5, 1)
            masses = [shared_attention_reference(q, k_t, v, (q, k_r, v), use_adain=False, lam=lam)[1][:, :5].sum(-1)
                      for lam in lams]
            assert np.all(np.diff(masses, axis=0) <= 1e-12)

    def test_lam_validation(self):
        for bad in (0.0, -1.0, 1.5):
            with pytest.raises(ValueError):
                ShareConfig("reference", lam=bad)


class TestFullSharing:
    def test_single_stream(self, rng):
        q, k, v = rand(rng, 4, 4), rand(rng, 4, 4), rand(rng, 4, 2)
        (out, probs), = shared_attention_full([(q, k, v)])
        plain, pp = scaled_dot_attention(q, k, v)
        assert out.tobytes() == plain.tobytes() and probs.tobytes() == pp.tobytes()

    def test_duplicate_stream_collapse(self, rng):
        q, k, v = rand(rng, 4, 4), rand(rng, 4, 4), rand(rng, 4, 2)
        res = shared_attention_full([(q, k, v), (q.copy(), k.copy(), v.copy())])
        plain, _ = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(res[0][0], plain, atol=1e-12)
        np.testing.assert_allclose(res[0][1].sum(-1), 1.0, atol=1e-12)
        assert res[0][1].shape == (4, 8)

    def test_empty(self):
        with pytest.raises(ValueError):
            shared_attention_full([])


class TestBlock:
    def test_zero_output_projection(self, rng):
        lw = _layer(rng)
        lw.wo[...] = 0.0
        phi = rand(rng, 5, 8)
        assert multi_head_block(phi, lw).tobytes() == phi.tobytes()

    def test_mask_false_equals_none(self, rng):
        lw = _layer(rng)
        phi = rand(rng, 3, 5, 8)
        off = ShareConfig("reference", layer_mask=(False,))
        a = multi_head_block(phi, lw, off, ShareContext(), layer=0)
        b = multi_head_block(phi, lw)
        assert a.tobytes() == b.tobytes()

    def test_one_head_equals_two_half_width_heads(self, rng):
        """Two heads whose projections are the same d/2 head padded with
        zeros reproduce a one-head layer of width d/2 (scaled logits match)."""
        d, dk = 8, 4
        w = [rand(rng, d, dk) for _ in range(3)]
        wo = rand(rng, dk, d)
        one = AttentionLayerWeights(w[0], w[1], w[2], wo, heads=1)
        pad = lambda m: np.concatenate([m, m], axis=1)  # noqa: E731
        two = AttentionLayerWeights(pad(w[0]), pad(w[1]), pad(w[2]), np.concatenate([wo, wo]) / 2, heads=2)
        phi = rand(rng, 6, d)
        np.testing.assert_allclose(multi_head_block(phi, one), multi_head_block(phi, two), atol=1e-5)

    def test_reference_stream_unaffected_by_targets(self, rng):
        lw = _layer(rng)
        phi = rand(rng, 4, 5, 8)
        for cfg in (None, ShareConfig("reference"), ShareConfig("reference", use_adain=False, lam=0.5)):
            batch = multi_head_block(phi, lw, cfg, ShareContext(), 0)
            alone = multi_head_block(phi[:1], lw, cfg, ShareContext(), 0)
            assert batch[0].tobytes() == alone[0].tobytes()

    def test_rows_stochastic_in_every_mode(self, rng):
        lw = _layer(rng)
        phi = rand(rng, 3, 5, 8)
        for mode in ShareMode:
            ctx = ShareContext(record=True)
            multi_head_block(phi, lw, ShareConfig(mode), ctx, 0)
            for p in ctx.probs[0]:
                np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_external_reference(self, rng):
        lw = _layer(rng)
        phi = rand(rng, 3, 5, 8)
        cfg = ShareConfig("reference")
        ctx = ShareContext()
        inside = multi_head_block(phi, lw, cfg, ctx, 0)
        ext = ShareContext(reference=ctx.reference, external=True)
        outside = multi_head_block(phi[1:], lw, cfg, ext, 0)
        np.testing.assert_allclose(outside, inside[1:], atol=1e-12)

    def test_reference_needs_context(self, rng):
        with pytest.raises(ValueError):
            multi_head_block(rand(rng, 2, 5, 8), _layer(rng), ShareConfig("reference"))


class TestReferenceKV:
    def test_write_once_read_only(self, rng):
        kv = ReferenceKV()
        q = rand(rng, 2, 3, 4)
        kv.publish(0, q, q, q)
        with pytest.raises(RuntimeError):
            kv.publish(0, q, q, q)
        with pytest.raises(ValueError):
            kv[0][0][0, 0, 0] = 1.0
        q[...] = 0.0  # the published copy is independent
        assert kv[0][0].any()


class TestMaskSpec:
    def test_fraction(self):
        assert layer_mask_from_spec("0.5", 4) == (True, True, False, False)
        assert layer_mask_from_spec(0.25, 4) == (True, False, False, False)
        assert layer_mask_from_spec("1", 4) == (True,) * 4
        assert layer_mask_from_spec("0", 4) == (False,) * 4

    def test_bitmask(self):
        assert layer_mask_from_spec("1001", 4) == (True, False, False, True)

    def test_bad(self):
        with pytest.raises(ValueError):
            layer_mask_from_spec("1.5", 4)
        with pytest.raises(ValueError):
            layer_mask_from_spec("abc", 4)

    def test_length_checked(self):
        with pytest.raises(ValueError):
            ShareConfig("reference", layer_mask=(True, False)).validate(4)


def test_split_heads_layout(rng):
    x = rand(rng, 2, 3, 8)
    h = split_heads(x, 4)
    assert h.shape == (2, 4, 3, 2)
    np.testing.assert_array_equal(h[1, 2], x[1, :, 4:6])
