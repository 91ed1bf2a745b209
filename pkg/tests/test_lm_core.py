import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codec_lm import ar_model, lm_core
from codec_lm.errors import OptimizerError, ValidationError
from codec_lm.lm_core import AdamWConfig, AdamWState, ModelConfig


class TestSinusoidalPositions:
    def test_row_zero_alternates(self):
        enc = lm_core.sinusoidal_positions(3, 8)
        np.testing.assert_allclose(enc[0], [0, 1] * 4, atol=1e-15)

    def test_direct_evaluation(self):
        """Oracle: sin(1 / 10000^0) at (p=1, 2k=0)."""
        enc = lm_core.sinusoidal_positions(2, 4)
        assert enc[1, 0] == pytest.approx(math.sin(1.0), abs=1e-12)
        assert enc[1, 1] == pytest.approx(math.cos(1.0), abs=1e-12)
        assert enc[1, 2] == pytest.approx(math.sin(1.0 / 100.0), abs=1e-12)

    def test_zero_length(self):
        assert lm_core.sinusoidal_positions(0, 6).shape == (0, 6)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValidationError):
            lm_core.sinusoidal_positions(4, 5)


class TestSegmentedPositions:
    def test_positions_restart_per_segment(self):
        seq = lm_core.SegmentedSequence.from_segments([[7, 8, 9], [1, 2]])
        np.testing.assert_array_equal(seq.positions, [0, 1, 2, 0, 1])
        np.testing.assert_array_equal(seq.segment_ids, [0, 0, 0, 1, 1])

    def test_encoding_blocks(self):
        enc = lm_core.segment_position_encoding([3, 2], 8)
        single = lm_core.sinusoidal_positions(3, 8)
        np.testing.assert_array_equal(enc[:3], single)
        np.testing.assert_array_equal(enc[3:], single[:2])


class TestAttention:
    def test_identity_mask_returns_v(self, rng):
        q = rng.normal(size=(4, 8))
        k = rng.normal(size=(4, 8))
        v = rng.normal(size=(4, 8))
        out = lm_core.attention(q, k, v, np.eye(4, dtype=bool))
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_uniform_scores_average_v(self, rng):
        q = np.zeros((3, 8))
        k = rng.normal(size=(3, 8))
        v = rng.normal(size=(3, 8))
        out = lm_core.attention(q, k, v, np.ones((3, 3), dtype=bool))
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)

    def test_matches_reference_formula(self, rng):
        """Oracle: unbatched softmax(QK^T/sqrt(d)) V."""
        q = rng.normal(size=(3, 3))
        k = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 3))
        scores = q @ k.T / math.sqrt(3)
        ref = np.exp(scores - scores.max(axis=1, keepdims=True))
        ref /= ref.sum(axis=1, keepdims=True)
        ref = ref @ v
        out = lm_core.attention(q, k, v, np.ones((3, 3), dtype=bool))
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_fully_masked_row_rejected(self, rng):
        mask = np.ones((3, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(ValidationError):
            lm_core.attention(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                              rng.normal(size=(3, 4)), mask)

    def test_masked_positions_are_ignored(self, rng):
        q = rng.normal(size=(4, 8))
        k = rng.normal(size=(4, 8))
        v = rng.normal(size=(4, 8))
        mask = lm_core.causal_mask(4)
        base = lm_core.attention(q, k, v, mask)
        k2, v2 = k.copy(), v.copy()
        k2[3] = 99.0
        v2[3] = -99.0
        out = lm_core.attention(q, k2, v2, mask)
        np.testing.assert_array_equal(base[:3], out[:3])

    def test_softmax_rows_sum_to_one(self, rng):
        q = rng.normal(size=(5, 6))
        k = rng.normal(size=(5, 6))
        _, probs = lm_core._attention_forward(q, k, rng.normal(size=(5, 6)),
                                              lm_core.causal_mask(5))
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(5), atol=1e-6)


class TestAdaLayerNorm:
    def _params(self, rng, d=8, q=4):
        params = {"stage_emb": rng.normal(size=(q - 1, d))}
        for nm in ("ln_f",):
            params[f"{nm}.pa"] = rng.normal(size=(d, d)) * 0.1
            params[f"{nm}.ba"] = np.ones(d)
            params[f"{nm}.pb"] = rng.normal(size=(d, d)) * 0.1
            params[f"{nm}.bb"] = np.zeros(d)
        return params

    def test_identity_modulation_is_layernorm(self, rng):
        params = self._params(rng)
        params["ln_f.pa"][:] = 0.0
        params["ln_f.pb"][:] = 0.0
        h = rng.normal(size=(5, 8))
        out = lm_core.ada_layer_norm(h, 2, params)
        ref = lm_core.layer_norm(h, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_distinct_stages_differ(self, rng):
        params = self._params(rng)
        h = rng.normal(size=(5, 8))
        a = lm_core.ada_layer_norm(h, 2, params)
        b = lm_core.ada_layer_norm(h, 3, params)
        assert np.abs(a - b).max() > 1e-6

    def test_scalar_affine_composition(self, rng):
        """Oracle: 2 * LayerNorm(h) + 0.5 elementwise."""
        params = self._params(rng)
        params["ln_f.pa"][:] = 0.0
        params["ln_f.pb"][:] = 0.0
        params["ln_f.ba"][:] = 2.0
        params["ln_f.bb"][:] = 0.5
        h = rng.normal(size=(4, 8))
        out = lm_core.ada_layer_norm(h, 3, params)
        ref = 2.0 * lm_core.layer_norm(h, np.ones(8), np.zeros(8)) + 0.5
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_stage_out_of_range(self, rng):
        params = self._params(rng)
        with pytest.raises(ValidationError):
            lm_core.ada_layer_norm(rng.normal(size=(2, 8)), 1, params)
        with pytest.raises(ValidationError):
            lm_core.ada_layer_norm(rng.normal(size=(2, 8)), 5, params)


class TestCrossEntropy:
    def test_confident_correct_goes_to_zero(self):
        logits = np.array([[100.0, 0.0, 0.0]])
        loss, _ = lm_core.cross_entropy(logits, np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits_ln_k(self):
        k = 17
        logits = np.zeros((5, k))
        loss, _ = lm_core.cross_entropy(logits, np.arange(5))
        assert loss == pytest.approx(math.log(k), abs=1e-12)

    def test_matches_reference(self, rng):
        """Oracle: direct -log softmax."""
        logits = rng.normal(size=(4, 6))
        targets = rng.integers(0, 6, size=4)
        loss, _ = lm_core.cross_entropy(logits, targets)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        ref = -np.log(probs[np.arange(4), targets]).mean()
        assert loss == pytest.approx(ref, abs=1e-6)

    def test_all_masked_rejected(self, rng):
        with pytest.raises(ValidationError):
            lm_core.cross_entropy(rng.normal(size=(3, 4)), np.zeros(3, dtype=int),
                                  np.zeros(3, dtype=bool))

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = rng.normal(size=(2, 3))
        targets = np.array([1, 2])
        _, dlogits = lm_core.cross_entropy(logits, targets)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = probs.copy()
        expected[np.arange(2), targets] -= 1
        np.testing.assert_allclose(dlogits, expected / 2, atol=1e-12)


class TestAdamW:
    def _cfg(self, **kw):
        args = dict(peak_lr=0.1, warmup_steps=10, total_steps=100, weight_decay=0.01)
        args.update(kw)
        return AdamWConfig(**args)

    def test_schedule_apex_and_end(self):
        cfg = self._cfg()
        assert lm_core.lr_at(cfg, 10) == pytest.approx(0.1)
        assert lm_core.lr_at(cfg, 100) == pytest.approx(0.0)
        assert lm_core.lr_at(cfg, 150) == 0.0

    def test_schedule_piecewise_linear_and_continuous(self):
        cfg = self._cfg()
        xs = np.arange(1, 101)
        ys = np.array([lm_core.lr_at(cfg, int(s)) for s in xs])
        assert ys.argmax() == 9  # peak exactly at warmup step
        up = np.diff(ys[:10])
        down = np.diff(ys[10:])
        np.testing.assert_allclose(up, up[0], atol=1e-15)
        np.testing.assert_allclose(down, down[0], atol=1e-15)

    def test_single_scalar_step_matches_hand_computation(self):
        """Oracle: hand evaluation of the AdamW update formulas."""
        cfg = AdamWConfig(peak_lr=0.01, warmup_steps=1, total_steps=2,
                          beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1)
        params = {"w": np.array([2.0])}
        grads = {"w": np.array([0.5])}
        state = AdamWState()
        lm_core.adamw_step(params, grads, state, 1, cfg)
        # lr at step 1 = peak; m_hat = 0.5; v_hat = 0.25; denom = 0.5 + 1e-8
        expected = 2.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 2.0)
        assert params["w"][0] == pytest.approx(expected, abs=1e-10)

    def test_nonfinite_gradient_names_block(self):
        params = {"emb": np.ones(3)}
        grads = {"emb": np.array([1.0, np.nan, 0.0])}
        with pytest.raises(OptimizerError, match="emb"):
            lm_core.adamw_step(params, grads, AdamWState(), 1, self._cfg())


class TestNucleusSampling:
    def test_temperature_zero_is_argmax(self, rng):
        logits = rng.normal(size=20)
        assert lm_core.nucleus_sample(logits, 0.0, 0.9, rng) == int(np.argmax(logits))

    def test_top_p_restricts_support(self, rng):
        logits = np.array([10.0, 9.5, -50.0, -50.0])
        seen = {lm_core.nucleus_sample(logits, 1.0, 0.95, rng) for _ in range(200)}
        assert seen <= {0, 1}

    def test_top_p_one_keeps_full_support(self):
        rng = np.random.default_rng(0)
        logits = np.zeros(4)
        seen = {lm_core.nucleus_sample(logits, 1.0, 1.0, rng) for _ in range(400)}
        assert seen == {0, 1, 2, 3}

    def test_seeded_determinism(self):
        logits = np.random.default_rng(5).normal(size=30)
        a = [lm_core.nucleus_sample(logits, 1.0, 0.9, np.random.default_rng(7)) for _ in range(3)]
        b = [lm_core.nucleus_sample(logits, 1.0, 0.9, np.random.default_rng(7)) for _ in range(3)]
        assert a == b

    def test_bad_args_rejected(self, rng):
        with pytest.raises(ValidationError):
            lm_core.nucleus_sample(np.zeros(3), -1.0, 0.9, rng)
        with pytest.raises(ValidationError):
            lm_core.nucleus_sample(np.zeros(3), 1.0, 0.0, rng)


class TestGradCheck:
    def test_linear_model_is_exact(self, rng):
        x = rng.normal(size=5)

        def loss_fn(params):
            w = params["w"]
            loss = float(w @ x)
            return loss, {"w": x.copy()}

        report = lm_core.grad_check(loss_fn, {"w": rng.normal(size=5)},
                                    n_probe=10, rng=rng)
        assert report.max_rel_error < 1e-8

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=5) + 2.0

        def broken(params):
            w = params["w"]
            return float(w @ x), {"w": 2.0 * x}

        report = lm_core.grad_check(broken, {"w": rng.normal(size=5)}, n_probe=10, rng=rng)
        assert report.max_rel_error > 0.3


class TestCheckpointHelpers:
    def test_model_round_trip(self, tmp_path, rng):
        cfg = ModelConfig(layers=1, heads=2, embed_dim=8, ffn_dim=16, dropout=0.0,
                          codebook_size=7, quantizers=3)
        params = ar_model.init_ar_params(cfg, rng)
        path = tmp_path / "m.ckp"
        lm_core.save_model(path, "ar", cfg, params)
        kind, cfg2, params2, raw = lm_core.load_model(path)
        assert kind == "ar"
        assert cfg2 == cfg
        assert set(params2) == set(params)
        assert "phoneme_table" in raw
        for name in params:
            np.testing.assert_allclose(params2[name], params[name].astype(np.float32))


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_softmax_rows_sum_to_one_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    q = rng.normal(size=(n, 4)) * 5
    k = rng.normal(size=(n, 4)) * 5
    mask = lm_core.causal_mask(n)
    _, probs = lm_core._attention_forward(q, k, rng.normal(size=(n, 4)), mask)
    np.testing.assert_allclose(probs.sum(axis=-1), np.ones(n), atol=1e-6)
