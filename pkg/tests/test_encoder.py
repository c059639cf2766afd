import math

import numpy as np
import pytest

import knowmatch.encoder as enc
from knowmatch.encoder import (
    AdamState,
    Batch,
    EncoderConfig,
    attention_weights,
    embed,
    forward,
    gradients,
    init_params,
    load_checkpoint,
    loss,
    loss_and_gradients,
    masked_attention,
    param_names,
    save_checkpoint,
    train_step,
)
from knowmatch.errors import DomainError, FormatError, NumericalError


def small_config(**kwargs):
    defaults = dict(
        vocab_size=32, d_model=16, n_heads=2, n_layers=2, d_ff=24,
        max_position=32, seed=0,
    )
    defaults.update(kwargs)
    return EncoderConfig(**defaults)


def random_batch(config, rng, b=3, l=8, visible=None, labels=None):
    ids = rng.integers(6, config.vocab_size, size=(b, l))
    ids[:, 0] = 0  # [CLS]
    soft = np.tile(np.arange(l), (b, 1))
    seg = np.zeros((b, l), dtype=np.int64)
    vis = np.ones((b, l, l)) if visible is None else visible
    lab = labels if labels is not None else rng.integers(0, 2, size=b)
    return Batch(ids, soft, seg, vis, lab)


class TestEmbed:
    def test_equal_soft_positions_share_position_embedding(self):
        config = small_config(use_segments=False)
        params = init_params(config)
        ids = np.array([[7, 7]])
        soft = np.array([[3, 3]])
        batch = Batch(ids, soft, np.zeros((1, 2), dtype=int), np.ones((1, 2, 2)), None)
        out = embed(batch, params, config)
        np.testing.assert_array_equal(out[0, 0], out[0, 1])

    def test_zero_tables_give_bias_only(self):
        config = small_config()
        params = init_params(config)
        for name in ("tok_emb", "pos_emb", "seg_emb"):
            params[name] = np.zeros_like(params[name])
        params["emb_ln_b"] = np.full_like(params["emb_ln_b"], 0.25)
        batch = random_batch(config, np.random.default_rng(0))
        out = embed(batch, params, config)
        np.testing.assert_allclose(out, 0.25)

    def test_position_overflow(self):
        config = small_config(max_position=4)
        params = init_params(config)
        batch = Batch(
            np.array([[0, 7]]), np.array([[0, 4]]), np.zeros((1, 2), dtype=int),
            np.ones((1, 2, 2)), None,
        )
        with pytest.raises(DomainError):
            embed(batch, params, config)

    def test_segments_can_be_disabled(self):
        config = small_config(use_segments=False)
        params = init_params(config)
        ids = np.array([[0, 7, 8]])
        soft = np.arange(3)[None, :]
        batch_a = Batch(ids, soft, np.zeros((1, 3), dtype=int), np.ones((1, 3, 3)), np.array([1]))
        batch_b = Batch(ids, soft, np.ones((1, 3), dtype=int), np.ones((1, 3, 3)), np.array([1]))
        np.testing.assert_array_equal(
            embed(batch_a, params, config), embed(batch_b, params, config)
        )
        grads = gradients(batch_a, params, config)
        assert np.all(grads["seg_emb"] == 0.0)


class TestMaskedAttention:
    def test_self_only_token_attends_to_itself_with_weight_one(self):
        config = small_config()
        params = init_params(config)
        rng = np.random.default_rng(1)
        l = 6
        hidden = rng.normal(size=(1, l, config.d_model))
        visible = np.ones((1, l, l))
        visible[0, 2, :] = 0
        visible[0, :, 2] = 0
        visible[0, 2, 2] = 1
        weights = attention_weights(hidden, visible, params, config)
        np.testing.assert_allclose(weights[0, :, 2, 2], 1.0, atol=1e-15)

    def test_rows_sum_to_one_and_masked_weights_vanish(self):
        config = small_config()
        params = init_params(config)
        rng = np.random.default_rng(2)
        l = 7
        hidden = rng.normal(size=(2, l, config.d_model))
        visible = np.ones((2, l, l))
        visible[0, 1, 4] = visible[0, 4, 1] = 0
        visible[1, 0, 3] = visible[1, 3, 0] = 0
        weights = attention_weights(hidden, visible, params, config)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert (weights[0, :, 1, 4] < 1e-30).all()
        assert (weights[1, :, 0, 3] < 1e-30).all()

    def test_invisible_perturbation_changes_nothing_exactly(self):
        config = small_config(n_layers=1)
        params = init_params(config)
        rng = np.random.default_rng(3)
        l = 6
        hidden = rng.normal(size=(1, l, config.d_model))
        visible = np.ones((1, l, l))
        visible[0, 0, 4] = visible[0, 4, 0] = 0
        base = masked_attention(hidden, visible, params, config)
        perturbed = hidden.copy()
        perturbed[0, 4, :] += 1.0
        out = masked_attention(perturbed, visible, params, config)
        assert np.max(np.abs(out[0, 0] - base[0, 0])) == 0.0

    def test_visible_perturbation_changes_output(self):
        config = small_config(n_layers=1)
        params = init_params(config)
        rng = np.random.default_rng(4)
        l = 6
        hidden = rng.normal(size=(1, l, config.d_model))
        visible = np.ones((1, l, l))
        base = masked_attention(hidden, visible, params, config)
        perturbed = hidden.copy()
        perturbed[0, 4, :] += 1.0
        out = masked_attention(perturbed, visible, params, config)
        assert np.max(np.abs(out[0, 0] - base[0, 0])) > 1e-9

    def test_all_ones_equals_reference_attention(self):
        # Single head so the reference is easy to write out.
        config = small_config(n_heads=1, n_layers=1)
        params = init_params(config)
        rng = np.random.default_rng(5)
        l = 5
        x = rng.normal(size=(1, l, config.d_model))
        got = masked_attention(x, np.ones((1, l, l)), params, config)

        q = x[0] @ params["l0.wq"] + params["l0.bq"]
        k = x[0] @ params["l0.wk"] + params["l0.bk"]
        v = x[0] @ params["l0.wv"] + params["l0.bv"]
        scores = q @ k.T / math.sqrt(config.d_model)
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        attn = (w @ v) @ params["l0.wo"] + params["l0.bo"]
        z = x[0] + attn
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        ref = params["l0.ln1_g"] * (z - mu) / np.sqrt(var + 1e-5) + params["l0.ln1_b"]
        np.testing.assert_allclose(got[0], ref, atol=1e-12)


class TestForward:
    def test_rows_sum_to_one(self):
        config = small_config()
        params = init_params(config)
        batch = random_batch(config, np.random.default_rng(6))
        probs = forward(batch, params, config)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_head_gives_uniform(self):
        config = small_config()
        params = init_params(config)
        params["cls_w"] = np.zeros_like(params["cls_w"])
        params["cls_b"] = np.zeros_like(params["cls_b"])
        batch = random_batch(config, np.random.default_rng(7))
        probs = forward(batch, params, config)
        np.testing.assert_array_equal(probs, 0.5)

    def test_duplicated_row_duplicated_probs(self):
        config = small_config()
        params = init_params(config)
        batch = random_batch(config, np.random.default_rng(8), b=2)
        dup = Batch(
            np.vstack([batch.token_ids, batch.token_ids[:1]]),
            np.vstack([batch.soft_positions, batch.soft_positions[:1]]),
            np.vstack([batch.segments, batch.segments[:1]]),
            np.vstack([batch.visible, batch.visible[:1]]),
            None,
        )
        probs = forward(dup, params, config)
        np.testing.assert_array_equal(probs[0], probs[2])

    def test_permutation_equivariance(self):
        config = small_config()
        params = init_params(config)
        batch = random_batch(config, np.random.default_rng(9), b=4)
        perm = [2, 0, 3, 1]
        permuted = Batch(
            batch.token_ids[perm], batch.soft_positions[perm],
            batch.segments[perm], batch.visible[perm], None,
        )
        probs = forward(batch, params, config)
        np.testing.assert_array_equal(forward(permuted, params, config), probs[perm])

    def test_nonfinite_raises(self):
        config = small_config()
        params = init_params(config)
        params["cls_w"] = params["cls_w"] * np.inf
        batch = random_batch(config, np.random.default_rng(10))
        with np.errstate(invalid="ignore"), pytest.raises(NumericalError):
            forward(batch, params, config)


class TestLoss:
    def test_uniform_is_ln2(self):
        value = loss(np.array([[0.5, 0.5]]), np.array([1]))
        assert abs(value - math.log(2)) < 1e-12

    def test_perfect_prediction_is_zero(self):
        assert loss(np.array([[0.0, 1.0]]), np.array([1])) == 0.0

    def test_hand_computed_mean(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        labels = np.array([0, 1])
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        assert abs(loss(probs, labels) - expected) < 1e-12
        assert abs(loss(probs, labels) - 0.164252033486018) < 1e-9

    def test_zero_probability_clamped_with_warning(self):
        with pytest.warns(RuntimeWarning):
            value = loss(np.array([[1.0, 0.0]]), np.array([1]))
        assert value == pytest.approx(-math.log(1e-12))


class TestGradients:
    def test_unused_vocab_row_has_zero_gradient(self):
        config = small_config()
        params = init_params(config)
        rng = np.random.default_rng(11)
        unused = config.vocab_size - 1
        ids = rng.integers(6, unused, size=(3, 8))
        ids[:, 0] = 0
        batch = Batch(
            ids, np.tile(np.arange(8), (3, 1)), np.zeros((3, 8), dtype=int),
            np.ones((3, 8, 8)), rng.integers(0, 2, size=3),
        )
        grads = gradients(batch, params, config)
        assert np.all(grads["tok_emb"][unused] == 0.0)

    def test_token_invisible_to_cls_gets_no_gradient_one_layer(self):
        config = small_config(n_layers=1)
        params = init_params(config)
        l = 6
        ids = np.array([[0, 7, 8, 9, 10, 11]])
        soft = np.arange(l)[None, :]
        seg = np.zeros((1, l), dtype=int)
        visible = np.ones((1, l, l))
        # Token 3 invisible to everything but itself.
        visible[0, 3, :] = 0
        visible[0, :, 3] = 0
        visible[0, 3, 3] = 1
        batch = Batch(ids, soft, seg, visible, np.array([1]))
        grads = gradients(batch, params, config)
        # Unique token id 9 and position 3 feed only the dead token.
        assert np.all(grads["tok_emb"][9] == 0.0)
        assert np.all(grads["pos_emb"][3] == 0.0)
        assert np.any(grads["tok_emb"][7] != 0.0)

    def test_matches_finite_differences(self):
        config = small_config()
        params = init_params(config)
        rng = np.random.default_rng(12)
        visible = np.ones((2, 6, 6))
        visible[0, 1, 4] = visible[0, 4, 1] = 0
        batch = random_batch(config, rng, b=2, l=6, visible=visible)
        _, grads = loss_and_gradients(batch, params, config)
        h = 1e-4
        for name in ("l0.wq", "l1.w1", "cls_w", "emb_ln_g", "tok_emb"):
            flat = params[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=8, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = loss(forward(batch, params, config), batch.labels)
                flat[i] = orig - h
                down = loss(forward(batch, params, config), batch.labels)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                rel = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-4)
                assert rel < 1e-4, f"{name}[{i}]: {numeric} vs {gflat[i]}"


class TestTrainStep:
    def test_lr_zero_keeps_params(self):
        config = small_config()
        params = init_params(config)
        batch = random_batch(config, np.random.default_rng(13))
        state = AdamState.init(params)
        new_params, new_state, _ = train_step(batch, params, state, 0.0, config)
        for name in params:
            np.testing.assert_array_equal(new_params[name], params[name])
        assert new_state.step == 1

    def test_deterministic(self):
        config = small_config()
        batch = random_batch(config, np.random.default_rng(14))
        results = []
        for _ in range(2):
            params = init_params(config)
            state = AdamState.init(params)
            for _ in range(3):
                params, state, _ = train_step(batch, params, state, 1e-3, config)
            results.append(params)
        for name in results[0]:
            np.testing.assert_array_equal(results[0][name], results[1][name])

    def test_nan_gradient_aborts(self, monkeypatch):
        config = small_config()
        params = init_params(config)
        before = {k: v.copy() for k, v in params.items()}
        batch = random_batch(config, np.random.default_rng(15))

        def bad_grads(*args, **kwargs):
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            grads["cls_w"][0, 0] = np.nan
            return 1.0, grads

        monkeypatch.setattr(enc, "loss_and_gradients", bad_grads)
        with pytest.raises(NumericalError):
            train_step(batch, params, AdamState.init(params), 1e-3, config)
        for name in params:
            np.testing.assert_array_equal(params[name], before[name])

    def test_loss_decreases_on_separable_toy_set(self):
        # Label = whether token 7 appears; 20 sequences, 50 steps.
        config = small_config(n_layers=1, d_model=16, d_ff=16)
        params = init_params(config)
        rng = np.random.default_rng(16)
        b, l = 20, 6
        ids = rng.integers(8, 20, size=(b, l))
        ids[:, 0] = 0
        labels = np.zeros(b, dtype=np.int64)
        for i in range(0, b, 2):
            ids[i, 1 + (i % (l - 1))] = 7
            labels[i] = 1
        batch = Batch(
            ids, np.tile(np.arange(l), (b, 1)), np.zeros((b, l), dtype=int),
            np.ones((b, l, l)), labels,
        )
        state = AdamState.init(params)
        losses = []
        for _ in range(50):
            params, state, value = train_step(batch, params, state, 1e-2, config)
            losses.append(value)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        assert losses[-1] < losses[0]

    def test_dropout_training_is_seeded(self):
        config = small_config(dropout_rate=0.1)
        batch = random_batch(config, np.random.default_rng(17))
        outs = []
        for _ in range(2):
            params = init_params(config)
            state = AdamState.init(params)
            params, state, value = train_step(
                batch, params, state, 1e-3, config, dropout_seed=99
            )
            outs.append((value, params))
        assert outs[0][0] == outs[1][0]
        for name in outs[0][1]:
            np.testing.assert_array_equal(outs[0][1][name], outs[1][1][name])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        config = small_config()
        params = init_params(config)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, params, config, seed=42, vocab_hash="abc")
        loaded, loaded_config, seed, header = load_checkpoint(path)
        assert loaded_config == config
        assert seed == 42
        assert header["vocab_hash"] == "abc"
        assert header["version"] == 1
        for name in param_names(config):
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_truncated_rejected(self, tmp_path):
        config = small_config()
        params = init_params(config)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, params, config, seed=0)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        path.write_bytes(b"\x00\x01\x02\n")
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestBatch:
    def test_padding_masks_rows_and_cols(self):
        batch = Batch.from_sequences(
            [
                ([0, 7, 8], [0, 1, 2], [0, 0, 0], None, 1),
                ([0, 9], [0, 1], [0, 1], None, 0),
            ],
            pad_id=5,
        )
        assert batch.token_ids[1, 2] == 5
        assert batch.visible[1, 2].sum() == 0
        assert batch.visible[1, :, 2].sum() == 0
        assert batch.visible[0].sum() == 9
        np.testing.assert_array_equal(batch.labels, [1, 0])

    def test_config_validation(self):
        with pytest.raises(DomainError):
            EncoderConfig(vocab_size=10, d_model=10, n_heads=3)
