import hashlib
import json
import math
import struct

import numpy as np
import pytest

from capfix.corpus import LabeledCaption, build_vocab
from capfix.corruptor import DatasetSplits
from capfix.errors import CheckpointError, ConfigError, NonFiniteGradientError, ShapeError
from capfix.neural import (CHECKPOINT_MAGIC, PUBLISHED_TRAINING, DirectionParams, ModelDims, ModelParameters,
                           OptimizerState, TrainingConfig, adam_step, backward, bilstm_layer_forward,
                           checkpoint_bytes, clip_gradients, init_parameters, load_checkpoint,
                           lr_schedule, lstm_cell_backward, lstm_cell_forward, model_forward, parameter_shapes, save_checkpoint,
                           softmax_cross_entropy, train, zero_parameters)


def _loss(params, idx, labels, lengths, dropout=0.0):
    trace = model_forward(params, idx, training=dropout > 0, rng=np.random.default_rng(7),
                          lengths=lengths, dropout=dropout)
    mask = trace.mask
    return softmax_cross_entropy(trace.logits, labels, mask)[0], trace, mask


def _random_instance(rng, dims):
    batch = int(rng.integers(1, 3))
    lengths = rng.integers(1, 7, size=batch)
    idx = np.zeros((batch, int(lengths.max())), dtype=np.int64)
    labels = np.ones_like(idx)
    for row, n in enumerate(lengths):
        idx[row, :n] = rng.integers(1, dims.vocab_size, size=n)
        labels[row, :n] = rng.integers(0, 2, size=n)
    return idx, labels, lengths


@pytest.mark.parametrize("instance", range(20))
def test_gradients_match_finite_differences(tiny_dims, instance):
    rng = np.random.default_rng(100 + instance)
    params = init_parameters(tiny_dims, rng)
    idx, labels, lengths = _random_instance(rng, tiny_dims)
    dropout = 0.3 if instance % 5 == 0 else 0.0
    _, trace, mask = _loss(params, idx, labels, lengths, dropout)
    grads = backward(params, trace, labels, mask)

    eps = 1e-5
    names = list(parameter_shapes(tiny_dims))
    for _ in range(30):
        name = names[int(rng.integers(len(names)))]
        array = params.arrays[name]
        pos = tuple(int(rng.integers(s)) for s in array.shape)
        original = array[pos]
        array[pos] = original + eps
        plus = _loss(params, idx, labels, lengths, dropout)[0]
        array[pos] = original - eps
        minus = _loss(params, idx, labels, lengths, dropout)[0]
        array[pos] = original
        numeric = (plus - minus) / (2 * eps)
        analytic = grads.arrays[name][pos]
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
        assert rel < 1e-4 or abs(analytic - numeric) < 1e-8, (name, pos, analytic, numeric)


def test_padding_does_not_change_real_positions(tiny_params):
    short = np.array([[2, 3, 4]])
    batch = np.array([[2, 3, 4, 0, 0], [5, 6, 2, 3, 4]])
    alone = model_forward(tiny_params, short).probs[0]
    padded = model_forward(tiny_params, batch, lengths=[3, 5]).probs[0, :3]
    np.testing.assert_allclose(alone, padded, rtol=0, atol=1e-12)


def test_padding_gets_no_gradient(tiny_params):
    idx = np.array([[2, 3, 0], [4, 5, 6]])
    labels = np.array([[0, 1, 1], [1, 0, 1]])
    trace = model_forward(tiny_params, idx, lengths=[2, 3])
    grads = backward(tiny_params, trace, labels)
    assert not np.any(grads.embedding[0])


def test_first_position_sees_the_last_token(tiny_params):
    first = model_forward(tiny_params, np.array([2, 3, 4])).probs[0, 0]
    changed = model_forward(tiny_params, np.array([2, 3, 5])).probs[0, 0]
    assert not np.allclose(first, changed)


def test_inference_is_deterministic(tiny_params):
    idx = np.array([2, 3, 4, 5])
    a = model_forward(tiny_params, idx, dropout=0.5).probs
    b = model_forward(tiny_params, idx, dropout=0.5).probs
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0)


def test_embedding_index_out_of_range(tiny_params):
    with pytest.raises(IndexError):
        model_forward(tiny_params, np.array([2, 99]))


def test_lstm_cell_with_zero_weights():
    cell = DirectionParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    h, c, _ = lstm_cell_forward(cell, np.ones(3), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(c, [0.5, 0.5])
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5) * np.ones(2))


def test_lstm_cell_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    cell = DirectionParams(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8))
    x, h_prev, c_prev = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    weights_h, weights_c = rng.normal(size=2), rng.normal(size=2)

    def objective(x_in):
        h, c, _ = lstm_cell_forward(cell, x_in, h_prev, c_prev)
        return float(weights_h @ h + weights_c @ c)

    _, _, cache = lstm_cell_forward(cell, x, h_prev, c_prev)
    dx, _, _, grads = lstm_cell_backward(cell, cache, weights_h, weights_c)
    eps = 1e-6
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        numeric = (objective(x + step) - objective(x - step)) / (2 * eps)
        assert dx[k] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
    assert grads.w_input.shape == (8, 3)
    np.testing.assert_allclose(grads.bias, grads.w_input[:, 0] / x[0])


def test_lstm_cell_rejects_wrong_widths():
    cell = DirectionParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    with pytest.raises(ShapeError):
        lstm_cell_forward(cell, np.ones(4), np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeError):
        lstm_cell_forward(cell, np.ones(3), np.zeros(3), np.zeros(3))


def test_bilstm_layer_output_shape(tiny_params):
    out = bilstm_layer_forward(tiny_params.layer(0), np.ones((4, 3)))
    assert out.shape == (4, 4)


def test_parameters_validate_shapes(tiny_dims):
    arrays = zero_parameters(tiny_dims).arrays
    arrays["classifier.b"] = np.zeros(3)
    with pytest.raises(ShapeError):
        ModelParameters(tiny_dims, arrays)


def test_init_parameters(tiny_dims):
    params = init_parameters(tiny_dims, np.random.default_rng(1))
    assert not np.any(params.embedding[0])
    h = tiny_dims.hidden_dim
    np.testing.assert_array_equal(params["lstm.0.forward.bias"][h:2 * h], 1.0)
    assert np.abs(params.embedding).max() <= 1 / math.sqrt(tiny_dims.embed_dim)


def test_adam_first_step_moves_by_learning_rate(tiny_params):
    grads = tiny_params.zeros_like()
    grads.arrays["classifier.b"][...] = [2.0, -0.5]
    before = tiny_params.copy()
    adam_step(tiny_params, grads, OptimizerState.zeros_like(tiny_params), lr=0.01)
    np.testing.assert_allclose(tiny_params.classifier_b - before.classifier_b, [-0.01, 0.01], atol=1e-8)
    np.testing.assert_array_equal(tiny_params.embedding, before.embedding)


def test_adam_rejects_non_finite_gradient(tiny_params):
    grads = tiny_params.zeros_like()
    grads.arrays["classifier.w"][0, 0] = np.nan
    before = tiny_params.copy()
    with pytest.raises(NonFiniteGradientError, match="classifier.w"):
        adam_step(tiny_params, grads, OptimizerState.zeros_like(tiny_params), lr=0.01)
    np.testing.assert_array_equal(tiny_params.classifier_w, before.classifier_w)


def test_clip_gradients_scales_globally(tiny_params):
    grads = tiny_params.zeros_like()
    for array in grads.arrays.values():
        array[...] = 1.0
    norm = clip_gradients(grads, 1.0)
    assert norm > 1.0
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays.values()))
    assert total == pytest.approx(1.0)


def test_lr_schedule_endpoints_and_decay():
    cfg = TrainingConfig(epochs=25, lr_start=1e-3, lr_end=5e-4)
    rates = [lr_schedule(cfg, e) for e in range(25)]
    assert rates[0] == 1e-3
    assert rates[-1] == 5e-4
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[12] == pytest.approx(math.sqrt(1e-3 * 5e-4))
    with pytest.raises(ValueError):
        lr_schedule(cfg, 25)


def test_published_preset_keeps_its_rates():
    assert PUBLISHED_TRAINING.lr_start == 1e-6
    assert lr_schedule(PUBLISHED_TRAINING, PUBLISHED_TRAINING.epochs - 1) == 5e-7


def test_training_config_reports_bad_fields():
    with pytest.raises(ConfigError) as excinfo:
        TrainingConfig(epochs=0, dropout=1.0, lr_end=1.0)
    assert set(excinfo.value.keys) == {"training.epochs", "training.dropout", "training.lr_end"}


def test_softmax_cross_entropy_masked():
    logits = np.zeros((1, 2, 2))
    loss, dlogits = softmax_cross_entropy(logits, np.array([[0, 1]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(math.log(2))
    assert not np.any(dlogits[0, 1])
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, np.array([[0, 1]]), np.zeros((1, 2)))


def test_checkpoint_round_trip(tmp_path, tiny_params, tiny_vocab):
    path = tmp_path / "model.ckpt"
    cfg = TrainingConfig(hidden_dim=2, embed_dim=3)
    save_checkpoint(tiny_params, cfg, tiny_vocab, str(path))
    loaded = load_checkpoint(str(path))
    assert loaded.vocab == tiny_vocab
    assert loaded.training_config == cfg
    for name, array in tiny_params.arrays.items():
        np.testing.assert_array_equal(loaded.params[name], array)
    assert path.read_bytes() == checkpoint_bytes(tiny_params, cfg, tiny_vocab)


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic"])
def test_damaged_checkpoint_fails_closed(tmp_path, tiny_params, tiny_vocab, damage):
    blob = bytearray(checkpoint_bytes(tiny_params, None, tiny_vocab))
    if damage == "truncate":
        blob = blob[:-9]
    elif damage == "flip":
        blob[-1] ^= 0xFF
    else:
        blob[:len(CHECKPOINT_MAGIC)] = b"NOTACKPT"
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_vocab_must_match(tiny_params):
    with pytest.raises(CheckpointError):
        checkpoint_bytes(tiny_params, None, build_vocab([("a",)]))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def _toy_splits():
    words = ["red", "cat", "runs", "fast", "big", "dog", "jumps", "high"]
    rng = np.random.default_rng(3)
    pairs = []
    for k in range(48):
        tokens = [words[int(i)] for i in rng.choice(len(words), size=4, replace=False)]
        dup = int(rng.integers(4))
        tokens.insert(dup + 1, tokens[dup])
        labels = [1] * 5
        labels[dup + 1] = 0
        pairs.append(LabeledCaption(tokens, labels, f"s{k}", "AdverbRepetition"))
    return DatasetSplits(tuple(pairs[:40]), tuple(pairs[40:]), (), 0)


def _toy_training(seed=0):
    splits = _toy_splits()
    vocab = build_vocab(splits.train)
    cfg = TrainingConfig(epochs=6, hidden_dim=6, embed_dim=6, dropout=0.0, lr_start=0.02, lr_end=0.01,
                         batch_size=8, seed=seed)
    params = init_parameters(ModelDims(len(vocab), 6, 6), np.random.default_rng([seed, 0]))
    return train(params, vocab, splits, cfg)


def test_training_reduces_loss():
    result = _toy_training()
    assert len(result.history) == 6
    assert result.history[-1].train_loss < result.history[0].train_loss
    assert 0 <= result.best_epoch < 6
    assert result.history[result.best_epoch].val_macro_f1 == max(h.val_macro_f1 for h in result.history)


def test_training_is_deterministic():
    first = _toy_training(seed=4)
    second = _toy_training(seed=4)
    for name, array in first.params.arrays.items():
        np.testing.assert_array_equal(second.params[name], array)
    assert [h.train_loss for h in first.history] == [h.train_loss for h in second.history]


def test_lstm_cell_single_unit_by_hand():
    w_input = np.zeros((4, 1))
    w_input[2, 0] = 10.0
    cell = DirectionParams(w_input, np.zeros((4, 1)), np.zeros(4))
    h, c, cache = lstm_cell_forward(cell, np.ones(1), np.zeros(1), np.zeros(1))
    assert cache.i[0] == pytest.approx(0.5)
    assert cache.f[0] == pytest.approx(0.5)
    assert c[0] == pytest.approx(0.5 * math.tanh(10.0))
    assert h[0] == pytest.approx(0.2311, abs=1e-4)


def test_bilstm_layer_is_symmetric_under_reversal():
    rng = np.random.default_rng(5)
    forward = DirectionParams(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8))
    backward_dir = DirectionParams(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8))
    inputs = rng.normal(size=(5, 3))
    out = bilstm_layer_forward((forward, backward_dir), inputs)
    mirrored = bilstm_layer_forward((backward_dir, forward), inputs[::-1])[::-1]
    np.testing.assert_allclose(mirrored, np.concatenate([out[:, 2:], out[:, :2]], axis=1), atol=1e-12)


def test_cross_entropy_is_stable_for_saturated_logits():
    loss, dlogits = softmax_cross_entropy(np.array([[[1000.0, 0.0]]]), np.array([[0]]))
    assert math.isfinite(loss)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(dlogits))


def test_doubling_masked_positions_halves_gradients():
    logits = np.array([[[0.3, -0.2], [0.3, -0.2]]])
    labels = np.array([[1, 1]])
    _, one = softmax_cross_entropy(logits, labels, np.array([[1.0, 0.0]]))
    _, two = softmax_cross_entropy(logits, labels, np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(two[0, 0], one[0, 0] / 2)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path, tiny_params, tiny_vocab):
    first = tmp_path / "first.ckpt"
    second = tmp_path / "second.ckpt"
    save_checkpoint(tiny_params, TrainingConfig(epochs=3), tiny_vocab, str(first))
    loaded = load_checkpoint(str(first))
    save_checkpoint(loaded.params, loaded.training_config, loaded.vocab, str(second))
    assert first.read_bytes() == second.read_bytes()


def _split_blob(blob):
    prefix = len(CHECKPOINT_MAGIC) + 8
    (length,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC):prefix])
    return json.loads(blob[prefix:prefix + length]), blob[prefix + length:]


def _join_blob(header, payload, reseal=True):
    if reseal:
        body = {k: v for k, v in header.items() if k != "header_sha256"}
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
        header["header_sha256"] = hashlib.sha256(canonical).hexdigest()
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(raw)) + raw + payload


def test_edited_vocabulary_is_rejected(tmp_path, tiny_params, tiny_vocab):
    blob = checkpoint_bytes(tiny_params, None, tiny_vocab)
    assert b'"barks"' in blob
    path = tmp_path / "edited.ckpt"
    path.write_bytes(blob.replace(b'"barks"', b'"borks"'))
    with pytest.raises(CheckpointError, match="header checksum"):
        load_checkpoint(str(path))


@pytest.mark.parametrize("field, value", [
    ("blocks", [1, 2]),
    ("dims", {"vocab_size": "7", "embed_dim": 3, "hidden_dim": 2}),
    ("dims", [7, 3, 2]),
    ("training_config", {"epochs": 0}),
    ("vocabulary", 5),
])
def test_malformed_header_fields_fail_closed(tmp_path, tiny_params, tiny_vocab, field, value):
    header, payload = _split_blob(checkpoint_bytes(tiny_params, None, tiny_vocab))
    header[field] = value
    path = tmp_path / "malformed.ckpt"
    path.write_bytes(_join_blob(header, payload))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_header_without_checksum_is_rejected(tmp_path, tiny_params, tiny_vocab):
    header, payload = _split_blob(checkpoint_bytes(tiny_params, None, tiny_vocab))
    del header["header_sha256"]
    path = tmp_path / "unsealed.ckpt"
    path.write_bytes(_join_blob(header, payload, reseal=False))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
