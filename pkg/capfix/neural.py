"""
Word embedding -> 3-layer BiLSTM -> linear classifier, trained from scratch.

Everything is float64 numpy. Inside every 4H gate block the order is
(input, forget, cell, output); the checkpoint header records that order.
Batches are (B, L) index arrays padded at the end with PAD_INDEX; the
backward direction reverses each sequence within its own length so padding
never reaches a real position.
"""
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from tqdm import tqdm

from capfix.corpus import PAD_INDEX, Vocabulary, atomic_write
from capfix.errors import (CheckpointError, ConfigError, NonFiniteGradientError, ShapeError,
                           TrainingError)
from capfix.metrics import token_metrics

logger = logging.getLogger(__name__)

NUM_LAYERS = 3
NUM_CLASSES = 2
GATE_ORDER = ("input", "forget", "cell", "output")
DIRECTIONS = ("forward", "backward")
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    hidden_dim: int = 256
    embed_dim: int = 256
    dropout: float = 0.5
    lr_start: float = 1e-3
    lr_end: float = 5e-4
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    min_count: int = 1
    seed: int = 0
    slow_epoch_seconds: float = 600.0

    def __post_init__(self):
        bad = []
        if self.epochs < 1:
            bad.append("training.epochs")
        if self.hidden_dim < 1:
            bad.append("training.hidden_dim")
        if self.embed_dim < 1:
            bad.append("training.embed_dim")
        if not 0.0 <= self.dropout < 1.0:
            bad.append("training.dropout")
        if self.lr_start <= 0:
            bad.append("training.lr_start")
        if self.lr_end <= 0 or self.lr_end > self.lr_start:
            bad.append("training.lr_end")
        if self.batch_size < 1:
            bad.append("training.batch_size")
        if not 0.0 <= self.adam_beta1 < 1.0:
            bad.append("training.adam_beta1")
        if not 0.0 <= self.adam_beta2 < 1.0:
            bad.append("training.adam_beta2")
        if self.adam_eps <= 0:
            bad.append("training.adam_eps")
        if self.grad_clip < 0:
            bad.append("training.grad_clip")
        if self.min_count < 1:
            bad.append("training.min_count")
        if bad:
            raise ConfigError("Invalid training configuration", bad)


# Learning-rate values stated for the original 25-epoch schedule.
PUBLISHED_TRAINING = TrainingConfig(lr_start=1e-6, lr_end=5e-7)
DESK_TRAINING = TrainingConfig()


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int
    hidden_dim: int


class DirectionParams(NamedTuple):
    w_input: np.ndarray   # (4H, D_in)
    w_hidden: np.ndarray  # (4H, H)
    bias: np.ndarray      # (4H,)


def parameter_shapes(dims):
    """Declared parameter order and shapes; checkpoints store blocks in this order."""
    d, h = dims.embed_dim, dims.hidden_dim
    shapes = {"embedding": (dims.vocab_size, d)}
    for layer in range(NUM_LAYERS):
        d_in = d if layer == 0 else 2 * h
        for direction in DIRECTIONS:
            prefix = f"lstm.{layer}.{direction}"
            shapes[f"{prefix}.w_input"] = (4 * h, d_in)
            shapes[f"{prefix}.w_hidden"] = (4 * h, h)
            shapes[f"{prefix}.bias"] = (4 * h,)
    shapes["classifier.w"] = (NUM_CLASSES, 2 * h)
    shapes["classifier.b"] = (NUM_CLASSES,)
    return shapes


@dataclass
class ModelParameters:
    """The full trainable state. Gradients and Adam moments share this layout."""
    dims: ModelDims
    arrays: dict

    def __post_init__(self):
        expected = parameter_shapes(self.dims)
        if list(self.arrays) != list(expected):
            raise ShapeError(f"parameter blocks {list(self.arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    @property
    def embedding(self):
        return self.arrays["embedding"]

    @property
    def classifier_w(self):
        return self.arrays["classifier.w"]

    @property
    def classifier_b(self):
        return self.arrays["classifier.b"]

    def direction(self, layer, direction):
        prefix = f"lstm.{layer}.{direction}"
        return DirectionParams(
            self.arrays[f"{prefix}.w_input"],
            self.arrays[f"{prefix}.w_hidden"],
            self.arrays[f"{prefix}.bias"],
        )

    def layer(self, layer):
        return self.direction(layer, "forward"), self.direction(layer, "backward")

    def copy(self):
        return ModelParameters(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self):
        return ModelParameters(self.dims, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]


Gradients = ModelParameters


def zero_parameters(dims):
    return ModelParameters(dims, {k: np.zeros(s) for k, s in parameter_shapes(dims).items()})


def init_parameters(dims, rng):
    """
    Uniform(-k, k) weights with k = 1/sqrt(fan_in), zero biases except the
    forget gate (1.0), and a zero padding embedding row.
    """
    params = zero_parameters(dims)
    h = dims.hidden_dim
    for name, array in params.arrays.items():
        if name.endswith(".bias") or name == "classifier.b":
            continue
        fan_in = dims.embed_dim if name == "embedding" else array.shape[1]
        bound = 1.0 / math.sqrt(fan_in)
        array[...] = rng.uniform(-bound, bound, size=array.shape)
    params.embedding[PAD_INDEX] = 0.0
    for layer in range(NUM_LAYERS):
        for direction in DIRECTIONS:
            params.arrays[f"lstm.{layer}.{direction}.bias"][h:2 * h] = FORGET_BIAS
    return params


# --- Forward pieces ---

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def embed_forward(params, indices):
    idx = np.asarray(indices, dtype=np.int64)
    vocab_size = params.dims.vocab_size
    if idx.size and (idx.min() < 0 or idx.max() >= vocab_size):
        raise IndexError(f"token index outside 0..{vocab_size - 1}")
    return params.embedding[idx]


class GateCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _gates(z, c_prev, hidden):
    i = _sigmoid(z[..., :hidden])
    f = _sigmoid(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = _sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return o * tanh_c, c, (i, f, g, o, tanh_c)


def _gate_backward(dh, dc, c_prev, i, f, g, o, tanh_c):
    """Gradient w.r.t. the gate pre-activations and the previous cell state."""
    dc = dc + dh * o * (1.0 - tanh_c ** 2)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g ** 2),
        dh * tanh_c * o * (1.0 - o),
    ], axis=-1)
    return dz, dc * f


def lstm_cell_forward(cell, x_t, h_prev, c_prev):
    """One LSTM step. Works on single vectors or on (B, .) batches."""
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    hidden = cell.w_hidden.shape[1]
    if cell.w_input.shape[0] != 4 * hidden or cell.bias.shape != (4 * hidden,):
        raise ShapeError("cell parameters are not 4H blocks")
    if x_t.shape[-1] != cell.w_input.shape[1]:
        raise ShapeError(f"input width {x_t.shape[-1]} != {cell.w_input.shape[1]}")
    if h_prev.shape[-1] != hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(f"state width must be {hidden}")
    z = x_t @ cell.w_input.T + h_prev @ cell.w_hidden.T + cell.bias
    h_t, c_t, gates = _gates(z, c_prev, hidden)
    return h_t, c_t, GateCache(x_t, h_prev, c_prev, *gates)


def lstm_cell_backward(cell, cache, dh, dc):
    """Returns (dx, dh_prev, dc_prev, DirectionParams of weight gradients)."""
    dz, dc_prev = _gate_backward(dh, dc, cache.c_prev, cache.i, cache.f, cache.g, cache.o, cache.tanh_c)
    dz2 = np.atleast_2d(dz)
    grads = DirectionParams(
        dz2.T @ np.atleast_2d(cache.x),
        dz2.T @ np.atleast_2d(cache.h_prev),
        dz2.sum(axis=0),
    )
    return dz @ cell.w_input, dz @ cell.w_hidden, dc_prev, grads


class _ScanCache(NamedTuple):
    inputs: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _scan_forward(cell, inputs):
    """Left-to-right scan over (B, L, D_in) from a zero state."""
    batch, length, _ = inputs.shape
    hidden = cell.w_hidden.shape[1]
    zx = inputs @ cell.w_input.T + cell.bias
    store = {k: np.empty((batch, length, hidden)) for k in ("h_prev", "c_prev", "i", "f", "g", "o", "tanh_c")}
    out = np.empty((batch, length, hidden))
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    for t in range(length):
        store["h_prev"][:, t] = h
        store["c_prev"][:, t] = c
        h, c, (i, f, g, o, tanh_c) = _gates(zx[:, t] + h @ cell.w_hidden.T, c, hidden)
        for key, value in zip(("i", "f", "g", "o", "tanh_c"), (i, f, g, o, tanh_c)):
            store[key][:, t] = value
        out[:, t] = h
    return out, _ScanCache(inputs, **store)


def _scan_backward(cell, cache, d_out):
    batch, length, hidden = d_out.shape
    dz_all = np.empty((batch, length, 4 * hidden))
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    for t in reversed(range(length)):
        dz, dc_next = _gate_backward(
            d_out[:, t] + dh_next, dc_next, cache.c_prev[:, t],
            cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t], cache.tanh_c[:, t],
        )
        dz_all[:, t] = dz
        dh_next = dz @ cell.w_hidden
    flat = dz_all.reshape(-1, 4 * hidden)
    grads = DirectionParams(
        flat.T @ cache.inputs.reshape(batch * length, -1),
        flat.T @ cache.h_prev.reshape(-1, hidden),
        flat.sum(axis=0),
    )
    return dz_all @ cell.w_input, grads


def _reverse_index(lengths, length):
    """Per-row index that reverses the first lengths[b] steps and fixes the padding."""
    t = np.arange(length)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(t < lens, lens - 1 - t, t)


def _gather_time(x, index):
    return x[np.arange(x.shape[0])[:, None], index]


class LayerCache(NamedTuple):
    dropout_mask: Optional[np.ndarray]
    reverse_index: np.ndarray
    forward: _ScanCache
    backward: _ScanCache


def _layer_forward(layer, inputs, lengths, dropout_mask):
    fwd, bwd = layer
    if inputs.shape[-1] != fwd.w_input.shape[1]:
        raise ShapeError(f"layer input width {inputs.shape[-1]} != {fwd.w_input.shape[1]}")
    x = inputs * dropout_mask if dropout_mask is not None else inputs
    rev = _reverse_index(lengths, inputs.shape[1])
    out_f, cache_f = _scan_forward(fwd, x)
    out_b, cache_b = _scan_forward(bwd, _gather_time(x, rev))
    output = np.concatenate([out_f, _gather_time(out_b, rev)], axis=-1)
    return output, LayerCache(dropout_mask, rev, cache_f, cache_b)


def _layer_backward(layer, cache, d_out):
    fwd, bwd = layer
    hidden = fwd.w_hidden.shape[1]
    dx_f, grads_f = _scan_backward(fwd, cache.forward, d_out[..., :hidden])
    dx_b, grads_b = _scan_backward(bwd, cache.backward, _gather_time(d_out[..., hidden:], cache.reverse_index))
    dx = dx_f + _gather_time(dx_b, cache.reverse_index)
    if cache.dropout_mask is not None:
        dx = dx * cache.dropout_mask
    return dx, grads_f, grads_b


def _as_batch(indices, lengths):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None, :]
    if idx.ndim != 2 or idx.shape[1] == 0:
        raise ValueError("expected a nonempty index sequence or (B, L) batch")
    if lengths is None:
        lengths = np.full(idx.shape[0], idx.shape[1], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (idx.shape[0],) or lengths.min() < 1 or lengths.max() > idx.shape[1]:
        raise ValueError("lengths must lie in 1..L, one per row")
    return idx, lengths


def bilstm_layer_forward(layer, inputs, dropout_mask=None, lengths=None):
    """
    One bidirectional layer: (L, D_in) -> (L, 2H), or (B, L, D_in) -> (B, L, 2H).
    ``dropout_mask`` is multiplied into the inputs and already carries 1/(1-p).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    single = inputs.ndim == 2
    batch = inputs[None] if single else inputs
    if lengths is None:
        lengths = np.full(batch.shape[0], batch.shape[1])
    mask = None if dropout_mask is None else np.asarray(dropout_mask).reshape(batch.shape)
    output, _ = _layer_forward(layer, batch, lengths, mask)
    return output[0] if single else output


@dataclass
class ForwardTrace:
    """Caches of one forward pass; arrays are batched (B, L, ...)."""
    indices: np.ndarray
    lengths: np.ndarray
    embeddings: np.ndarray
    layer_caches: list
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    training: bool

    @property
    def mask(self):
        return length_mask(self.lengths, self.indices.shape[1])


def length_mask(lengths, length):
    return (np.arange(length)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def model_forward(params, indices, training=False, rng=None, lengths=None, dropout=0.0):
    """
    Embed, run the three BiLSTM layers and classify every position.
    Dropout is only drawn in training mode; inference is deterministic.
    """
    idx, lengths = _as_batch(indices, lengths)
    embeddings = embed_forward(params, idx)
    x = embeddings
    caches = []
    for layer in range(NUM_LAYERS):
        mask = None
        if training and dropout > 0.0:
            if rng is None:
                raise ValueError("training with dropout needs a random generator")
            keep = 1.0 - dropout
            mask = (rng.random(x.shape) < keep) / keep
        x, cache = _layer_forward(params.layer(layer), x, lengths, mask)
        caches.append(cache)
    logits = x @ params.classifier_w.T + params.classifier_b
    return ForwardTrace(idx, lengths, embeddings, caches, x, logits, _softmax(logits), training)


def softmax_cross_entropy(logits, labels, mask=None):
    """Mean negative log-likelihood over unmasked positions and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    flat = logits.reshape(-1, NUM_CLASSES)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != flat.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {flat.shape[0]} positions")
    if np.any((labels < 0) | (labels >= NUM_CLASSES)):
        raise ValueError("labels must be 0 or 1")
    weights = np.ones(flat.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    count = weights.sum()
    if count == 0:
        raise ValueError("every position is masked")

    shifted = flat - flat.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat.shape[0])
    loss = float(-(log_probs[rows, labels] * weights).sum() / count)

    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits *= weights[:, None] / count
    return loss, dlogits.reshape(logits.shape)


def backward(params, trace, labels, mask=None):
    """Exact gradients of the masked mean cross-entropy for every parameter block."""
    if mask is None:
        mask = trace.mask
    labels = np.asarray(labels).reshape(trace.logits.shape[:2])
    _, dlogits = softmax_cross_entropy(trace.logits, labels, mask)
    grads: Gradients = params.zeros_like()
    hidden2 = trace.hidden.shape[-1]

    flat_d = dlogits.reshape(-1, NUM_CLASSES)
    grads.arrays["classifier.w"][...] = flat_d.T @ trace.hidden.reshape(-1, hidden2)
    grads.arrays["classifier.b"][...] = flat_d.sum(axis=0)
    d = dlogits @ params.classifier_w

    for layer in reversed(range(NUM_LAYERS)):
        d, grads_f, grads_b = _layer_backward(params.layer(layer), trace.layer_caches[layer], d)
        for direction, block in zip(DIRECTIONS, (grads_f, grads_b)):
            prefix = f"lstm.{layer}.{direction}"
            grads.arrays[f"{prefix}.w_input"][...] = block.w_input
            grads.arrays[f"{prefix}.w_hidden"][...] = block.w_hidden
            grads.arrays[f"{prefix}.bias"][...] = block.bias

    np.add.at(grads.arrays["embedding"], trace.indices, d)
    return grads


# --- Optimization ---

@dataclass
class OptimizerState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(v) for k, v in params.arrays.items()},
            {k: np.zeros_like(v) for k, v in params.arrays.items()},
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, grad in grads.arrays.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)

    state.step_count += 1
    correction1 = 1.0 - beta1 ** state.step_count
    correction2 = 1.0 - beta2 ** state.step_count
    for name, param in params.arrays.items():
        grad = grads.arrays[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params, state


def clip_gradients(grads, max_norm):
    """Scale all blocks together so the global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.arrays.values():
            g *= scale
    return norm


def lr_schedule(cfg, epoch):
    """Exponential decay from lr_start (first epoch) to lr_end (last epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    if cfg.epochs == 1:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (cfg.epochs - 1))


# --- Training ---

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: Optional[float]
    val_macro_f1: Optional[float]


@dataclass
class TrainingResult:
    params: ModelParameters
    history: list = field(default_factory=list)
    best_epoch: int = 0


def encode_pairs(vocab, pairs):
    return [(np.asarray(vocab.encode(p.tokens), dtype=np.int64), np.asarray(p.labels, dtype=np.int64))
            for p in pairs]


def pad_batch(encoded):
    """Stack (indices, labels) pairs into padded (B, L) arrays plus lengths."""
    lengths = np.array([len(idx) for idx, _ in encoded], dtype=np.int64)
    length = int(lengths.max())
    idx = np.full((len(encoded), length), PAD_INDEX, dtype=np.int64)
    labels = np.ones((len(encoded), length), dtype=np.int64)
    for row, (tokens, tags) in enumerate(encoded):
        idx[row, :len(tokens)] = tokens
        labels[row, :len(tags)] = tags
    return idx, labels, lengths


def predict_batch(params, idx, lengths):
    """Argmax labels, keeping a token when both classes tie."""
    trace = model_forward(params, idx, training=False, lengths=lengths)
    return np.where(trace.probs[..., 0] > trace.probs[..., 1], 0, 1)


def evaluate_pairs(params, encoded, batch_size=32):
    predicted, gold = [], []
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start:start + batch_size]
        idx, _, lengths = pad_batch(chunk)
        labels = predict_batch(params, idx, lengths)
        for row, (_, tags) in enumerate(chunk):
            predicted.append(labels[row, :lengths[row]].tolist())
            gold.append(tags.tolist())
    return token_metrics(predicted, gold)


def train(params, vocab, splits, cfg, progress=False):
    """
    Mini-batch Adam on the train split; keeps the parameters with the best
    validation macro-F1 (the last epoch when there is no validation split).
    Deterministic for a given cfg.seed.
    """
    if not splits.train:
        raise ValueError("the train split is empty")
    rng = np.random.default_rng([cfg.seed, 1])
    train_data = encode_pairs(vocab, splits.train)
    val_data = encode_pairs(vocab, splits.validation)
    state = OptimizerState.zeros_like(params)
    result = TrainingResult(params)
    best_f1 = -1.0
    n_batches = math.ceil(len(train_data) / cfg.batch_size)

    for epoch in range(cfg.epochs):
        started = time.time()
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(len(train_data))
        loss_sum = 0.0
        token_count = 0.0
        batches = range(n_batches)
        for batch in tqdm(batches, desc=f"epoch {epoch + 1}/{cfg.epochs}", disable=not progress, leave=False):
            chunk = [train_data[i] for i in order[batch * cfg.batch_size:(batch + 1) * cfg.batch_size]]
            idx, labels, lengths = pad_batch(chunk)
            mask = length_mask(lengths, idx.shape[1])
            trace = model_forward(params, idx, training=True, rng=rng, lengths=lengths, dropout=cfg.dropout)
            loss, _ = softmax_cross_entropy(trace.logits, labels, mask)
            if not math.isfinite(loss):
                raise TrainingError("Training diverged: non-finite loss", epoch, batch)
            grads = backward(params, trace, labels, mask)
            if cfg.grad_clip > 0:
                clip_gradients(grads, cfg.grad_clip)
            try:
                adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            except NonFiniteGradientError as err:
                raise TrainingError(str(err), epoch, batch) from err
            loss_sum += loss * mask.sum()
            token_count += mask.sum()

        train_loss = loss_sum / token_count
        val_acc = val_f1 = None
        if val_data:
            scored = evaluate_pairs(params, val_data, cfg.batch_size)
            val_acc, val_f1 = scored.token_accuracy, scored.macro_f1
        result.history.append(EpochLog(epoch, lr, train_loss, val_acc, val_f1))

        duration = round(time.time() - started, 2)
        logger.info("Epoch %d/%d | lr %.3g | train loss %.5f | val acc %s | val macro-F1 %s | %ss",
                    epoch + 1, cfg.epochs, lr, train_loss,
                    "n/a" if val_acc is None else f"{val_acc:.4f}",
                    "n/a" if val_f1 is None else f"{val_f1:.4f}", duration)
        if duration > cfg.slow_epoch_seconds:
            logger.warning("PERFORMANCE ALERT: epoch %d took %ss", epoch + 1, duration)

        score = val_f1 if val_f1 is not None else float(epoch)
        if val_f1 is None or score > best_f1:
            best_f1 = score
            result.params = params.copy()
            result.best_epoch = epoch

    logger.info("Best epoch %d of %d", result.best_epoch + 1, cfg.epochs)
    return result


# --- Checkpoints ---
#
# Layout: MAGIC | uint64 little-endian header length | UTF-8 JSON header |
# payload of float64 little-endian blocks in parameter_shapes() order.
# The header holds format_version, dims, num_layers, gate_order, vocabulary,
# training_config, block names/shapes, the payload SHA-256 and header_sha256,
# the SHA-256 of the canonical header JSON without that field.

CHECKPOINT_MAGIC = b"CAPFIXCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParameters
    vocab: Vocabulary
    training_config: Optional[TrainingConfig] = None


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header_digest(header):
    return hashlib.sha256(_canonical_json({k: v for k, v in header.items() if k != "header_sha256"})).hexdigest()


def checkpoint_bytes(params, cfg, vocab):
    """Serialize parameters, vocabulary and training config into checkpoint bytes."""
    if len(vocab) != params.dims.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, model expects {params.dims.vocab_size}")
    if isinstance(cfg, dict):
        cfg = TrainingConfig(**cfg)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays.values())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dims": asdict(params.dims),
        "num_layers": NUM_LAYERS,
        "gate_order": list(GATE_ORDER),
        "vocabulary": list(vocab.index_to_token),
        "training_config": asdict(cfg) if cfg is not None else None,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in params.arrays.items()],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header["header_sha256"] = _header_digest(header)
    header_bytes = _canonical_json(header)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + payload


def save_checkpoint(params, cfg, vocab, path):
    atomic_write(path, checkpoint_bytes(params, cfg, vocab))
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path):
    """Read a checkpoint; any inconsistency raises CheckpointError and returns nothing."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err

    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < prefix or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a capfix checkpoint")
    (header_len,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC):prefix])
    if len(blob) < prefix + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[prefix:prefix + header_len].decode("utf-8"))
        if header.get("header_sha256") != _header_digest(header):
            raise CheckpointError(f"{path} header checksum mismatch")
        version = header["format_version"]
        dims = ModelDims(**header["dims"])
        if not all(type(v) is int and v > 0 for v in asdict(dims).values()):  # pylint: disable=unidiomatic-typecheck
            raise CheckpointError(f"{path} declares invalid dims {header['dims']}")
        gate_order = tuple(header["gate_order"])
        num_layers = header["num_layers"]
        tokens = header["vocabulary"]
        declared = [(b["name"], tuple(b["shape"])) for b in header["blocks"]]
        digest = header["payload_sha256"]
        cfg = header["training_config"]
        training_config = TrainingConfig(**cfg) if cfg is not None else None
    except (ValueError, KeyError, TypeError, AttributeError, ConfigError) as err:
        raise CheckpointError(f"{path} has a corrupted header: {err}") from err

    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if gate_order != GATE_ORDER or num_layers != NUM_LAYERS:
        raise CheckpointError(f"checkpoint gate order {gate_order} / {num_layers} layers not supported")
    shapes = parameter_shapes(dims)
    if declared != list(shapes.items()):
        raise CheckpointError("checkpoint blocks do not match the declared dimensions")
    payload = blob[prefix + header_len:]
    expected_bytes = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(payload) != expected_bytes:
        raise CheckpointError(f"{path} payload has {len(payload)} bytes, expected {expected_bytes}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointError(f"{path} payload checksum mismatch")

    try:
        vocab = Vocabulary.from_tokens(tokens)
    except (ValueError, TypeError) as err:
        raise CheckpointError(f"{path} has an invalid vocabulary: {err}") from err
    if len(vocab) != dims.vocab_size:
        raise CheckpointError("vocabulary size does not match dims")

    arrays = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    return Checkpoint(ModelParameters(dims, arrays), vocab, training_config)
