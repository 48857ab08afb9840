"""Apply a trained labeler to captions and delete the words it marks with 0."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from capfix.corpus import (Caption, LabeledCaption, atomic_write_many, caption_records,
                           format_jsonl, format_labeled, load_captions)
from capfix.neural import load_checkpoint, predict_batch

logger = logging.getLogger(__name__)

MAX_PASSES = 3


def predict_labels(params, vocab, tokens):
    """Per-token keep (1) / delete (0) decision; a 0.5/0.5 tie keeps the token."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot label an empty caption")
    idx = np.asarray(vocab.encode(tokens), dtype=np.int64)[None, :]
    return [int(label) for label in predict_batch(params, idx, None)[0]]


def apply_mask(tokens, labels):
    """Keep tokens labeled 1. A mask that would delete everything is ignored."""
    tokens = list(tokens)
    labels = list(labels)
    if len(tokens) != len(labels):
        raise ValueError(f"{len(tokens)} tokens but {len(labels)} labels")
    if not any(labels):
        return tokens
    return [tok for tok, label in zip(tokens, labels) if label == 1]


@dataclass(frozen=True)
class CorrectionSummary:
    count: int
    count_changed: int
    tokens_deleted: int

    def to_dict(self):
        return {"count": self.count, "count_changed": self.count_changed, "tokens_deleted": self.tokens_deleted}


class Corrector:
    """A loaded model plus its vocabulary."""

    def __init__(self, params, vocab):
        self.params = params
        self.vocab = vocab

    @classmethod
    def from_checkpoint(cls, path):
        checkpoint = load_checkpoint(path)
        return cls(checkpoint.params, checkpoint.vocab)

    def labels(self, tokens, iterate=False):
        """
        Labels over the original positions. With ``iterate`` the surviving
        tokens are relabeled until nothing changes or MAX_PASSES is reached.
        """
        tokens = list(tokens)
        alive = list(range(len(tokens)))
        for _ in range(MAX_PASSES if iterate else 1):
            current = [tokens[i] for i in alive]
            predicted = predict_labels(self.params, self.vocab, current)
            kept = apply_mask(range(len(current)), predicted)
            if len(kept) == len(current):
                break
            alive = [alive[i] for i in kept]
        survivors = set(alive)
        return [1 if i in survivors else 0 for i in range(len(tokens))]

    def correct(self, tokens, iterate=False):
        tokens = list(tokens)
        return apply_mask(tokens, self.labels(tokens, iterate))


def correct_file(model_path, in_path, out_path, iterate=False, threads=1, labels_out=None):
    """
    Correct every caption of a clean-caption JSONL file, keeping ids and order.
    Optionally also writes the predicted labels in the labeled-pair schema.
    """
    corrector = Corrector.from_checkpoint(model_path)
    captions = load_captions(in_path)

    def work(caption):
        return corrector.labels(caption.tokens, iterate)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_labels = list(pool.map(work, captions))
    else:
        all_labels = [work(caption) for caption in captions]

    corrected = []
    changed = deleted = 0
    for caption, labels in zip(captions, all_labels):
        kept = apply_mask(caption.tokens, labels)
        removed = len(caption.tokens) - len(kept)
        changed += removed > 0
        deleted += removed
        corrected.append(Caption(caption.id, kept))

    outputs = {out_path: format_jsonl(caption_records(corrected))}
    if labels_out:
        outputs[labels_out] = format_labeled(
            LabeledCaption(c.tokens, labels, c.id, None) for c, labels in zip(captions, all_labels)
        )
    atomic_write_many(outputs)

    summary = CorrectionSummary(len(captions), changed, deleted)
    logger.info("Corrected %d captions: %d changed, %d tokens deleted", summary.count, changed, deleted)
    return summary
