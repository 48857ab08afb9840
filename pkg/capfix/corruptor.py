"""
Synthetic false-repetition errors.

Every rule inserts one contiguous span labeled 0 into a clean sentence, so
filtering the label-1 tokens always gives back the clean sentence.
"""
import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources

from capfix.corpus import LabeledCaption
from capfix.errors import ConfigError

logger = logging.getLogger(__name__)


class CorruptionRule(str, Enum):
    VERB_REPETITION = "VerbRepetition"
    ADVERB_REPETITION = "AdverbRepetition"
    PARTIAL_REPETITION = "PartialRepetition"
    SENTENCE_REPETITION = "SentenceRepetition"
    EXTRA_TAILS = "ExtraTails"


DEFAULT_CONJUNCTIONS = (("and",), ("while",), ("as",), ("and", "then"))
DEFAULT_TAILS = (("and",), ("and", "a"), ("and", "then"), ("with", "a"), ("in", "the"))
DEFAULT_VERB_SUFFIXES = ("ing", "s", "es", "ed")


def read_stoplist(text):
    return frozenset(
        line.strip() for line in text.splitlines()
        if line.strip() and not line.strip().startswith("#")
    )


@lru_cache(maxsize=1)
def load_default_stoplist():
    """The shipped verb stoplist, read once."""
    text = (resources.files("capfix") / "data" / "verb_stoplist.txt").read_text(encoding="utf-8")
    return read_stoplist(text)


def _phrases(value):
    return tuple(tuple(phrase) for phrase in value)


@dataclass(frozen=True)
class RuleConfig:
    """Parameters of the five corruption rules."""
    conjunctions: tuple = DEFAULT_CONJUNCTIONS
    tails: tuple = DEFAULT_TAILS
    verb_suffixes: tuple = DEFAULT_VERB_SUFFIXES
    verb_stoplist: frozenset = field(default_factory=load_default_stoplist)
    adverb_suffix: str = "ly"
    partial_min_len: int = 3
    partial_max_len: int = 7
    clean_pair_ratio: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conjunctions", _phrases(self.conjunctions))
        object.__setattr__(self, "tails", _phrases(self.tails))
        object.__setattr__(self, "verb_suffixes", tuple(self.verb_suffixes))
        object.__setattr__(self, "verb_stoplist", frozenset(self.verb_stoplist))

        bad = []
        if not self.conjunctions or not all(self.conjunctions):
            bad.append("rules.conjunctions")
        if not self.tails or not all(self.tails):
            bad.append("rules.tails")
        if not self.verb_suffixes or not all(self.verb_suffixes):
            bad.append("rules.verb_suffixes")
        if not self.adverb_suffix:
            bad.append("rules.adverb_suffix")
        if self.partial_min_len < 2:
            bad.append("rules.partial_min_len")
        if self.partial_max_len < self.partial_min_len:
            bad.append("rules.partial_max_len")
        if self.clean_pair_ratio < 0:
            bad.append("rules.clean_pair_ratio")
        if bad:
            raise ConfigError("Invalid rule configuration", bad)

    def to_dict(self):
        return {
            "conjunctions": [list(p) for p in self.conjunctions],
            "tails": [list(p) for p in self.tails],
            "verb_suffixes": list(self.verb_suffixes),
            "verb_stoplist": sorted(self.verb_stoplist),
            "adverb_suffix": self.adverb_suffix,
            "partial_min_len": self.partial_min_len,
            "partial_max_len": self.partial_max_len,
            "clean_pair_ratio": self.clean_pair_ratio,
        }

    def fingerprint(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@lru_cache(maxsize=1)
def default_rule_config():
    return RuleConfig()


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple
    validation: tuple
    test: tuple
    split_seed: int

    def items(self):
        return (("train", self.train), ("validation", self.validation), ("test", self.test))

    def counts(self):
        return {name: len(pairs) for name, pairs in self.items()}


def find_verbs(tokens, cfg=None):
    """Indices of tokens that look like inflected verbs."""
    cfg = cfg or default_rule_config()
    return [
        i for i, tok in enumerate(tokens)
        if tok not in cfg.verb_stoplist
        and any(tok.endswith(sfx) and len(tok) > len(sfx) for sfx in cfg.verb_suffixes)
    ]


def find_adverbs(tokens, cfg=None):
    cfg = cfg or default_rule_config()
    suffix = cfg.adverb_suffix
    return [i for i, tok in enumerate(tokens) if tok.endswith(suffix) and len(tok) > len(suffix)]


def _insert(clean, position, span, rule):
    tokens = clean.tokens[:position] + tuple(span) + clean.tokens[position:]
    labels = (1,) * position + (0,) * len(span) + (1,) * (len(clean.tokens) - position)
    return LabeledCaption(tokens, labels, clean.id, rule.value)


def corrupt(clean, rule, cfg=None, rng=None):
    """
    Apply one corruption rule to a clean caption.

    Returns the labeled pair, or None when the rule is inapplicable
    (no verb / adverb found, or the sentence is too short for a partial repeat).
    """
    cfg = cfg or default_rule_config()
    if rng is None:
        raise ValueError("corrupt needs an explicit random generator")
    rule = CorruptionRule(rule)
    tokens = clean.tokens
    length = len(tokens)

    if rule is CorruptionRule.VERB_REPETITION:
        verbs = find_verbs(tokens, cfg)
        if not verbs:
            return None
        i = rng.choice(verbs)
        conj = rng.choice(cfg.conjunctions)
        return _insert(clean, i + 1, conj + (tokens[i],), rule)

    if rule is CorruptionRule.ADVERB_REPETITION:
        adverbs = find_adverbs(tokens, cfg)
        if not adverbs:
            return None
        i = rng.choice(adverbs)
        return _insert(clean, i + 1, (tokens[i],), rule)

    if rule is CorruptionRule.PARTIAL_REPETITION:
        upper = min(cfg.partial_max_len, length - 1)
        if upper < cfg.partial_min_len:
            return None
        k = rng.randint(cfg.partial_min_len, upper)
        conj = rng.choice(cfg.conjunctions)
        return _insert(clean, length, conj + tokens[length - k:], rule)

    if rule is CorruptionRule.SENTENCE_REPETITION:
        conj = rng.choice(cfg.conjunctions)
        return _insert(clean, length, conj + tokens, rule)

    tail = rng.choice(cfg.tails)
    return _insert(clean, length, tail, rule)


def sentence_rng(seed, caption_id):
    """Random stream owned by one sentence, derived from (seed, id) only."""
    digest = hashlib.sha256(f"{seed}:{caption_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def corrupt_sentence(clean, cfg, rng):
    """Five corrupted pairs (one attempt per rule) plus the clean-clean pairs."""
    pairs = []
    for rule in CorruptionRule:
        pair = corrupt(clean, rule, cfg, rng)
        if pair is None:
            logger.debug("%s inapplicable to %s, repeating the sentence instead", rule.value, clean.id)
            pair = corrupt(clean, CorruptionRule.SENTENCE_REPETITION, cfg, rng)
        pairs.append(pair)
    ones = (1,) * len(clean.tokens)
    pairs.extend(LabeledCaption(clean.tokens, ones, clean.id, None) for _ in range(cfg.clean_pair_ratio))
    return pairs


def _split_key(seed, caption_id):
    return hashlib.sha256(f"split:{seed}:{caption_id}".encode("utf-8")).digest()


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")


def generate_dataset(corpus, cfg=None, ratios=(0.8, 0.1, 0.1), seed=0, threads=1):
    """
    Corrupt every clean caption and split the pairs by sentence.

    Sentences are ordered by a seeded hash of their id and cut into
    train/validation/test blocks, so a sentence's pairs never straddle splits.
    """
    cfg = cfg or default_rule_config()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot generate a dataset from an empty corpus")
    _check_ratios(ratios)
    ids = [caption.id for caption in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("caption ids must be unique")
    for caption in corpus:
        if not caption.tokens:
            raise ValueError(f"caption {caption.id!r} is empty")

    def work(caption):
        return corrupt_sentence(caption, cfg, sentence_rng(seed, caption.id))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sentence = list(pool.map(work, corpus))
    else:
        per_sentence = [work(caption) for caption in corpus]

    total = len(corpus)
    n_train = round(total * ratios[0])
    n_val = min(round(total * ratios[1]), total - n_train)
    order = sorted(range(total), key=lambda i: (_split_key(seed, ids[i]), i))
    assignment = {}
    for rank, i in enumerate(order):
        assignment[i] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2

    buckets = ([], [], [])
    for i, pairs in enumerate(per_sentence):
        buckets[assignment[i]].extend(pairs)

    fallbacks = sum(
        1 for pairs in per_sentence for rule, pair in zip(CorruptionRule, pairs)
        if pair.rule != rule.value
    )
    splits = DatasetSplits(tuple(buckets[0]), tuple(buckets[1]), tuple(buckets[2]), seed)
    logger.info(
        "Generated %d pairs from %d sentences (%d rule fallbacks): %s",
        sum(len(b) for b in buckets), total, fallbacks, splits.counts(),
    )
    return splits
