"""Tokenization, vocabulary and the JSONL caption / labeled-pair files."""
import json
import logging
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional

from capfix.errors import SchemaError

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1
SPECIALS = (PAD, UNK)

# Anything that is neither a word character nor whitespace, plus underscore.
_PUNCTUATION = re.compile(r"[^\w\s]|_")


def tokenize(raw):
    """Lowercase, strip punctuation and split on whitespace runs."""
    return _PUNCTUATION.sub("", raw.lower()).split()


def _check_tokens(tokens, what):
    if not tokens:
        raise ValueError(f"{what} has no tokens")
    for token in tokens:
        if not token or any(ch.isspace() for ch in token):
            raise ValueError(f"{what} has an empty or whitespace token: {token!r}")
        if token in SPECIALS:
            raise ValueError(f"{what} contains the reserved token {token!r}")


@dataclass(frozen=True)
class Caption:
    """One clean caption: a record id and its tokens."""
    id: str
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        _check_tokens(self.tokens, f"caption {self.id!r}")

    @classmethod
    def from_text(cls, caption_id, text):
        return cls(caption_id, tokenize(text))

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass(frozen=True)
class LabeledCaption:
    """
    Tokens paired with keep (1) / delete (0) labels.
    ``rule`` is the corruption that produced the pair, None for clean-clean pairs.
    """
    tokens: tuple
    labels: tuple
    source_id: str
    rule: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(int(label) for label in self.labels))
        _check_tokens(self.tokens, f"pair from {self.source_id!r}")
        if len(self.labels) != len(self.tokens):
            raise ValueError(
                f"pair from {self.source_id!r}: {len(self.labels)} labels for {len(self.tokens)} tokens"
            )
        if any(label not in (0, 1) for label in self.labels):
            raise ValueError(f"pair from {self.source_id!r}: labels must be 0 or 1")

    @property
    def is_clean(self):
        return all(self.labels)

    def clean_tokens(self):
        """The tokens that survive the deletion mask."""
        return tuple(tok for tok, label in zip(self.tokens, self.labels) if label == 1)

    def labels_for(self, kept):
        """
        Keep/delete labels that reduce these tokens to ``kept``. When several
        deletions give the same result, the one agreeing most with ``labels`` wins.
        """
        kept = tuple(kept)
        n, m = len(self.tokens), len(kept)
        unreachable = -1
        score = [[unreachable] * (m + 1) for _ in range(n + 1)]
        score[0][0] = 0
        for i, tok in enumerate(self.tokens):
            for j in range(min(i, m) + 1):
                if score[i][j] == unreachable:
                    continue
                score[i + 1][j] = max(score[i + 1][j], score[i][j] + (self.labels[i] == 0))
                if j < m and tok == kept[j]:
                    score[i + 1][j + 1] = max(score[i + 1][j + 1], score[i][j] + (self.labels[i] == 1))
        if score[n][m] == unreachable:
            raise ValueError(f"pair from {self.source_id!r}: {' '.join(kept)!r} is not a subsequence of its tokens")

        labels = [0] * n
        j = m
        for i in range(n, 0, -1):
            if (j and self.tokens[i - 1] == kept[j - 1] and score[i - 1][j - 1] != unreachable
                    and score[i - 1][j - 1] + (self.labels[i - 1] == 1) == score[i][j]):
                labels[i - 1] = 1
                j -= 1
        return tuple(labels)

    def to_record(self):
        return {
            "source_id": self.source_id,
            "tokens": list(self.tokens),
            "labels": list(self.labels),
            "rule": self.rule,
        }


class Vocabulary:
    """Bijective token <-> index map with ``<pad>`` at 0 and ``<unk>`` at 1."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if tokens[:2] != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index_to_token = tokens
        self._token_to_index = {token: index for index, token in enumerate(tokens)}

    @classmethod
    def from_tokens(cls, tokens):
        return cls(tokens)

    @property
    def token_to_index(self):
        return MappingProxyType(self._token_to_index)

    @property
    def index_to_token(self):
        return self._index_to_token

    @property
    def pad_index(self):
        return PAD_INDEX

    @property
    def unk_index(self):
        return UNK_INDEX

    def __len__(self):
        return len(self._index_to_token)

    def __contains__(self, token):
        return token in self._token_to_index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._index_to_token == other._index_to_token

    def __hash__(self):
        return hash(self._index_to_token)

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    def encode(self, tokens):
        return [self._token_to_index.get(token, UNK_INDEX) for token in tokens]

    def decode(self, indices):
        size = len(self._index_to_token)
        out = []
        for index in indices:
            index = int(index)
            if not 0 <= index < size:
                raise IndexError(f"index {index} outside vocabulary of size {size}")
            out.append(self._index_to_token[index])
        return out


def build_vocab(corpus, min_count=1):
    """
    Build a vocabulary from captions (or plain token sequences).
    Tokens are ordered by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    seen = 0
    for item in corpus:
        counts.update(getattr(item, "tokens", item))
        seen += 1
    if seen == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    kept = [tok for tok, n in counts.items() if n >= min_count and tok not in SPECIALS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    vocab = Vocabulary(SPECIALS + tuple(kept))
    logger.info("Built vocabulary of %d tokens (min_count=%d)", len(vocab), min_count)
    return vocab


# --- File I/O ---

def atomic_write_many(contents):
    """
    Write several files so that either all of them land or none do.
    ``contents`` maps path -> str or bytes. Everything is staged next to its
    target first; targets are only replaced once every stage succeeded.
    """
    staged = []
    try:
        for path, data in contents.items():
            path = os.fspath(path)
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".capfix-", dir=directory)
            staged.append((tmp, path))
            mode = "wb" if isinstance(data, bytes) else "w"
            kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": "\n"}
            with os.fdopen(fd, mode, **kwargs) as handle:
                handle.write(data)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.remove(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def atomic_write(path, data):
    atomic_write_many({path: data})


def _read_jsonl(path):
    """Yield (line_number, object) pairs, skipping blank lines."""
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({err.msg})") from err
            if not isinstance(record, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def _require(record, key, kind, path, lineno):
    value = record.get(key)
    if not isinstance(value, kind):
        raise SchemaError(f"{path}:{lineno}: field '{key}' missing or not {kind.__name__}")
    return value


def _dumps(record):
    return json.dumps(record, ensure_ascii=False)


def format_jsonl(records):
    return "".join(_dumps(record) + "\n" for record in records)


def load_captions(path):
    """Read a clean-caption JSONL file: {"id": ..., "caption": ...} per line."""
    captions = []
    seen = set()
    for lineno, record in _read_jsonl(path):
        caption_id = _require(record, "id", str, path, lineno)
        text = _require(record, "caption", str, path, lineno)
        if caption_id in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate id {caption_id!r}")
        seen.add(caption_id)
        try:
            captions.append(Caption.from_text(caption_id, text))
        except ValueError as err:
            raise SchemaError(f"{path}:{lineno}: {err}") from err
    logger.info("Loaded %d captions from %s", len(captions), path)
    return captions


def caption_records(captions):
    return ({"id": caption.id, "caption": caption.text} for caption in captions)


def save_captions(path, captions):
    atomic_write(path, format_jsonl(caption_records(captions)))


def load_references(path):
    """
    Read a reference file into {id: [token tuple, ...]}.
    Each line is {"id", "captions": [..]}; a single {"id", "caption"} is accepted too.
    """
    references = {}
    for lineno, record in _read_jsonl(path):
        ref_id = _require(record, "id", str, path, lineno)
        if ref_id in references:
            raise SchemaError(f"{path}:{lineno}: duplicate id {ref_id!r}")
        texts = record.get("captions")
        if texts is None and isinstance(record.get("caption"), str):
            texts = [record["caption"]]
        if not isinstance(texts, list) or not texts or not all(isinstance(t, str) for t in texts):
            raise SchemaError(f"{path}:{lineno}: field 'captions' must be a nonempty list of strings")
        tokenized = [tuple(tokenize(text)) for text in texts]
        if not all(tokenized):
            raise SchemaError(f"{path}:{lineno}: empty reference caption")
        references[ref_id] = tokenized
    return references


def format_labeled(pairs):
    return format_jsonl(pair.to_record() for pair in pairs)


def save_labeled(path, pairs):
    atomic_write(path, format_labeled(pairs))


def load_labeled(path):
    pairs = []
    for lineno, record in _read_jsonl(path):
        source_id = _require(record, "source_id", str, path, lineno)
        tokens = _require(record, "tokens", list, path, lineno)
        labels = _require(record, "labels", list, path, lineno)
        rule = record.get("rule")
        if rule is not None and not isinstance(rule, str):
            raise SchemaError(f"{path}:{lineno}: field 'rule' must be a string or null")
        if not all(isinstance(tok, str) for tok in tokens):
            raise SchemaError(f"{path}:{lineno}: tokens must be strings")
        if not all(label in (0, 1) and not isinstance(label, bool) for label in labels):
            raise SchemaError(f"{path}:{lineno}: labels must be 0 or 1")
        try:
            pairs.append(LabeledCaption(tokens, labels, source_id, rule))
        except ValueError as err:
            raise SchemaError(f"{path}:{lineno}: {err}") from err
    return pairs


def as_token_map(captions) -> Mapping[str, tuple]:
    return {caption.id: caption.tokens for caption in captions}


def pair_ids(pairs):
    """Yield ``(id, pair)`` with ids ``<source_id>#k``, k counting pairs per source in file order."""
    seen = Counter()
    for pair in pairs:
        k = seen[pair.source_id]
        seen[pair.source_id] += 1
        yield f"{pair.source_id}#{k}", pair
