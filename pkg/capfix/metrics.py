"""
Caption-quality and labeling metrics.

bleu4, rouge_l, cider_d and the semantic scores are reported on a x100 scale.
token_metrics returns fractions in [0, 1].
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.metrics import confusion_matrix
from sklearn.metrics.pairwise import cosine_similarity

from capfix.corruptor import DEFAULT_CONJUNCTIONS
from capfix.errors import SchemaError

logger = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
DEFAULT_PENALTY = 0.9

DANGLING_TAILS = frozenset({"and", "a", "the", "with", "in", "then", "as", "while", "to", "of"})

# Words that carry no content for the semantic score. Must cover every
# conjunction and tail token the corruptor can insert.
FUNCTION_WORDS = frozenset({
    "a", "an", "the", "and", "or", "but", "then", "while", "as", "with", "in",
    "on", "at", "of", "to", "by", "for", "from", "into", "onto", "is", "are",
    "was", "were", "be", "being", "been", "it", "its", "there", "some", "that",
    "this", "which", "who",
})


class ErrorKind(str, Enum):
    ADVERB = "adverb"
    VERB = "verb"
    SENTENCE = "sentence"
    PARTIAL = "partial"
    EXTRA_TAIL = "extra-tail"


def _check_corpus(candidates, references):
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise ValueError(f"candidate {i} has no references")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU ---

def bleu4(candidates, references):
    """
    Corpus BLEU with uniform weights over 1..4-grams.
    A zero 2..4-gram precision is smoothed to (matches + 1) / (total + 1).
    """
    _check_corpus(candidates, references)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = tuple(cand)
        cand_len += len(cand)
        # closest reference length, ties go to the shorter one
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            cand_counts = _ngrams(cand, n)
            max_ref = Counter()
            for ref in refs:
                for gram, count in _ngrams(tuple(ref), n).items():
                    max_ref[gram] = max(max_ref[gram], count)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if matches[0] == 0 or cand_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(4):
        if n > 0 and matches[n] == 0:
            precision = (matches[n] + 1) / (totals[n] + 1)
        else:
            precision = matches[n] / totals[n]
        log_precision += math.log(precision) / 4
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_precision)


# --- ROUGE-L ---

def _lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate, refs, beta=ROUGE_BETA):
    best = 0.0
    for ref in refs:
        lcs = _lcs(candidate, ref)
        if lcs == 0:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        score = (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)
        best = max(best, score)
    return best


def rouge_l(candidates, references, beta=ROUGE_BETA):
    """Mean over candidates of the best LCS F-measure against its references."""
    _check_corpus(candidates, references)
    scores = [rouge_l_sentence(tuple(c), [tuple(r) for r in refs], beta) for c, refs in zip(candidates, references)]
    return 100.0 * sum(scores) / len(scores)


# --- CIDEr-D ---

def _cider_counts(tokens):
    counts = Counter()
    for n in range(1, 5):
        counts.update(_ngrams(tuple(tokens), n))
    return counts


def _cider_vec(counts, doc_freq, log_docs, floor_df):
    vec = [{} for _ in range(4)]
    norm = [0.0] * 4
    length = 0
    for gram, tf in counts.items():
        n = len(gram) - 1
        weight = float(tf) * (log_docs - math.log(doc_freq[gram] or floor_df))
        vec[n][gram] = weight
        norm[n] += weight ** 2
        if n == 1:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def _cider_sim(hyp, ref, sigma):
    vec_h, norm_h, len_h = hyp
    vec_r, norm_r, len_r = ref
    delta = float(len_h - len_r)
    val = np.zeros(4)
    for n in range(4):
        for gram, weight in vec_h[n].items():
            ref_weight = vec_r[n].get(gram, 0.0)
            val[n] += min(weight, ref_weight) * ref_weight
        if norm_h[n] != 0 and norm_r[n] != 0:
            val[n] /= norm_h[n] * norm_r[n]
        val[n] *= math.e ** (-(delta ** 2) / (2 * sigma ** 2))
    return val


def cider_d_sentences(candidates, references, sigma=CIDER_SIGMA):
    """
    Per-candidate CIDEr-D (already x10), document frequencies from the references.
    Candidate n-grams no reference contains get the document frequency of the
    rarest reference n-gram, so duplicating the whole corpus leaves scores unchanged.
    """
    _check_corpus(candidates, references)
    if len(candidates) < 2:
        raise ValueError("CIDEr-D needs at least 2 items so document frequencies mean something")
    ref_counts = [[_cider_counts(r) for r in refs] for refs in references]
    doc_freq = Counter()
    for counts in ref_counts:
        doc_freq.update(set(gram for c in counts for gram in c))
    log_docs = math.log(float(len(references)))
    floor_df = min(doc_freq.values(), default=1)

    scores = []
    for cand, counts in zip(candidates, ref_counts):
        hyp = _cider_vec(_cider_counts(cand), doc_freq, log_docs, floor_df)
        total = np.zeros(4)
        for ref in counts:
            total += _cider_sim(hyp, _cider_vec(ref, doc_freq, log_docs, floor_df), sigma)
        scores.append(float(np.mean(total)) / len(counts) * 10.0)
    return scores


def cider_d(candidates, references, sigma=CIDER_SIGMA):
    """Corpus CIDEr-D, scaled x10 on top of the usual x10 to sit on the x100 table scale."""
    scores = cider_d_sentences(candidates, references, sigma)
    return 10.0 * sum(scores) / len(scores)


# --- Repetition detector ---

def _is_sentence_repetition(tokens, conjunctions):
    for conj in conjunctions:
        body = len(tokens) - len(conj)
        if body < 2 or body % 2:
            continue
        half = body // 2
        if tokens[half:half + len(conj)] == conj and tokens[:half] == tokens[half + len(conj):]:
            return True
    return False


def _has_repeated_span(tokens, min_len=3):
    length = len(tokens)
    for n in range(min_len, length // 2 + 1):
        seen = {}
        for i in range(length - n + 1):
            gram = tokens[i:i + n]
            first = seen.setdefault(gram, i)
            if i - first >= n:
                return True
    return False


def detect_repetition_error(tokens, conjunctions=DEFAULT_CONJUNCTIONS):
    """
    Rule-based false-repetition detector.
    Returns the first matching ErrorKind, or None for a clean caption.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("cannot check an empty caption")
    conjunctions = [tuple(c) for c in conjunctions]

    if any(a == b for a, b in zip(tokens, tokens[1:])):
        return ErrorKind.ADVERB
    for i, tok in enumerate(tokens):
        for conj in conjunctions:
            j = i + 1 + len(conj)
            if j < len(tokens) and tokens[i + 1:j] == conj and tokens[j] == tok:
                return ErrorKind.VERB
    if _is_sentence_repetition(tokens, conjunctions):
        return ErrorKind.SENTENCE
    if _has_repeated_span(tokens):
        return ErrorKind.PARTIAL
    if tokens[-1] in DANGLING_TAILS:
        return ErrorKind.EXTRA_TAIL
    return None


# --- Semantic score ---

def _content_words(tokens):
    return [tok for tok in tokens if tok not in FUNCTION_WORDS]


def semantic_scores(candidates, references):
    """
    Per-candidate max cosine similarity (x100) between binary TF-IDF vectors of
    content words, IDF fitted on the reference corpus.
    """
    _check_corpus(candidates, references)
    flat_refs = [tuple(r) for refs in references for r in refs]
    vectorizer = TfidfVectorizer(analyzer=_content_words, binary=True, lowercase=False)
    try:
        ref_matrix = vectorizer.fit_transform(flat_refs)
    except ValueError:
        logger.warning("References contain no content words, semantic score is 0")
        return [0.0] * len(candidates)
    cand_matrix = vectorizer.transform([tuple(c) for c in candidates])
    sims = cosine_similarity(cand_matrix, ref_matrix)

    scores = []
    start = 0
    for row, refs in enumerate(references):
        stop = start + len(refs)
        scores.append(100.0 * float(sims[row, start:stop].max()))
        start = stop
    return scores


@dataclass(frozen=True)
class FluencyScore:
    penalized: float
    unpenalized: float
    error_rate: float


def fluency_penalized_score(candidates, references, penalty=DEFAULT_PENALTY, conjunctions=DEFAULT_CONJUNCTIONS):
    """
    Semantic score with flagged candidates scaled by (1 - penalty).
    A flagged candidate whose semantic score is already 0 costs nothing, so
    penalized can equal unpenalized with a nonzero error rate.
    """
    if not 0.0 <= penalty <= 1.0:
        raise ValueError("penalty must lie in [0, 1]")
    semantic = semantic_scores(candidates, references)
    flags = [detect_repetition_error(c, conjunctions) is not None for c in candidates]
    penalized = [s * (1.0 - penalty) if flag else s for s, flag in zip(semantic, flags)]
    count = len(semantic)
    return FluencyScore(
        penalized=sum(penalized) / count,
        unpenalized=sum(semantic) / count,
        error_rate=sum(flags) / count,
    )


# --- Token labeling ---

@dataclass(frozen=True)
class TokenMetrics:
    token_accuracy: float
    macro_f1: float


def token_metrics(predicted, gold):
    """
    Accuracy and macro-F1 over the keep/delete labels of a corpus.
    A class absent from both gold and predicted labels scores F1 = 1.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted sequences but {len(gold)} gold sequences")
    flat_pred, flat_gold = [], []
    for i, (p, g) in enumerate(zip(predicted, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {i}: {len(p)} predicted labels but {len(g)} gold labels")
        flat_pred.extend(int(x) for x in p)
        flat_gold.extend(int(x) for x in g)
    if not flat_gold:
        raise ValueError("no labels to score")

    matrix = confusion_matrix(flat_gold, flat_pred, labels=[0, 1])
    f1_scores = []
    for cls in (0, 1):
        tp = matrix[cls, cls]
        fp = matrix[:, cls].sum() - tp
        fn = matrix[cls, :].sum() - tp
        denominator = 2 * tp + fp + fn
        f1_scores.append(1.0 if denominator == 0 else 2 * tp / denominator)
    accuracy = float(np.trace(matrix)) / len(flat_gold)
    return TokenMetrics(token_accuracy=accuracy, macro_f1=float(np.mean(f1_scores)))


# --- Report ---

@dataclass
class EvaluationReport:
    count: int
    bleu4: float
    rouge_l: float
    cider_d: float
    semantic_score: float
    fluency_penalized_score: float
    error_rate: float
    error_kinds: dict = field(default_factory=dict)
    token_accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    exact_match_rate: Optional[float] = None
    clean_altered_rate: Optional[float] = None

    def to_dict(self):
        out = {
            "scale": "bleu4, rouge_l, cider_d, semantic_score, fluency_penalized_score are x100",
            "count": self.count,
            "bleu4": round(self.bleu4, 2),
            "rouge_l": round(self.rouge_l, 2),
            "cider_d": round(self.cider_d, 2),
            "semantic_score": round(self.semantic_score, 2),
            "fluency_penalized_score": round(self.fluency_penalized_score, 2),
            "error_rate": round(self.error_rate, 4),
            "error_kinds": dict(sorted(self.error_kinds.items())),
        }
        if self.token_accuracy is not None:
            out["token_accuracy"] = round(self.token_accuracy, 4)
            out["macro_f1"] = round(self.macro_f1, 4)
        if self.exact_match_rate is not None:
            out["exact_match_rate"] = round(self.exact_match_rate, 4)
        if self.clean_altered_rate is not None:
            out["clean_altered_rate"] = round(self.clean_altered_rate, 4)
        return out


def align(candidates, references):
    """Pair candidate and reference maps by id; ids must match exactly."""
    missing = sorted(set(references) - set(candidates))
    extra = sorted(set(candidates) - set(references))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing candidates for ids: {', '.join(missing)}")
        if extra:
            parts.append(f"no references for ids: {', '.join(extra)}")
        raise SchemaError("; ".join(parts))
    ids = sorted(references)
    return ids, [tuple(candidates[i]) for i in ids], [references[i] for i in ids]


@dataclass(frozen=True)
class CorrectionFidelity:
    exact_match_rate: float
    clean_altered_rate: Optional[float]


def correction_fidelity(candidates, gold):
    """
    How often a corrected candidate equals its gold clean tokens, and how often a
    caption that needed no correction came out changed. ``gold`` maps id -> LabeledCaption.
    """
    if set(candidates) != set(gold):
        raise SchemaError("candidate and gold ids differ")
    if not gold:
        raise ValueError("no gold pairs to score")
    exact = sum(tuple(candidates[i]) == pair.clean_tokens() for i, pair in gold.items())
    clean = [i for i, pair in gold.items() if pair.is_clean]
    altered = sum(tuple(candidates[i]) != gold[i].tokens for i in clean)
    return CorrectionFidelity(
        exact_match_rate=exact / len(gold),
        clean_altered_rate=altered / len(clean) if clean else None,
    )


def gold_labels(candidates, gold):
    """(predicted, gold) label lists recovered by aligning each candidate to its gold pair."""
    if set(candidates) != set(gold):
        raise SchemaError("candidate and gold ids differ")
    predicted, expected = [], []
    for caption_id in sorted(gold):
        pair = gold[caption_id]
        try:
            predicted.append(pair.labels_for(candidates[caption_id]))
        except ValueError as err:
            raise SchemaError(f"{caption_id}: {err}") from err
        expected.append(pair.labels)
    return predicted, expected


def evaluate(candidates, references, penalty=DEFAULT_PENALTY, labels=None, gold=None,
             conjunctions=DEFAULT_CONJUNCTIONS):
    """
    Score a candidate map {id: tokens} against {id: [reference tokens]}.
    ``labels`` is an optional (predicted, gold) pair of label-sequence lists.
    ``gold`` maps the same ids to LabeledCaption; it adds the correction-fidelity
    rates and, without ``labels``, the token metrics of the aligned candidates.
    """
    _, cands, refs = align(candidates, references)
    fluency = fluency_penalized_score(cands, refs, penalty, conjunctions)
    kinds = Counter(
        kind.value for kind in (detect_repetition_error(c, conjunctions) for c in cands) if kind is not None
    )
    report = EvaluationReport(
        count=len(cands),
        bleu4=bleu4(cands, refs),
        rouge_l=rouge_l(cands, refs),
        cider_d=cider_d(cands, refs),
        semantic_score=fluency.unpenalized,
        fluency_penalized_score=fluency.penalized,
        error_rate=fluency.error_rate,
        error_kinds=dict(kinds),
    )
    if gold is not None:
        fidelity = correction_fidelity(candidates, gold)
        report.exact_match_rate = fidelity.exact_match_rate
        report.clean_altered_rate = fidelity.clean_altered_rate
        if labels is None:
            labels = gold_labels(candidates, gold)
    if labels is not None:
        scored = token_metrics(*labels)
        report.token_accuracy = scored.token_accuracy
        report.macro_f1 = scored.macro_f1
    logger.info("Evaluated %d candidates: BLEU-4 %.2f, penalized %.2f", report.count, report.bleu4,
                report.fluency_penalized_score)
    return report


def mean_report(reports):
    """Average several runs (e.g. one per seed) field by field; optional fields only when every run has them."""
    if not reports:
        raise ValueError("no reports to average")
    count = reports[0].count
    if any(r.count != count for r in reports):
        raise ValueError("reports cover different numbers of candidates")

    def mean(name):
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    kinds = Counter()
    for r in reports:
        kinds.update(r.error_kinds)
    return EvaluationReport(
        count=count,
        bleu4=mean("bleu4"),
        rouge_l=mean("rouge_l"),
        cider_d=mean("cider_d"),
        semantic_score=mean("semantic_score"),
        fluency_penalized_score=mean("fluency_penalized_score"),
        error_rate=mean("error_rate"),
        error_kinds={k: v / len(reports) for k, v in kinds.items()},
        token_accuracy=mean("token_accuracy"),
        macro_f1=mean("macro_f1"),
        exact_match_rate=mean("exact_match_rate"),
        clean_altered_rate=mean("clean_altered_rate"),
    )


def sentence_diagnostics(candidates, references, conjunctions=DEFAULT_CONJUNCTIONS):
    """One row per candidate for the optional CSV diagnostics file."""
    ids, cands, refs = align(candidates, references)
    semantic = semantic_scores(cands, refs)
    rows = []
    for caption_id, cand, ref_set, sem in zip(ids, cands, refs, semantic):
        kind = detect_repetition_error(cand, conjunctions)
        rows.append({
            "id": caption_id,
            "candidate": " ".join(cand),
            "rouge_l": round(100.0 * rouge_l_sentence(cand, [tuple(r) for r in ref_set]), 2),
            "semantic_score": round(sem, 2),
            "error_kind": kind.value if kind else "",
        })
    return rows
