"""Automatic evaluation: VQA accuracy/F1, BLEU-4, ROUGE-L, METEOR, bootstrap CIs.

Conventions (documented here because the literature varies):

* answers are normalized by lowercasing, punctuation stripping, whitespace
  collapsing, and article (a/an/the) removal before exact match / token F1;
* BLEU-4 is corpus-level with clipped n-gram precision and brevity penalty
  exp(1 - r/c) for c <= r, r from closest reference lengths (ties favor the
  shorter reference); any zero corpus precision gives 0. A smoothed
  per-sentence variant (add-one on n >= 2) exists for diagnostics only;
* ROUGE-L is the LCS F-measure with beta = 1, max over references,
  corpus score = mean over records;
* METEOR is the exact-match unigram variant: leftmost-greedy alignment,
  F_mean = 10PR/(R+9P), fragmentation penalty 0.5*(chunks/matches)^3.

Every function is pure; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownStrataError
from .kernels import greedy_align, lcs_len
from .textgen import word_tokenize

_ARTICLES = {"a", "an", "the"}

QUESTION_LEN_BUCKETS = ((1, 5, "1-5"), (6, 10, "6-10"), (11, 15, "11-15"), (16, None, "16+"))
STRATA_KEYS = ("image_count", "question_len_bucket", "organ", "modality")


@dataclass(frozen=True)
class EvalRecord:
    id: str
    prediction: str
    references: tuple
    strata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.references:
            raise ValueError("references must be non-empty")


@dataclass
class MetricReport:
    metrics: dict            # name -> {point, ci_low, ci_high}
    n: int
    seed: int
    strata: dict = field(default_factory=dict)  # bucket -> {metric -> {...}, n}

    def to_dict(self) -> dict:
        return {"n": self.n, "seed": self.seed, "metrics": self.metrics, "strata": self.strata}


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_answer_tokens(text: str) -> list:
    return [
        tok
        for tok in word_tokenize(text)
        if tok not in _ARTICLES and any(c.isalnum() for c in tok)
    ]


def normalize_answer(text: str) -> str:
    return " ".join(normalize_answer_tokens(text))


# ---------------------------------------------------------------------------
# per-pair metrics
# ---------------------------------------------------------------------------

def exact_match(prediction: str, references) -> float:
    pred = normalize_answer(prediction)
    return 1.0 if any(pred == normalize_answer(r) for r in references) else 0.0


def vqa_accuracy(records) -> float:
    """Fraction of records whose normalized prediction matches any reference."""
    records = list(records)
    if not records:
        return 0.0
    return sum(exact_match(r.prediction, r.references) for r in records) / len(records)


def token_f1(prediction: str, reference: str) -> float:
    """Bag-of-tokens overlap F1 after answer normalization."""
    pred = normalize_answer_tokens(prediction)
    ref = normalize_answer_tokens(reference)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def _best_token_f1(prediction: str, references) -> float:
    return max(token_f1(prediction, ref) for ref in references)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus) -> float:
    """Corpus-level BLEU-4 over (prediction, references) pairs or EvalRecords."""
    matches = [0] * 4
    totals = [0] * 4
    c_len = 0
    r_len = 0
    for entry in corpus:
        pred, refs = _as_pair(entry)
        pred_toks = word_tokenize(pred)
        ref_toks = [word_tokenize(r) for r in refs]
        c_len += len(pred_toks)
        r_len += min((abs(len(rt) - len(pred_toks)), len(rt)) for rt in ref_toks)[1]
        for n in range(1, 5):
            counts = _ngrams(pred_toks, n)
            if not counts:
                continue
            best = Counter()
            for rt in ref_toks:
                ref_counts = _ngrams(rt, n)
                for gram, cnt in ref_counts.items():
                    best[gram] = max(best[gram], cnt)
            matches[n - 1] += sum(min(cnt, best[gram]) for gram, cnt in counts.items())
            totals[n - 1] += sum(counts.values())
    if c_len == 0 or any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    brevity = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return brevity * math.exp(log_precision)


def bleu4_sentence_smoothed(prediction: str, references) -> float:
    """Diagnostic sentence BLEU with add-one smoothing on n >= 2 precisions."""
    pred_toks = word_tokenize(prediction)
    ref_toks = [word_tokenize(r) for r in references]
    if not pred_toks:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        counts = _ngrams(pred_toks, n)
        total = sum(counts.values())
        best = Counter()
        for rt in ref_toks:
            for gram, cnt in _ngrams(rt, n).items():
                best[gram] = max(best[gram], cnt)
        match = sum(min(cnt, best[gram]) for gram, cnt in counts.items())
        if n == 1:
            if match == 0 or total == 0:
                return 0.0
            log_p += math.log(match / total)
        else:
            log_p += math.log((match + 1) / (total + 1))
    log_p /= 4.0
    c = len(pred_toks)
    r = min((abs(len(rt) - c), len(rt)) for rt in ref_toks)[1]
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_p)


def _token_ids(*sequences):
    table = {}
    out = []
    for seq in sequences:
        out.append(np.asarray([table.setdefault(t, len(table)) for t in seq], dtype=np.int64))
    return out


def rouge_l(prediction: str, references) -> float:
    """LCS F-measure (beta=1); max over references."""
    if isinstance(references, str):
        references = [references]
    pred_toks = word_tokenize(prediction)
    best = 0.0
    for ref in references:
        ref_toks = word_tokenize(ref)
        if not pred_toks or not ref_toks:
            score = 1.0 if not pred_toks and not ref_toks else 0.0
        else:
            a, b = _token_ids(pred_toks, ref_toks)
            lcs = lcs_len(a, b)
            if lcs == 0:
                score = 0.0
            else:
                precision = lcs / len(pred_toks)
                recall = lcs / len(ref_toks)
                score = 2 * precision * recall / (precision + recall)
        best = max(best, score)
    return best


def meteor(prediction: str, reference) -> float:
    """Exact-match unigram METEOR; max over references when a list is given."""
    references = [reference] if isinstance(reference, str) else list(reference)
    pred_toks = word_tokenize(prediction)
    best = 0.0
    for ref in references:
        ref_toks = word_tokenize(ref)
        if not pred_toks or not ref_toks:
            continue
        a, b = _token_ids(pred_toks, ref_toks)
        matches, chunks = greedy_align(a, b)
        if matches == 0:
            continue
        precision = matches / len(pred_toks)
        recall = matches / len(ref_toks)
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


def _as_pair(entry):
    if isinstance(entry, EvalRecord):
        return entry.prediction, entry.references
    pred, refs = entry
    if isinstance(refs, str):
        refs = [refs]
    return pred, refs


# ---------------------------------------------------------------------------
# bootstrap and reports
# ---------------------------------------------------------------------------

def bootstrap_ci(values, n_resamples: int = 1000, seed: int = 0):
    """Percentile bootstrap CI for the mean: 2.5/97.5, linear interpolation."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5], method="linear")
    return float(lo), float(hi)


PER_RECORD_METRICS = {
    "accuracy": lambda r: exact_match(r.prediction, r.references),
    "token_f1": lambda r: _best_token_f1(r.prediction, r.references),
    "rougel": lambda r: rouge_l(r.prediction, r.references),
    "meteor": lambda r: meteor(r.prediction, r.references),
    # per-record BLEU is the smoothed diagnostic; corpus BLEU is separate
    "bleu4_smoothed": lambda r: bleu4_sentence_smoothed(r.prediction, r.references),
}

METRIC_NAMES = ("accuracy", "token_f1", "bleu4", "rougel", "meteor")


def _metric_summary(records, name: str, n_resamples: int, seed: int) -> dict:
    if name == "bleu4":
        point = bleu4(records)
        per_record = [bleu4_sentence_smoothed(r.prediction, r.references) for r in records]
        lo, hi = bootstrap_ci(per_record, n_resamples, seed)
        return {"point": point, "ci_low": lo, "ci_high": hi, "ci_statistic": "bleu4_smoothed"}
    fn = PER_RECORD_METRICS[name]
    values = [fn(r) for r in records]
    point = float(np.mean(values))
    lo, hi = bootstrap_ci(values, n_resamples, seed)
    return {"point": point, "ci_low": lo, "ci_high": hi}


def evaluate_records(records, metric_names=METRIC_NAMES, n_resamples: int = 1000,
                     seed: int = 0) -> MetricReport:
    records = list(records)
    metrics = {name: _metric_summary(records, name, n_resamples, seed) for name in metric_names}
    return MetricReport(metrics=metrics, n=len(records), seed=seed)


def question_len_bucket(n_tokens: int) -> str:
    for lo, hi, label in QUESTION_LEN_BUCKETS:
        if n_tokens >= lo and (hi is None or n_tokens <= hi):
            return label
    return QUESTION_LEN_BUCKETS[0][2]


def _bucket_of(record: EvalRecord, strata_key: str):
    if strata_key == "question_len_bucket":
        if "question_len_bucket" in record.strata:
            return record.strata["question_len_bucket"]
        return question_len_bucket(int(record.strata.get("question_len", 0)))
    return record.strata.get(strata_key)


def stratified_report(records, metric_names, strata_key: str, n_resamples: int = 1000,
                      seed: int = 0) -> MetricReport:
    """Overall metrics plus one summary per non-empty bucket of strata_key."""
    if strata_key not in STRATA_KEYS:
        raise UnknownStrataError(f"strata key {strata_key!r} not in {STRATA_KEYS}")
    records = list(records)
    report = evaluate_records(records, metric_names, n_resamples, seed)
    buckets = {}
    for record in records:
        bucket = _bucket_of(record, strata_key)
        if bucket is None:
            continue
        buckets.setdefault(bucket, []).append(record)
    for bucket in sorted(buckets, key=str):
        members = buckets[bucket]
        report.strata[str(bucket)] = {
            "n": len(members),
            "metrics": {
                name: _metric_summary(members, name, n_resamples, seed)
                for name in metric_names
            },
        }
    return report


def render_table(report: MetricReport, title: str = "metrics") -> str:
    """Human-readable fixed-width table for a MetricReport."""
    lines = [f"== {title} (n={report.n}) =="]
    for name, m in report.metrics.items():
        lines.append(
            f"{name:>14}: {m['point']:.4f}  [95% CI {m['ci_low']:.4f}, {m['ci_high']:.4f}]"
        )
    for bucket, info in report.strata.items():
        lines.append(f"-- {bucket} (n={info['n']})")
        for name, m in info["metrics"].items():
            lines.append(
                f"{name:>14}: {m['point']:.4f}  [95% CI {m['ci_low']:.4f}, {m['ci_high']:.4f}]"
            )
    return "\n".join(lines)
