"""Rule-based clinical label extraction from report text, and label F1.

Keyword tables and negation cues ship as package data (resources/). A label
is positive when one of its keywords appears in a sentence with no negation
cue before it; a cue earlier in the same sentence flips it to negative.
"no finding" is positive only when every other label is unmentioned or
negative and the text carries a normality cue.

The output contract matches learned report labelers (per-label
positive/negative/unmentioned), so one could be slotted in unchanged.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib.resources import files

from .errors import LengthMismatchError

LABELS = (
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "pleural effusion",
    "pneumonia",
    "pneumothorax",
    "no finding",
)

POSITIVE, NEGATIVE, UNMENTIONED = "positive", "negative", "unmentioned"

_SENTENCE_RE = re.compile(r"[.!?;\n]+")


@lru_cache(maxsize=1)
def _tables():
    blob = json.loads(files("radpipe.resources").joinpath("clinical_keywords.json").read_text("utf-8"))
    cues_text = files("radpipe.resources").joinpath("negation_cues.txt").read_text("utf-8")
    cues = [l.strip() for l in cues_text.splitlines() if l.strip() and not l.startswith("#")]
    keywords = {label: [k.lower() for k in kws] for label, kws in blob["labels"].items()}
    return keywords, [c.lower() for c in cues], [c.lower() for c in blob["normality_cues"]]


def _word_positions(sentence: str, phrase: str):
    return [m.start() for m in re.finditer(rf"\b{re.escape(phrase)}\b", sentence)]


def clinical_labels(text: str) -> dict:
    """Per-label assignment over the fixed label set.

    Positive mentions win over negated ones when a label is mentioned both
    ways across sentences.
    """
    keywords, cues, normality = _tables()
    text = text.lower()
    state = {label: UNMENTIONED for label in LABELS}
    for sentence in _SENTENCE_RE.split(text):
        if not sentence.strip():
            continue
        cue_positions = []
        for cue in cues:
            cue_positions.extend(_word_positions(sentence, cue))
        for label in LABELS:
            if label == "no finding":
                continue
            for phrase in keywords[label]:
                for pos in _word_positions(sentence, phrase):
                    negated = any(c < pos for c in cue_positions)
                    if negated:
                        if state[label] == UNMENTIONED:
                            state[label] = NEGATIVE
                    else:
                        state[label] = POSITIVE
    others_clean = all(
        state[label] != POSITIVE for label in LABELS if label != "no finding"
    )
    has_normality_cue = any(_word_positions(text, cue) for cue in normality)
    if others_clean and has_normality_cue:
        state["no finding"] = POSITIVE
    return state


def clinical_f1(pred_reports, ref_reports) -> dict:
    """Per-label and macro F1 of positive label detection.

    Labels with no positives on either side have undefined F1; reported as
    1.0 with a flag so aggregate numbers stay honest.
    """
    pred_reports = list(pred_reports)
    ref_reports = list(ref_reports)
    if len(pred_reports) != len(ref_reports):
        raise LengthMismatchError(
            f"{len(pred_reports)} predictions vs {len(ref_reports)} references"
        )
    pred_labels = [clinical_labels(t) for t in pred_reports]
    ref_labels = [clinical_labels(t) for t in ref_reports]
    per_label = {}
    for label in LABELS:
        tp = fp = fn = 0
        for p, r in zip(pred_labels, ref_labels):
            pp = p[label] == POSITIVE
            rp = r[label] == POSITIVE
            tp += pp and rp
            fp += pp and not rp
            fn += rp and not pp
        if tp + fp + fn == 0:
            per_label[label] = {"f1": 1.0, "undefined": True, "tp": 0, "fp": 0, "fn": 0}
        else:
            f1 = 2 * tp / (2 * tp + fp + fn)
            per_label[label] = {"f1": f1, "undefined": False, "tp": tp, "fp": fp, "fn": fn}
    macro = sum(v["f1"] for v in per_label.values()) / len(LABELS)
    return {"per_label": per_label, "macro_f1": macro, "n": len(pred_reports)}
