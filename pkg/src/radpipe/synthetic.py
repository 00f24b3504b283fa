"""Seeded synthetic benchmark: images and reports share one latent truth.

Each study draws an organ (which fixes modality, view layout, and a base
intensity) and a set of findings. Every finding has a distinctive shape
stamped into the image and a fixed clinical term emitted in the report, so
report correctness is machine-checkable by the rule labeler and question
answers are readable off the image.

Shape code:
  cardiomegaly     -> bright central disc
  pleural effusion -> dark band along the bottom rows
  pneumonia        -> bright square in the upper-left quadrant
  pneumothorax     -> dark band along the top rows
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import substream
from .datamodel import (
    ImageTextPair,
    ReportStudy,
    VQAItem,
    as_volume,
    make_tag,
)
from .errors import ConfigError

FINDINGS = ("cardiomegaly", "pleural effusion", "pneumonia", "pneumothorax")

ORGAN_PROFILES = {
    "chest": {"modality": "xray", "base": 0.25, "views": ("pa",), "depth": 1},
    "breast": {"modality": "mammo", "base": 0.5, "views": ("cc", "mlo"), "depth": 1},
    "thyroid": {"modality": "ct", "base": 0.72, "views": ("axial",), "depth": 3},
}


@dataclass(frozen=True)
class SyntheticSpec:
    n_studies: int = 200
    organs: tuple = ("chest", "breast", "thyroid")
    findings: tuple = FINDINGS
    second_visit_rate: float = 0.3
    normal_rate: float = 0.35
    noise_sigma: float = 0.05
    jitter: int = 1              # positional wobble of finding patterns (px)
    image_size: int = 32
    seed: int = 42


@dataclass
class SyntheticCorpus:
    pairs: list = field(default_factory=list)
    vqa_items: list = field(default_factory=list)
    studies: list = field(default_factory=list)
    findings_truth: dict = field(default_factory=dict)  # study_id -> sorted findings


def _stamp_finding(canvas: np.ndarray, finding: str, base: float, rng, jitter: int) -> None:
    h, w = canvas.shape

    def wobble():
        return int(rng.integers(-jitter, jitter + 1)) if jitter else 0

    if finding == "cardiomegaly":
        cy = h // 2 + wobble()
        cx = w // 2 + wobble()
        r = 6
        yy, xx = np.ogrid[:h, :w]
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        canvas[disc] = min(0.98, base + 0.45)
    elif finding == "pleural effusion":
        rows = 7 + wobble()
        canvas[h - rows :, :] = max(0.02, base - 0.2)
    elif finding == "pneumonia":
        size = 9
        top = 3 + wobble()
        left = 3 + wobble()
        canvas[top : top + size, left : left + size] = min(0.98, base + 0.35)
    elif finding == "pneumothorax":
        rows = 6 + wobble()
        canvas[:rows, :] = max(0.02, base - 0.2)
    else:
        raise ConfigError(f"unknown finding {finding!r}")


def render_image(findings, organ: str, size: int, noise_sigma: float, rng, jitter: int = 1):
    profile = ORGAN_PROFILES[organ]
    base = profile["base"]
    depth = profile["depth"]
    planes = []
    for _ in range(depth):
        canvas = np.full((size, size), base)
        for finding in findings:
            _stamp_finding(canvas, finding, base, rng, jitter)
        canvas = canvas + rng.normal(0.0, noise_sigma, size=canvas.shape)
        planes.append(np.clip(canvas, 0.0, 1.0))
    return as_volume(np.stack(planes, axis=0))


def render_report(findings, all_findings, rng) -> str:
    """Deterministic dense grammar: one short polarity clause per finding."""
    sentences = ["findings :"]
    present = set(findings)
    if not present:
        sentences.append("lungs are clear .")
    for finding in all_findings:
        if finding in present:
            sentences.append(f"{finding} present .")
        else:
            sentences.append(f"no {finding} .")
    verdict = "abnormal" if present else "normal"
    sentences.append(f"impression : {verdict} study .")
    return " ".join(sentences)


def _study_tags(organ: str):
    profile = ORGAN_PROFILES[organ]
    return [
        frozenset(
            {
                make_tag("modality", profile["modality"]),
                make_tag("organ", organ),
                make_tag("view", view),
            }
        )
        for view in profile["views"]
    ]


def _draw_findings(spec: SyntheticSpec, rng):
    if rng.random() < spec.normal_rate:
        return ()
    count = int(rng.integers(1, 3))
    picked = rng.choice(len(spec.findings), size=min(count, len(spec.findings)), replace=False)
    return tuple(sorted(spec.findings[i] for i in picked))


def _make_images(findings, organ: str, spec: SyntheticSpec, rng):
    profile = ORGAN_PROFILES[organ]
    return tuple(
        render_image(findings, organ, spec.image_size, spec.noise_sigma, rng, spec.jitter)
        for _ in profile["views"]
    )


def _assign_split(rng) -> str:
    r = rng.random()
    if r < 0.7:
        return "train"
    if r < 0.8:
        return "val"
    return "test"


def gen_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Deterministic per seed. One patient per n_studies slot; about
    second_visit_rate of patients receive a follow-up visit with resampled
    findings, populating prior_images / prior_report."""
    if not spec.organs or not spec.findings:
        raise ConfigError("organs and findings vocabularies must be non-empty")
    for organ in spec.organs:
        if organ not in ORGAN_PROFILES:
            raise ConfigError(f"unknown organ {organ!r}")
    corpus = SyntheticCorpus()
    for n in range(spec.n_studies):
        rng = substream(spec.seed, f"study:{n}")
        patient_id = f"pat{n:05d}"
        organ = spec.organs[int(rng.integers(0, len(spec.organs)))]
        split = _assign_split(rng)
        tags = _study_tags(organ)

        visits = [(_draw_findings(spec, rng))]
        if rng.random() < spec.second_visit_rate:
            visits.append(_draw_findings(spec, rng))

        prior_images = None
        prior_report = None
        for visit_index, findings in enumerate(visits):
            study_id = f"study{n:05d}v{visit_index}"
            images = _make_images(findings, organ, spec, rng)
            report = render_report(findings, spec.findings, rng)
            study = ReportStudy(
                study_id=study_id,
                patient_id=patient_id,
                visit_index=visit_index,
                images=images,
                report=report,
                prior_images=prior_images,
                prior_report=prior_report,
                tags_per_image=tuple(tags),
                prior_tags_per_image=tuple(tags) if prior_images is not None else None,
                split=split,
            )
            corpus.studies.append(study)
            corpus.findings_truth[study_id] = list(findings)
            corpus.pairs.append(
                ImageTextPair(
                    pair_id=study_id,
                    images=images,
                    tags_per_image=tuple(tags),
                    text=report,
                    split=split,
                )
            )
            corpus.vqa_items.extend(
                _make_vqa_items(study_id, images, findings, organ, spec, split, rng)
            )
            prior_images, prior_report = images, report
    return corpus


def _make_vqa_items(study_id, images, findings, organ, spec: SyntheticSpec, split, rng):
    """Two closed questions (one aimed at a present finding when possible,
    one at an absent finding) plus one open question."""
    meta = {"organ": organ, "modality": ORGAN_PROFILES[organ]["modality"]}
    present = [f for f in spec.findings if f in findings]
    absent = [f for f in spec.findings if f not in findings]
    questions = []
    if present:
        questions.append((present[int(rng.integers(0, len(present)))], "yes"))
    if absent:
        questions.append((absent[int(rng.integers(0, len(absent)))], "no"))
    items = []
    for qi, (finding, answer) in enumerate(questions):
        items.append(
            VQAItem(
                item_id=f"{study_id}q{qi}",
                images=images,
                question=f"is there {finding} ?",
                answer=answer,
                answer_type="closed",
                meta=meta,
                split=split,
            )
        )
    open_kind = int(rng.integers(0, 2))
    if open_kind == 0:
        question, answer = "which organ is shown ?", organ
    else:
        question, answer = "what imaging modality was used ?", meta["modality"]
    items.append(
        VQAItem(
            item_id=f"{study_id}qo",
            images=images,
            question=question,
            answer=answer,
            answer_type="open",
            meta=meta,
            split=split,
        )
    )
    return items
