"""Canonical domain types, validation, and the tag vocabulary.

All downstream modules accept only instances that went through the
validators here. Validated objects are immutable (arrays are made
read-only), so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import MissingTagError, ValidationError

TAG_KEYS = ("modality", "organ", "view")
SPLITS = ("train", "val", "test")
ANSWER_TYPES = ("closed", "open")
DEFAULT_CLOSED_ANSWERS = ("yes", "no")

_CLAMP_TOL = 1e-6


@dataclass(frozen=True)
class ImageVolume:
    """Single-channel raster of shape (depth, height, width), intensities in [0,1].

    depth == 1 is a 2D image; depth > 1 is an ordered stack of axial slices.
    """

    voxels: np.ndarray
    spacing: Optional[tuple] = None

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


def as_volume(array, spacing=None) -> ImageVolume:
    """Build a validated ImageVolume from a 2D or 3D array.

    Intensities marginally outside [0,1] (within 1e-6) are clamped;
    anything further out, or non-finite, is a ValidationError.
    """
    voxels = np.asarray(array, dtype=np.float64)
    if voxels.ndim == 2:
        voxels = voxels[np.newaxis, :, :]
    if voxels.ndim != 3:
        raise ValidationError(f"voxels must be 2D or 3D, got ndim={voxels.ndim}")
    if voxels.size == 0:
        raise ValidationError("empty voxel array")
    if not np.isfinite(voxels).all():
        raise ValidationError("NaN voxel" if np.isnan(voxels).any() else "non-finite voxel")
    lo, hi = voxels.min(), voxels.max()
    if lo < -_CLAMP_TOL or hi > 1.0 + _CLAMP_TOL:
        raise ValidationError(f"intensities outside [0,1]: min={lo}, max={hi}")
    if lo < 0.0 or hi > 1.0:
        voxels = np.clip(voxels, 0.0, 1.0)
    if spacing is not None:
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3:
            raise ValidationError("spacing must be a triple (mm)")
    voxels = np.ascontiguousarray(voxels)
    voxels.flags.writeable = False
    return ImageVolume(voxels=voxels, spacing=spacing)


@dataclass(frozen=True, order=True)
class Tag:
    key: str
    value: str


def make_tag(key: str, value: str) -> Tag:
    if key not in TAG_KEYS:
        raise ValidationError(f"bad tag key {key!r}, must be one of {TAG_KEYS}")
    if not value or any(c.isspace() for c in value):
        raise ValidationError(f"bad tag value {value!r} for key {key!r}")
    return Tag(key=key, value=value.lower())


def validate_tag_set(tags) -> frozenset:
    out = set()
    seen_keys = set()
    for tag in tags:
        if not isinstance(tag, Tag):
            tag = make_tag(tag[0], tag[1]) if not isinstance(tag, dict) else make_tag(tag["key"], tag["value"])
        else:
            tag = make_tag(tag.key, tag.value)
        if tag.key in seen_keys:
            raise ValidationError(f"duplicate tag key {tag.key!r}")
        seen_keys.add(tag.key)
        out.add(tag)
    return frozenset(out)


def tag_key(tags) -> str:
    """Canonical grouping key "modality=<v>|organ=<v>" (organ omitted if absent).

    Order-insensitive over the tag set; modality is mandatory.
    """
    by_key = {t.key: t.value for t in tags}
    if "modality" not in by_key:
        raise MissingTagError("modality tag absent")
    parts = [f"modality={by_key['modality']}"]
    if "organ" in by_key:
        parts.append(f"organ={by_key['organ']}")
    return "|".join(parts)


@dataclass(frozen=True)
class ImageTextPair:
    pair_id: str
    images: tuple
    tags_per_image: tuple
    text: str
    split: str = "train"


@dataclass(frozen=True)
class VQAItem:
    item_id: str
    images: tuple
    question: str
    answer: str
    answer_type: str
    meta: dict = field(default_factory=dict)
    split: str = "train"


@dataclass(frozen=True)
class ReportStudy:
    study_id: str
    patient_id: str
    visit_index: int
    images: tuple
    report: str
    prior_images: Optional[tuple] = None
    prior_report: Optional[str] = None
    # optional per-image tag sets; not part of the serialized schema's
    # required fields but carried when known so prompts get context cues
    tags_per_image: Optional[tuple] = None
    prior_tags_per_image: Optional[tuple] = None
    split: str = "train"


def validate_pair(pair: ImageTextPair) -> ImageTextPair:
    """Return the pair iff every invariant holds; idempotent.

    Voxels within 1e-6 of [0,1] are re-normalized (clamped). The first
    violated invariant is named in the raised ValidationError.
    """
    if not pair.pair_id:
        raise ValidationError("empty pair_id")
    if len(pair.images) < 1:
        raise ValidationError("pair has no images")
    if len(pair.images) != len(pair.tags_per_image):
        raise ValidationError("tags_per_image length mismatch")
    if not pair.text or not pair.text.strip():
        raise ValidationError("empty text")
    if pair.split not in SPLITS:
        raise ValidationError(f"bad split {pair.split!r}")
    images = tuple(
        as_volume(img.voxels if isinstance(img, ImageVolume) else img, getattr(img, "spacing", None))
        for img in pair.images
    )
    tags = tuple(validate_tag_set(ts) for ts in pair.tags_per_image)
    return replace(pair, images=images, tags_per_image=tags)


def validate_vqa_item(item: VQAItem, closed_answers=DEFAULT_CLOSED_ANSWERS) -> VQAItem:
    if not item.item_id:
        raise ValidationError("empty item_id")
    if len(item.images) < 1:
        raise ValidationError("vqa item has no images")
    if not item.question.strip():
        raise ValidationError("empty question")
    if not item.answer.strip():
        raise ValidationError("empty answer")
    if item.answer_type not in ANSWER_TYPES:
        raise ValidationError(f"bad answer_type {item.answer_type!r}")
    if item.answer_type == "closed" and item.answer.strip().lower() not in closed_answers:
        raise ValidationError(
            f"closed answer {item.answer!r} not in declared set {tuple(closed_answers)}"
        )
    images = tuple(as_volume(img.voxels, img.spacing) for img in item.images)
    return replace(item, images=images)


def validate_study(study: ReportStudy) -> ReportStudy:
    if not study.study_id:
        raise ValidationError("empty study_id")
    if not study.patient_id:
        raise ValidationError("empty patient_id")
    if study.visit_index < 0:
        raise ValidationError("negative visit_index")
    if len(study.images) < 1:
        raise ValidationError("study has no images")
    if not study.report.strip():
        raise ValidationError("empty report")
    has_priors = study.prior_images is not None or study.prior_report is not None
    if study.visit_index == 0 and has_priors:
        raise ValidationError("visit_index=0 implies prior fields absent")
    images = tuple(as_volume(img.voxels, img.spacing) for img in study.images)
    prior_images = None
    if study.prior_images is not None:
        prior_images = tuple(as_volume(img.voxels, img.spacing) for img in study.prior_images)
    tags = tuple(validate_tag_set(ts) for ts in study.tags_per_image) if study.tags_per_image else None
    prior_tags = (
        tuple(validate_tag_set(ts) for ts in study.prior_tags_per_image)
        if study.prior_tags_per_image
        else None
    )
    return replace(
        study,
        images=images,
        prior_images=prior_images,
        tags_per_image=tags,
        prior_tags_per_image=prior_tags,
    )
