"""Dataset schemas (JSONL + raster sidecars), corpus cleaning, and manifests.

JSONL schemas, one UTF-8 object per line:
  pair:        {pair_id, images:[paths], tags:[[{key,value}]], text, split}
  vqa:         {item_id, images, question, answer, answer_type, meta{organ,modality}}
  study:       {study_id, patient_id, visit_index, images, prior_images?,
                prior_report?, report}
  interleaved: {group_key, source_pair_ids, template_text, images}

vqa/study records additionally accept optional "split" (and study optional
"tags"/"prior_tags") fields so one file can carry a full benchmark with
context cues; absent fields default sensibly.

Rasters: depth-1 volumes are single 16-bit grayscale PNG files; deeper
volumes are directories of slice_0000.png... plus volume.json giving
{depth, height, width}. Paths inside JSONL are relative to the JSONL file.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import (
    ImageTextPair,
    ImageVolume,
    ReportStudy,
    VQAItem,
    as_volume,
    make_tag,
    tag_key,
    validate_pair,
    validate_study,
    validate_vqa_item,
)
from .errors import SchemaError

_MAX16 = 65535.0


# ---------------------------------------------------------------------------
# raster sidecars
# ---------------------------------------------------------------------------

def save_volume(volume: ImageVolume, path: Path) -> None:
    path = Path(path)
    if volume.depth == 1:
        _save_slice(volume.voxels[0], path)
        return
    path.mkdir(parents=True, exist_ok=True)
    for z in range(volume.depth):
        _save_slice(volume.voxels[z], path / f"slice_{z:04d}.png")
    desc = {"depth": volume.depth, "height": volume.height, "width": volume.width}
    (path / "volume.json").write_text(json.dumps(desc), encoding="utf-8")


def _save_slice(plane: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(plane * _MAX16).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_volume(path: Path) -> ImageVolume:
    path = Path(path)
    if path.is_dir():
        desc = json.loads((path / "volume.json").read_text(encoding="utf-8"))
        planes = [
            _load_slice(path / f"slice_{z:04d}.png") for z in range(desc["depth"])
        ]
        return as_volume(np.stack(planes, axis=0))
    return as_volume(_load_slice(path)[np.newaxis, :, :])


def _load_slice(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / _MAX16


def volume_hash(volume: ImageVolume) -> str:
    h = hashlib.sha256()
    h.update(str(volume.voxels.shape).encode())
    h.update(np.ascontiguousarray(volume.voxels).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# JSONL helpers
# ---------------------------------------------------------------------------

def _read_jsonl(path: Path):
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            yield lineno, json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON: {exc}", line=lineno) from exc


def _need(record: dict, fields, lineno: int):
    for f_ in fields:
        if f_ not in record:
            raise SchemaError(f"line {lineno}: missing field {f_!r}", line=lineno, field=f_)


def _write_jsonl(path: Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _resolve_image(base: Path, rel: str, lineno: int) -> ImageVolume:
    target = base / rel
    if not target.exists():
        raise SchemaError(
            f"line {lineno}: missing image asset {rel!r}", line=lineno, field="images",
            kind="missing_asset",
        )
    return load_volume(target)


def _tags_to_json(tag_sets) -> list:
    return [
        [{"key": t.key, "value": t.value} for t in sorted(ts)]
        for ts in tag_sets
    ]


def _tags_from_json(raw, lineno: int) -> list:
    out = []
    for ts in raw:
        try:
            out.append(frozenset(make_tag(d["key"], d["value"]) for d in ts))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"line {lineno}: malformed tags", line=lineno, field="tags") from exc
    return out


# ---------------------------------------------------------------------------
# pair / vqa / study / interleaved datasets
# ---------------------------------------------------------------------------

def save_pairs(pairs, path: Path, image_dir: str = "images") -> None:
    path = Path(path)
    records = []
    for pair in pairs:
        rels = []
        for k, img in enumerate(pair.images):
            rel = f"{image_dir}/{pair.pair_id}_{k}" + (".png" if img.depth == 1 else "")
            save_volume(img, path.parent / rel)
            rels.append(rel)
        records.append(
            {
                "pair_id": pair.pair_id,
                "images": rels,
                "tags": _tags_to_json(pair.tags_per_image),
                "text": pair.text,
                "split": pair.split,
            }
        )
    _write_jsonl(path, records)


def load_pairs(path: Path) -> list:
    path = Path(path)
    out = []
    seen = set()
    for lineno, rec in _read_jsonl(path):
        _need(rec, ("pair_id", "images", "tags", "text", "split"), lineno)
        if rec["pair_id"] in seen:
            raise SchemaError(f"line {lineno}: duplicate pair_id", line=lineno, field="pair_id")
        seen.add(rec["pair_id"])
        images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["images"])
        tags = tuple(_tags_from_json(rec["tags"], lineno))
        pair = ImageTextPair(
            pair_id=rec["pair_id"], images=images, tags_per_image=tags,
            text=rec["text"], split=rec["split"],
        )
        out.append(validate_pair(pair))
    return out


def save_vqa(items, path: Path, image_dir: str = "images") -> None:
    path = Path(path)
    records = []
    for item in items:
        rels = []
        for k, img in enumerate(item.images):
            rel = f"{image_dir}/{item.item_id}_{k}" + (".png" if img.depth == 1 else "")
            save_volume(img, path.parent / rel)
            rels.append(rel)
        records.append(
            {
                "item_id": item.item_id,
                "images": rels,
                "question": item.question,
                "answer": item.answer,
                "answer_type": item.answer_type,
                "meta": dict(item.meta or {}),
                "split": item.split,
            }
        )
    _write_jsonl(path, records)


def load_vqa(path: Path) -> list:
    path = Path(path)
    out = []
    for lineno, rec in _read_jsonl(path):
        _need(rec, ("item_id", "images", "question", "answer", "answer_type"), lineno)
        images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["images"])
        item = VQAItem(
            item_id=rec["item_id"], images=images, question=rec["question"],
            answer=rec["answer"], answer_type=rec["answer_type"],
            meta=rec.get("meta", {}), split=rec.get("split", "test"),
        )
        out.append(validate_vqa_item(item))
    return out


def save_studies(studies, path: Path, image_dir: str = "images") -> None:
    path = Path(path)
    records = []
    for study in studies:
        rec = {
            "study_id": study.study_id,
            "patient_id": study.patient_id,
            "visit_index": study.visit_index,
            "images": [],
            "report": study.report,
            "split": study.split,
        }
        for k, img in enumerate(study.images):
            rel = f"{image_dir}/{study.study_id}_{k}" + (".png" if img.depth == 1 else "")
            save_volume(img, path.parent / rel)
            rec["images"].append(rel)
        if study.prior_images is not None:
            rec["prior_images"] = []
            for k, img in enumerate(study.prior_images):
                rel = f"{image_dir}/{study.study_id}_prior_{k}" + (".png" if img.depth == 1 else "")
                save_volume(img, path.parent / rel)
                rec["prior_images"].append(rel)
        if study.prior_report is not None:
            rec["prior_report"] = study.prior_report
        if study.tags_per_image is not None:
            rec["tags"] = _tags_to_json(study.tags_per_image)
        if study.prior_tags_per_image is not None:
            rec["prior_tags"] = _tags_to_json(study.prior_tags_per_image)
        records.append(rec)
    _write_jsonl(path, records)


def load_studies(path: Path) -> list:
    path = Path(path)
    out = []
    by_patient = {}
    for lineno, rec in _read_jsonl(path):
        _need(rec, ("study_id", "patient_id", "visit_index", "images", "report"), lineno)
        images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["images"])
        prior_images = None
        if "prior_images" in rec:
            prior_images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["prior_images"])
        tags = tuple(_tags_from_json(rec["tags"], lineno)) if "tags" in rec else None
        prior_tags = tuple(_tags_from_json(rec["prior_tags"], lineno)) if "prior_tags" in rec else None
        study = ReportStudy(
            study_id=rec["study_id"], patient_id=rec["patient_id"],
            visit_index=rec["visit_index"], images=images, report=rec["report"],
            prior_images=prior_images, prior_report=rec.get("prior_report"),
            tags_per_image=tags, prior_tags_per_image=prior_tags,
            split=rec.get("split", "test"),
        )
        study = validate_study(study)
        by_patient.setdefault(study.patient_id, []).append((lineno, study))
        out.append(study)
    for patient, entries in by_patient.items():
        visits = sorted(v for _, s in entries for v in [s.visit_index])
        for lineno, study in entries:
            has_priors = study.prior_images is not None or study.prior_report is not None
            if has_priors and not any(v < study.visit_index for v in visits):
                raise SchemaError(
                    f"line {lineno}: priors reference no earlier visit of {patient}",
                    line=lineno, field="visit_index",
                )
    return out


def save_interleaved(sequences, path: Path, image_dir: str = "images") -> None:
    path = Path(path)
    records = []
    for i, seq in enumerate(sequences):
        rels = []
        for k, img in enumerate(seq.images):
            rel = f"{image_dir}/seq{i:05d}_{k}" + (".png" if img.depth == 1 else "")
            save_volume(img, path.parent / rel)
            rels.append(rel)
        records.append(
            {
                "group_key": seq.group_key,
                "source_pair_ids": list(seq.source_pair_ids),
                "template_text": seq.template_text,
                "images": rels,
            }
        )
    _write_jsonl(path, records)


def load_interleaved(path: Path) -> list:
    """Interleaved sequences as (template_text, images, group_key, source_ids)."""
    path = Path(path)
    out = []
    for lineno, rec in _read_jsonl(path):
        _need(rec, ("group_key", "source_pair_ids", "template_text", "images"), lineno)
        images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["images"])
        out.append(
            {
                "group_key": rec["group_key"],
                "source_pair_ids": tuple(rec["source_pair_ids"]),
                "template_text": rec["template_text"],
                "images": images,
            }
        )
    return out


# ---------------------------------------------------------------------------
# corpus cleaning
# ---------------------------------------------------------------------------

_MARKUP_RE = re.compile(r"<[^>\n]*>")
_WS_RE = re.compile(r"\s+")


def default_sensitive_patterns() -> list:
    from importlib.resources import files

    text = files("radpipe.resources").joinpath("sensitive_patterns.txt").read_text("utf-8")
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


def normalize_report_text(text: str) -> str:
    """Strip markup-like tokens and control characters, collapse whitespace, lowercase."""
    text = _MARKUP_RE.sub(" ", text)
    text = "".join(
        ch for ch in text if not (unicodedata.category(ch) == "Cc" and ch not in "\n\t ")
    )
    return _WS_RE.sub(" ", text).strip().lower()


@dataclass
class CorpusManifest:
    n_input: int = 0
    n_kept: int = 0
    counts_per_split: dict = field(default_factory=dict)
    counts_per_tag_key: dict = field(default_factory=dict)
    n_dropped_sensitive: int = 0
    n_dropped_duplicate: int = 0
    cleaning_log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_kept": self.n_kept,
            "counts_per_split": dict(sorted(self.counts_per_split.items())),
            "counts_per_tag_key": dict(sorted(self.counts_per_tag_key.items())),
            "n_dropped_sensitive": self.n_dropped_sensitive,
            "n_dropped_duplicate": self.n_dropped_duplicate,
            "cleaning_log": self.cleaning_log,
        }


def clean_corpus(pairs, sensitive_patterns=None):
    """Normalize text, drop sensitive-pattern matches, drop exact duplicates.

    Cleaning never fails; it filters, logging every drop with a reason code.
    Normalization runs first so the filter and the duplicate key both see
    canonical text — this makes the operation idempotent.
    """
    if sensitive_patterns is None:
        sensitive_patterns = default_sensitive_patterns()
    compiled = [re.compile(p, re.IGNORECASE) for p in sensitive_patterns]
    manifest = CorpusManifest(n_input=len(pairs))
    kept = []
    seen = set()
    for pair in pairs:
        text = normalize_report_text(pair.text)
        if not text:
            manifest.cleaning_log.append({"pair_id": pair.pair_id, "reason": "empty_text"})
            continue
        if any(rx.search(text) for rx in compiled):
            manifest.n_dropped_sensitive += 1
            manifest.cleaning_log.append({"pair_id": pair.pair_id, "reason": "sensitive"})
            continue
        key = (tuple(volume_hash(img) for img in pair.images), text)
        if key in seen:
            manifest.n_dropped_duplicate += 1
            manifest.cleaning_log.append({"pair_id": pair.pair_id, "reason": "duplicate"})
            continue
        seen.add(key)
        cleaned = validate_pair(
            ImageTextPair(
                pair_id=pair.pair_id, images=pair.images,
                tags_per_image=pair.tags_per_image, text=text, split=pair.split,
            )
        )
        kept.append(cleaned)
        manifest.counts_per_split[cleaned.split] = manifest.counts_per_split.get(cleaned.split, 0) + 1
        gk = tag_key(cleaned.tags_per_image[0])
        manifest.counts_per_tag_key[gk] = manifest.counts_per_tag_key.get(gk, 0) + 1
    manifest.n_kept = len(kept)
    return kept, manifest
