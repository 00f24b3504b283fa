"""Blinded human-rating service: assignment, score capture, aggregation.

Raters see only {item_id, images, report} — the source of each report
(model or radiologist tier) and the dataset never reach any rater-facing
payload. Scores persist to an append-only JSONL event log with
replace-on-resubmit semantics; aggregation replays the log.

Six dimensions, each scored 1-5:
readability, medical_reasoning_and_consensus, missed_findings_and_abnormality,
misdiagnosis, bias, clinical_acceptability.
"""

from __future__ import annotations

import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import substream
from .errors import (
    MissingDimensionError,
    NoDataError,
    RangeError,
    UnknownItemError,
    UnknownRaterError,
    ValidationError,
)

DIMENSIONS = (
    "readability",
    "medical_reasoning_and_consensus",
    "missed_findings_and_abnormality",
    "misdiagnosis",
    "bias",
    "clinical_acceptability",
)

SOURCES = ("model_a", "model_b", "junior_radiologist", "senior_radiologist")
DATASETS = ("chest", "mammo", "thyroid")
RATER_GROUPS = ("junior", "senior", "panel")

BUCKETS = (("5", (5,)), ("4-3", (4, 3)), ("2-1", (2, 1)))


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    images: tuple               # ImageVolumes
    report: str
    source: str                 # hidden from raters
    dataset: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"bad source {self.source!r}")
        if self.dataset not in DATASETS:
            raise ValidationError(f"bad dataset {self.dataset!r}")


@dataclass(frozen=True)
class RaterProfile:
    rater_id: str
    group: str
    years_experience: int

    def __post_init__(self):
        if self.group not in RATER_GROUPS:
            raise ValidationError(f"bad rater group {self.group!r}")
        lo = {"junior": 5, "senior": 10, "panel": 15}[self.group]
        if self.years_experience < lo:
            raise ValidationError(f"{self.group} raters need >= {lo} years")
        if self.group == "panel" and self.years_experience > 20:
            raise ValidationError("panel raters have 15-20 years")


def validate_card(card: dict, known_items: set) -> dict:
    """Check a submitted score card; returns the normalized record."""
    for key in ("item_id", "rater_id"):
        if key not in card:
            raise MissingDimensionError(f"missing field {key!r}")
    if card["item_id"] not in known_items:
        raise UnknownItemError(f"unknown item {card['item_id']!r}")
    scores = {}
    for dim in DIMENSIONS:
        if dim not in card:
            raise MissingDimensionError(f"missing dimension {dim!r}")
        value = card[dim]
        if not isinstance(value, int) or isinstance(value, bool) or not (1 <= value <= 5):
            raise RangeError(f"{dim} must be an integer in 1-5, got {value!r}")
        scores[dim] = value
    return {"item_id": card["item_id"], "rater_id": card["rater_id"], **scores}


class RatingStore:
    """Event log + blinded assignment. Thread-safe for concurrent raters."""

    def __init__(self, items, raters, log_path=None, seed: int = 0):
        self.items = {it.item_id: it for it in items}
        self.raters = {r.rater_id: r for r in raters}
        self.seed = seed
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.Lock()
        self._events = []
        if self.log_path and self.log_path.exists():
            for line in self.log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._events.append(json.loads(line))

    # -- assignment ------------------------------------------------------
    def order_for(self, rater_id: str) -> list:
        """Per-rater seeded random item order."""
        if rater_id not in self.raters:
            raise UnknownRaterError(f"unregistered rater {rater_id!r}")
        ids = sorted(self.items)
        rng = substream(self.seed, f"rater-order:{rater_id}")
        return [ids[i] for i in rng.permutation(len(ids))]

    def next_item(self, rater_id: str):
        """Next unscored item for this rater as a blinded payload, or None."""
        scored = {e["item_id"] for e in self._snapshot() if e["rater_id"] == rater_id}
        for item_id in self.order_for(rater_id):
            if item_id not in scored:
                return self.blinded_payload(item_id)
        return None

    def blinded_payload(self, item_id: str) -> dict:
        """Exactly {item_id, images, report}; images as render endpoints."""
        item = self.items[item_id]
        return {
            "item_id": item.item_id,
            "images": [f"/api/items/{item.item_id}/image/{k}" for k in range(len(item.images))],
            "report": item.report,
        }

    def progress(self, rater_id: str) -> dict:
        if rater_id not in self.raters:
            raise UnknownRaterError(f"unregistered rater {rater_id!r}")
        scored = {e["item_id"] for e in self._snapshot() if e["rater_id"] == rater_id}
        return {"scored": len(scored), "total": len(self.items)}

    # -- persistence -----------------------------------------------------
    def submit(self, card: dict) -> dict:
        if card.get("rater_id") not in self.raters:
            raise UnknownRaterError(f"unregistered rater {card.get('rater_id')!r}")
        record = validate_card(card, set(self.items))
        record["timestamp"] = time.time()
        with self._lock:
            self._events.append(record)
            if self.log_path:
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                with self.log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
        return {"status": "ok", "item_id": record["item_id"]}

    def _snapshot(self) -> list:
        with self._lock:
            return list(self._events)

    def latest_cards(self) -> dict:
        """(rater_id, item_id) -> latest card; resubmission replaces."""
        latest = {}
        for event in self._snapshot():
            latest[(event["rater_id"], event["item_id"])] = event
        return latest

    # -- aggregation -----------------------------------------------------
    def aggregate(self) -> dict:
        """Per (source, dimension): mean, n, and {5}/{4-3}/{2-1} buckets;
        plus the all-dimension mean and a per-dataset breakdown."""
        cards = list(self.latest_cards().values())
        if not cards:
            raise NoDataError("no scores submitted")
        overall = self._aggregate_cells(cards, lambda item: True)
        by_dataset = {
            ds: self._aggregate_cells(cards, lambda item, ds=ds: item.dataset == ds)
            for ds in DATASETS
        }
        by_dataset = {ds: cells for ds, cells in by_dataset.items() if cells}
        return {"overall": overall, "by_dataset": by_dataset, "n_cards": len(cards)}

    def _aggregate_cells(self, cards, item_filter) -> dict:
        cells = {}
        for card in cards:
            item = self.items[card["item_id"]]
            if not item_filter(item):
                continue
            for dim in DIMENSIONS:
                cells.setdefault(item.source, {}).setdefault(dim, []).append(card[dim])
        out = {}
        for source, dims in sorted(cells.items()):
            out[source] = {}
            all_scores = []
            for dim in DIMENSIONS:
                scores = dims.get(dim, [])
                if not scores:
                    continue
                all_scores.extend(scores)
                buckets = {
                    label: sum(1 for s in scores if s in members)
                    for label, members in BUCKETS
                }
                out[source][dim] = {
                    "mean": sum(scores) / len(scores),
                    "n": len(scores),
                    "buckets": buckets,
                }
            out[source]["all_dimensions_mean"] = sum(all_scores) / len(all_scores)
        return out

    def render_image_png(self, item_id: str, k: int) -> bytes:
        """Middle slice of image k as 8-bit grayscale PNG."""
        if item_id not in self.items:
            raise UnknownItemError(f"unknown item {item_id!r}")
        images = self.items[item_id].images
        if not (0 <= k < len(images)):
            raise UnknownItemError(f"item {item_id!r} has no image {k}")
        vol = images[k]
        plane = vol.voxels[vol.depth // 2]
        arr = np.round(plane * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# HTTP app (FastAPI)
# ---------------------------------------------------------------------------

def build_app(store: RatingStore):
    from fastapi import FastAPI, Response
    from fastapi.responses import JSONResponse

    app = FastAPI(title="radpipe rating service", version="1")

    def error(code: str, message: str, status: int) -> JSONResponse:
        return JSONResponse({"code": code, "message": message}, status_code=status)

    @app.get("/api/health")
    def health():
        return {"status": "ok", "items": len(store.items), "raters": len(store.raters)}

    @app.get("/api/next")
    def next_item(rater: str):
        try:
            payload = store.next_item(rater)
        except UnknownRaterError as exc:
            return error("unknown_rater", str(exc), 404)
        if payload is None:
            return {"done": True, "progress": store.progress(rater)}
        return payload

    @app.get("/api/progress")
    def progress(rater: str):
        try:
            return store.progress(rater)
        except UnknownRaterError as exc:
            return error("unknown_rater", str(exc), 404)

    @app.post("/api/score")
    def score(card: dict):
        try:
            return store.submit(card)
        except UnknownRaterError as exc:
            return error("unknown_rater", str(exc), 404)
        except UnknownItemError as exc:
            return error("unknown_item", str(exc), 404)
        except RangeError as exc:
            return error("range", str(exc), 422)
        except MissingDimensionError as exc:
            return error("missing_dimension", str(exc), 422)

    @app.get("/api/aggregate")
    def aggregate():
        try:
            return store.aggregate()
        except NoDataError as exc:
            return error("no_data", str(exc), 404)

    @app.get("/api/items/{item_id}/image/{k}")
    def item_image(item_id: str, k: int):
        try:
            png = store.render_image_png(item_id, k)
        except UnknownItemError as exc:
            return error("unknown_item", str(exc), 404)
        return Response(content=png, media_type="image/png")

    return app


# ---------------------------------------------------------------------------
# file loading for the CLI
# ---------------------------------------------------------------------------

def load_items(path) -> list:
    """Items JSONL: {item_id, images:[paths], report, source, dataset}."""
    from .data_io import _read_jsonl, _resolve_image  # shared schema helpers

    path = Path(path)
    items = []
    for lineno, rec in _read_jsonl(path):
        for f_ in ("item_id", "images", "report", "source", "dataset"):
            if f_ not in rec:
                from .errors import SchemaError

                raise SchemaError(f"line {lineno}: missing field {f_!r}", line=lineno, field=f_)
        images = tuple(_resolve_image(path.parent, rel, lineno) for rel in rec["images"])
        items.append(
            EvalItem(
                item_id=rec["item_id"], images=images, report=rec["report"],
                source=rec["source"], dataset=rec["dataset"],
            )
        )
    return items


def load_raters(path) -> list:
    from .data_io import _read_jsonl

    raters = []
    for _lineno, rec in _read_jsonl(Path(path)):
        raters.append(
            RaterProfile(
                rater_id=rec["rater_id"], group=rec["group"],
                years_experience=rec["years_experience"],
            )
        )
    return raters


def save_items(items, path, image_dir: str = "images") -> None:
    from .data_io import _write_jsonl, save_volume

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
                "item_id": item.item_id, "images": rels, "report": item.report,
                "source": item.source, "dataset": item.dataset,
            }
        )
    _write_jsonl(path, records)
