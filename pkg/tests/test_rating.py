import json

import numpy as np
import pytest

from radpipe.datamodel import as_volume
from radpipe.errors import (
    MissingDimensionError,
    NoDataError,
    RangeError,
    UnknownRaterError,
    ValidationError,
)
from radpipe.rating import (
    DIMENSIONS,
    EvalItem,
    RaterProfile,
    RatingStore,
    build_app,
)


def make_items(n=10, dataset="chest"):
    rng = np.random.default_rng(0)
    sources = ("model_a", "model_b", "junior_radiologist", "senior_radiologist")
    return [
        EvalItem(
            item_id=f"it{i:03d}",
            images=(as_volume(rng.random((8, 8))),),
            report=f"report text {i}",
            source=sources[i % 4],
            dataset=dataset,
        )
        for i in range(n)
    ]


def make_raters():
    return [
        RaterProfile("r1", "junior", 6),
        RaterProfile("r2", "senior", 12),
        RaterProfile("r3", "panel", 17),
    ]


def card(item_id, rater_id, value=4, **overrides):
    c = {"item_id": item_id, "rater_id": rater_id}
    for dim in DIMENSIONS:
        c[dim] = value
    c.update(overrides)
    return c


@pytest.fixture
def store(tmp_path):
    return RatingStore(make_items(), make_raters(), tmp_path / "scores.jsonl", seed=3)


class TestProfiles:
    def test_junior_needs_five_years(self):
        with pytest.raises(ValidationError):
            RaterProfile("x", "junior", 3)

    def test_panel_range(self):
        with pytest.raises(ValidationError):
            RaterProfile("x", "panel", 25)


class TestAssignment:
    def test_fresh_rater_sees_all_items_then_completion(self, store):
        seen = []
        for _ in range(10):
            payload = store.next_item("r1")
            seen.append(payload["item_id"])
            store.submit(card(payload["item_id"], "r1"))
        assert len(set(seen)) == 10
        assert store.next_item("r1") is None

    def test_orders_differ_between_raters(self, store):
        assert store.order_for("r1") != store.order_for("r2")

    def test_order_deterministic(self, store):
        assert store.order_for("r1") == store.order_for("r1")

    def test_unknown_rater(self, store):
        with pytest.raises(UnknownRaterError):
            store.next_item("ghost")

    def test_payload_fields_exactly_blinded(self, store):
        payload = store.next_item("r1")
        assert set(payload) == {"item_id", "images", "report"}


class TestSubmission:
    def test_accepts_full_card(self, store):
        out = store.submit(card("it000", "r1", 5))
        assert out["status"] == "ok"

    def test_score_out_of_range(self, store):
        with pytest.raises(RangeError):
            store.submit(card("it000", "r1", readability=6))

    def test_non_integer_score(self, store):
        with pytest.raises(RangeError):
            store.submit(card("it000", "r1", bias=2.5))

    def test_missing_dimension(self, store):
        c = card("it000", "r1")
        del c["misdiagnosis"]
        with pytest.raises(MissingDimensionError):
            store.submit(c)

    def test_resubmission_replaces(self, store):
        store.submit(card("it000", "r1", 2))
        store.submit(card("it000", "r1", 5))
        latest = store.latest_cards()
        assert latest[("r1", "it000")]["readability"] == 5
        agg = store.aggregate()
        source = store.items["it000"].source
        assert agg["overall"][source]["readability"]["n"] == 1

    def test_idempotent_for_identical_resubmission(self, store):
        store.submit(card("it000", "r1", 4))
        store.submit(card("it000", "r1", 4))
        agg = store.aggregate()
        source = store.items["it000"].source
        assert agg["overall"][source]["readability"]["n"] == 1

    def test_log_replay(self, tmp_path):
        store = RatingStore(make_items(), make_raters(), tmp_path / "log.jsonl", seed=3)
        store.submit(card("it000", "r1", 3))
        store.submit(card("it001", "r2", 5))
        reloaded = RatingStore(make_items(), make_raters(), tmp_path / "log.jsonl", seed=3)
        assert reloaded.aggregate() == store.aggregate()


class TestAggregate:
    def test_hand_computed_cell(self, store):
        # three raters score the same item: [5, 4, 4]
        for rater, value in (("r1", 5), ("r2", 4), ("r3", 4)):
            store.submit(card("it000", rater, value))
        agg = store.aggregate()
        source = store.items["it000"].source
        cell = agg["overall"][source]["readability"]
        assert cell["mean"] == pytest.approx((5 + 4 + 4) / 3)
        assert cell["buckets"] == {"5": 1, "4-3": 2, "2-1": 0}

    def test_bucket_conservation(self, store):
        rng = np.random.default_rng(5)
        for item in make_items():
            for rater in ("r1", "r2"):
                store.submit(card(item.item_id, rater, int(rng.integers(1, 6))))
        agg = store.aggregate()
        for source, dims in agg["overall"].items():
            for dim in DIMENSIONS:
                cell = dims[dim]
                assert sum(cell["buckets"].values()) == cell["n"]

    def test_no_data(self, store):
        with pytest.raises(NoDataError):
            store.aggregate()

    def test_single_card_all_threes(self, store):
        store.submit(card("it001", "r1", 3))
        agg = store.aggregate()
        source = store.items["it001"].source
        for dim in DIMENSIONS:
            assert agg["overall"][source][dim]["mean"] == 3.0
        assert agg["overall"][source]["all_dimensions_mean"] == 3.0

    def test_dataset_breakout(self, tmp_path):
        items = make_items(4, "chest") + [
            EvalItem("mam0", (as_volume(np.full((4, 4), 0.5)),), "r", "model_a", "mammo")
        ]
        store = RatingStore(items, make_raters(), tmp_path / "l.jsonl", seed=1)
        store.submit(card("mam0", "r1", 2))
        agg = store.aggregate()
        assert "mammo" in agg["by_dataset"]
        assert "chest" not in agg["by_dataset"]  # no chest cards yet


class TestHttpApi:
    @pytest.fixture
    def client(self, store):
        from fastapi.testclient import TestClient

        return TestClient(build_app(store)), store

    def test_health(self, client):
        c, _ = client
        body = c.get("/api/health").json()
        assert body["status"] == "ok"

    def test_next_blinded_payload(self, client):
        c, _ = client
        body = c.get("/api/next", params={"rater": "r1"}).json()
        assert set(body) == {"item_id", "images", "report"}
        assert "source" not in json.dumps(body)

    def test_next_unknown_rater(self, client):
        c, _ = client
        resp = c.get("/api/next", params={"rater": "nope"})
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_rater"

    def test_score_range_error(self, client):
        c, _ = client
        resp = c.post("/api/score", json=card("it000", "r1", readability=9))
        assert resp.status_code == 422
        assert resp.json()["code"] == "range"

    def test_score_then_aggregate(self, client):
        c, _ = client
        assert c.post("/api/score", json=card("it000", "r1", 4)).status_code == 200
        agg = c.get("/api/aggregate").json()
        assert agg["n_cards"] == 1

    def test_image_endpoint_serves_png(self, client):
        c, _ = client
        resp = c.get("/api/items/it000/image/0")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_no_endpoint_leaks_source(self, client):
        """Blinding schema check across every rater-facing route."""
        c, store = client
        c.post("/api/score", json=card("it000", "r1", 4))
        for url, params in (
            ("/api/next", {"rater": "r2"}),
            ("/api/progress", {"rater": "r1"}),
            ("/api/health", {}),
        ):
            text = c.get(url, params=params).text
            assert "source" not in text
            assert "model_a" not in text and "model_b" not in text
            assert "radiologist" not in text
