import base64
import io
import itertools

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from anoclick.clicks import Click, OutOfBoundsClickError
from anoclick.datasets import load_dataset
from anoclick.server import create_app
from anoclick.sessions import (
    SessionError,
    SessionExportedError,
    SessionManager,
    UnknownSessionError,
)


@pytest.fixture()
def manager(untrained_runtime, toy_paths, tmp_path):
    m = SessionManager(untrained_runtime, tmp_path / "out")
    for category in ("weave", "grid"):
        index = load_dataset(toy_paths.train_root, "mvtec", category=category,
                             split="test")
        m.register_index(index)
    return m


def first_defective(manager):
    return next(e for e in manager.list_images() if e.defect_type != "good")


class TestSessionLifecycle:
    def test_open_session_empty_history(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        assert session.clicks == []
        assert session.masks == []
        assert session.current_mask.scores.sum() == 0.0
        assert session.status == "active"

    def test_unknown_image(self, manager):
        with pytest.raises(SessionError) as err:
            manager.open_session("nope/missing.png")
        assert "nope/missing.png" in str(err.value)

    def test_unknown_prompt_key_named(self, manager, toy_paths):
        # corpus has no fallback entries, so an unknown defect must fail
        entry = first_defective(manager)
        with pytest.raises(KeyError) as err:
            manager.open_session(entry.image_id, prompt_key=("weave", "dent"))
        assert "dent" in str(err.value)

    def test_reopen_distinct_tokens(self, manager):
        entry = first_defective(manager)
        n = 10_000
        ids = {manager.open_session(entry.image_id).session_id for _ in range(n)}
        assert len(ids) == n

    def test_submit_click_appends(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        mask, _ = manager.submit_click(session.session_id, Click(10, 12, True))
        assert len(session.clicks) == 1
        assert len(session.masks) == 1
        assert mask.scores.shape == (64, 64)
        assert session.clicks[0].index == 0

    def test_click_out_of_bounds(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        with pytest.raises(OutOfBoundsClickError):
            manager.submit_click(session.session_id, Click(400, 10, True))

    def test_unknown_session(self, manager):
        with pytest.raises(UnknownSessionError):
            manager.submit_click("deadbeef", Click(1, 1, True))

    def test_undo_then_resubmit_identical(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        m1, _ = manager.submit_click(session.session_id, Click(10, 12, True))
        m2, _ = manager.submit_click(session.session_id, Click(30, 40, False))
        undone = manager.undo_click(session.session_id)
        assert np.array_equal(undone.scores, m1.scores)
        m2_again, _ = manager.submit_click(session.session_id, Click(30, 40, False))
        assert np.array_equal(m2_again.scores, m2.scores)

    def test_undo_on_empty_returns_zero_mask(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        mask = manager.undo_click(session.session_id)
        assert mask.scores.sum() == 0.0

    def test_iou_reported_with_gt(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id, with_gt=True)
        assert session.gt is not None
        _, iou_value = manager.submit_click(session.session_id, Click(10, 12, True))
        assert iou_value is not None
        assert 0.0 <= iou_value <= 1.0

    def test_session_isolation(self, manager):
        entry = first_defective(manager)
        clicks_a = [Click(8, 8, True), Click(40, 40, False), Click(20, 30, True)]
        clicks_b = [Click(50, 12, True), Click(12, 50, True)]

        # serial reference runs
        sa = manager.open_session(entry.image_id)
        serial_a = [manager.submit_click(sa.session_id, c)[0].scores for c in clicks_a]
        sb = manager.open_session(entry.image_id)
        serial_b = [manager.submit_click(sb.session_id, c)[0].scores for c in clicks_b]

        # interleaved runs
        ia = manager.open_session(entry.image_id)
        ib = manager.open_session(entry.image_id)
        inter_a, inter_b = [], []
        for a, b in itertools.zip_longest(clicks_a, clicks_b):
            if a is not None:
                inter_a.append(manager.submit_click(ia.session_id, a)[0].scores)
            if b is not None:
                inter_b.append(manager.submit_click(ib.session_id, b)[0].scores)
        for want, got in zip(serial_a, inter_a):
            assert np.array_equal(want, got)
        for want, got in zip(serial_b, inter_b):
            assert np.array_equal(want, got)

    def test_trained_model_responds_near_click(self, trained_click, toy_paths,
                                               tmp_path):
        m = SessionManager(trained_click.runtime, tmp_path)
        index = load_dataset(toy_paths.eval_root, "mvtec", category="weave",
                             split="test")
        m.register_index(index)
        entry = next(e for e in m.list_images() if e.defect_type != "good")
        session = m.open_session(entry.image_id, with_gt=True)
        # first positive click at the anomaly center
        ys, xs = np.nonzero(session.gt)
        cy, cx = int(ys.mean()), int(xs.mean())
        mask, _ = m.submit_click(session.session_id, Click(cx, cy, True))
        binary = mask.binary()
        window = binary[max(0, cy - 6):cy + 7, max(0, cx - 6):cx + 7]
        assert window.any(), "no activated pixel near the first positive click"

    def test_eviction_after_idle(self, untrained_runtime, toy_paths, tmp_path):
        clock = {"t": 0.0}
        m = SessionManager(untrained_runtime, tmp_path, idle_timeout=100.0,
                           clock=lambda: clock["t"])
        index = load_dataset(toy_paths.train_root, "mvtec", category="weave",
                             split="test")
        m.register_index(index)
        entry = first_defective(m)
        session = m.open_session(entry.image_id)
        clock["t"] = 50.0
        m.get_mask(session.session_id)  # refreshes last_access
        clock["t"] = 140.0
        m.get_mask(session.session_id)  # still alive (90s idle)
        clock["t"] = 300.0
        with pytest.raises(UnknownSessionError):
            m.get_mask(session.session_id)


class TestExport:
    def test_export_writes_mask_and_sidecar(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        manager.submit_click(session.session_id, Click(16, 16, True))
        path = manager.export_label(session.session_id)
        assert path.exists()
        mask = np.asarray(Image.open(path))
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 255}
        sidecar = path.with_suffix(".json")
        assert sidecar.exists()
        meta = __import__("json").loads(sidecar.read_text())
        assert meta["clicks"] == [{"x": 16, "y": 16, "polarity": 1}]
        assert meta["model_fingerprint"] == manager.runtime.fingerprint
        assert session.status == "exported"

    def test_zero_click_export_refused(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        with pytest.raises(SessionError):
            manager.export_label(session.session_id)

    def test_export_idempotent(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        manager.submit_click(session.session_id, Click(16, 16, True))
        p1 = manager.export_label(session.session_id)
        stamp = p1.stat().st_mtime_ns
        p2 = manager.export_label(session.session_id)
        assert p1 == p2
        assert p2.stat().st_mtime_ns == stamp

    def test_click_after_export_rejected(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        manager.submit_click(session.session_id, Click(16, 16, True))
        manager.export_label(session.session_id)
        with pytest.raises(SessionExportedError):
            manager.submit_click(session.session_id, Click(20, 20, True))
        with pytest.raises(SessionExportedError):
            manager.undo_click(session.session_id)

    def test_unwritable_destination_keeps_session_active(self, manager, tmp_path):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        manager.submit_click(session.session_id, Click(16, 16, True))
        blocked = tmp_path / "blocked"
        blocked.write_text("a file, not a directory")
        with pytest.raises(OSError):
            manager.export_label(session.session_id, destination=blocked)
        assert session.status == "active"
        # a later export to a good destination still works
        path = manager.export_label(session.session_id)
        assert path.exists()

    def test_replay_reproduces_export(self, manager):
        entry = first_defective(manager)
        session = manager.open_session(entry.image_id)
        for click in (Click(16, 16, True), Click(40, 44, False), Click(22, 30, True)):
            manager.submit_click(session.session_id, click)
        path = manager.export_label(session.session_id)
        exported = np.asarray(Image.open(path))
        replayed = manager.replay_export(path.with_suffix(".json"))
        assert np.array_equal(exported, replayed)


class TestServer:
    @pytest.fixture()
    def client(self, manager):
        return TestClient(create_app(manager))

    def _open(self, client):
        images = client.get("/list-images").json()["images"]
        image = next(i for i in images if i["defect_type"] != "good")
        resp = client.post("/open-session", json={"image_id": image["image_id"]})
        assert resp.status_code == 200
        return resp.json()

    def test_list_images(self, client):
        payload = client.get("/list-images").json()
        assert len(payload["images"]) > 0
        assert {"image_id", "category", "defect_type"} <= set(payload["images"][0])

    def test_open_returns_image(self, client):
        opened = self._open(client)
        raw = base64.b64decode(opened["image"])
        img = Image.open(io.BytesIO(raw))
        assert img.size == (opened["width"], opened["height"]) == (64, 64)

    def test_click_round_trip(self, client):
        opened = self._open(client)
        resp = client.post("/submit-click", json={
            "session_id": opened["session_id"], "x": 10, "y": 12, "polarity": 1,
        })
        assert resp.status_code == 200
        body = resp.json()
        assert body["click_count"] == 1
        mask = Image.open(io.BytesIO(base64.b64decode(body["mask"])))
        assert mask.size == (64, 64)

    def test_click_out_of_bounds_400(self, client):
        opened = self._open(client)
        resp = client.post("/submit-click", json={
            "session_id": opened["session_id"], "x": 500, "y": 12, "polarity": 1,
        })
        assert resp.status_code == 400

    def test_unknown_session_404(self, client):
        resp = client.post("/undo-click", json={"session_id": "missing"})
        assert resp.status_code == 404

    def test_undo_round_trip(self, client):
        opened = self._open(client)
        sid = opened["session_id"]
        m1 = client.post("/submit-click", json={"session_id": sid, "x": 10,
                                                "y": 12, "polarity": 1}).json()["mask"]
        client.post("/submit-click", json={"session_id": sid, "x": 30, "y": 30,
                                           "polarity": 0})
        undone = client.post("/undo-click", json={"session_id": sid}).json()
        assert undone["click_count"] == 1
        assert undone["mask"] == m1

    def test_set_prompt(self, client):
        opened = self._open(client)
        resp = client.post("/set-prompt", json={
            "session_id": opened["session_id"], "object": "weave",
            "defect": "smudge",
        })
        assert resp.status_code == 200
        assert resp.json()["prompt_key"] == ["weave", "smudge"]

    def test_export_endpoint(self, client):
        opened = self._open(client)
        sid = opened["session_id"]
        client.post("/submit-click", json={"session_id": sid, "x": 10, "y": 12,
                                           "polarity": 1})
        resp = client.post("/export", json={"session_id": sid})
        assert resp.status_code == 200
        body = resp.json()
        decoded = Image.open(io.BytesIO(base64.b64decode(body["mask_png"])))
        assert decoded.size == (64, 64)

    def test_export_without_clicks_400(self, client):
        opened = self._open(client)
        resp = client.post("/export", json={"session_id": opened["session_id"]})
        assert resp.status_code == 400
