from __future__ import annotations

import importlib
import re
from pathlib import Path

import pytest
import requests

from pixmot.scorer_service import create_app
from pixmot.scorers import INVALID, HttpScorer, ReferenceScorer, ScoreRequest, ScoreResponse, scorer_from_env


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n1 1\n255\n\x10\x20\x30")
    return path


class _ClientResponse:
    def __init__(self, flask_response):
        self._r = flask_response
        self.status_code = flask_response.status_code

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")

    def json(self):
        return self._r.get_json()


class _FlaskSession:
    """Routes HttpScorer posts into a Flask test client."""

    def __init__(self, app):
        self.client = app.test_client()
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, timeout))
        path = url.split("://", 1)[-1].split("/", 1)[-1]
        return _ClientResponse(self.client.post("/" + path, json=json))


class _BrokenSession:
    def post(self, url, json=None, timeout=None):
        raise requests.ConnectionError("connection refused")


class TestReferenceScorer:
    def test_deterministic_and_in_range(self, image):
        scorer = ReferenceScorer()
        style = scorer.score(ScoreRequest(str(image), "a sign", "style"))
        assert style == scorer.score(ScoreRequest(str(image), "a sign", "style"))
        assert style.valid and style.score in (1.0, 2.0, 3.0, 4.0)
        aes = scorer.score(ScoreRequest(str(image), "a sign", "aesthetic"))
        assert 0.0 <= aes.score <= 1.0

    def test_missing_image_is_invalid(self, tmp_path):
        assert ReferenceScorer().score(ScoreRequest(str(tmp_path / "gone.ppm"), "", "style")) == INVALID

    def test_request_validation(self):
        with pytest.raises(ValueError):
            ScoreRequest("a.ppm", "p", "beauty")
        with pytest.raises(ValueError):
            ScoreRequest.from_json({"image_path": "a.ppm", "prompt": 3, "kind": "style"})
        with pytest.raises(ValueError):
            ScoreRequest.from_json(["a.ppm"])


class TestService:
    def test_health(self):
        response = create_app().test_client().get("/scorer/health")
        assert response.status_code == 200
        assert response.get_json() == {"status": "ok", "scorer": "ReferenceScorer"}

    def test_score_matches_reference(self, image):
        client = create_app().test_client()
        payload = {"image_path": str(image), "prompt": "a sign", "kind": "aesthetic"}
        response = client.post("/scorer/score", json=payload)
        assert response.status_code == 200
        expected = ReferenceScorer().score(ScoreRequest.from_json(payload))
        assert response.get_json() == expected.to_json()

    def test_bad_body(self):
        client = create_app().test_client()
        assert client.post("/scorer/score", data="nope").status_code == 400
        response = client.post("/scorer/score", json={"image_path": "x", "prompt": "y", "kind": "other"})
        assert response.status_code == 400
        assert "kind" in response.get_json()["error"]

    def test_custom_scorer(self):
        class Always:
            def score(self, request):
                return ScoreResponse(4.0, True)

        client = create_app(Always()).test_client()
        response = client.post("/scorer/score", json={"image_path": "x", "prompt": "", "kind": "style"})
        assert response.get_json() == {"score": 4.0, "valid": True}


class TestHttpScorer:
    def test_round_trip_through_service(self, image):
        session = _FlaskSession(create_app())
        scorer = HttpScorer("http://scorer.local/", timeout=2.5, session=session)
        request = ScoreRequest(str(image), "a sign", "style")
        assert scorer.score(request) == ReferenceScorer().score(request)
        assert session.calls == [("http://scorer.local/scorer/score", 2.5)]

    def test_connection_failure_is_invalid(self, caplog):
        scorer = HttpScorer("http://127.0.0.1:9", session=_BrokenSession())
        assert scorer.score(ScoreRequest("a.ppm", "", "style")) == INVALID
        assert "connection refused" in caplog.text

    def test_server_error_is_invalid(self):
        scorer = HttpScorer("http://scorer.local", session=_FlaskSession(create_app()))
        # unknown route answers 404
        scorer.base_url = "http://scorer.local/missing"
        assert scorer.score(ScoreRequest("a.ppm", "", "style")) == INVALID


def test_scorer_from_env(monkeypatch):
    monkeypatch.delenv("PIXMOT_SCORER_URL", raising=False)
    assert isinstance(scorer_from_env(), ReferenceScorer)
    monkeypatch.setenv("PIXMOT_SCORER_URL", "http://127.0.0.1:5055")
    monkeypatch.setenv("PIXMOT_SCORER_TIMEOUT", "3")
    scorer = scorer_from_env()
    assert isinstance(scorer, HttpScorer)
    assert scorer.base_url == "http://127.0.0.1:5055" and scorer.timeout == 3.0


def test_gunicorn_target_builds_the_scorer_app():
    repo = Path(__file__).resolve().parents[2]
    script = (repo / "scripts" / "start_scorer.sh").read_text(encoding="utf-8")
    target = re.search(r'"([\w.]+):(\w+)\(\)"', script)
    assert target is not None
    factory = getattr(importlib.import_module(target.group(1)), target.group(2))
    assert factory().test_client().get("/scorer/health").status_code == 200
    assert "gunicorn" in (repo / "requirements.txt").read_text(encoding="utf-8").split()
    assert 'serve = ["gunicorn"]' in (repo / "backend" / "pyproject.toml").read_text(encoding="utf-8")
