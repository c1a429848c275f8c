from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Protocol

import requests

from pixmot import settings

logger = logging.getLogger(__name__)

SCORER_KINDS = ("style", "aesthetic")


@dataclass(frozen=True)
class ScoreRequest:
    image_path: str
    prompt: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in SCORER_KINDS:
            raise ValueError(f"scorer kind must be one of {SCORER_KINDS}, got {self.kind!r}")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: Any) -> "ScoreRequest":
        if not isinstance(payload, dict):
            raise ValueError("score request must be a JSON object")
        missing = [k for k in ("image_path", "prompt", "kind") if not isinstance(payload.get(k), str)]
        if missing:
            raise ValueError(f"score request fields missing or not strings: {missing}")
        return cls(payload["image_path"], payload["prompt"], payload["kind"])


@dataclass(frozen=True)
class ScoreResponse:
    score: float
    valid: bool

    def to_json(self) -> dict[str, Any]:
        return {"score": self.score, "valid": self.valid}


INVALID = ScoreResponse(score=0.0, valid=False)


class Scorer(Protocol):
    def score(self, request: ScoreRequest) -> ScoreResponse: ...


class ReferenceScorer:
    """Offline stand-in for external judges, deterministic from image bytes, prompt and kind."""

    def score(self, request: ScoreRequest) -> ScoreResponse:
        try:
            image_bytes = Path(request.image_path).read_bytes()
        except OSError as exc:
            logger.warning("reference scorer cannot read %s: %s", request.image_path, exc)
            return INVALID
        digest = hashlib.sha256()
        digest.update(image_bytes)
        digest.update(b"\0" + request.prompt.encode("utf-8"))
        digest.update(b"\0" + request.kind.encode("utf-8"))
        value = int.from_bytes(digest.digest()[:8], "little")
        if request.kind == "style":
            return ScoreResponse(score=float(1 + value % 4), valid=True)
        return ScoreResponse(score=value / float(2**64 - 1), valid=True)


class HttpScorer:
    def __init__(self, base_url: str, timeout: float = 10.0, session: requests.Session | None = None) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = float(timeout)
        self.session = session or requests.Session()

    def score(self, request: ScoreRequest) -> ScoreResponse:
        try:
            r = self.session.post(f"{self.base_url}/scorer/score", json=request.to_json(), timeout=self.timeout)
            r.raise_for_status()
            payload = r.json()
            score, valid = payload["score"], payload["valid"]
            if not isinstance(valid, bool) or not isinstance(score, (int, float)):
                raise ValueError(f"unexpected scorer payload {payload!r}")
            return ScoreResponse(score=float(score), valid=valid)
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            logger.warning("scorer call to %s failed for %s: %s", self.base_url, request.image_path, exc)
            return INVALID


def scorer_from_env() -> Scorer:
    url = settings.scorer_url()
    if url:
        logger.info("using HTTP scorer at %s", url)
        return HttpScorer(url, timeout=settings.scorer_timeout())
    return ReferenceScorer()
