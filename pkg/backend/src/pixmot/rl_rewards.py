from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from pixmot.numerics import RandomStream
from pixmot.scorers import Scorer, ScoreRequest

logger = logging.getLogger(__name__)

TokenMultiset = Counter


class RewardError(ValueError):
    pass


class RewardGroup(str, enum.Enum):
    TEXT_STYLE = "group1"
    AESTHETIC = "group2"


@dataclass(frozen=True)
class ResolutionCandidate:
    label: str
    height: int
    width: int
    probability: float
    difficulty: float

    @property
    def area(self) -> int:
        return self.height * self.width


def ocr_tokens(text: str) -> TokenMultiset:
    return Counter(text.casefold().split())


def ocr_iou(pred: TokenMultiset, ref: TokenMultiset) -> float:
    union = sum((pred | ref).values())
    if union == 0:
        return 1.0
    return sum((pred & ref).values()) / union


def style_score_map(score: float) -> float:
    if isinstance(score, bool) or not math.isfinite(score) or int(score) != score or not 1 <= score <= 4:
        raise RewardError(f"style score must be an integer in 1..4, got {score!r}")
    return (int(score) - 1) / 3.0


def composite_reward(r_ocr: float, r_sty: float, lambda_sty: float = 0.5) -> float:
    if not (0.0 <= r_ocr <= 1.0 and 0.0 <= r_sty <= 1.0):
        raise RewardError(f"rewards must lie in [0, 1], got r_ocr={r_ocr}, r_sty={r_sty}")
    if lambda_sty < 0:
        raise RewardError(f"lambda_sty must be nonnegative, got {lambda_sty}")
    return r_ocr + lambda_sty * r_sty


def gate_values(difficulties: Sequence[float], epoch: float, warmup_epochs: int, delta: float) -> np.ndarray:
    if warmup_epochs < 1:
        raise RewardError(f"warmup epochs must be at least 1, got {warmup_epochs}")
    if not delta > 0:
        raise RewardError(f"smoothing margin delta must be positive, got {delta}")
    progress = min(epoch / warmup_epochs, 1.0)
    return np.clip((progress - np.asarray(difficulties, dtype=np.float64)) / delta + 1.0, 0.0, 1.0)


BASE_SUM_TOLERANCE = 1e-9


def warmup_gate(
    candidates: Sequence[ResolutionCandidate], epoch: float, warmup_epochs: int, delta: float = 0.3
) -> np.ndarray:
    """Gate base sampling probabilities by difficulty and renormalise them to sum to one."""
    if not candidates:
        raise RewardError("resolution candidate set is empty")
    base = np.asarray([c.probability for c in candidates], dtype=np.float64)
    if np.any(base < 0) or abs(float(base.sum()) - 1.0) > BASE_SUM_TOLERANCE:
        raise RewardError(f"base probabilities must be nonnegative and sum to 1, got sum {float(base.sum())}")
    difficulties = [c.difficulty for c in candidates]
    if not np.any(base * gate_values(difficulties, 0, warmup_epochs, delta) > 0.0):
        raise RewardError(f"no resolution candidate survives the gate at epoch 0 with delta {delta}")
    gates = gate_values(difficulties, epoch, warmup_epochs, delta)
    if np.all(gates == 1.0):
        return base
    gated = base * gates
    return gated / gated.sum()


def difficulty_score(height: int, width: int, candidate_dims: Sequence[tuple[int, int]]) -> float:
    if not candidate_dims:
        raise RewardError("difficulty needs at least one candidate size")
    areas = [h * w for h, w in candidate_dims]
    log_ratios = [abs(math.log(h / w)) for h, w in candidate_dims]
    area_min, area_max = min(areas), max(areas)
    ratio_max = max(log_ratios)
    area_term = 0.0 if area_max == area_min else (height * width - area_min) / (area_max - area_min)
    ratio_term = 0.0 if ratio_max == 0.0 else abs(math.log(height / width)) / ratio_max
    return float(min(max(0.5 * area_term + 0.5 * ratio_term, 0.0), 1.0))


def _parse_ratio(label: str) -> tuple[int, int]:
    try:
        w, h = (int(p) for p in label.split(":"))
    except ValueError as exc:
        raise RewardError(f"aspect ratio must look like 'W:H', got {label!r}") from exc
    if w <= 0 or h <= 0:
        raise RewardError(f"aspect ratio terms must be positive, got {label!r}")
    return w, h


def build_resolution_candidates(
    aspect_ratios: Sequence[str] = ("1:1", "16:9", "9:16", "3:2", "2:3"),
    areas: Sequence[int] = (1536, 2048),
    multiple: int = 32,
) -> list[ResolutionCandidate]:
    """Every aspect ratio at every target area (``side**2``), rounded to ``multiple``."""
    dims = []
    for side in areas:
        for label in aspect_ratios:
            w, h = _parse_ratio(label)
            width = math.sqrt(side * side * w / h)
            height = side * side / width
            dims.append(
                (
                    f"{label}@{side}",
                    max(multiple, int(round(height / multiple)) * multiple),
                    max(multiple, int(round(width / multiple)) * multiple),
                )
            )
    if not dims:
        raise RewardError("resolution candidate set is empty")
    pairs = [(h, w) for _, h, w in dims]
    p = 1.0 / len(dims)
    return [ResolutionCandidate(label, h, w, p, difficulty_score(h, w, pairs)) for label, h, w in dims]


def sample_resolution(
    candidates: Sequence[ResolutionCandidate],
    epoch: float,
    warmup_epochs: int,
    delta: float,
    rng: RandomStream,
) -> tuple[ResolutionCandidate, RandomStream]:
    probs = warmup_gate(candidates, epoch, warmup_epochs, delta)
    u, rng = rng.uniform()
    index = int(np.searchsorted(np.cumsum(probs), float(u), side="right"))
    return candidates[min(index, len(candidates) - 1)], rng


def reward_group_for_epoch(epoch: int) -> RewardGroup:
    if epoch < 0:
        raise RewardError(f"epoch must be nonnegative, got {epoch}")
    return RewardGroup.TEXT_STYLE if epoch % 2 == 0 else RewardGroup.AESTHETIC


def group_reward(
    group: RewardGroup,
    r_ocr: float | None = None,
    r_sty: float | None = None,
    r_aes: float | None = None,
    lambda_sty: float = 0.5,
) -> float:
    if group is RewardGroup.TEXT_STYLE:
        if r_ocr is None or r_sty is None:
            raise RewardError("group1 reward needs both r_ocr and r_sty")
        return composite_reward(r_ocr, r_sty, lambda_sty)
    if r_aes is None:
        raise RewardError("group2 reward needs r_aes")
    return float(r_aes)


def _read_text(path: Path) -> str | None:
    return path.read_text(encoding="utf-8") if path.exists() else None


def score_triple(image: Path, scorer: Scorer, group: RewardGroup, lambda_sty: float = 0.5) -> dict[str, Any]:
    """Reward record for ``<name>.ppm`` with its ``.prompt.txt``, ``.ref.txt`` and optional ``.ocr.txt``."""
    stem = image.with_suffix("")
    prompt = _read_text(stem.with_name(stem.name + ".prompt.txt")) or ""
    record: dict[str, Any] = {"name": stem.name, "group": group.value, "reward": None, "valid": False}
    if group is RewardGroup.AESTHETIC:
        resp = scorer.score(ScoreRequest(str(image), prompt, "aesthetic"))
        record["r_aes"] = resp.score if resp.valid else None
        if resp.valid:
            record.update(reward=group_reward(group, r_aes=resp.score), valid=True)
        return record

    ref = _read_text(stem.with_name(stem.name + ".ref.txt"))
    ocr = _read_text(stem.with_name(stem.name + ".ocr.txt"))
    if ref is None or ocr is None:
        record["detail"] = "missing .ref.txt" if ref is None else "missing .ocr.txt"
        return record
    r_ocr = ocr_iou(ocr_tokens(ocr), ocr_tokens(ref))
    record["r_ocr"] = r_ocr
    resp = scorer.score(ScoreRequest(str(image), prompt, "style"))
    if not resp.valid:
        record["detail"] = "style scorer returned no valid score"
        return record
    record["style_score"] = resp.score
    try:
        r_sty = style_score_map(resp.score)
    except RewardError as exc:
        record["detail"] = str(exc)
        return record
    record.update(r_sty=r_sty, reward=group_reward(group, r_ocr, r_sty, lambda_sty=lambda_sty), valid=True)
    return record


def evaluate_directory(
    directory: str | Path, scorer: Scorer, epoch: int = 0, lambda_sty: float = 0.5, workers: int = 1
) -> list[dict[str, Any]]:
    root = Path(directory)
    if not root.is_dir():
        raise RewardError(f"{root} is not a directory")
    group = reward_group_for_epoch(epoch)
    images = sorted(root.glob("*.ppm"))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda p: score_triple(p, scorer, group, lambda_sty), images))
    logger.info("scored %d images in %s for %s", len(records), root, group.value)
    return records
