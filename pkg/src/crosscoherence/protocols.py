"""Pairwise and R-precision evaluation protocols.

A scorer is any callable ``(cloud, text) -> float`` where higher means more
coherent. Scorers may also provide ``score_texts(cloud, texts)`` to score
many captions against one cloud at once; protocols use it when present.
Exact ties always count as incorrect.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Collection, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from crosscoherence.distractors import Triplet
from crosscoherence.geometry import ColoredPointCloud

Scorer = Callable[[ColoredPointCloud, str], float]

DEFAULT_SET_SIZE = 153


class ProtocolError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    count: int
    correct: int
    items: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def subset(self, key: str, value) -> "EvalReport":
        """Report restricted to items whose ``key`` equals ``value``."""
        items = [it for it in self.items if it.get(key) == value]
        correct = sum(1 for it in items if it["correct"])
        return EvalReport(self.protocol, correct / len(items) if items else float("nan"), len(items),
                          correct, items, {**self.config, key: value})


def _score_many(scorer, cloud, texts: Sequence[str]) -> List[float]:
    if hasattr(scorer, "score_texts"):
        return [float(s) for s in scorer.score_texts(cloud, list(texts))]
    return [float(scorer(cloud, t)) for t in texts]


def eval_pairwise(scorer: Scorer, triplets: Sequence[Triplet],
                  clouds: Mapping[str, ColoredPointCloud]) -> EvalReport:
    """Fraction of triplets where the reference strictly outscores the distractor."""
    items = []
    for n, t in enumerate(triplets):
        if len(t.shape_ids) != 2 or t.target not in (0, 1):
            raise ProtocolError(f"triplet {n} ({t.shape_ids}) is not a two-shape triplet")
        missing = [s for s in t.shape_ids if s not in clouds]
        if missing:
            raise ProtocolError(f"triplet {n} references unknown shapes {missing}")
        ref, dis = t.shape_ids[t.target], t.shape_ids[1 - t.target]
        s_ref = float(scorer(clouds[ref], t.text))
        s_dis = float(scorer(clouds[dis], t.text))
        items.append({"index": n, "reference": ref, "distractor": dis, "text": t.text,
                      "score_reference": s_ref, "score_distractor": s_dis,
                      "tie": s_ref == s_dis, "correct": s_ref > s_dis,
                      "difficulty": t.distractor_difficulty})
    correct = sum(it["correct"] for it in items)
    if not items:
        raise ProtocolError("no triplets to evaluate")
    return EvalReport("pairwise", correct / len(items), len(items), correct, items,
                      {"ties": sum(it["tie"] for it in items)})


def sample_text_set(gt_text: str, text_pool: Sequence[str], set_size: int,
                    rng: np.random.Generator, exclude: Collection[str] = ()) -> List[str]:
    """Ground truth followed by ``set_size - 1`` distinct pool texts (ground truth excluded)."""
    banned = set(exclude) | {gt_text}
    candidates = sorted(set(t for t in text_pool if t not in banned))
    if len(candidates) < set_size - 1:
        raise ProtocolError(
            f"text pool has {len(candidates)} usable texts, need {set_size - 1} for set size {set_size}")
    picks = rng.choice(len(candidates), size=set_size - 1, replace=False)
    return [gt_text] + [candidates[int(i)] for i in picks]


def eval_rprecision(scorer: Scorer, pairs: Sequence[Tuple[ColoredPointCloud, str]],
                    text_pool: Sequence[str], set_size: int = DEFAULT_SET_SIZE,
                    seed: int = 0, exclude: Optional[Sequence[Collection[str]]] = None) -> EvalReport:
    """Fraction of pairs whose ground-truth text uniquely scores highest in its text set.

    Each pair gets its own seeded sample of ``set_size - 1`` distractor texts.
    ``exclude[i]`` optionally lists further texts never sampled for pair i
    (e.g. other captions of the same shape).
    """
    if set_size < 2:
        raise ProtocolError("set size must be at least 2")
    if not pairs:
        raise ProtocolError("no pairs to evaluate")
    items = []
    for n, (cloud, gt) in enumerate(pairs):
        rng = np.random.default_rng([seed, n])
        texts = sample_text_set(gt, text_pool, set_size, rng, exclude[n] if exclude else ())
        scores = _score_many(scorer, cloud, texts)
        best = max(scores[1:])
        correct = scores[0] > best
        items.append({"index": n, "shape_id": cloud.shape_id, "text": gt, "score_gt": scores[0],
                      "best_other": best, "tie": scores[0] == best, "correct": correct,
                      "rank": 1 + sum(s > scores[0] for s in scores[1:])})
    correct = sum(it["correct"] for it in items)
    return EvalReport("rprecision", correct / len(items), len(items), correct, items,
                      {"set_size": set_size, "seed": seed})


class RandomScorer:
    """Seeded i.i.d. uniform scores, a pure function of (seed, shape id, text)."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, cloud: ColoredPointCloud, text: str) -> float:
        key = f"{cloud.shape_id}\x00{text}".encode("utf-8")
        return float(np.random.default_rng([self.seed, zlib.crc32(key), len(key)]).random())


class ConstantScorer:
    def __init__(self, value: float = 0.0):
        self.value = value

    def __call__(self, cloud, text) -> float:
        return self.value


class TransformedScorer:
    """Applies ``fn`` to every score of ``scorer``."""

    def __init__(self, scorer: Scorer, fn: Callable[[float], float]):
        self.scorer = scorer
        self.fn = fn

    def __call__(self, cloud, text) -> float:
        return self.fn(self.scorer(cloud, text))

    def score_texts(self, cloud, texts):
        return [self.fn(s) for s in _score_many(self.scorer, cloud, texts)]


def binomial_bounds(n: int, p: float, sigmas: float = 3.0) -> Tuple[float, float]:
    """Accuracy interval p +/- sigmas * sqrt(p(1-p)/n)."""
    half = sigmas * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


def format_reports(reports: Mapping[str, EvalReport]) -> str:
    """Plain-text table: one row per named report."""
    rows = [("run", "protocol", "accuracy", "correct", "count")]
    for name, r in reports.items():
        rows.append((name, r.protocol, f"{100 * r.accuracy:.2f}%", str(r.correct), str(r.count)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
