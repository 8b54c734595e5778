"""Easy/hard distractor mining in autoencoder latent space and triplet building."""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from crosscoherence.encoders.pointnet import PointNetEncoder
from crosscoherence.geometry import ColoredPointCloud

log = logging.getLogger(__name__)

HARD, EASY, REFERENCE = "hard", "easy", "reference"


@dataclass
class DistractorSet:
    reference_id: str
    hard_ids: Tuple[str, str]
    easy_id: str
    class_label: str

    def __post_init__(self):
        self.hard_ids = tuple(self.hard_ids)
        ids = [self.reference_id, *self.hard_ids, self.easy_id]
        if len(set(ids)) != len(ids):
            raise ValueError(f"distractor ids are not distinct: {ids}")

    def candidates(self) -> List[Tuple[str, str]]:
        return [(self.hard_ids[0], HARD), (self.hard_ids[1], HARD), (self.easy_id, EASY)]

    def to_dict(self) -> dict:
        return {"reference_id": self.reference_id, "hard_ids": list(self.hard_ids),
                "easy_id": self.easy_id, "class_label": self.class_label}


@dataclass
class Triplet:
    """One scoring item: G candidate shapes, a caption and the reference position.

    ``difficulty[i]`` is ``"reference"`` at ``target`` and ``"hard"``/``"easy"``
    elsewhere (``"unknown"`` for external data without labels).
    """

    shape_ids: List[str]
    text: str
    target: int
    difficulty: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.shape_ids = list(self.shape_ids)
        if not self.difficulty:
            self.difficulty = [REFERENCE if i == self.target else "unknown" for i in range(len(self.shape_ids))]
        self.difficulty = list(self.difficulty)
        if not 0 <= self.target < len(self.shape_ids):
            raise ValueError(f"target {self.target} out of range for {len(self.shape_ids)} shapes")
        if len(self.difficulty) != len(self.shape_ids):
            raise ValueError("difficulty must have one tag per shape")

    @property
    def reference_id(self) -> str:
        return self.shape_ids[self.target]

    @property
    def distractor_difficulty(self) -> str:
        """Single tag for G=2 triplets: the tag of the non-reference shape."""
        tags = {d for i, d in enumerate(self.difficulty) if i != self.target}
        return tags.pop() if len(tags) == 1 else "mixed"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MiningConfig:
    easy_percentile: float = 75.0
    seed: int = 0
    min_class_size: int = 4


@dataclass
class MiningReport:
    sets: List[DistractorSet]
    skipped: List[dict] = field(default_factory=list)


def compute_latents(clouds: Mapping[str, ColoredPointCloud], encoder: PointNetEncoder,
                    batch_size: int = 32) -> Dict[str, np.ndarray]:
    """Global code of every cloud (float64 arrays), computed in sorted-id order."""
    ids = sorted(clouds)
    out: Dict[str, np.ndarray] = {}
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            by_size: Dict[int, List[str]] = {}
            for sid in chunk:
                by_size.setdefault(clouds[sid].n, []).append(sid)
            for group in by_size.values():
                codes = encoder.forward_global(*encoder.prepare([clouds[s] for s in group]))
                for sid, code in zip(group, codes):
                    out[sid] = code.double().numpy()
    return out


def reference_rng(seed: int, reference_id: str) -> np.random.Generator:
    """Per-reference generator so results do not depend on iteration order."""
    return np.random.default_rng([seed, zlib.crc32(reference_id.encode("utf-8"))])


def mine_distractors(latents: Mapping[str, np.ndarray], class_labels: Mapping[str, str],
                     config: Optional[MiningConfig] = None) -> MiningReport:
    """Two nearest same-class shapes are hard; a random far one is easy.

    Easy candidates are same-class shapes whose distance is strictly above the
    ``easy_percentile`` of the reference's same-class distances (hard picks
    excluded). If that leaves nothing, the farthest remaining shape is used.
    Ties always go to the lexicographically lowest id.
    """
    config = config or MiningConfig()
    by_class: Dict[str, List[str]] = {}
    for sid in sorted(latents):
        by_class.setdefault(class_labels[sid], []).append(sid)
    report = MiningReport(sets=[])
    for label in sorted(by_class):
        ids = by_class[label]
        if len(ids) < config.min_class_size:
            log.warning("class %r has %d shapes, skipping distractor mining", label, len(ids))
            report.skipped.append({"class_label": label, "count": len(ids),
                                   "reason": f"fewer than {config.min_class_size} shapes"})
            continue
        codes = np.stack([np.asarray(latents[s], dtype=np.float64) for s in ids])
        for i, ref in enumerate(ids):
            row = np.sqrt(((codes - codes[i]) ** 2).sum(axis=1))
            others = [j for j in range(len(ids)) if j != i]
            d = row[others]
            # ids are sorted, so a stable sort on distance breaks ties by id
            order = np.argsort(d, kind="stable")
            hard = [others[order[0]], others[order[1]]]
            threshold = np.percentile(d, config.easy_percentile)
            rest = [(row[j], j) for j in others if j not in hard]
            far = [j for dj, j in rest if dj > threshold]
            if far:
                easy = far[int(reference_rng(config.seed, ref).integers(len(far)))]
            else:
                easy = min(rest, key=lambda t: (-t[0], t[1]))[1]
            report.sets.append(DistractorSet(ref, (ids[hard[0]], ids[hard[1]]), ids[easy], label))
    return report


def build_triplets(distractor_sets: Sequence[DistractorSet], captions: Mapping[str, Sequence[str]],
                   group_size: int = 2, seed: int = 0) -> List[Triplet]:
    """One triplet per (reference, caption) with ``group_size - 1`` sampled distractors.

    References without captions are skipped with a warning.
    """
    if not 2 <= group_size <= 4:
        raise ValueError("group size must be between 2 and 4")
    rng = np.random.default_rng(seed)
    triplets: List[Triplet] = []
    for ds in sorted(distractor_sets, key=lambda s: s.reference_id):
        caps = captions.get(ds.reference_id) or []
        if not caps:
            log.warning("reference %s has no captions, skipping", ds.reference_id)
            continue
        pool = ds.candidates()
        for text in caps:
            picks = rng.choice(len(pool), size=group_size - 1, replace=False)
            chosen = [pool[int(p)] for p in picks]
            target = int(rng.integers(group_size))
            chosen.insert(target, (ds.reference_id, REFERENCE))
            triplets.append(Triplet([c[0] for c in chosen], text, target, [c[1] for c in chosen]))
    return triplets


def pair_triplets(distractor_sets: Sequence[DistractorSet], captions: Mapping[str, Sequence[str]],
                  seed: int = 0) -> List[Triplet]:
    """Two-shape triplets pairing each reference with each of its three distractors.

    Captions are used round-robin per reference; the reference position is
    randomized (seeded).
    """
    rng = np.random.default_rng(seed)
    triplets: List[Triplet] = []
    for ds in sorted(distractor_sets, key=lambda s: s.reference_id):
        caps = captions.get(ds.reference_id) or []
        if not caps:
            log.warning("reference %s has no captions, skipping", ds.reference_id)
            continue
        for k, (sid, tag) in enumerate(ds.candidates()):
            target = int(rng.integers(2))
            ids = [sid, sid]
            tags = [tag, tag]
            ids[target], tags[target] = ds.reference_id, REFERENCE
            triplets.append(Triplet(ids, caps[k % len(caps)], target, tags))
    return triplets


class TripletSampler:
    """Redraws distractors every epoch (seed derived from the epoch number)."""

    def __init__(self, distractor_sets: Sequence[DistractorSet], captions: Mapping[str, Sequence[str]],
                 group_size: int = 2, seed: int = 0):
        self.distractor_sets = list(distractor_sets)
        self.captions = captions
        self.group_size = group_size
        self.seed = seed

    def epoch(self, epoch: int) -> List[Triplet]:
        return build_triplets(self.distractor_sets, self.captions, self.group_size,
                              seed=int(np.random.default_rng([self.seed, epoch]).integers(2 ** 31)))

    def __len__(self):
        return len(self.epoch(0))
