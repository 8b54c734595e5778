"""CrossCoherence: bilateral cross-attention scoring of text against colored point clouds.

Shape branch: local features from the last local set-abstraction stage,
projected to ``d_model``. Text branch: per-token embeddings from a provider,
projected to ``d_model``. One bilateral block runs shape->text and
text->shape attention in parallel; both outputs are average-pooled (text
with a padding-aware mean), concatenated and passed through an MLP giving
one logit per (cloud, text). Candidate groups are softmax-normalized and
trained with cross-entropy.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from crosscoherence.attention import AttentionConfig, MultiHeadAttention, cross_attention
from crosscoherence.distractors import Triplet
from crosscoherence.encoders.autoencoder import TrainingDivergedError
from crosscoherence.encoders.pointnet import Grouping, PointNetEncoder
from crosscoherence.geometry import ColoredPointCloud

log = logging.getLogger(__name__)

__all__ = [
    "AttentionConfig", "BilateralBlock", "CrossCoherence", "FeatureBank", "FitConfig", "FitResult",
    "GroupScore", "ScorerConfig", "cross_attention", "fit", "score_group", "score_pair", "train_step",
]


@dataclass
class ScorerConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    head_widths: Tuple[int, ...] = (256, 128)
    freeze_encoder: bool = True
    # append each local feature's center coordinates before the shape projection
    shape_positions: bool = False

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.head_widths = tuple(int(w) for w in self.head_widths)

    def to_dict(self) -> dict:
        return asdict(self)


class BilateralBlock(nn.Module):
    """Shape queries over text keys/values, and text queries over shape keys/values."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.shape_to_text = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.use_residual_norm)
        self.text_to_shape = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.use_residual_norm)

    def forward(self, shape, text, text_mask):
        shape_att, w_st = self.shape_to_text(shape, text, text_mask)
        text_att, w_ts = self.text_to_shape(text, shape, None)
        return shape_att, text_att, (w_st, w_ts)


@dataclass
class GroupScore:
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))


class CrossCoherence(nn.Module):
    def __init__(self, encoder: PointNetEncoder, text_provider, config: Optional[ScorerConfig] = None):
        super().__init__()
        self.config = config or ScorerConfig()
        att = self.config.attention
        self.encoder = encoder
        if isinstance(text_provider, nn.Module):
            self.text_encoder = text_provider
            self._file_provider = None
        else:
            self.text_encoder = None
            self._file_provider = text_provider
        d_text = text_provider.d_text
        d_tokens = encoder.cfg.d_shape + (3 if self.config.shape_positions else 0)
        self.shape_proj = nn.Linear(d_tokens, att.d_model)
        self.text_proj = nn.Linear(d_text, att.d_model)
        self.blocks = nn.ModuleList(BilateralBlock(att) for _ in range(att.depth))
        layers: List[nn.Module] = []
        d = 2 * att.d_model
        for w in self.config.head_widths:
            layers += [nn.Linear(d, w), nn.ReLU()]
            d = w
        final = nn.Linear(d, 1)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        self.head = nn.Sequential(*layers, final)
        self.freeze_encoder(self.config.freeze_encoder)

    def freeze_encoder(self, frozen: bool = True):
        self.config.freeze_encoder = frozen
        for p in self.encoder.parameters():
            p.requires_grad_(not frozen)

    @property
    def text_provider(self):
        return self.text_encoder if self.text_encoder is not None else self._file_provider

    @property
    def dtype(self) -> torch.dtype:
        return self.shape_proj.weight.dtype

    def encode_texts(self, texts: Sequence[str]):
        emb, mask = self.text_provider.encode_batch(texts)
        return emb.to(self.dtype), mask

    def logits_from_features(self, shape_feats, text_emb, text_mask, return_attention: bool = False):
        """
        Args:
            shape_feats: (B, L, D_shape) local features (D_shape + 3 with ``shape_positions``).
            text_emb: (B, T, D_text) token embeddings.
            text_mask: (B, T) bool, True for real tokens.

        Returns:
            (B,) logits (and per-block attention weights if requested).
        """
        s = self.shape_proj(shape_feats)
        t = self.text_proj(text_emb)
        weights = []
        for block in self.blocks:
            s, t, w = block(s, t, text_mask)
            weights.append(w)
        m = text_mask.to(t.dtype).unsqueeze(-1)
        pooled_text = (t * m).sum(1) / m.sum(1)
        pooled_shape = s.mean(1)
        logits = self.head(torch.cat([pooled_shape, pooled_text], dim=-1)).squeeze(-1)
        return (logits, weights) if return_attention else logits

    def group_logits(self, shape_feats, texts: Sequence[str]):
        """shape_feats (B, G, L, D), one text per row -> (B, G) logits."""
        b, g = shape_feats.shape[:2]
        emb, mask = self.encode_texts(texts)
        emb = emb.repeat_interleave(g, dim=0)
        mask = mask.repeat_interleave(g, dim=0)
        return self.logits_from_features(shape_feats.reshape(b * g, *shape_feats.shape[2:]), emb, mask).reshape(b, g)

    def shape_tokens(self, xyz, feats):
        """Scorer input tokens from the last local stage: features, plus positions if configured."""
        return torch.cat([feats, xyz], dim=-1) if self.config.shape_positions else feats

    def local_features(self, clouds: Sequence[ColoredPointCloud]):
        return self.shape_tokens(*self.encoder.forward_local(*self.encoder.prepare(clouds)))

    def pair_logit(self, cloud: ColoredPointCloud, text: str) -> torch.Tensor:
        """Differentiable logit for one (cloud, text) pair."""
        feats = self.local_features([cloud])
        emb, mask = self.encode_texts([text])
        return self.logits_from_features(feats, emb, mask)[0]


def score_pair(model: CrossCoherence, cloud: ColoredPointCloud, text: str) -> float:
    with torch.no_grad():
        return float(model.pair_logit(cloud, text))


def score_group(model: CrossCoherence, text: str, clouds: Sequence[ColoredPointCloud]) -> GroupScore:
    """Softmax-normalized scores of ``text`` against ``clouds`` (G >= 2)."""
    if len(clouds) < 2:
        raise ValueError(f"a group needs at least 2 clouds, got {len(clouds)}")
    with torch.no_grad():
        feats = [model.local_features([c])[0] for c in clouds]
        logits = model.group_logits(torch.stack(feats).unsqueeze(0), [text])[0]
        probs = torch.softmax(logits.double(), dim=0)
    return GroupScore(logits.double().numpy(), probs.numpy())


class FeatureBank:
    """Local shape features by shape id.

    With a frozen encoder features are computed once and cached; otherwise
    only grouping indices are cached and features are recomputed with
    gradients.
    """

    def __init__(self, model: CrossCoherence, clouds: Mapping[str, ColoredPointCloud], chunk: int = 32):
        self.model = model
        self.clouds = clouds
        self.chunk = chunk
        self._groupings: Dict[str, Grouping] = {}
        self._cache: Dict[str, torch.Tensor] = {}

    def _grouping(self, sid: str) -> Grouping:
        if sid not in self._groupings:
            try:
                cloud = self.clouds[sid]
            except KeyError:
                raise KeyError(f"unknown shape id {sid!r}") from None
            self._groupings[sid] = self.model.encoder.group(cloud)
        return self._groupings[sid]

    def _compute(self, ids: Sequence[str]):
        enc = self.model.encoder
        clouds = [self.clouds[s] for s in ids]
        return self.model.shape_tokens(*enc.forward_local(*enc.prepare(clouds, [self._grouping(s) for s in ids])))

    def precompute(self, ids):
        missing = sorted(set(ids) - set(self._cache))
        with torch.no_grad():
            for start in range(0, len(missing), self.chunk):
                part = missing[start:start + self.chunk]
                for sid, f in zip(part, self._compute(part)):
                    self._cache[sid] = f

    def features(self, ids: Sequence[str]) -> torch.Tensor:
        """(len(ids), L, D_shape) features."""
        if self.model.config.freeze_encoder:
            self.precompute(ids)
            return torch.stack([self._cache[s] for s in ids])
        return self._compute(ids)


def _batch_logits(model: CrossCoherence, bank: FeatureBank, batch: Sequence[Triplet]):
    g = len(batch[0].shape_ids)
    if any(len(t.shape_ids) != g for t in batch):
        raise ValueError("all triplets in a batch must have the same group size")
    ids = [sid for t in batch for sid in t.shape_ids]
    feats = bank.features(ids)
    feats = feats.reshape(len(batch), g, *feats.shape[1:])
    return model.group_logits(feats, [t.text for t in batch])


def batch_loss(model: CrossCoherence, bank: FeatureBank, batch: Sequence[Triplet]) -> torch.Tensor:
    logits = _batch_logits(model, bank, batch)
    targets = torch.as_tensor([t.target for t in batch])
    return F.cross_entropy(logits, targets)


def train_step(model: CrossCoherence, batch: Sequence[Triplet], optimizer: torch.optim.Optimizer,
               bank: FeatureBank) -> float:
    """One optimizer update on the mean cross-entropy; returns the pre-update loss."""
    model.train()
    loss = batch_loss(model, bank, batch)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"cross-entropy became {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def group_accuracy(model: CrossCoherence, bank: FeatureBank, triplets: Sequence[Triplet],
                   batch_size: int = 64) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy); a hit needs the target strictly above every other logit."""
    if not triplets:
        return math.nan, math.nan
    model.eval()
    correct, losses = 0, []
    with torch.no_grad():
        for start in range(0, len(triplets), batch_size):
            batch = triplets[start:start + batch_size]
            logits = _batch_logits(model, bank, batch)
            targets = torch.as_tensor([t.target for t in batch])
            losses.append(F.cross_entropy(logits, targets, reduction="sum").item())
            tgt = logits.gather(1, targets[:, None])
            others = logits.masked_fill(F.one_hot(targets, logits.shape[1]).bool(), float("-inf"))
            correct += int((tgt.squeeze(1) > others.max(1).values).sum())
    return correct / len(triplets), sum(losses) / len(triplets)


@dataclass
class FitConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    patience: Optional[int] = 10
    seed: int = 0
    max_steps: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    model: CrossCoherence
    history: List[dict]
    best_epoch: int
    best_val_accuracy: float
    steps: int


def fit(model: CrossCoherence, train, val_triplets: Sequence[Triplet],
        clouds: Mapping[str, ColoredPointCloud], config: Optional[FitConfig] = None,
        bank: Optional[FeatureBank] = None) -> FitResult:
    """Seeded epoch loop with early stopping on validation pairwise accuracy.

    ``train`` is either a list of triplets or an object with ``epoch(i)``
    returning that epoch's triplets (per-epoch distractor resampling). The
    returned model carries the parameters of the best validation epoch.
    """
    config = config or FitConfig()
    sampler = train if hasattr(train, "epoch") else None
    if sampler is None and not train:
        raise ValueError("training split is empty")
    if not val_triplets:
        raise ValueError("validation split is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    bank = bank or FeatureBank(model, clouds)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    history: List[dict] = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    stale = 0
    steps = 0
    for epoch in range(config.epochs):
        triplets = sampler.epoch(epoch) if sampler is not None else list(train)
        if not triplets:
            raise ValueError("training split is empty")
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            try:
                losses.append(train_step(model, batch, optimizer, bank))
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"epoch {epoch}, step {steps}: {e}") from None
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_acc, val_loss = group_accuracy(model, bank, val_triplets)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": val_acc,
               "val_loss": val_loss, "steps": steps}
        history.append(rec)
        log.info("epoch %d train_loss %.4f val_acc %.4f", epoch, rec["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if config.patience is not None and stale >= config.patience:
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, history, best_epoch, best_acc, steps)


class CrossCoherenceScorer:
    """Adapts a trained model to the ``(cloud, text) -> float`` scorer interface.

    Local features are cached per cloud (by ``shape_id`` when set).
    """

    def __init__(self, model: CrossCoherence, batch_size: int = 256):
        self.model = model.eval()
        self.batch_size = batch_size
        self._cache: Dict[object, torch.Tensor] = {}

    def _features(self, cloud: ColoredPointCloud) -> torch.Tensor:
        key = cloud.shape_id if cloud.shape_id is not None else id(cloud)
        if key not in self._cache:
            with torch.no_grad():
                self._cache[key] = self.model.local_features([cloud])[0]
        return self._cache[key]

    def __call__(self, cloud: ColoredPointCloud, text: str) -> float:
        return self.score_texts(cloud, [text])[0]

    def score_texts(self, cloud: ColoredPointCloud, texts: Sequence[str]) -> List[float]:
        feats = self._features(cloud)
        out: List[float] = []
        with torch.no_grad():
            for start in range(0, len(texts), self.batch_size):
                chunk = list(texts[start:start + self.batch_size])
                emb, mask = self.model.encode_texts(chunk)
                f = feats.unsqueeze(0).expand(len(chunk), *feats.shape)
                out.extend(self.model.logits_from_features(f, emb, mask).double().tolist())
        return out
