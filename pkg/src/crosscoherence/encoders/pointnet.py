"""PointNet++ style single-scale set-abstraction encoder.

Sampling and grouping only depend on point coordinates, so they are computed
once per cloud (:class:`Grouping`) and reused for every forward pass. Input
points are put in a canonical lexicographic order before sampling, which
makes index-ordered ball-query grouping independent of input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from crosscoherence.geometry import (
    MIN_ENCODER_POINTS,
    ColoredPointCloud,
    GeometryError,
    ball_query,
    canonical_order,
    farthest_point_sample,
    validate_cloud,
)


@dataclass
class SetAbstractionConfig:
    num_centers: int
    radius: float
    k: int
    mlp_widths: Tuple[int, ...]

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.num_centers < 1 or self.k < 1 or self.radius <= 0:
            raise ValueError(f"invalid set abstraction config {self}")
        if not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ValueError("mlp widths must be >= 1")


@dataclass
class EncoderConfig:
    """Two local stages followed by one global stage.

    Defaults are the canonical single-scale PointNet++ settings.
    """

    n_points: int = 2048
    stages: Tuple[SetAbstractionConfig, ...] = (
        SetAbstractionConfig(512, 0.2, 32, (64, 64, 128)),
        SetAbstractionConfig(128, 0.4, 64, (128, 128, 256)),
    )
    global_widths: Tuple[int, ...] = (256, 512, 1024)
    layer_norm: bool = True
    min_points: int = MIN_ENCODER_POINTS

    def __post_init__(self):
        self.stages = tuple(
            s if isinstance(s, SetAbstractionConfig) else SetAbstractionConfig(**s)
            for s in self.stages
        )
        self.global_widths = tuple(int(w) for w in self.global_widths)
        size = self.n_points
        for s in self.stages:
            if s.num_centers > size:
                raise ValueError(f"stage wants {s.num_centers} centers from {size} points")
            size = s.num_centers

    @property
    def d_shape(self) -> int:
        return self.stages[-1].mlp_widths[-1]

    @property
    def d_global(self) -> int:
        return self.global_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stages"] = tuple(SetAbstractionConfig(**s) for s in d["stages"])
        return cls(**d)


class SharedMLP(nn.Module):
    """Per-point MLP: Linear -> LayerNorm -> activation for every layer."""

    def __init__(self, in_dim: int, widths: Sequence[int], layer_norm: bool = True,
                 activation: Optional[str] = "relu"):
        super().__init__()
        layers: List[nn.Module] = []
        for w in widths:
            layers.append(nn.Linear(in_dim, w))
            if layer_norm:
                layers.append(nn.LayerNorm(w))
            if activation == "relu":
                layers.append(nn.ReLU())
            elif activation == "gelu":
                layers.append(nn.GELU())
            elif activation is not None:
                raise ValueError(f"unknown activation {activation!r}")
            in_dim = w
        self.net = nn.Sequential(*layers)
        self.out_dim = in_dim

    def forward(self, x):
        return self.net(x)


@dataclass
class Grouping:
    """Precomputed sampling/grouping indices for one cloud.

    ``order`` maps canonical position -> original point index. For each local
    stage, ``centers[s]`` indexes the previous stage's points and
    ``groups[s]`` is the ball-query matrix over them.
    """

    order: np.ndarray
    centers: List[np.ndarray] = field(default_factory=list)
    groups: List[np.ndarray] = field(default_factory=list)


def compute_grouping(points: np.ndarray, stages: Sequence[SetAbstractionConfig],
                     colors: Optional[np.ndarray] = None) -> Grouping:
    order = canonical_order(points, colors)
    pos = points[order]
    grouping = Grouping(order=order)
    for cfg in stages:
        centers = farthest_point_sample(pos, cfg.num_centers)
        grouping.centers.append(centers)
        grouping.groups.append(ball_query(pos, centers, cfg.radius, cfg.k))
        pos = pos[centers]
    return grouping


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x: (B, N, C), idx: (B, ...) -> (B, ..., C)."""
    b = x.shape[0]
    flat = idx.reshape(b, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


class SetAbstraction(nn.Module):
    def __init__(self, cfg: SetAbstractionConfig, in_features: int, layer_norm: bool = True,
                 activation: Optional[str] = "relu"):
        super().__init__()
        self.cfg = cfg
        self.mlp = SharedMLP(in_features + 3, cfg.mlp_widths, layer_norm, activation)

    def forward(self, xyz, feats, centers, groups):
        """
        Args:
            xyz: (B, N, 3) positions.
            feats: (B, N, C) per-point features.
            centers: (B, S) center indices.
            groups: (B, S, K) neighbor indices.

        Returns:
            (B, S, 3) center positions and (B, S, C_out) pooled features.
        """
        new_xyz = _gather(xyz, centers)
        rel = _gather(xyz, groups) - new_xyz.unsqueeze(2)
        h = self.mlp(torch.cat([rel, _gather(feats, groups)], dim=-1))
        return new_xyz, h.max(dim=2).values


def set_abstraction(positions, features, cfg: SetAbstractionConfig, module: SetAbstraction):
    """Unbatched set abstraction on numpy/tensor inputs (FPS + ball query + MLP + max-pool)."""
    positions = np.asarray(positions, dtype=np.float64)
    centers = farthest_point_sample(positions, cfg.num_centers)
    groups = ball_query(positions, centers, cfg.radius, cfg.k)
    dtype = next(module.parameters()).dtype
    xyz = torch.as_tensor(positions, dtype=dtype).unsqueeze(0)
    feats = torch.as_tensor(np.asarray(features), dtype=dtype).unsqueeze(0)
    new_xyz, h = module(xyz, feats, torch.as_tensor(centers)[None], torch.as_tensor(groups)[None])
    return new_xyz[0], h[0]


@dataclass
class LocalFeatureSet:
    positions: torch.Tensor  # (L, 3)
    features: torch.Tensor   # (L, D_shape)


class PointNetEncoder(nn.Module):
    """Set-abstraction stack; RGB is the per-point input feature."""

    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        in_feat = 3
        stages = []
        for s in self.cfg.stages:
            stages.append(SetAbstraction(s, in_feat, self.cfg.layer_norm))
            in_feat = s.mlp_widths[-1]
        self.stages = nn.ModuleList(stages)
        self.global_mlp = SharedMLP(in_feat + 3, self.cfg.global_widths, self.cfg.layer_norm)

    def group(self, cloud: ColoredPointCloud) -> Grouping:
        validate_cloud(cloud, self.cfg.min_points)
        return compute_grouping(cloud.points, self.cfg.stages, cloud.colors)

    def prepare(self, clouds: Sequence[ColoredPointCloud], groupings: Optional[Sequence[Grouping]] = None):
        """Stack clouds (canonically ordered) and their grouping indices into tensors."""
        if groupings is None:
            groupings = [self.group(c) for c in clouds]
        sizes = {c.n for c in clouds}
        if len(sizes) != 1:
            raise GeometryError(f"clouds in a batch must have equal sizes, got {sorted(sizes)}")
        dtype = self.dtype
        xyz = torch.as_tensor(np.stack([c.points[g.order] for c, g in zip(clouds, groupings)]), dtype=dtype)
        rgb = torch.as_tensor(np.stack([c.colors[g.order] for c, g in zip(clouds, groupings)]), dtype=dtype)
        centers = [torch.as_tensor(np.stack([g.centers[s] for g in groupings])) for s in range(len(self.stages))]
        groups = [torch.as_tensor(np.stack([g.groups[s] for g in groupings])) for s in range(len(self.stages))]
        return xyz, rgb, centers, groups

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward_local(self, xyz, rgb, centers, groups):
        feats = rgb
        for s, stage in enumerate(self.stages):
            xyz, feats = stage(xyz, feats, centers[s], groups[s])
        return xyz, feats

    def forward_global(self, xyz, rgb, centers, groups):
        xyz, feats = self.forward_local(xyz, rgb, centers, groups)
        h = self.global_mlp(torch.cat([xyz, feats], dim=-1))
        return h.max(dim=1).values

    def forward(self, xyz, rgb, centers, groups):
        return self.forward_global(xyz, rgb, centers, groups)


def encode_local(cloud: ColoredPointCloud, encoder: PointNetEncoder) -> LocalFeatureSet:
    """Local features of the last local stage (L centers x D_shape)."""
    xyz, feats = encoder.forward_local(*encoder.prepare([cloud]))
    return LocalFeatureSet(xyz[0], feats[0])


def encode_global(cloud: ColoredPointCloud, encoder: PointNetEncoder) -> torch.Tensor:
    """Global latent code (D_global vector)."""
    return encoder.forward_global(*encoder.prepare([cloud]))[0]
