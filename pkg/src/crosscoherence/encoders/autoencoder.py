"""Colored point-cloud autoencoder: PointNet++ encoder + MLP decoder.

The latent space of the trained autoencoder is used to mine distractors and
its encoder initializes the CrossCoherence shape branch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from crosscoherence.encoders.pointnet import EncoderConfig, Grouping, PointNetEncoder
from crosscoherence.geometry import ColoredPointCloud

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class DecoderConfig:
    n_points: int = 1024
    hidden: Tuple[int, ...] = (1024,)
    zero_init_final: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


class PointDecoder(nn.Module):
    """MLP from the global code to ``n_points`` x (xyz, rgb); sigmoid on rgb."""

    def __init__(self, d_code: int, cfg: Optional[DecoderConfig] = None):
        super().__init__()
        self.cfg = cfg or DecoderConfig()
        layers: List[nn.Module] = []
        d = d_code
        for h in self.cfg.hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        self.hidden = nn.Sequential(*layers)
        self.out = nn.Linear(d, self.cfg.n_points * 6)
        if self.cfg.zero_init_final:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        else:
            nn.init.normal_(self.out.weight, std=0.01)
            nn.init.uniform_(self.out.bias, -0.5, 0.5)

    def forward(self, code):
        y = self.out(self.hidden(code)).reshape(code.shape[0], self.cfg.n_points, 6)
        return y[..., :3], torch.sigmoid(y[..., 3:])


class PointAutoencoder(nn.Module):
    def __init__(self, encoder_cfg: Optional[EncoderConfig] = None,
                 decoder_cfg: Optional[DecoderConfig] = None):
        super().__init__()
        self.encoder = PointNetEncoder(encoder_cfg)
        self.decoder = PointDecoder(self.encoder.cfg.d_global, decoder_cfg)

    def forward(self, xyz, rgb, centers, groups):
        return self.decoder(self.encoder.forward_global(xyz, rgb, centers, groups))


def decode_cloud(code, model: PointAutoencoder) -> ColoredPointCloud:
    code = torch.as_tensor(code, dtype=model.encoder.dtype).reshape(1, -1)
    with torch.no_grad():
        xyz, rgb = model.decoder(code)
    return ColoredPointCloud(xyz[0].double().numpy(), rgb[0].double().clamp(0, 1).numpy())


def _sq_dists(a, b):
    # (B, M, 3), (B, N, 3) -> (B, M, N)
    d2 = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1).unsqueeze(1) - 2.0 * a @ b.transpose(1, 2)
    return d2.clamp_min(0.0)


def reconstruction_loss(pred_xyz, pred_rgb, tgt_xyz, tgt_rgb):
    """Chamfer (squared) on xyz and squared color error between chamfer-matched pairs.

    Returns per-cloud (chamfer, color) tensors of shape (B,); the training
    objective is ``chamfer + lambda_color * color``.
    """
    d2 = _sq_dists(pred_xyz, tgt_xyz)
    d_pred, nn_pred = d2.min(dim=2)
    d_tgt, nn_tgt = d2.min(dim=1)
    chamfer = d_pred.mean(1) + d_tgt.mean(1)
    matched_tgt = torch.gather(tgt_rgb, 1, nn_pred.unsqueeze(-1).expand(-1, -1, 3))
    matched_pred = torch.gather(pred_rgb, 1, nn_tgt.unsqueeze(-1).expand(-1, -1, 3))
    color = ((pred_rgb - matched_tgt) ** 2).sum(-1).mean(1) + ((tgt_rgb - matched_pred) ** 2).sum(-1).mean(1)
    return chamfer, color


@dataclass
class AutoencoderConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lambda_color: float = 1.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AutoencoderResult:
    model: PointAutoencoder
    history: List[Dict[str, float]]
    initial_loss: float
    final_chamfer: float
    final_color: float


class _Batcher:
    """Caches grouping indices per cloud and yields seeded random batches."""

    def __init__(self, model: PointAutoencoder, clouds: Sequence[ColoredPointCloud]):
        self.model = model
        self.clouds = list(clouds)
        self.groupings: List[Grouping] = [model.encoder.group(c) for c in self.clouds]

    def tensors(self, idx):
        clouds = [self.clouds[i] for i in idx]
        groupings = [self.groupings[i] for i in idx]
        return self.model.encoder.prepare(clouds, groupings)


def evaluate_autoencoder(model: PointAutoencoder, clouds: Sequence[ColoredPointCloud],
                         batch_size: int = 32) -> Tuple[float, float]:
    """Mean chamfer and color loss over ``clouds``."""
    batcher = _Batcher(model, clouds)
    ch, co = [], []
    with torch.no_grad():
        for start in range(0, len(clouds), batch_size):
            idx = list(range(start, min(start + batch_size, len(clouds))))
            xyz, rgb, c, g = batcher.tensors(idx)
            px, pc = model(xyz, rgb, c, g)
            a, b = reconstruction_loss(px, pc, xyz, rgb)
            ch.append(a)
            co.append(b)
    return float(torch.cat(ch).mean()), float(torch.cat(co).mean())


def train_autoencoder(clouds: Sequence[ColoredPointCloud], config: Optional[AutoencoderConfig] = None,
                      model: Optional[PointAutoencoder] = None) -> AutoencoderResult:
    """Minimize chamfer + lambda_color * color loss with Adam.

    Raises:
        TrainingDivergedError: if the loss becomes non-finite.
    """
    config = config or AutoencoderConfig()
    if not clouds:
        raise ValueError("autoencoder training needs at least one cloud")
    torch.manual_seed(config.seed)
    if model is None:
        model = PointAutoencoder(config.encoder, config.decoder)
    rng = np.random.default_rng(config.seed)
    batcher = _Batcher(model, clouds)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: List[Dict[str, float]] = []
    initial_loss = math.nan
    n = len(clouds)
    perm = rng.permutation(n)
    cursor = 0
    model.train()
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            perm = rng.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + min(config.batch_size, n)]
        cursor += len(idx)
        xyz, rgb, c, g = batcher.tensors(idx)
        px, pc = model(xyz, rgb, c, g)
        chamfer, color = reconstruction_loss(px, pc, xyz, rgb)
        loss = (chamfer + config.lambda_color * color).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"autoencoder loss became {loss.item()} at step {step}")
        if step == 0:
            initial_loss = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": loss.item(), "chamfer": chamfer.mean().item(), "color": color.mean().item()}
        history.append(rec)
        if config.log_every and step % config.log_every == 0:
            log.info("ae step %d loss %.5f chamfer %.5f color %.5f", step, rec["loss"], rec["chamfer"], rec["color"])
    model.eval()
    final_chamfer, final_color = evaluate_autoencoder(model, clouds)
    return AutoencoderResult(model, history, initial_loss, final_chamfer, final_color)
