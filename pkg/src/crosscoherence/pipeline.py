"""End-to-end orchestration shared by the CLI and the desk-scale experiments.

Run configuration is a nested dict (see :data:`DEFAULT_CONFIG`); every step
writes its artifacts plus a ``run.json`` echoing the configuration.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from crosscoherence.datasets.formats import (
    DatasetManifest,
    ShapeRecord,
    read_cloud,
)
from crosscoherence.datasets.synthetic import AttributeOracle, SyntheticConfig, generate_synthetic
from crosscoherence.distractors import (
    MiningConfig,
    Triplet,
    TripletSampler,
    build_triplets,
    compute_latents,
    mine_distractors,
    pair_triplets,
)
from crosscoherence.encoders.autoencoder import (
    AutoencoderConfig,
    DecoderConfig,
    PointAutoencoder,
    train_autoencoder,
)
from crosscoherence.encoders.checkpoint import load_module, save_module
from crosscoherence.encoders.pointnet import EncoderConfig, PointNetEncoder
from crosscoherence.encoders.text import BuiltinTextEncoder, FileEmbeddingProvider, Vocabulary
from crosscoherence.metric import CrossCoherence, CrossCoherenceScorer, FitConfig, ScorerConfig, fit
from crosscoherence.protocols import EvalReport, RandomScorer, eval_pairwise, eval_rprecision

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "synthetic": {"n_chairs": 300, "n_tables": 300, "n_points": 2048, "captions_per_shape": 5,
                  "split_fractions": [0.7, 0.15, 0.15]},
    "encoder": EncoderConfig().to_dict(),
    "decoder": {"n_points": 1024, "hidden": [1024]},
    "autoencoder": {"steps": 2000, "batch_size": 16, "lr": 1e-3, "lambda_color": 1.0,
                    "splits": ["train", "val"]},
    "mining": {"easy_percentile": 75.0},
    "triplets": {"group_size": 2, "resample_per_epoch": True},
    "text": {"provider": "builtin", "d_text": 128, "heads": 4, "max_len": 64, "layers": 1, "frozen": False,
             "embeddings": None},
    "scorer": {"attention": {"d_model": 128, "heads": 4, "use_residual_norm": True, "depth": 1},
               "head_widths": [256, 128], "freeze_encoder": True},
    "fit": {"epochs": 100, "batch_size": 16, "lr": 1e-4, "weight_decay": 0.0, "patience": 10},
    "eval": {"set_size": 153, "split": "test"},
    "refine": {"provider": "mock", "endpoint": None, "model": "text-completion",
               "requests_per_minute": 60, "max_retries": 3, "min_words": 3, "template": None},
}


def merge_config(base: dict, override: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        user = yaml.safe_load(text) or {}
    else:
        user = json.loads(text)
    return merge_config(DEFAULT_CONFIG, user)


def write_run(out_dir, command: str, config: dict, **extra) -> None:
    out = {"command": command, "config": config, **extra}
    Path(out_dir, "run.json").write_text(json.dumps(out, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# data


def generate(config: dict, out_dir) -> DatasetManifest:
    syn = SyntheticConfig(**config["synthetic"], seed=config["seed"])
    return generate_synthetic(syn, out_dir)


def rebase_manifest(manifest: DatasetManifest, new_dir) -> DatasetManifest:
    """Copy of ``manifest`` whose cloud paths are relative to ``new_dir``."""
    new_dir = Path(new_dir)
    records = []
    for r in manifest.records:
        rel = os.path.relpath(manifest.cloud_path(r).resolve(), new_dir.resolve())
        records.append(ShapeRecord(r.shape_id, Path(rel).as_posix(), r.class_label, list(r.captions), r.split,
                                   r.attributes, r.distractor_set))
    return DatasetManifest(records, new_dir)


# ---------------------------------------------------------------------------
# autoencoder


def ae_config(config: dict) -> AutoencoderConfig:
    a = config["autoencoder"]
    return AutoencoderConfig(EncoderConfig.from_dict(config["encoder"]), DecoderConfig(**config["decoder"]),
                             steps=a["steps"], batch_size=a["batch_size"], lr=a["lr"],
                             lambda_color=a["lambda_color"], seed=config["seed"])


def train_ae(manifest: DatasetManifest, config: dict, out_dir=None):
    clouds = []
    for split in config["autoencoder"]["splits"]:
        clouds += list(manifest.clouds(split).values())
    result = train_autoencoder(clouds, ae_config(config))
    if out_dir is not None:
        save_autoencoder(result.model, out_dir)
        write_run(out_dir, "train-ae", config, initial_loss=result.initial_loss,
                  final_chamfer=result.final_chamfer, final_color=result.final_color,
                  history=result.history[:: max(1, len(result.history) // 100)])
    return result


def save_autoencoder(model: PointAutoencoder, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_module(out_dir / "ae.ckpt", model)
    meta = {"encoder": model.encoder.cfg.to_dict(), "decoder": vars(model.decoder.cfg)}
    (out_dir / "ae.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def load_autoencoder(ae_dir) -> PointAutoencoder:
    ae_dir = Path(ae_dir)
    meta = json.loads((ae_dir / "ae.json").read_text())
    model = PointAutoencoder(EncoderConfig.from_dict(meta["encoder"]), DecoderConfig(**meta["decoder"]))
    load_module(ae_dir / "ae.ckpt", model)
    return model.eval()


# ---------------------------------------------------------------------------
# distractors and triplets


def mine(manifest: DatasetManifest, encoder: PointNetEncoder, config: dict) -> Tuple[DatasetManifest, list]:
    """Mine distractors within every split; returns an annotated manifest copy and skip records."""
    mcfg = MiningConfig(easy_percentile=config["mining"]["easy_percentile"], seed=config["seed"])
    sets, skipped = {}, []
    for split in ("train", "val", "test"):
        clouds = manifest.clouds(split)
        if not clouds:
            continue
        latents = compute_latents(clouds, encoder)
        report = mine_distractors(latents, manifest.class_labels(split), mcfg)
        sets.update({s.reference_id: s for s in report.sets})
        skipped += [{**s, "split": split} for s in report.skipped]
    records = [ShapeRecord(r.shape_id, r.cloud, r.class_label, list(r.captions), r.split, r.attributes,
                           sets.get(r.shape_id)) for r in manifest.records]
    return DatasetManifest(records, manifest.base_dir), skipped


def make_triplets(manifest: DatasetManifest, config: dict) -> Dict[str, List[Triplet]]:
    """Training triplets with the configured group size; val/test as reference-distractor pairs."""
    seed = config["seed"]
    g = config["triplets"]["group_size"]
    return {
        "train": build_triplets(manifest.distractor_sets("train"), manifest.captions("train"), g, seed),
        "val": pair_triplets(manifest.distractor_sets("val"), manifest.captions("val"), seed + 1),
        "test": pair_triplets(manifest.distractor_sets("test"), manifest.captions("test"), seed + 2),
    }


# ---------------------------------------------------------------------------
# CrossCoherence model


def build_model(encoder: PointNetEncoder, vocab: Optional[Vocabulary], config: dict) -> CrossCoherence:
    t = config["text"]
    torch.manual_seed(config["seed"])
    if t["provider"] == "file":
        provider = FileEmbeddingProvider.load(t["embeddings"])
    else:
        provider = BuiltinTextEncoder(vocab, t["d_text"], t["heads"], t["max_len"], frozen=t["frozen"],
                                      layers=t.get("layers", 1))
    return CrossCoherence(encoder, provider, ScorerConfig(**config["scorer"]))


def save_model(model: CrossCoherence, out_dir, config: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_module(out_dir / "cc.ckpt", model)
    meta = {"encoder": model.encoder.cfg.to_dict(), "scorer": model.config.to_dict(), "text": config["text"]}
    if model.text_encoder is not None:
        meta["vocab"] = model.text_encoder.vocab.itos[2:]
    (out_dir / "cc.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(model_dir) -> CrossCoherence:
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "cc.json").read_text())
    encoder = PointNetEncoder(EncoderConfig.from_dict(meta["encoder"]))
    vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else None
    cfg = {"seed": 0, "text": meta["text"], "scorer": meta["scorer"]}
    model = build_model(encoder, vocab, cfg)
    load_module(model_dir / "cc.ckpt", model)
    return model.eval()


def train_cc(manifest: DatasetManifest, encoder: PointNetEncoder, triplets: Dict[str, List[Triplet]],
             config: dict, out_dir=None):
    vocab = Vocabulary.build(t for caps in manifest.captions("train").values() for t in caps)
    model = build_model(encoder, vocab, config)
    clouds = {**manifest.clouds("train"), **manifest.clouds("val")}
    if config["triplets"].get("resample_per_epoch") and manifest.distractor_sets("train"):
        train = TripletSampler(manifest.distractor_sets("train"), manifest.captions("train"),
                               config["triplets"]["group_size"], config["seed"])
    else:
        train = triplets["train"]
    fcfg = FitConfig(**config["fit"], seed=config["seed"])
    result = fit(model, train, triplets["val"], clouds, fcfg)
    if out_dir is not None:
        save_model(result.model, out_dir, config)
        write_run(out_dir, "train-cc", config, history=result.history, best_epoch=result.best_epoch,
                  best_val_accuracy=result.best_val_accuracy, steps=result.steps)
    return result


# ---------------------------------------------------------------------------
# evaluation


def make_scorer(kind: str, manifest: DatasetManifest, model_dir=None, seed: int = 0):
    if kind == "oracle":
        return AttributeOracle.from_manifest(manifest)
    if kind == "random":
        return RandomScorer(seed)
    if kind == "cc":
        if model_dir is None:
            raise ValueError("the cc scorer needs a trained model directory")
        return CrossCoherenceScorer(load_model(model_dir))
    raise ValueError(f"unknown scorer {kind!r}")


def rprecision_inputs(manifest: DatasetManifest, split: str):
    """One (cloud, first caption) pair per shape; pool = all captions in the split."""
    clouds = manifest.clouds(split)
    records = manifest.split(split)
    pairs = [(clouds[r.shape_id], r.captions[0]) for r in records if r.captions]
    exclude = [set(r.captions) for r in records if r.captions]
    pool = [c for r in records for c in r.captions]
    return pairs, pool, exclude


def evaluate_pairwise(scorer, manifest: DatasetManifest, triplets: Sequence[Triplet]) -> EvalReport:
    ids = {s for t in triplets for s in t.shape_ids}
    by_id = manifest.by_id()
    missing = sorted(ids - set(by_id))
    if missing:
        raise ValueError(f"triplets reference shapes missing from the manifest: {missing[:5]}")
    clouds = {s: read_cloud(manifest.cloud_path(by_id[s]), s) for s in sorted(ids)}
    report = eval_pairwise(scorer, triplets, clouds)
    for tag in ("hard", "easy"):
        sub = report.subset("difficulty", tag)
        report.config[f"accuracy_{tag}"] = sub.accuracy
        report.config[f"count_{tag}"] = sub.count
    return report


def evaluate_rprecision(scorer, manifest: DatasetManifest, split: str, set_size: int, seed: int) -> EvalReport:
    pairs, pool, exclude = rprecision_inputs(manifest, split)
    return eval_rprecision(scorer, pairs, pool, set_size, seed, exclude)
