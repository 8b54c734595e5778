"""Command-line entry point: ``crosscoherence <command> [options]``.

Every command reads an optional YAML/JSON config (``--config``), applies
flag overrides on top (flags win) and writes its artifacts plus a
``run.json`` carrying the full resolved configuration into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from crosscoherence import pipeline
from crosscoherence.datasets.formats import load_manifest, load_triplets, save_manifest, save_triplets
from crosscoherence.protocols import DEFAULT_SET_SIZE, EvalReport, format_reports
from crosscoherence.refine import (
    DEFAULT_TEMPLATE,
    CompletionClient,
    MockProvider,
    PromptCache,
    RefineConfig,
    refine_captions,
    results_to_json,
)

log = logging.getLogger("crosscoherence")

COMMANDS = ("gen-synthetic", "train-ae", "mine", "build-triplets", "train-cc",
            "eval-pairwise", "eval-rprecision", "refine", "report")


class CliError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--workers", type=int, help="worker threads (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosscoherence", description="Text-to-shape coherence scoring.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-synthetic", help="generate the procedural chair/table dataset")
    _common(p)
    p.add_argument("--n-chairs", type=int)
    p.add_argument("--n-tables", type=int)
    p.add_argument("--n-points", type=int)

    p = sub.add_parser("train-ae", help="train the colored point-cloud autoencoder")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("mine", help="mine hard/easy distractors in autoencoder latent space")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ae", required=True, help="autoencoder directory from train-ae")

    p = sub.add_parser("build-triplets", help="build train/val/test triplets from a mined manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--group-size", type=int)

    p = sub.add_parser("train-cc", help="train the cross-coherence scorer")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--triplets", required=True, help="directory from build-triplets")
    p.add_argument("--group-size", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval-pairwise", help="pairwise reference-vs-distractor accuracy")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--triplets", required=True, help="triplet file (JSON lines)")
    _scorer_args(p)

    p = sub.add_parser("eval-rprecision", help="R-precision of ground-truth captions")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, help="split to evaluate (default from config: test)")
    p.add_argument("--set-size", type=int, default=None,
                   help=f"text set size including the ground truth (default {DEFAULT_SET_SIZE})")
    _scorer_args(p)

    p = sub.add_parser("refine", help="refine captions through a completion provider")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--provider", choices=("mock", "live"))
    p.add_argument("--cache", help="cache directory (default <out>/cache)")
    p.add_argument("--endpoint", help="live provider URL (key read from the environment)")

    p = sub.add_parser("report", help="render evaluation reports as a table")
    _common(p)
    p.add_argument("reports", nargs="+", help="report JSON files")
    return parser


def _scorer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scorer", choices=("cc", "oracle", "random"), default="cc")
    p.add_argument("--model", help="model directory from train-cc (scorer cc)")


def resolve_config(args: argparse.Namespace) -> dict:
    config = pipeline.load_config(args.config)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "group_size", None) is not None:
        overrides["triplets"] = {"group_size": args.group_size}
    if getattr(args, "set_size", None) is not None:
        overrides["eval"] = {"set_size": args.set_size}
    if getattr(args, "split", None) is not None:
        overrides.setdefault("eval", {})["split"] = args.split
    if getattr(args, "provider", None) is not None:
        overrides["refine"] = {"provider": args.provider}
    if getattr(args, "endpoint", None) is not None:
        overrides.setdefault("refine", {})["endpoint"] = args.endpoint
    if getattr(args, "steps", None) is not None:
        overrides["autoencoder"] = {"steps": args.steps}
    if getattr(args, "epochs", None) is not None:
        overrides["fit"] = {"epochs": args.epochs}
    syn = {k: getattr(args, a) for k, a in (("n_chairs", "n_chairs"), ("n_tables", "n_tables"),
                                            ("n_points", "n_points")) if getattr(args, a, None) is not None}
    if syn:
        overrides["synthetic"] = syn
    return pipeline.merge_config(config, overrides)


def _write_report(report: EvalReport, out: Path, name: str, config: dict, inputs: dict) -> None:
    (out / f"{name}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    pipeline.write_run(out, name, config, inputs=inputs, accuracy=report.accuracy)
    print(format_reports({name: report}))


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    torch.manual_seed(config["seed"])
    torch.set_num_threads(max(1, int(config["workers"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen-synthetic":
        manifest = pipeline.generate(config, out)
        pipeline.write_run(out, cmd, config, shapes=len(manifest))
        print(f"wrote {len(manifest)} shapes to {out / 'manifest.jsonl'}")

    elif cmd == "train-ae":
        manifest = load_manifest(args.manifest)
        result = pipeline.train_ae(manifest, config, out)
        print(f"autoencoder: chamfer {result.final_chamfer:.5f}, color {result.final_color:.5f}")

    elif cmd == "mine":
        manifest = load_manifest(args.manifest)
        encoder = pipeline.load_autoencoder(args.ae).encoder
        mined, skipped = pipeline.mine(manifest, encoder, config)
        mined = pipeline.rebase_manifest(mined, out)
        save_manifest(mined, out / "manifest.jsonl")
        pipeline.write_run(out, cmd, config, inputs={"manifest": args.manifest, "ae": args.ae}, skipped=skipped)
        print(f"mined {len(mined.distractor_sets())} distractor sets, skipped {len(skipped)} classes")

    elif cmd == "build-triplets":
        manifest = load_manifest(args.manifest)
        if not manifest.distractor_sets():
            raise CliError(f"manifest {args.manifest} carries no distractor sets; run `mine` first")
        triplets = pipeline.make_triplets(manifest, config)
        for split, ts in triplets.items():
            save_triplets(ts, out / f"{split}.jsonl")
        counts = {k: len(v) for k, v in triplets.items()}
        pipeline.write_run(out, cmd, config, inputs={"manifest": args.manifest}, counts=counts)
        print(f"triplets: {counts}")

    elif cmd == "train-cc":
        manifest = load_manifest(args.manifest)
        encoder = pipeline.load_autoencoder(args.ae).encoder
        tdir = Path(args.triplets)
        triplets = {s: load_triplets(_existing(tdir / f"{s}.jsonl")) for s in ("train", "val")}
        result = pipeline.train_cc(manifest, encoder, triplets, config, out)
        print(f"best epoch {result.best_epoch}: val accuracy {result.best_val_accuracy:.4f}")

    elif cmd == "eval-pairwise":
        manifest = load_manifest(args.manifest)
        triplets = load_triplets(_existing(Path(args.triplets)))
        scorer = pipeline.make_scorer(args.scorer, manifest, args.model, config["seed"])
        report = pipeline.evaluate_pairwise(scorer, manifest, triplets)
        report.config["scorer"] = args.scorer
        _write_report(report, out, "pairwise", config,
                      {"manifest": args.manifest, "triplets": args.triplets, "model": args.model})

    elif cmd == "eval-rprecision":
        manifest = load_manifest(args.manifest)
        scorer = pipeline.make_scorer(args.scorer, manifest, args.model, config["seed"])
        e = config["eval"]
        report = pipeline.evaluate_rprecision(scorer, manifest, e["split"], int(e["set_size"]), config["seed"])
        report.config.update(scorer=args.scorer, split=e["split"])
        _write_report(report, out, "rprecision", config, {"manifest": args.manifest, "model": args.model})

    elif cmd == "refine":
        manifest = load_manifest(args.manifest, check_files=False)
        r = config["refine"]
        template = r.get("template") or DEFAULT_TEMPLATE
        if r["provider"] == "live":
            if not r.get("endpoint"):
                raise CliError("live provider needs refine.endpoint in the config or --endpoint")
            provider = CompletionClient(r["endpoint"], r["model"], requests_per_minute=r["requests_per_minute"],
                                        max_retries=r["max_retries"])
        else:
            provider = MockProvider(template)
        cache = PromptCache(args.cache or out / "cache")
        rcfg = RefineConfig(template, r["min_words"], max(1, int(config["workers"])))
        results = refine_captions(manifest, provider, cache, rcfg)
        (out / "refined.json").write_text(results_to_json(results, include_cached_flag=False), encoding="utf-8")
        failed = sorted(s for s, res in results.items() if not res.ok)
        pipeline.write_run(out, cmd, config, inputs={"manifest": args.manifest}, cache_hits=cache.hits,
                           cache_misses=cache.misses, failed=failed)
        print(f"refined {len(results) - len(failed)}/{len(results)} shapes "
              f"(cache hits {cache.hits}, misses {cache.misses})")

    elif cmd == "report":
        reports = {}
        for path in args.reports:
            data = json.loads(_existing(Path(path)).read_text(encoding="utf-8"))
            reports[str(path)] = EvalReport.from_dict(data)
        table = format_reports(reports)
        (out / "report.txt").write_text(table + "\n", encoding="utf-8")
        pipeline.write_run(out, cmd, config, inputs=list(args.reports))
        print(table)


def _existing(path: Path) -> Path:
    if not path.is_file():
        raise CliError(f"input file {path} does not exist")
    return path


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        run(args)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"crosscoherence {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
